"""Conditional U-Net noise predictor over 2-channel heartbeat spectrograms.

Topology: three encoder blocks (each followed by 2x2 max-pooling), a bottleneck
block and three decoder blocks (each preceded by a stride-2 transposed
convolution and fed the matching encoder skip). A block is a chain of
sub-blocks; a sub-block is ``convs_per_subblock`` 3x3 convolutions, each
followed by SiLU. Conditioning is purely input-side: the noisy state, the mask
spectrogram C1 and the masked-context spectrogram C2 are stacked with the class,
step and task embeddings, each projected to ``emb_channels`` constant planes.
With ``state_skip`` a 1x1 convolution (initialized to the identity) adds the
noisy state straight to the output, so the U-Net only learns a correction.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .signal import CLASSES, TASKS


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 2, 4)
    subblocks_per_block: int = 3
    convs_per_subblock: int = 2
    kernel_size: int = 3
    d_emb: int = 32
    emb_channels: int = 1
    group_norm: bool = False
    state_skip: bool = True
    n_classes: int = len(CLASSES)
    n_tasks: int = len(TASKS)
    seed: int = 0

    n_blocks = 7
    state_channels = 2

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if len(self.channel_mults) != 4 or min(self.channel_mults) < 1:
            raise ValueError("channel_mults needs four positive entries (3 encoder levels + bottleneck)")
        if self.base_channels < 1 or self.subblocks_per_block < 1 or self.convs_per_subblock < 1:
            raise ValueError("block sizes must be positive")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.d_emb < 2 or self.d_emb % 2:
            raise ValueError("bad embedding dimension")
        if self.emb_channels < 1:
            raise ValueError("emb_channels must be positive")

    @property
    def widths(self):
        return [self.base_channels * m for m in self.channel_mults]

    @property
    def in_channels(self) -> int:
        return 3 * self.state_channels + 3 * self.emb_channels

    def to_dict(self):
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d


def n_parameters(cfg: DenoiserConfig) -> int:
    """Closed-form parameter count; must agree with the built module."""
    k2 = cfg.kernel_size ** 2

    def block(c_in, c_out):
        n, c = 0, c_in
        for _ in range(cfg.subblocks_per_block):
            for _ in range(cfg.convs_per_subblock):
                n += c * c_out * k2 + c_out
                if cfg.group_norm:
                    n += 2 * c_out
                c = c_out
        return n

    w = cfg.widths
    total = block(cfg.in_channels, w[0]) + block(w[0], w[1]) + block(w[1], w[2]) + block(w[2], w[3])
    for lvl in (2, 1, 0):
        total += w[lvl + 1] * w[lvl] * 4 + w[lvl]  # 2x2 transposed conv
        total += block(2 * w[lvl], w[lvl])
    total += w[0] * cfg.state_channels + cfg.state_channels  # 1x1 output head
    if cfg.state_skip:
        total += cfg.state_channels ** 2 + cfg.state_channels  # 1x1 state-to-output skip
    total += (cfg.n_classes + cfg.n_tasks) * cfg.d_emb  # embedding tables
    total += 3 * (cfg.d_emb * cfg.emb_channels + cfg.emb_channels)  # projections
    return total


def timestep_embedding(t, d_emb: int) -> torch.Tensor:
    """Sinusoidal embedding ``[sin(t w_0..w_{d/2-1}), cos(t w_0..)]`` with geometric w_i."""
    if d_emb < 2 or d_emb % 2:
        raise ValueError("bad embedding dimension")
    t = torch.as_tensor(t, dtype=torch.float64)
    half = d_emb // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


@dataclass
class ConditionBundle:
    """Batched conditioning: embeddings are (B, d_emb); C1/C2 are (B, 2, F, M)."""

    e_l: torch.Tensor
    e_t: torch.Tensor
    e_s: torch.Tensor
    C1: torch.Tensor
    C2: torch.Tensor


def _subblock(c_in, c_out, cfg: DenoiserConfig):
    layers = []
    for _ in range(cfg.convs_per_subblock):
        layers.append(nn.Conv2d(c_in, c_out, cfg.kernel_size, padding=cfg.kernel_size // 2))
        if cfg.group_norm:
            layers.append(nn.GroupNorm(math.gcd(c_out, 8), c_out))
        layers.append(nn.SiLU())
        c_in = c_out
    return nn.Sequential(*layers)


def _block(c_in, c_out, cfg: DenoiserConfig):
    return nn.Sequential(*[_subblock(c_in if i == 0 else c_out, c_out, cfg) for i in range(cfg.subblocks_per_block)])


class ConditionalUNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.class_table = nn.Embedding(cfg.n_classes, cfg.d_emb)
        self.task_table = nn.Embedding(cfg.n_tasks, cfg.d_emb)
        self.proj_class = nn.Linear(cfg.d_emb, cfg.emb_channels)
        self.proj_time = nn.Linear(cfg.d_emb, cfg.emb_channels)
        self.proj_task = nn.Linear(cfg.d_emb, cfg.emb_channels)
        self.enc = nn.ModuleList([_block(cfg.in_channels, w[0], cfg), _block(w[0], w[1], cfg), _block(w[1], w[2], cfg)])
        self.mid = _block(w[2], w[3], cfg)
        self.up = nn.ModuleList([nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2) for i in range(3)])
        self.dec = nn.ModuleList([_block(2 * w[i], w[i], cfg) for i in range(3)])
        self.head = nn.Conv2d(w[0], cfg.state_channels, 1)
        self.skip = nn.Conv2d(cfg.state_channels, cfg.state_channels, 1) if cfg.state_skip else None

    def bundle(self, labels, t, tasks, C1, C2) -> ConditionBundle:
        dtype = C1.dtype
        return ConditionBundle(
            self.class_table(torch.as_tensor(labels)),
            timestep_embedding(t, self.cfg.d_emb).to(dtype),
            self.task_table(torch.as_tensor(tasks)),
            C1,
            C2,
        )

    def assemble_input(self, St: torch.Tensor, cond: ConditionBundle) -> torch.Tensor:
        """Channel stack [S_t, C1, C2, class planes, step planes, task planes]."""
        if St.shape[-3] != self.cfg.state_channels or cond.C1.shape != St.shape or cond.C2.shape != St.shape:
            raise ValueError("condition shape mismatch")
        B, _, nf, nm = St.shape
        for e in (cond.e_l, cond.e_t, cond.e_s):
            if e.shape != (B, self.cfg.d_emb):
                raise ValueError("condition shape mismatch")
        planes = [
            proj(e.to(St.dtype))[:, :, None, None].expand(B, self.cfg.emb_channels, nf, nm)
            for proj, e in ((self.proj_class, cond.e_l), (self.proj_time, cond.e_t), (self.proj_task, cond.e_s))
        ]
        return torch.cat([St, cond.C1, cond.C2] + planes, dim=1)

    def denoise(self, stack: torch.Tensor) -> torch.Tensor:
        if stack.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {stack.shape[1]}")
        nf, nm = stack.shape[-2:]
        # three 2x poolings need at least 8 cells per axis; tiny grids are zero-padded and cropped back
        pad_f, pad_m = max(0, 8 - nf), max(0, 8 - nm)
        h = F.pad(stack, (0, pad_m, 0, pad_f)) if pad_f or pad_m else stack
        skips = []
        for block in self.enc:
            h = block(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.mid(h)
        for i in (2, 1, 0):
            skip = skips[i]
            h = self.up[i](h, output_size=skip.shape[-2:])
            h = self.dec[i](torch.cat([h, skip], dim=1))
        out = self.head(h)[..., :nf, :nm]
        if self.skip is not None:
            out = out + self.skip(stack[:, : self.cfg.state_channels])
        return out

    def forward(self, St: torch.Tensor, cond: ConditionBundle) -> torch.Tensor:
        return self.denoise(self.assemble_input(St, cond))


def init_params(cfg: DenoiserConfig, seed=None) -> ConditionalUNet:
    """Build a model with deterministic fan-in scaled initialization."""
    seed = cfg.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ConditionalUNet(cfg)
        with torch.no_grad():
            for table in (model.class_table, model.task_table):
                table.weight.normal_(0.0, 0.1)
            if model.skip is not None:
                # start from eps_hat = S_t + U-Net(...), the right answer when the state is mostly noise
                model.skip.weight.copy_(torch.eye(cfg.state_channels)[:, :, None, None])
                model.skip.bias.zero_()
    return model


def zero_params(model: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model
