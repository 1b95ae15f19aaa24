"""Training with the hybrid diffusion + reconstruction loss, and conditional ancestral sampling."""
from __future__ import annotations

import copy
import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt
from .denoiser import ConditionalUNet, DenoiserConfig, init_params
from .ingest.dataset import BeatDataset
from .schedule import NoiseSchedule, make_schedule, posterior_step
from .signal import CLASSES, TASKS, BeatClass, Heartbeat, Mask, TaskKind, build_mask
from .spectral import SpectralConfig, istft_tensor, stft_tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "task", "loss_diff", "loss_mse", "loss_total", "seconds"]


class NumericalBlowUp(FloatingPointError):
    def __init__(self, msg, snapshot=None):
        super().__init__(f"numerical blow-up: {msg}")
        self.snapshot = snapshot or {}


def to_state(x):
    """Beats live in [0, 1]; the diffusion state is the spectrogram of 2x - 1."""
    return 2.0 * x - 1.0


def from_state(z):
    return 0.5 * (z + 1.0)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    task_weights: Tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    aux_weight: float = 1.0
    aux_snr_weight: bool = False
    ema_decay: float = 0.0
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    spacing: str = "linear"
    variance: str = "beta"
    seed: int = 0
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "task_weights", tuple(float(w) for w in self.task_weights))
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        w = self.task_weights
        if len(w) != len(TASKS) or min(w) < 0 or not math.isclose(sum(w), 1.0, abs_tol=1e-9):
            raise ValueError("task weights must be non-negative and sum to 1")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be non-negative")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_min, self.beta_max, self.spacing, self.variance)

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def to_dict(self):
        d = asdict(self)
        d["task_weights"] = list(self.task_weights)
        return d


@dataclass
class LogRecord:
    step: int
    task: str
    loss_diff: float
    loss_mse: float
    loss_total: float
    seconds: float


@dataclass
class TrainLog:
    records: List[LogRecord] = field(default_factory=list)

    def append(self, rec: LogRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("log steps must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r.step, r.task, repr(r.loss_diff), repr(r.loss_mse), repr(r.loss_total), f"{r.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            rows = csv.reader(fh)
            if next(rows) != LOG_COLUMNS:
                raise ValueError("bad training log header")
            for row in rows:
                out.append(LogRecord(int(row[0]), row[1], float(row[2]), float(row[3]), float(row[4]), float(row[5])))
        return out


# ---------------------------------------------------------------- conditions


def mask_tensor(masks: Sequence[Mask], dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack([m.bits for m in masks]), dtype=dtype)


def condition_spectrograms(context: torch.Tensor, masks: torch.Tensor, spectral: SpectralConfig):
    """C1 = S(mask) / W, C2 = S(z * mask) / W with z the state map of ``context``.

    W is the window sum, so an all-one mask has a unit DC bin; unscaled, the
    DC bins (~n_fft/2) swamp the first convolutions and the conditions go
    unused. The context enters in the same 2x - 1 form as the diffusion state.
    """
    W = float(spectral.window_tensor(torch.float64).sum())
    return stft_tensor(masks, spectral) / W, stft_tensor(to_state(context) * masks, spectral) / W


# ---------------------------------------------------------------- training


@dataclass
class TrainingArrays:
    """Dataset flattened for batching: beats, class indices and predecessor pairs."""

    X: np.ndarray
    labels: np.ndarray
    pairs: np.ndarray  # (k, 2) rows (index of previous beat, index of current beat)

    @classmethod
    def from_dataset(cls, ds: BeatDataset) -> "TrainingArrays":
        if not len(ds):
            raise ValueError("no training data")
        pos = {id(b): i for i, b in enumerate(ds.beats)}
        pairs = np.array([(pos[id(p)], pos[id(c)]) for p, c in ds.predecessor_pairs()], dtype=np.int64).reshape(-1, 2)
        return cls(ds.X, np.array([b.label.index for b in ds.beats]), pairs)

    @classmethod
    def from_arrays(cls, X, y, prev=None) -> "TrainingArrays":
        X = np.asarray(X, dtype=float)
        labels = np.array([BeatClass.parse(v).index for v in y])
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("no training data")
        if labels.size != X.shape[0]:
            raise ValueError("X and y disagree on the number of beats")
        if prev is None:
            return cls(X, labels, np.zeros((0, 2), dtype=np.int64))
        prev = np.asarray(prev, dtype=float)
        if prev.shape != X.shape:
            raise ValueError("prev must be shaped like X")
        has = np.flatnonzero(~np.isnan(prev).any(axis=1))
        Xa = np.concatenate([X, prev[has]])
        pairs = np.column_stack([X.shape[0] + np.arange(has.size), has]).astype(np.int64)
        # predecessor rows are contexts only; they are not sampled as targets
        return cls(Xa, np.concatenate([labels, -np.ones(has.size, dtype=int)]), pairs)

    @property
    def targets(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)


def draw_batch(data: TrainingArrays, task: TaskKind, batch_size: int, rng: np.random.Generator):
    """Indices of targets and contexts plus the masks for one training step."""
    L = data.X.shape[1]
    if task is TaskKind.FORECASTING:
        rows = data.pairs[rng.integers(0, len(data.pairs), size=batch_size)]
        ctx_idx, tgt_idx = rows[:, 0], rows[:, 1]
    else:
        targets = data.targets
        tgt_idx = targets[rng.integers(0, targets.size, size=batch_size)]
        ctx_idx = tgt_idx
    masks = [build_mask(task, L, rng=rng) for _ in range(batch_size)]
    return tgt_idx, ctx_idx, masks


def training_loss(
    model, x0, context, masks, labels, tasks, t, eps, sched: NoiseSchedule, spectral: SpectralConfig, aux_weight=1.0, aux_snr_weight=False
):
    """Hybrid loss for one batch with all randomness (steps ``t``, noise ``eps``) given.

    ``loss_diff`` is the per-coordinate mean of (eps - eps_hat)^2 averaged over
    the batch. ``loss_mse`` is the signal-domain MSE between the one-step clean
    estimate and the target, summed over imputation/forecasting elements (each
    scaled by abar_t when ``aux_snr_weight``) and divided by the batch size.
    """
    dtype = x0.dtype
    L = x0.shape[-1]
    ab = torch.tensor(sched.alpha_bars, dtype=dtype)[t - 1][:, None, None, None]
    S0 = stft_tensor(to_state(x0), spectral)
    St = ab.sqrt() * S0 + (1 - ab).sqrt() * eps
    C1, C2 = condition_spectrograms(context, masks, spectral)
    cond = model.bundle(labels, t, tasks, C1, C2)
    eps_hat = model(St, cond)
    loss_diff = (eps - eps_hat).pow(2).flatten(1).mean(1).mean()
    gated = tasks != TaskKind.GENERATION.index
    if aux_weight and bool(gated.any()):
        S0_hat = (St[gated] - (1 - ab[gated]).sqrt() * eps_hat[gated]) / ab[gated].sqrt()
        x_hat = from_state(istft_tensor(S0_hat, spectral, L))
        per_beat = (x_hat - x0[gated]).pow(2).mean(1)
        if aux_snr_weight:
            # the one-step estimate is amplified by 1/sqrt(abar_t); weight by abar_t to keep it bounded
            per_beat = per_beat * ab[gated].flatten()
        loss_mse = per_beat.sum() / x0.shape[0]
    else:
        loss_mse = torch.zeros((), dtype=dtype)
    return {"loss_diff": loss_diff, "loss_mse": loss_mse, "loss_total": loss_diff + aux_weight * loss_mse, "eps_hat": eps_hat}


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def training_step(model, optimizer, data: TrainingArrays, step: int, sched, spectral, cfg: TrainConfig):
    """Draw one single-task batch, take one Adam step, return the loss scalars."""
    rng = step_rng(cfg.seed, step)
    task = TASKS[int(rng.choice(len(TASKS), p=cfg.task_weights))]
    tgt_idx, ctx_idx, masks = draw_batch(data, task, cfg.batch_size, rng)
    dtype = cfg.torch_dtype
    B = len(tgt_idx)
    x0 = torch.as_tensor(data.X[tgt_idx], dtype=dtype)
    context = torch.as_tensor(data.X[ctx_idx], dtype=dtype)
    t = torch.as_tensor(rng.integers(1, sched.T + 1, size=B))
    eps = torch.as_tensor(rng.standard_normal((B,) + spectral.shape(x0.shape[-1])), dtype=dtype)
    labels = torch.as_tensor(data.labels[tgt_idx])
    tasks = torch.full((B,), task.index, dtype=torch.long)

    out = training_loss(
        model, x0, context, mask_tensor(masks, dtype), labels, tasks, t, eps, sched, spectral, cfg.aux_weight, cfg.aux_snr_weight
    )
    total = out["loss_total"]
    if not torch.isfinite(total):
        raise NumericalBlowUp(
            f"loss {float(total)} at step {step}",
            {"step": step, "task": task.value, "t": t.tolist(), "loss_diff": float(out["loss_diff"]), "loss_mse": float(out["loss_mse"])},
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return task, {k: float(out[k].detach()) for k in ("loss_diff", "loss_mse", "loss_total")}


@dataclass
class DiffusionCheckpoint:
    model: ConditionalUNet
    schedule: NoiseSchedule
    spectral: SpectralConfig
    train: Optional[TrainConfig] = None
    beat_length: int = 270

    def manifest(self):
        return {
            "denoiser": self.model.cfg.to_dict(),
            "spectral": self.spectral.to_dict(),
            "schedule": self.schedule.to_dict(),
            "train": self.train.to_dict() if self.train else None,
            "classes": [c.value for c in CLASSES],
            "tasks": [s.value for s in TASKS],
            "beat_length": self.beat_length,
            "dtype": str(next(self.model.parameters()).dtype).replace("torch.", ""),
            "state_map": "2x-1",
        }

    def save(self, path):
        ckpt.save(path, self.manifest(), ckpt.state_dict_arrays(self.model))

    @classmethod
    def load(cls, path) -> "DiffusionCheckpoint":
        manifest, params = ckpt.load(path)
        if manifest.get("classes") != [c.value for c in CLASSES] or manifest.get("tasks") != [s.value for s in TASKS]:
            raise ValueError("checkpoint vocabularies do not match this build")
        dcfg = manifest["denoiser"]
        dcfg["channel_mults"] = tuple(dcfg["channel_mults"])
        model = ConditionalUNet(DenoiserConfig(**dcfg)).to(getattr(torch, manifest["dtype"]))
        ckpt.load_state_arrays(model, params)
        model.eval()
        train = manifest.get("train")
        return cls(
            model,
            NoiseSchedule.from_dict(manifest["schedule"]),
            SpectralConfig(**manifest["spectral"]),
            TrainConfig(**train) if train else None,
            int(manifest["beat_length"]),
        )


def train(
    dataset,
    cfg: TrainConfig = TrainConfig(),
    denoiser: DenoiserConfig = DenoiserConfig(),
    spectral: SpectralConfig = SpectralConfig(),
    checkpoint_dir: Optional[str] = None,
    progress: Optional[Callable[[int, dict], None]] = None,
):
    """Fit a fresh denoiser; returns ``(DiffusionCheckpoint, TrainLog)``.

    ``dataset`` is a :class:`BeatDataset` or :class:`TrainingArrays`. Runs are
    reproducible: the batch, task, steps and noise of step ``k`` come from a
    generator seeded with ``(cfg.seed, k)``.
    """
    data = dataset if isinstance(dataset, TrainingArrays) else TrainingArrays.from_dataset(dataset)
    if data.targets.size == 0:
        raise ValueError("no training data")
    if cfg.task_weights[TaskKind.FORECASTING.index] > 0 and len(data.pairs) == 0:
        raise ValueError("forecasting needs beats with a predecessor in the same record")
    sched = cfg.schedule()
    L = data.X.shape[1]
    model = init_params(denoiser, cfg.seed).to(cfg.torch_dtype)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    steps_per_epoch = max(1, math.ceil(data.targets.size / cfg.batch_size))
    n_steps = cfg.epochs * steps_per_epoch
    trainlog = TrainLog()
    # with ema_decay > 0 the returned (and periodically saved) weights are an exponential moving average
    ema = copy.deepcopy(model) if cfg.ema_decay else None
    result = DiffusionCheckpoint(ema if ema is not None else model, sched, spectral, cfg, L)
    start = time.perf_counter()
    for step in range(1, n_steps + 1):
        task, losses = training_step(model, optimizer, data, step, sched, spectral, cfg)
        if ema is not None:
            decay = min(cfg.ema_decay, (1 + step) / (10 + step))
            with torch.no_grad():
                for pe, p in zip(ema.parameters(), model.parameters()):
                    pe.lerp_(p, 1.0 - decay)
        trainlog.append(LogRecord(step, task.value, seconds=time.perf_counter() - start, **losses))
        if progress is not None:
            progress(step, losses)
        if checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            result.save(os.path.join(checkpoint_dir, f"step{step:07d}.ckpt"))
    result.model.eval()
    return result, trainlog


# ---------------------------------------------------------------- sampling


@dataclass
class SynthesisRequest:
    task: TaskKind
    label: BeatClass
    context: Optional[object] = None
    mask: Optional[Mask] = None
    seed: object = 0

    def __post_init__(self):
        self.task = TaskKind.parse(self.task)
        self.label = BeatClass.parse(self.label)
        if isinstance(self.context, Heartbeat):
            self.context = self.context.samples
        if self.context is not None:
            self.context = np.asarray(self.context, dtype=float)
        if self.task is TaskKind.IMPUTATION and (self.context is None or self.mask is None):
            raise ValueError("incomplete request: imputation needs the partial beat and its mask")
        if self.task is TaskKind.FORECASTING and self.context is None:
            raise ValueError("incomplete request: forecasting needs the previous beat")
        if self.mask is not None and self.mask.task is not self.task:
            raise ValueError("incomplete request: mask built for a different task")

    def resolved_mask(self, length: int) -> Mask:
        return self.mask if self.mask is not None else build_mask(self.task, length)


def synthesize_batch(
    requests: Sequence[SynthesisRequest],
    model,
    sched: NoiseSchedule,
    spectral: SpectralConfig,
    length: int = 270,
    paste_observed: bool = True,
    clip: bool = True,
) -> np.ndarray:
    """Run the conditional reverse chain for many requests at once.

    Each request draws S_T and the per-step noises from its own seed, so results
    do not depend on how requests are batched.
    """
    if not requests:
        return np.zeros((0, length))
    param = next(iter(model.parameters()), None) if hasattr(model, "parameters") else None
    dtype = param.dtype if param is not None else torch.float64
    B = len(requests)
    shape = spectral.shape(length)
    masks = [r.resolved_mask(length) for r in requests]
    if any(len(m) != length for m in masks):
        raise ValueError("mask length does not match the beat length")
    ctx = np.stack([r.context if r.context is not None else np.zeros(length) for r in requests])
    if ctx.shape[1] != length:
        raise ValueError("context length does not match the beat length")
    # C2 only ever sees context * mask, so gap values of an imputation request never leak
    mtensor = mask_tensor(masks, dtype)
    context = torch.as_tensor(ctx, dtype=dtype)
    C1, C2 = condition_spectrograms(context, mtensor, spectral)
    labels = torch.as_tensor([r.label.index for r in requests])
    tasks = torch.as_tensor([r.task.index for r in requests])
    rngs = [np.random.default_rng(r.seed) for r in requests]
    T = sched.T

    def noise():
        return torch.as_tensor(np.stack([g.standard_normal(shape) for g in rngs]), dtype=dtype)

    S = noise()
    with torch.no_grad():
        for t in range(T, 0, -1):
            cond = model.bundle(labels, torch.full((B,), t), tasks, C1, C2)
            S = posterior_step(S, model(S, cond), t, sched, noise() if t > 1 else None)
        x = from_state(istft_tensor(S, spectral, length)).to(torch.float64).numpy()
    if not np.all(np.isfinite(x)):
        raise NumericalBlowUp("non-finite sample")
    if clip:
        x = np.clip(x, 0.0, 1.0)
    if paste_observed:
        for i, (r, m) in enumerate(zip(requests, masks)):
            if r.task is TaskKind.IMPUTATION:
                keep = m.bits.astype(bool)
                x[i, keep] = r.context[keep]
    return x


def synthesize(req: SynthesisRequest, model, sched, spectral, length: int = 270, paste_observed: bool = True) -> Heartbeat:
    x = synthesize_batch([req], model, sched, spectral, length, paste_observed)[0]
    return Heartbeat(x, req.label, record_id="synthetic")


def generate(label, model, sched, spectral, seed=0, length=270) -> Heartbeat:
    return synthesize(SynthesisRequest(TaskKind.GENERATION, label, seed=seed), model, sched, spectral, length)


def impute(beat, mask: Mask, label, model, sched, spectral, seed=0, paste_observed=True) -> Heartbeat:
    x = beat.samples if isinstance(beat, Heartbeat) else np.asarray(beat, dtype=float)
    req = SynthesisRequest(TaskKind.IMPUTATION, label, x, mask, seed)
    return synthesize(req, model, sched, spectral, x.size, paste_observed)


def forecast(prev, label, model, sched, spectral, seed=0) -> Heartbeat:
    x = prev.samples if isinstance(prev, Heartbeat) else np.asarray(prev, dtype=float)
    return synthesize(SynthesisRequest(TaskKind.FORECASTING, label, x, seed=seed), model, sched, spectral, x.size)
