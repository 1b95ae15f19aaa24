"""Invertible complex STFT between beats (or masks) and 2-channel spectrograms."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

WINDOWS = {
    "hann": torch.hann_window,
    "hamming": torch.hamming_window,
    "blackman": torch.blackman_window,
}


@dataclass(frozen=True)
class SpectralConfig:
    n_fft: int = 64
    hop: int = 4
    window: str = "hann"
    pad_mode: str = "reflect"
    normalized: bool = False

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft % 2:
            raise ValueError("bad spectral config: n_fft must be even and >= 2")
        if not 0 < self.hop <= self.n_fft or self.n_fft % self.hop:
            raise ValueError("bad spectral config: hop must divide n_fft")
        if self.window not in WINDOWS:
            raise ValueError(f"bad spectral config: unknown window {self.window!r}")
        if self.pad_mode not in ("reflect", "constant"):
            raise ValueError(f"bad spectral config: unknown pad mode {self.pad_mode!r}")

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, length: int) -> int:
        return length // self.hop + 1

    def shape(self, length: int):
        return (2, self.n_freq, self.n_frames(length))

    def window_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return WINDOWS[self.window](self.n_fft, periodic=True, dtype=dtype)

    def overlap_weights(self, length: int) -> np.ndarray:
        """Sum of squared shifted windows seen by each (unpadded) sample."""
        w2 = self.window_tensor().numpy() ** 2
        m = self.n_frames(length)
        acc = np.zeros((m - 1) * self.hop + self.n_fft)
        for k in range(m):
            acc[k * self.hop : k * self.hop + self.n_fft] += w2
        pad = self.n_fft // 2
        return acc[pad : pad + length]

    def to_dict(self):
        return asdict(self)


def _check_length(cfg: SpectralConfig, length: int):
    if length < 1:
        raise ValueError("empty signal")
    if cfg.pad_mode == "reflect" and length <= cfg.n_fft // 2:
        raise ValueError(f"bad spectral config: reflect padding needs more than {cfg.n_fft // 2} samples")


def stft_tensor(x: torch.Tensor, cfg: SpectralConfig) -> torch.Tensor:
    """(..., L) real signals -> (..., 2, F, M) real/imaginary planes. Differentiable."""
    _check_length(cfg, x.shape[-1])
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    spec = torch.stft(
        flat,
        cfg.n_fft,
        hop_length=cfg.hop,
        window=cfg.window_tensor(x.dtype),
        center=True,
        pad_mode=cfg.pad_mode,
        normalized=cfg.normalized,
        onesided=True,
        return_complex=True,
    )
    out = torch.stack([spec.real, spec.imag], dim=1)
    return out.reshape(*lead, *out.shape[1:])


def check_invertible(cfg: SpectralConfig, length: int):
    if np.min(cfg.overlap_weights(length)) < 1e-11:
        raise ValueError("non-invertible config: window-square overlap vanishes")


def istft_tensor(grid: torch.Tensor, cfg: SpectralConfig, length: int) -> torch.Tensor:
    """Inverse of :func:`stft_tensor` by windowed overlap-add. Differentiable."""
    check_invertible(cfg, length)
    lead = grid.shape[:-3]
    flat = grid.reshape(-1, *grid.shape[-3:])
    spec = torch.complex(flat[:, 0], flat[:, 1])
    x = torch.istft(
        spec,
        cfg.n_fft,
        hop_length=cfg.hop,
        window=cfg.window_tensor(grid.dtype),
        center=True,
        normalized=cfg.normalized,
        onesided=True,
        length=length,
    )
    return x.reshape(*lead, length)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    grid: np.ndarray
    config: SpectralConfig
    source_length: int

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.shape != self.config.shape(self.source_length):
            raise ValueError(f"spectrogram shape {grid.shape} does not match its config")
        if not np.all(np.isfinite(grid)):
            raise ValueError("non-finite spectrogram")
        object.__setattr__(self, "grid", grid)

    @property
    def shape(self):
        return self.grid.shape

    def _like(self, grid):
        return Spectrogram(grid, self.config, self.source_length)

    def __add__(self, other):
        return self._like(self.grid + (other.grid if isinstance(other, Spectrogram) else other))

    def __sub__(self, other):
        return self._like(self.grid - (other.grid if isinstance(other, Spectrogram) else other))

    def __mul__(self, a):
        return self._like(self.grid * a)

    __rmul__ = __mul__

    def __truediv__(self, a):
        return self._like(self.grid / a)


def stft(x, cfg: Optional[SpectralConfig] = None) -> Spectrogram:
    cfg = cfg or SpectralConfig()
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("stft expects a 1-D signal")
    grid = stft_tensor(torch.from_numpy(x), cfg).numpy()
    return Spectrogram(grid, cfg, x.size)


def istft(S: Spectrogram) -> np.ndarray:
    return istft_tensor(torch.from_numpy(S.grid), S.config, S.source_length).numpy()


class Spectrogrammer(TransformerMixin, BaseEstimator):
    """Batch transformer: (n, L) beats <-> (n, 2, F, M) spectrograms."""

    def __init__(self, n_fft=64, hop=4, window="hann", pad_mode="reflect", normalized=False):
        self.n_fft = n_fft
        self.hop = hop
        self.window = window
        self.pad_mode = pad_mode
        self.normalized = normalized

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.config_ = SpectralConfig(self.n_fft, self.hop, self.window, self.pad_mode, self.normalized)
        self.length_ = X.shape[1]
        check_invertible(self.config_, self.length_)
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.length_:
            raise ValueError(f"expected beats of length {self.length_}, got {X.shape[1]}")
        return stft_tensor(torch.from_numpy(X), self.config_).numpy()

    def inverse_transform(self, S):
        check_is_fitted(self)
        S = np.asarray(S, dtype=np.float64)
        return istft_tensor(torch.from_numpy(S), self.config_, self.length_).numpy()
