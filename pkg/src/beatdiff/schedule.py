"""Noise schedule and the single-step forward/reverse diffusion algebra.

Steps are 1-based: ``t`` runs over 1..T and ``betas[t - 1]`` is beta_t. The
functions accept numpy arrays, torch tensors or :class:`Spectrogram` objects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    variance: str = "beta"
    spacing: str = "linear"

    def __post_init__(self):
        b = np.array(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("bad schedule parameters")
        if self.variance not in ("beta", "posterior"):
            raise ValueError(f"unknown variance type {self.variance!r}")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)
        alphas = 1.0 - b
        alpha_bars = np.cumprod(alphas)
        for a in (alphas, alpha_bars):
            a.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return self.betas.size

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bars[t - 2])

    def sigma(self, t: int) -> float:
        """Reverse-step noise scale."""
        self.check_step(t)
        beta = float(self.betas[t - 1])
        if self.variance == "beta":
            return math.sqrt(beta)
        return math.sqrt((1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bars[t - 1]) * beta)

    def check_step(self, t: int):
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"step out of range: {t} not in [1, {self.T}]")

    def to_dict(self):
        return {"T": self.T, "betas": self.betas.tolist(), "variance": self.variance, "spacing": self.spacing}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["betas"]), d["variance"], d.get("spacing", "linear"))


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02, spacing: str = "linear", variance: str = "beta") -> NoiseSchedule:
    if T < 1 or not 0 < beta_min <= beta_max < 1:
        raise ValueError("bad schedule parameters")
    if spacing == "linear":
        betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    elif spacing == "cosine":
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    return NoiseSchedule(betas, variance, spacing)


def _grid(a):
    return getattr(a, "grid", a)


def _wrap(like, out):
    if hasattr(like, "grid"):
        return like._like(out)
    return out


def q_sample(S0, t, eps, sched: NoiseSchedule):
    """Closed-form forward draw: sqrt(abar_t) * S0 + sqrt(1 - abar_t) * eps."""
    sched.check_step(t)
    ab = float(sched.alpha_bars[t - 1])
    x0, e = _grid(S0), _grid(eps)
    if tuple(np.shape(x0)) != tuple(np.shape(e)):
        raise ValueError("noise shape does not match the state")
    return _wrap(S0, math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * e)


def predict_x0(St, eps_hat, t, sched: NoiseSchedule):
    """Invert :func:`q_sample` for a given noise estimate.

    Ill-conditioned near t = T, where 1/sqrt(abar_t) amplifies errors in ``eps_hat``.
    """
    sched.check_step(t)
    ab = float(sched.alpha_bars[t - 1])
    return _wrap(St, (_grid(St) - math.sqrt(1.0 - ab) * _grid(eps_hat)) / math.sqrt(ab))


def posterior_step(St, eps_hat, t, sched: NoiseSchedule, z=None):
    """One ancestral step S_t -> S_{t-1}; ``z`` must be zero (or None) at t = 1."""
    sched.check_step(t)
    a, ab, beta = float(sched.alphas[t - 1]), float(sched.alpha_bars[t - 1]), float(sched.betas[t - 1])
    mean = (_grid(St) - beta / math.sqrt(1.0 - ab) * _grid(eps_hat)) / math.sqrt(a)
    if z is not None:
        zg = _grid(z)
        if t == 1:
            if np.any(np.asarray(zg) != 0):
                raise ValueError("no noise may be added at the final step")
        else:
            mean = mean + sched.sigma(t) * zg
    return _wrap(St, mean)

