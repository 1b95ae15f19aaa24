"""Real-vs-synthetic beat metrics: RMSE, MAE, DTW, per-index EMD, MMD and FID."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from .ingest.dataset import BeatDataset
from .signal import CLASSES, BeatClass

METRICS = ("rmse", "mae", "fid", "dtw", "emd", "mmd")
N_BANDS = 8


class DegenerateBandwidthWarning(UserWarning):
    pass


def _pair(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def dtw(a, b) -> float:
    """Unconstrained DTW with |a_i - b_j| cost and steps (1,0), (0,1), (1,1).

    Filled one anti-diagonal at a time; cells on a diagonal only depend on the
    two previous diagonals.
    """
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("dtw of an empty sequence")
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        best = np.minimum(np.minimum(D[i - 1, j], D[i, j - 1]), D[i - 1, j - 1])
        D[i, j] = np.abs(a[i - 1] - b[j - 1]) + best
    return float(D[n, m])


def _beats(X) -> np.ndarray:
    if isinstance(X, BeatDataset):
        return X.X
    X = np.asarray(X, dtype=float)
    return X[None, :] if X.ndim == 1 else X


def wasserstein_1d(u, v) -> float:
    u, v = np.sort(np.asarray(u, dtype=float)), np.sort(np.asarray(v, dtype=float))
    if u.size == v.size:
        return float(np.mean(np.abs(u - v)))
    # integrate |F_u - F_v| between consecutive support points
    allv = np.sort(np.concatenate([u, v]))
    widths = np.diff(allv)
    cu = np.searchsorted(u, allv[:-1], side="right") / u.size
    cv = np.searchsorted(v, allv[:-1], side="right") / v.size
    return float(np.sum(np.abs(cu - cv) * widths))


def emd_1d(X, Y) -> float:
    """Mean over time indices of W1 between the per-index sample distributions."""
    X, Y = _beats(X), _beats(Y)
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("empty beat set")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("beat length mismatch")
    return float(np.mean([wasserstein_1d(X[:, i], Y[:, i]) for i in range(X.shape[1])]))


def _sqdist(A, B):
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def median_bandwidth(X, Y) -> float:
    Z = np.concatenate([X, Y])
    iu = np.triu_indices(Z.shape[0], k=1)
    d = np.sqrt(_sqdist(Z, Z)[iu])
    d = d[d > 0]
    return float(np.median(d)) if d.size else 0.0


def mmd(X, Y, bandwidth: Optional[float] = None) -> float:
    """Biased squared MMD with a Gaussian kernel exp(-|x-y|^2 / (2 h^2)).

    ``h`` defaults to the median pairwise distance over X and Y together. If
    every point is identical the result is 0 and a
    :class:`DegenerateBandwidthWarning` is emitted.
    """
    X, Y = _beats(X), _beats(Y)
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise ValueError("mmd needs at least two beats per set")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("beat length mismatch")
    h = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    if h <= 0:
        warnings.warn("degenerate MMD bandwidth; all points coincide", DegenerateBandwidthWarning, stacklevel=2)
        return 0.0
    g = -0.5 / h ** 2
    kxx = np.exp(g * _sqdist(X, X)).mean()
    kyy = np.exp(g * _sqdist(Y, Y)).mean()
    kxy = np.exp(g * _sqdist(X, Y)).mean()
    return float(max(kxx + kyy - 2.0 * kxy, 0.0))


def statistical_features(X) -> np.ndarray:
    """Per beat: mean, variance, skewness, kurtosis, R amplitude, 8 spectral band energies."""
    X = _beats(X)
    mean = X.mean(1)
    var = X.var(1)
    flat = var <= 1e-20
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        skew = np.where(flat, 0.0, stats.skew(X, axis=1))
        kurt = np.where(flat, 0.0, stats.kurtosis(X, axis=1))
    r_amp = X.max(1) - np.median(X, axis=1)
    power = np.abs(np.fft.rfft(X, axis=1)) ** 2 / X.shape[1] ** 2
    bands = np.stack([b.sum(1) for b in np.array_split(power, N_BANDS, axis=1)], axis=1)
    return np.column_stack([mean, var, skew, kurt, r_amp, bands])


def extract_features(beats, extractor: str = "statistical", classifier=None) -> np.ndarray:
    X = _beats(beats)
    if extractor == "statistical":
        return statistical_features(X)
    if extractor in ("classifier", "classifier-penultimate"):
        if classifier is None:
            raise ValueError("no feature extractor: classifier features requested without a trained classifier")
        return np.asarray(classifier.transform(X), dtype=float)
    raise ValueError(f"unknown extractor {extractor!r}")


def _psd_sqrt(A):
    w, V = np.linalg.eigh((A + A.T) / 2)
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def fid(FX, FY) -> float:
    """|mu_x - mu_y|^2 + Tr(Sx + Sy - 2 (Sx Sy)^(1/2)), sample covariances (ddof=1).

    Tr (Sx Sy)^(1/2) equals the nuclear norm of Sx^(1/2) Sy^(1/2), which avoids
    the square-then-root precision loss of eigendecomposing Sx^(1/2) Sy Sx^(1/2).
    """
    FX, FY = np.atleast_2d(np.asarray(FX, dtype=float)), np.atleast_2d(np.asarray(FY, dtype=float))
    if FX.shape[0] < 2 or FY.shape[0] < 2:
        raise ValueError("fid needs at least two rows per set")
    if FX.shape[1] != FY.shape[1]:
        raise ValueError("feature dimension mismatch")
    mu = FX.mean(0) - FY.mean(0)
    SX = np.atleast_2d(np.cov(FX, rowvar=False))
    SY = np.atleast_2d(np.cov(FY, rowvar=False))
    cross = np.linalg.svd(_psd_sqrt(SX) @ _psd_sqrt(SY), compute_uv=False).sum()
    return float(max(mu @ mu + np.trace(SX) + np.trace(SY) - 2.0 * cross, 0.0))


# ---------------------------------------------------------------- set evaluation


def nearest_pairs(real: np.ndarray, synth: np.ndarray) -> np.ndarray:
    """Index of the Euclidean-nearest real beat for every synthetic beat."""
    return np.argmin(_sqdist(synth, real), axis=1)


@dataclass
class MetricsReport:
    rows: List[Dict] = field(default_factory=list)
    pairing: str = "nearest"
    extractor: str = "statistical"
    missing: List[str] = field(default_factory=list)

    def row(self, name: str) -> Dict:
        for r in self.rows:
            if r["class"] == name:
                return r
        raise KeyError(name)

    @property
    def columns(self):
        cols = ["class", "n_real", "n_synth"] + list(METRICS)
        if any("rmse_gap" in r for r in self.rows):
            cols += ["rmse_gap", "mae_gap"]
        return cols + ["pairing", "extractor"]

    def _cells(self, r):
        return [r.get(c, self.pairing if c == "pairing" else self.extractor if c == "extractor" else "") for c in self.columns]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in self._cells(r)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def to_text(self) -> str:
        cols = self.columns[:-2]
        lines = ["  ".join(f"{c:>10}" for c in cols)]
        for r in self.rows:
            cells = []
            for c in cols:
                v = r.get(c, "")
                cells.append(f"{v:>10.4g}" if isinstance(v, float) else f"{v!s:>10}")
            lines.append("  ".join(cells))
        lines.append(f"pairing={self.pairing} extractor={self.extractor}")
        if self.missing:
            lines.append("classes without real reference: " + ",".join(self.missing))
        return "\n".join(lines)


def _paired(real, synth, pairing):
    if pairing == "nearest":
        return real[nearest_pairs(real, synth)]
    if pairing == "ground_truth":
        if real.shape != synth.shape:
            raise ValueError("ground-truth pairing needs equally many real and synthetic beats")
        return real
    raise ValueError(f"unknown pairing {pairing!r}")


def _row(name, real, synth, pairing, extractor, classifier, gaps):
    ref = _paired(real, synth, pairing)
    row = {
        "class": name,
        "n_real": int(real.shape[0]),
        "n_synth": int(synth.shape[0]),
        "rmse": float(np.mean([rmse(a, b) for a, b in zip(synth, ref)])),
        "mae": float(np.mean([mae(a, b) for a, b in zip(synth, ref)])),
        "fid": fid(extract_features(real, extractor, classifier), extract_features(synth, extractor, classifier)),
        "dtw": float(np.mean([dtw(a, b) for a, b in zip(synth, ref)])),
        "emd": emd_1d(real, synth),
        "mmd": mmd(real, synth),
    }
    if gaps is not None:
        sel = [np.arange(lo, hi + 1) for lo, hi in gaps]
        row["rmse_gap"] = float(np.mean([rmse(a[s], b[s]) for a, b, s in zip(synth, ref, sel)]))
        row["mae_gap"] = float(np.mean([mae(a[s], b[s]) for a, b, s in zip(synth, ref, sel)]))
    return row


def evaluate_sets(
    real: BeatDataset,
    synth: BeatDataset,
    pairing: str = "nearest",
    extractor: str = "statistical",
    classifier=None,
    gaps: Optional[Sequence] = None,
) -> MetricsReport:
    """Per-class and overall metrics of ``synth`` against ``real``.

    ``pairing`` is ``"nearest"`` (each synthetic beat against its closest real
    beat of the same class) or ``"ground_truth"`` (beats correspond by position
    within each class). ``gaps`` (aligned with ``synth``) adds RMSE/MAE restricted
    to the imputed interval of each beat.
    """
    if not len(real) or not len(synth):
        raise ValueError("both beat sets must be non-empty")
    if real.beat_length != synth.beat_length:
        raise ValueError("beat length mismatch")
    if gaps is not None and len(gaps) != len(synth):
        raise ValueError("one gap per synthetic beat is required")
    Xr, yr, Xs, ys = real.X, real.y, synth.X, synth.y
    gaps_arr = None if gaps is None else list(gaps)
    report = MetricsReport(pairing=pairing, extractor=extractor)
    used_r, used_s = [], []
    for c in CLASSES:
        rs, ss = np.flatnonzero(yr == c.value), np.flatnonzero(ys == c.value)
        if ss.size and not rs.size:
            report.missing.append(c.value)
        if not rs.size or not ss.size:
            continue
        g = None if gaps_arr is None else [gaps_arr[i] for i in ss]
        report.rows.append(_row(c.value, Xr[rs], Xs[ss], pairing, extractor, classifier, g))
        used_r.append(rs)
        used_s.append(ss)
    if not report.rows:
        raise ValueError("no class is present in both sets")
    rs, ss = np.concatenate(used_r), np.concatenate(used_s)
    overall = {"class": "overall", "n_real": int(rs.size), "n_synth": int(ss.size)}
    weights = np.array([r["n_synth"] for r in report.rows], dtype=float)
    paired = ["rmse", "mae", "dtw"] + (["rmse_gap", "mae_gap"] if gaps is not None else [])
    for k in paired:
        overall[k] = float(np.average([r[k] for r in report.rows], weights=weights))
    overall["fid"] = fid(extract_features(Xr[rs], extractor, classifier), extract_features(Xs[ss], extractor, classifier))
    overall["emd"] = emd_1d(Xr[rs], Xs[ss])
    overall["mmd"] = mmd(Xr[rs], Xs[ss])
    report.rows.append(overall)
    return report
