import itertools
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog
from scipy.stats import ortho_group

from beatdiff.ingest import BeatDataset, synth_corpus
from beatdiff.metrics import (
    DegenerateBandwidthWarning,
    dtw,
    emd_1d,
    evaluate_sets,
    extract_features,
    fid,
    mae,
    mmd,
    rmse,
    statistical_features,
)
from beatdiff.signal import Heartbeat


def _paths(n, m):
    """Every monotone warping path from (0, 0) to (n-1, m-1)."""
    if n == 1 and m == 1:
        yield [(0, 0)]
        return
    for di, dj in ((1, 0), (0, 1), (1, 1)):
        if n - di >= 1 and m - dj >= 1:
            for p in _paths(n - di, m - dj):
                yield p + [(n - 1, m - 1)]


def dtw_bruteforce(a, b):
    return min(sum(abs(a[i] - b[j]) for i, j in p) for p in _paths(len(a), len(b)))


def emd_lp(X, Y):
    """Per-index W1 via an explicit transport linear program."""
    total = 0.0
    n, m = len(X), len(Y)
    for i in range(X.shape[1]):
        C = np.abs(X[:, i][:, None] - Y[:, i][None, :]).ravel()
        A_eq, b_eq = [], []
        for r in range(n):
            row = np.zeros((n, m)); row[r] = 1
            A_eq.append(row.ravel()); b_eq.append(1 / n)
        for c in range(m):
            col = np.zeros((n, m)); col[:, c] = 1
            A_eq.append(col.ravel()); b_eq.append(1 / m)
        res = linprog(C, A_eq=np.array(A_eq), b_eq=b_eq, bounds=(0, None), method="highs")
        total += res.fun
    return total / X.shape[1]


def test_rmse_mae_examples():
    assert rmse([0, 0], [1, 1]) == 1 and mae([0, 0], [1, 1]) == 1
    assert rmse([0, 2], [0, 0]) == pytest.approx(np.sqrt(2)) and mae([0, 2], [0, 0]) == 1
    with pytest.raises(ValueError, match="length mismatch"):
        rmse([1, 2], [1])


def test_dtw_examples():
    assert dtw([1, 2, 3], [1, 2, 2, 3]) == 0
    x = np.random.default_rng(0).random(30)
    assert dtw(x, x) == 0
    with pytest.raises(ValueError):
        dtw([], [1])


def test_dtw_bruteforce_corpus():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = rng.random(rng.integers(1, 7))
        b = rng.random(rng.integers(1, 7))
        assert dtw(a, b) == pytest.approx(dtw_bruteforce(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.data())
def test_dtw_symmetry_and_diagonal_bound(a, data):
    b = data.draw(st.lists(st.floats(-5, 5), min_size=len(a), max_size=len(a)))
    assert dtw(a, b) == pytest.approx(dtw(b, a), abs=1e-9)
    assert dtw(a, b) <= np.sum(np.abs(np.subtract(a, b))) + 1e-9


def test_emd_examples():
    assert emd_1d(np.zeros((1, 4)), np.ones((1, 4))) == 1
    X = np.random.default_rng(2).random((5, 4))
    assert emd_1d(X, X) == 0


def test_emd_matches_lp():
    rng = np.random.default_rng(3)
    for _ in range(20):
        X = rng.random((rng.integers(1, 6), 4))
        Y = rng.random((rng.integers(1, 6), 4))
        assert emd_1d(X, Y) == pytest.approx(emd_lp(X, Y), abs=1e-9)


def test_mmd_matches_double_sum():
    rng = np.random.default_rng(4)
    X, Y = rng.random((3, 5)), rng.random((3, 5))
    h = 0.7
    k = lambda a, b: np.exp(-np.sum((a - b) ** 2) / (2 * h * h))
    ref = (
        sum(k(a, b) for a in X for b in X) / 9
        + sum(k(a, b) for a in Y for b in Y) / 9
        - 2 * sum(k(a, b) for a in X for b in Y) / 9
    )
    assert abs(mmd(X, Y, h) - ref) <= 1e-12
    assert mmd(X, Y) == mmd(Y, X)
    assert abs(mmd(X, X[::-1])) <= 1e-12


def test_mmd_degenerate_bandwidth():
    Z = np.ones((3, 4))
    with pytest.warns(DegenerateBandwidthWarning):
        assert mmd(Z, Z) == 0


def test_statistical_features_constant_beat():
    f = statistical_features(np.full(270, 0.4))
    assert f.shape == (1, 13)
    assert f[0, 1] == 0
    assert f[0, 5] == pytest.approx(0.16) and np.all(f[0, 6:] <= 1e-30)


def test_classifier_extractor_requires_classifier():
    with pytest.raises(ValueError, match="no feature extractor"):
        extract_features(np.zeros((2, 270)), "classifier")


def _fid_mp(FX, FY):
    mpmath.mp.dps = 50
    SX = mpmath.matrix(np.cov(FX, rowvar=False).tolist())
    SY = mpmath.matrix(np.cov(FY, rowvar=False).tolist())
    mu = mpmath.matrix((FX.mean(0) - FY.mean(0)).tolist())
    cross = mpmath.sqrtm(SX * SY)
    tr = sum(SX[i, i] + SY[i, i] - 2 * cross[i, i] for i in range(SX.rows))
    return float(mpmath.re((mu.T * mu)[0] + tr))


def test_fid_properties():
    rng = np.random.default_rng(5)
    FX = rng.standard_normal((40, 3))
    FY = rng.standard_normal((50, 3)) @ rng.standard_normal((3, 3)) + 1
    assert fid(FX, FX) <= 1e-8
    assert fid(FX, FY) == pytest.approx(_fid_mp(FX, FY), abs=1e-6)
    assert fid(FX, FY) == pytest.approx(fid(FY, FX), abs=1e-8)
    Q = ortho_group.rvs(3, random_state=6)
    assert fid(FX @ Q, FY @ Q) == pytest.approx(fid(FX, FY), abs=1e-6)


def test_fid_one_dimensional_closed_form():
    x = np.array([-1.0, 1.0])
    y = x + 1
    assert fid(x[:, None], y[:, None]) == pytest.approx(1.0)
    assert fid(x[:, None] * 2, x[:, None]) == pytest.approx((np.sqrt(8) - np.sqrt(2)) ** 2)


def test_evaluate_identity_and_rows():
    ds = synth_corpus(per_class=6, beats_per_record=6, seed=0)
    rep = evaluate_sets(ds, ds, pairing="ground_truth")
    assert [r["class"] for r in rep.rows] == ["N", "V", "F", "overall"]
    for r in rep.rows:
        for k in ("rmse", "mae", "dtw", "emd", "fid"):
            assert r[k] == pytest.approx(0, abs=1e-8)
        assert abs(r["mmd"]) <= 1e-12
    assert rep.to_csv().splitlines()[0].startswith("class,n_real,n_synth,rmse")


def test_evaluate_missing_class_reported():
    real = BeatDataset([Heartbeat(np.full(8, v), "N") for v in (0.1, 0.2, 0.3)])
    synth = BeatDataset([Heartbeat(np.full(8, v), c) for v, c in ((0.1, "N"), (0.2, "N"), (0.5, "V"), (0.6, "V"))])
    rep = evaluate_sets(real, synth)
    assert rep.missing == ["V"]
    assert [r["class"] for r in rep.rows] == ["N", "overall"]
    assert rep.row("N")["rmse"] == 0


def test_gap_metrics_match_whole_beat_for_full_gap():
    ds = synth_corpus(per_class=3, beats_per_record=3, seed=1)
    noisy = BeatDataset([Heartbeat(np.clip(b.samples + 0.01, 0, 1), b.label, b.record_id, b.beat_index) for b in ds.beats])
    rep = evaluate_sets(ds, noisy, pairing="ground_truth", gaps=[(0, 269)] * len(ds))
    for r in rep.rows:
        assert r["rmse_gap"] == pytest.approx(r["rmse"]) and r["mae_gap"] == pytest.approx(r["mae"])
