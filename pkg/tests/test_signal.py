import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beatdiff.signal import (
    BeatClass,
    Heartbeat,
    Mask,
    TaskKind,
    apply_mask,
    build_mask,
    sample_gap,
    select_context,
)


def beats(n, length=8):
    return [Heartbeat(np.full(length, i / 10), "N", "r1", i) for i in range(n)]


def test_select_context_generation_is_identity():
    b = beats(3)
    assert select_context(b, 1, TaskKind.GENERATION) is b[1]


def test_select_context_forecasting_takes_previous_beat():
    b = beats(3)
    assert select_context(b, 2, TaskKind.FORECASTING) is b[1]


def test_select_context_forecasting_needs_predecessor():
    with pytest.raises(ValueError, match="no predecessor beat"):
        select_context(beats(1), 0, TaskKind.FORECASTING)


def test_select_context_unknown_index():
    with pytest.raises(IndexError, match="unknown beat index"):
        select_context(beats(2), 5, TaskKind.IMPUTATION)


@pytest.mark.parametrize("h", range(4))
def test_generation_and_imputation_select_the_same_beat(h):
    b = beats(4)
    assert select_context(b, h, "generation") is select_context(b, h, "imputation")


def test_build_mask_generation_and_forecasting():
    assert np.array_equal(build_mask(TaskKind.GENERATION, 270).bits, np.zeros(270))
    assert np.array_equal(build_mask(TaskKind.FORECASTING, 270).bits, np.ones(270))


def test_build_mask_imputation_gap():
    m = build_mask(TaskKind.IMPUTATION, 10, gap=(3, 5))
    assert m.bits.tolist() == [1, 1, 1, 0, 0, 0, 1, 1, 1, 1]
    assert m.gap == (3, 5)


@pytest.mark.parametrize("gap", [(-1, 3), (4, 2), (5, 10)])
def test_build_mask_rejects_bad_gaps(gap):
    with pytest.raises(ValueError, match="gap out of bounds"):
        build_mask(TaskKind.IMPUTATION, 10, gap=gap)


def test_build_mask_imputation_needs_rng_or_gap():
    with pytest.raises(ValueError):
        build_mask(TaskKind.IMPUTATION, 10)


@settings(max_examples=200, deadline=None)
@given(length=st.integers(1, 400), seed=st.integers(0, 2**32 - 1))
def test_random_imputation_masks_are_valid(length, seed):
    rng = np.random.default_rng(seed)
    m = build_mask(TaskKind.IMPUTATION, length, rng=rng)
    lo, hi = m.gap
    assert 0 <= lo <= hi < length
    expected = np.ones(length)
    expected[lo : hi + 1] = 0
    assert np.array_equal(m.bits, expected)


def test_sampled_gap_width_range():
    rng = np.random.default_rng(0)
    widths = [hi - lo + 1 for lo, hi in (sample_gap(270, rng) for _ in range(2000))]
    assert min(widths) >= 27 and max(widths) <= 135


def test_mask_constructor_checks_consistency():
    with pytest.raises(ValueError):
        Mask(np.ones(5), TaskKind.GENERATION)
    with pytest.raises(ValueError):
        Mask(np.zeros(5), TaskKind.FORECASTING)


@pytest.mark.parametrize(
    "x, bits, expected",
    [
        ([0.2, 0.4, 0.6], [1, 1, 1], [0.2, 0.4, 0.6]),
        ([0.2, 0.4, 0.6], [0, 0, 0], [0, 0, 0]),
        ([0.5, 0.5, 0.5, 0.5], [1, 0, 0, 1], [0.5, 0, 0, 0.5]),
    ],
)
def test_apply_mask(x, bits, expected):
    task = TaskKind.FORECASTING if all(bits) else TaskKind.GENERATION if not any(bits) else TaskKind.IMPUTATION
    gap = None
    if task is TaskKind.IMPUTATION:
        zeros = [i for i, b in enumerate(bits) if not b]
        gap = (zeros[0], zeros[-1])
    np.testing.assert_array_equal(apply_mask(x, Mask(bits, task, gap)), expected)


def test_apply_mask_length_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        apply_mask([1.0, 2.0], build_mask(TaskKind.FORECASTING, 3))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), length=st.integers(1, 64))
def test_apply_mask_idempotent_and_generation_zero(seed, length):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=length)
    for task in TaskKind:
        m = build_mask(task, length, rng=rng)
        once = apply_mask(x, m)
        np.testing.assert_array_equal(apply_mask(once, m), once)
    assert not apply_mask(x, build_mask(TaskKind.GENERATION, length)).any()


def test_heartbeat_is_immutable_and_validates_label():
    hb = Heartbeat([0.1, 0.2], "V")
    assert hb.label is BeatClass.V
    with pytest.raises(ValueError):
        hb.samples[0] = 1.0
    with pytest.raises(ValueError, match="unknown class"):
        Heartbeat([0.1], "Q")
