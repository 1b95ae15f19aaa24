"""Beat, class, task and mask types plus the task-dependent context/mask rules."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

BEAT_LENGTH = 270

# training-time imputation gap width, as a fraction of the beat length
GAP_FRACTION = (0.1, 0.5)


class BeatClass(str, enum.Enum):
    N = "N"
    V = "V"
    F = "F"

    @classmethod
    def parse(cls, value) -> "BeatClass":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            raise ValueError(f"unknown class {value!r}") from None

    @property
    def index(self) -> int:
        return CLASSES.index(self)


CLASSES = (BeatClass.N, BeatClass.V, BeatClass.F)


class TaskKind(str, enum.Enum):
    GENERATION = "generation"
    IMPUTATION = "imputation"
    FORECASTING = "forecasting"

    @classmethod
    def parse(cls, value) -> "TaskKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown task {value!r}") from None

    @property
    def index(self) -> int:
        return TASKS.index(self)


TASKS = (TaskKind.GENERATION, TaskKind.IMPUTATION, TaskKind.FORECASTING)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Heartbeat:
    samples: np.ndarray
    label: BeatClass
    record_id: str = ""
    beat_index: int = 0
    r_peak: int = 0

    def __post_init__(self):
        object.__setattr__(self, "samples", _frozen(self.samples))
        object.__setattr__(self, "label", BeatClass.parse(self.label))
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("beat samples must be a non-empty 1-D vector")
        if self.beat_index < 0:
            raise ValueError("beat_index must be non-negative")

    def __len__(self):
        return self.samples.size

    def __eq__(self, other):
        if not isinstance(other, Heartbeat):
            return NotImplemented
        return (
            self.label == other.label
            and self.record_id == other.record_id
            and self.beat_index == other.beat_index
            and self.r_peak == other.r_peak
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Mask:
    bits: np.ndarray
    task: TaskKind
    gap: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        bits = np.array(self.bits, dtype=np.int8)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "task", TaskKind.parse(self.task))
        task, n = self.task, bits.size
        if task is TaskKind.IMPUTATION:
            if self.gap is None:
                raise ValueError("imputation mask requires a gap")
            lo, hi = (int(g) for g in self.gap)
            if not 0 <= lo <= hi < n:
                raise ValueError("gap out of bounds")
            object.__setattr__(self, "gap", (lo, hi))
            expected = np.ones(n, dtype=np.int8)
            expected[lo : hi + 1] = 0
        else:
            if self.gap is not None:
                raise ValueError(f"{task.value} mask takes no gap")
            expected = np.full(n, 0 if task is TaskKind.GENERATION else 1, dtype=np.int8)
        if not np.array_equal(bits, expected):
            raise ValueError(f"mask bits inconsistent with {task.value} task")

    def __len__(self):
        return self.bits.size

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.task == other.task and self.gap == other.gap and np.array_equal(self.bits, other.bits)

    __hash__ = None


def select_context(record_beats: Sequence[Heartbeat], h: int, s: TaskKind) -> Heartbeat:
    """Pick the beat the task conditions on: beat h itself, or beat h-1 when forecasting."""
    s = TaskKind.parse(s)
    if not record_beats:
        raise ValueError("empty record")
    if not 0 <= h < len(record_beats):
        raise IndexError("unknown beat index")
    if s is TaskKind.FORECASTING:
        if h == 0:
            raise ValueError("no predecessor beat")
        return record_beats[h - 1]
    return record_beats[h]


def sample_gap(length: int, rng: np.random.Generator, fraction=GAP_FRACTION) -> Tuple[int, int]:
    lo_w = max(1, int(round(fraction[0] * length)))
    hi_w = max(lo_w, int(round(fraction[1] * length)))
    width = int(rng.integers(lo_w, hi_w + 1))
    width = min(width, length)
    start = int(rng.integers(0, length - width + 1))
    return start, min(start + width - 1, length - 1)


def build_mask(
    s: TaskKind,
    length: int = BEAT_LENGTH,
    gap: Optional[Tuple[int, int]] = None,
    rng: Optional[np.random.Generator] = None,
) -> Mask:
    s = TaskKind.parse(s)
    if length <= 0:
        raise ValueError("mask length must be positive")
    if s is TaskKind.GENERATION:
        return Mask(np.zeros(length, dtype=np.int8), s)
    if s is TaskKind.FORECASTING:
        return Mask(np.ones(length, dtype=np.int8), s)
    if gap is None:
        if rng is None:
            raise ValueError("imputation mask needs a gap or an rng")
        gap = sample_gap(length, rng)
    lo, hi = gap
    if not 0 <= lo <= hi < length:
        raise ValueError("gap out of bounds")
    bits = np.ones(length, dtype=np.int8)
    bits[lo : hi + 1] = 0
    return Mask(bits, s, (lo, hi))


def apply_mask(x, m: Mask) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != m.bits.shape:
        raise ValueError("dimension mismatch")
    return x * m.bits
