"""Beat segmentation, normalization, record-wise splitting and the beats CSV format."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..signal import BeatClass, Heartbeat
from .wfdb import Annotation

FIXED_COLUMNS = ["beat_id", "record_id", "class", "r_peak"]


@dataclass
class BeatDataset:
    beats: List[Heartbeat] = field(default_factory=list)
    split_tag: Optional[str] = None
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.split_tag not in (None, "train", "test"):
            raise ValueError(f"bad split tag {self.split_tag!r}")
        lengths = {len(b) for b in self.beats}
        if len(lengths) > 1:
            raise ValueError("beats of mixed lengths")

    def __len__(self):
        return len(self.beats)

    def __iter__(self):
        return iter(self.beats)

    @property
    def beat_length(self) -> Optional[int]:
        return len(self.beats[0]) if self.beats else None

    @property
    def X(self) -> np.ndarray:
        if not self.beats:
            return np.zeros((0, 0))
        return np.stack([b.samples for b in self.beats])

    @property
    def y(self) -> np.ndarray:
        return np.array([b.label.value for b in self.beats], dtype="<U1")

    @property
    def record_ids(self) -> List[str]:
        return sorted({b.record_id for b in self.beats})

    def by_record(self) -> Dict[str, List[Heartbeat]]:
        out: Dict[str, List[Heartbeat]] = {}
        for b in self.beats:
            out.setdefault(b.record_id, []).append(b)
        for beats in out.values():
            beats.sort(key=lambda b: b.beat_index)
        return out

    def classes(self) -> List[BeatClass]:
        present = {b.label for b in self.beats}
        return [c for c in BeatClass if c in present]

    def subset(self, keep) -> "BeatDataset":
        return BeatDataset([b for b in self.beats if keep(b)], self.split_tag, dict(self.provenance))

    def predecessor_pairs(self) -> List[Tuple[Heartbeat, Heartbeat]]:
        """(previous, current) pairs of directly adjacent beats of one record."""
        pairs = []
        for beats in self.by_record().values():
            for prev, cur in zip(beats, beats[1:]):
                if cur.beat_index == prev.beat_index + 1:
                    pairs.append((prev, cur))
        return pairs


def normalize_record(samples) -> Tuple[np.ndarray, Tuple[float, float]]:
    """Min-max scale a whole record to [0, 1]; returns the scaled signal and (min, max)."""
    x = np.asarray(samples, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise ValueError("degenerate record")
    return (x - lo) / (hi - lo), (lo, hi)


def denormalize_record(x, bounds: Tuple[float, float]) -> np.ndarray:
    lo, hi = bounds
    return np.asarray(x, dtype=float) * (hi - lo) + lo


def window_bounds(fs: float, pre_ms: float = 350.0, post_ms: float = 400.0) -> Tuple[int, int]:
    if fs <= 0:
        raise ValueError("sampling rate must be positive")
    lo, hi = int(round(pre_ms * fs / 1000.0)), int(round(post_ms * fs / 1000.0))
    if lo + hi == 0:
        raise ValueError("empty segmentation window")
    return lo, hi


def segment_beats(
    signal,
    anns: Sequence[Annotation],
    fs: float,
    pre_ms: float = 350.0,
    post_ms: float = 400.0,
    record_id: str = "",
) -> Tuple[List[Heartbeat], int]:
    """Cut a window around every N/V/F annotation.

    ``beat_index`` is the annotation's ordinal in ``anns``, so beats separated by
    an unretained beat annotation are not adjacent. Returns ``(beats, n_dropped)``
    where dropped beats are those whose window leaves the record.
    """
    x = np.asarray(signal, dtype=float)
    pre, post = window_bounds(fs, pre_ms, post_ms)
    beats, dropped = [], 0
    for ordinal, ann in enumerate(anns):
        if ann.symbol not in BeatClass._value2member_map_:
            continue
        lo, hi = ann.sample_index - pre, ann.sample_index + post
        if lo < 0 or hi > x.size:
            dropped += 1
            continue
        beats.append(Heartbeat(x[lo:hi], ann.symbol, record_id, ordinal, ann.sample_index))
    return beats, dropped


def split_dataset(records, ratio: float = 0.7, seed: int = 0) -> Tuple[BeatDataset, BeatDataset]:
    """Record-wise train/test split; no record contributes to both sides."""
    if isinstance(records, BeatDataset):
        ds = records
    else:
        ds = BeatDataset([b for rec in records for b in (rec if not isinstance(rec, Heartbeat) else [rec])])
    ids = ds.record_ids
    if len(ids) < 2:
        raise ValueError("cannot split")
    n_train = int(round(ratio * len(ids)))
    if n_train >= len(ids):
        raise ValueError("empty test side")
    if n_train <= 0:
        raise ValueError("empty train side")
    order = np.random.default_rng(seed).permutation(len(ids))
    train_ids = {ids[i] for i in order[:n_train]}
    prov = ds.provenance
    train = [b for b in ds.beats if b.record_id in train_ids]
    test = [b for b in ds.beats if b.record_id not in train_ids]
    return (
        BeatDataset(train, "train", {k: v for k, v in prov.items() if k in train_ids}),
        BeatDataset(test, "test", {k: v for k, v in prov.items() if k not in train_ids}),
    )


def write_beats_csv(ds: BeatDataset, path) -> None:
    if not len(ds):
        raise ValueError("refusing to write an empty dataset")
    n = ds.beat_length
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIXED_COLUMNS + [f"s{i}" for i in range(n)])
        for b in ds.beats:
            w.writerow([b.beat_index, b.record_id, b.label.value, b.r_peak] + [repr(float(v)) for v in b.samples])


def read_beats_csv(path, split_tag: Optional[str] = None) -> BeatDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise ValueError("bad beats file: missing header") from None
        n = len(header) - len(FIXED_COLUMNS)
        if header[: len(FIXED_COLUMNS)] != FIXED_COLUMNS or n < 1 or header[len(FIXED_COLUMNS) :] != [f"s{i}" for i in range(n)]:
            raise ValueError("bad beats file: unexpected header")
        beats = []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"bad beats file: line {lineno} has {len(row)} columns")
            cls = row[2]
            if cls not in BeatClass._value2member_map_:
                raise ValueError(f"unknown class {cls!r} at line {lineno}")
            try:
                samples = np.array([float(v) for v in row[4:]])
                beats.append(Heartbeat(samples, cls, row[1], int(row[0]), int(row[3])))
            except ValueError:
                raise ValueError(f"bad beats file: unparsable value at line {lineno}") from None
    return BeatDataset(beats, split_tag)
