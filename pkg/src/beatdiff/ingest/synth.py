"""Parametric sum-of-Gaussians heartbeats, used as a dataset-free toy corpus.

A beat is ``baseline + sum_k amp_k * g_k(t)`` with fixed per-class wave shapes
``g_k``. All randomness enters linearly (amplitude scaling, baseline shift,
additive noise) and is zero-mean, so the expected beat of a class is exactly its
template. Random terms are bounded so beats stay inside [0, 1] without clipping.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Dict, Optional, Sequence

import numpy as np

from ..signal import CLASSES, BeatClass, Heartbeat
from .dataset import BeatDataset


@dataclass(frozen=True)
class WaveTable:
    baseline: float
    amp: np.ndarray
    center: np.ndarray
    width: np.ndarray

    def shapes(self, length: int) -> np.ndarray:
        t = np.arange(length, dtype=float)[None, :]
        return np.exp(-0.5 * ((t - self.center[:, None]) / self.width[:, None]) ** 2)


@lru_cache(maxsize=None)
def load_tables():
    raw = json.loads(resources.files("beatdiff").joinpath("data/templates.json").read_text())
    tables: Dict[BeatClass, WaveTable] = {}
    for name, p in raw["classes"].items():
        tables[BeatClass(name)] = WaveTable(p["baseline"], np.array(p["amp"]), np.array(p["center"]), np.array(p["width"]))
    n, v = tables[BeatClass.N], tables[BeatClass.V]
    tables[BeatClass.F] = WaveTable(
        0.5 * (n.baseline + v.baseline), 0.5 * (n.amp + v.amp), 0.5 * (n.center + v.center), 0.5 * (n.width + v.width)
    )
    return tables, raw["jitter"], int(raw["length"])


def template(label, length: Optional[int] = None) -> np.ndarray:
    tables, _, default_len = load_tables()
    tab = tables[BeatClass.parse(label)]
    return tab.baseline + tab.amp @ tab.shapes(length or default_len)


def synth_beat(
    label,
    rng: np.random.Generator,
    jitter: float = 1.0,
    record_offsets: Optional[np.ndarray] = None,
    record_id: str = "synthetic",
    beat_index: int = 0,
) -> Heartbeat:
    """Draw one beat of ``label``.

    ``jitter`` scales the per-beat randomness (0 gives the template exactly).
    ``record_offsets`` (from :func:`record_offsets`) holds per-record relative
    amplitude changes plus a baseline shift shared by every beat of a record.
    """
    label = BeatClass.parse(label)
    tables, jit, length = load_tables()
    tab = tables[label]
    n_waves = tab.amp.size
    scale = np.ones(n_waves)
    base = tab.baseline
    if record_offsets is not None:
        scale = scale + record_offsets[:n_waves]
        base = base + record_offsets[n_waves]
    u = rng.uniform(-1.0, 1.0, size=n_waves + 1 + length)
    scale = scale + jitter * jit["beat_amp"] * u[:n_waves]
    base = base + jitter * jit["beat_baseline"] * u[n_waves]
    x = base + (tab.amp * scale) @ tab.shapes(length) + jitter * jit["beat_noise"] * u[n_waves + 1 :]
    return Heartbeat(x, label, record_id, beat_index, r_peak=126)


def record_offsets(rng: np.random.Generator) -> np.ndarray:
    tables, jit, _ = load_tables()
    n_waves = tables[BeatClass.N].amp.size
    u = rng.uniform(-1.0, 1.0, size=n_waves + 1)
    return np.concatenate([jit["record_amp"] * u[:n_waves], [jit["record_baseline"] * u[n_waves]]])


def synth_record(labels: Sequence, rng: np.random.Generator, record_id: str, jitter: float = 1.0):
    """Consecutive beats of one synthetic record sharing record-level morphology."""
    offsets = record_offsets(rng)
    return [synth_beat(lab, rng, jitter, offsets, record_id, h) for h, lab in enumerate(labels)]


def synth_corpus(per_class: int = 200, beats_per_record: int = 20, seed: int = 0, classes=CLASSES) -> BeatDataset:
    """Balanced toy corpus: ``per_class`` beats of every class, shuffled into records."""
    rng = np.random.default_rng(seed)
    labels = np.array([c.value for c in classes for _ in range(per_class)])
    labels = labels[rng.permutation(labels.size)]
    beats = []
    for r, start in enumerate(range(0, labels.size, beats_per_record)):
        rid = f"toy{r:03d}"
        beats.extend(synth_record(labels[start : start + beats_per_record], rng, rid))
    return BeatDataset(beats, provenance={b.record_id: "synthetic" for b in beats})
