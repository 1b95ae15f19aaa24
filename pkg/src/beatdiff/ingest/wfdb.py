"""Minimal WFDB reader: header text, format-212 payloads and rdann-style text annotations."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

DEFAULT_FS = 250.0

# MIT-BIH beat annotation codes; anything else (rhythm, noise, comments) is not a beat
BEAT_SYMBOLS = frozenset("NLRBAaJSVrFejnE/fQ?")


class HeaderParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"header parse error at line {lineno}: {msg}")
        self.lineno = lineno


class AnnotationParseError(ValueError):
    pass


@dataclass
class SignalSpec:
    file_name: str
    fmt: int
    adc_gain: float
    baseline: int
    adc_zero: int
    name: str

    @property
    def supported(self) -> bool:
        return self.fmt == 212


@dataclass
class RecordHeader:
    record_id: str
    n_signals: int
    fs: float
    n_samples: Optional[int] = None
    signals: List[SignalSpec] = field(default_factory=list)

    def channel(self, name: str) -> int:
        for i, sig in enumerate(self.signals):
            if sig.name == name:
                return i
        raise KeyError(f"record {self.record_id} has no signal {name!r}")


@dataclass(frozen=True)
class Annotation:
    sample_index: int
    symbol: str


def _parse_gain(token: str, lineno: int):
    # "200", "200/mV", "200(1024)/mV"
    token = token.split("/", 1)[0]
    baseline = None
    if "(" in token:
        token, rest = token.split("(", 1)
        if not rest.endswith(")"):
            raise HeaderParseError(lineno, f"bad gain field {token!r}")
        baseline = int(rest[:-1])
    return float(token), baseline


def parse_wfdb_header(text: str, strict: bool = True) -> RecordHeader:
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise HeaderParseError(1, "empty header")

    lineno, record_line = lines[0]
    parts = record_line.split()
    if len(parts) < 2:
        raise HeaderParseError(lineno, "record line needs a name and a signal count")
    record_id = parts[0].split("/", 1)[0]
    try:
        n_signals = int(parts[1])
    except ValueError:
        raise HeaderParseError(lineno, f"bad signal count {parts[1]!r}") from None
    if n_signals < 1:
        raise HeaderParseError(lineno, "signal count must be positive")
    if len(parts) >= 3:
        try:
            fs = float(parts[2].split("/", 1)[0].split("(", 1)[0])
        except ValueError:
            raise HeaderParseError(lineno, f"bad sampling rate {parts[2]!r}") from None
        if fs <= 0:
            raise HeaderParseError(lineno, "sampling rate must be positive")
    elif strict:
        raise HeaderParseError(lineno, "missing sampling rate")
    else:
        fs = DEFAULT_FS
    n_samples = None
    if len(parts) >= 4:
        try:
            n_samples = int(parts[3])
        except ValueError:
            raise HeaderParseError(lineno, f"bad sample count {parts[3]!r}") from None

    signals = []
    for lineno, line in lines[1 : 1 + n_signals]:
        cols = line.split()
        if len(cols) < 2:
            raise HeaderParseError(lineno, "signal line needs a file name and a format")
        try:
            fmt = int(cols[1].split("x", 1)[0].split(":", 1)[0].split("+", 1)[0])
            gain, baseline = _parse_gain(cols[2], lineno) if len(cols) > 2 else (200.0, None)
            adc_zero = int(cols[4]) if len(cols) > 4 else 0
        except ValueError as exc:
            raise HeaderParseError(lineno, str(exc)) from None
        if baseline is None:
            baseline = adc_zero
        name = " ".join(cols[8:]) if len(cols) > 8 else f"sig{len(signals)}"
        signals.append(SignalSpec(cols[0], fmt, gain, baseline, adc_zero, name))
    if len(signals) != n_signals:
        raise HeaderParseError(lines[-1][0] + 1, f"expected {n_signals} signal lines, found {len(signals)}")
    return RecordHeader(record_id, n_signals, fs, n_samples, signals)


def _sign12(v: np.ndarray) -> np.ndarray:
    return np.where(v >= 0x800, v - 0x1000, v)


def decode_format212(payload: bytes, n_signals: int = 2) -> List[np.ndarray]:
    """Unpack 12-bit pairs and deinterleave them into ``n_signals`` channels."""
    buf = np.frombuffer(bytes(payload), dtype=np.uint8)
    if buf.size % 3:
        raise ValueError("truncated 212 payload")
    trip = buf.reshape(-1, 3).astype(np.int64)
    first = ((trip[:, 1] & 0x0F) << 8) | trip[:, 0]
    second = ((trip[:, 1] & 0xF0) << 4) | trip[:, 2]
    flat = _sign12(np.column_stack([first, second]).ravel())
    usable = flat.size - flat.size % n_signals
    frames = flat[:usable].reshape(-1, n_signals)
    return [frames[:, k].copy() for k in range(n_signals)]


def encode_format212(channels: Sequence[Sequence[int]]) -> bytes:
    frames = np.column_stack([np.asarray(c, dtype=np.int64) for c in channels])
    flat = frames.ravel()
    if flat.min(initial=0) < -2048 or flat.max(initial=0) > 2047:
        raise ValueError("sample outside the 12-bit range")
    if flat.size % 2:
        flat = np.append(flat, 0)
    u = flat & 0xFFF
    first, second = u[0::2], u[1::2]
    out = np.empty((first.size, 3), dtype=np.uint8)
    out[:, 0] = first & 0xFF
    out[:, 1] = ((first >> 8) & 0x0F) | ((second >> 4) & 0xF0)
    out[:, 2] = second & 0xFF
    return out.tobytes()


def adc_to_physical(raw, gain: float, baseline: float) -> np.ndarray:
    if gain == 0:
        raise ValueError("invalid gain")
    return (np.asarray(raw, dtype=float) - baseline) / gain


def parse_annotations(text: str, symbols: Optional[Iterable[str]] = None, strict: bool = True) -> List[Annotation]:
    """Read rdann-style text: column 2 is the sample index, column 3 the symbol."""
    keep = None if symbols is None else set(symbols)
    anns = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        cols = line.split()
        if not cols or cols[0].lower() == "time":
            continue
        if len(cols) < 3:
            raise AnnotationParseError(f"annotation parse error at line {lineno}: expected at least 3 columns")
        try:
            index = int(cols[1])
        except ValueError:
            raise AnnotationParseError(f"annotation parse error at line {lineno}: bad sample index {cols[1]!r}") from None
        if index < 0:
            raise AnnotationParseError(f"annotation parse error at line {lineno}: negative sample index")
        anns.append(Annotation(index, cols[2]))
    if any(b.sample_index <= a.sample_index for a, b in zip(anns, anns[1:])):
        if strict:
            raise AnnotationParseError("annotations not sorted")
        anns.sort(key=lambda a: a.sample_index)
    if keep is not None:
        anns = [a for a in anns if a.symbol in keep]
    return anns


def read_record(directory: str, record_id: str, channel: str = "MLII"):
    """Load one record's header and the named channel in physical units (mV)."""
    with open(os.path.join(directory, record_id + ".hea"), encoding="utf-8") as fh:
        header = parse_wfdb_header(fh.read())
    k = header.channel(channel)
    spec = header.signals[k]
    if not spec.supported:
        raise ValueError(f"unsupported signal format {spec.fmt}")
    with open(os.path.join(directory, spec.file_name), "rb") as fh:
        payload = fh.read()
    payload = payload[: len(payload) - len(payload) % 3]
    same_file = [i for i, s in enumerate(header.signals) if s.file_name == spec.file_name]
    raw = decode_format212(payload, len(same_file))[same_file.index(k)]
    if header.n_samples:
        raw = raw[: header.n_samples]
    return header, adc_to_physical(raw, spec.adc_gain, spec.baseline)
