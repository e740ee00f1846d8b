"""Multichannel recordings: containers, file I/O and preprocessing.

Two on-disk formats are supported:

* CSV: header row of channel names, then one row per sample tick.
* raw-f64: a 32-byte little-endian header ``{magic "SSAEEG01", u32 C,
  u64 N, f64 fs, u32 reserved}`` followed by ``C*N`` float64 values,
  channel-major. Round-trips bit-exactly.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import (
    DegenerateChannelError,
    EmptySegmentation,
    NyquistError,
    ParseError,
    ShapeError,
)

DEFAULT_FS = 500.0
DEFAULT_CHANNELS = 32
LABELS = ("control", "dyslexic")

RAW_MAGIC = b"SSAEEG01"
_RAW_HEADER = struct.Struct("<8sIQdI")
assert _RAW_HEADER.size == 32


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Recording:
    """C x N samples plus sampling rate, subject id and class label."""

    channels: np.ndarray
    fs: float = DEFAULT_FS
    subject_id: str = ""
    label: str | None = None
    channel_names: tuple[str, ...] | None = None

    def __post_init__(self):
        data = np.asarray(self.channels, dtype=np.float64)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2:
            raise ShapeError(f"channels must be 2-D (C x N), got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 2:
            raise ShapeError(f"need C >= 1 and N >= 2, got {data.shape}")
        if not self.fs > 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        if self.label is not None and self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS} or None, got {self.label!r}")
        if self.channel_names is not None and len(self.channel_names) != data.shape[0]:
            raise ShapeError("channel_names length does not match channel count")
        object.__setattr__(self, "channels", _frozen(data))
        object.__setattr__(self, "fs", float(self.fs))

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def names(self) -> tuple[str, ...]:
        if self.channel_names is not None:
            return tuple(self.channel_names)
        return tuple(f"ch{i}" for i in range(self.n_channels))

    def with_channels(self, data) -> "Recording":
        return replace(self, channels=data)


@dataclass(frozen=True, eq=False)
class Segment:
    data: np.ndarray
    fs: float
    parent: str
    index: int
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class BandPassSpec:
    low_hz: float = 0.5
    high_hz: float = 40.0
    order: int = 4

    def validate(self, fs: float) -> None:
        if self.order < 1:
            raise ValueError(f"filter order must be positive, got {self.order}")
        if self.high_hz >= fs / 2:
            raise NyquistError(f"high edge {self.high_hz} Hz is not below Nyquist ({fs / 2} Hz)")
        if not 0 < self.low_hz < self.high_hz:
            raise ValueError(f"need 0 < low_hz < high_hz, got [{self.low_hz}, {self.high_hz}]")


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------

def save_recording(rec: Recording, path, format: str | None = None) -> Path:
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt == "raw-f64":
        write_raw_f64(path, rec.channels, rec.fs)
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(rec.names)
            for row in rec.channels.T:
                w.writerow([repr(float(v)) for v in row])
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def load_recording(path, format: str | None = None, *, fs: float = DEFAULT_FS,
                   subject_id: str | None = None, label: str | None = None) -> Recording:
    """Read a recording from CSV or raw-f64.

    CSV files carry no sampling rate, so ``fs`` is used for them; raw-f64
    files store it in the header.
    """
    path = Path(path)
    fmt = format or _infer_format(path)
    sid = subject_id if subject_id is not None else path.stem
    if fmt == "raw-f64":
        data, file_fs = read_raw_f64(path)
        return Recording(data, fs=file_fs, subject_id=sid, label=label)
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or any(h == "" for h in header):
            raise ParseError(f"{path}: header must name every channel")
        try:
            float(header[0])
        except ValueError:
            pass
        else:
            raise ParseError(f"{path}: first row looks numeric, expected channel names")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ShapeError(
                    f"{path}:{lineno}: {len(row)} values under a {len(header)}-channel header")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if len(rows) < 2:
        raise ShapeError(f"{path}: need at least 2 samples, got {len(rows)}")
    data = np.array(rows, dtype=np.float64).T
    return Recording(data, fs=fs, subject_id=sid, label=label, channel_names=tuple(header))


def write_raw_f64(path, data, fs: float) -> Path:
    """Write a 2-D float64 array in the raw-f64 container."""
    data = np.ascontiguousarray(data, dtype="<f8")
    if data.ndim != 2:
        raise ShapeError(f"raw-f64 stores 2-D arrays, got shape {data.shape}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, data.shape[0], data.shape[1], float(fs), 0))
        fh.write(data.tobytes(order="C"))
    return path


def read_raw_f64(path) -> tuple[np.ndarray, float]:
    blob = Path(path).read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, c, n, fs, _ = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    expected = _RAW_HEADER.size + 8 * c * n
    if len(blob) != expected:
        raise ShapeError(f"{path}: payload has {len(blob) - 32} bytes, header implies {8 * c * n}")
    data = np.frombuffer(blob, dtype="<f8", offset=_RAW_HEADER.size).reshape(c, n)
    return data.astype(np.float64), fs


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix in (".f64", ".raw", ".bin"):
        return "raw-f64"
    raise ValueError(f"cannot infer format from {path.name!r}; pass format=")


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def normalize_channels(rec: Recording) -> Recording:
    """Z-score every channel independently (population variance)."""
    x = rec.channels
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    std = np.sqrt((centered ** 2).mean(axis=1, keepdims=True))
    dead = np.flatnonzero(std[:, 0] == 0)
    if dead.size:
        names = [rec.names[i] for i in dead]
        raise DegenerateChannelError(f"{rec.subject_id}: constant channel(s) {names}")
    z = centered / std
    # second pass removes the residual mean left by rounding
    z -= z.mean(axis=1, keepdims=True)
    return rec.with_channels(z)


def butter_sos(spec: BandPassSpec, fs: float) -> np.ndarray:
    spec.validate(fs)
    return sps.butter(spec.order, [spec.low_hz, spec.high_hz], btype="bandpass",
                      fs=fs, output="sos")


def filtfilt_channels(x: np.ndarray, spec: BandPassSpec, fs: float) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis."""
    sos = butter_sos(spec, fs)
    padlen = min(3 * spec.order, x.shape[-1] - 1)
    return sps.sosfiltfilt(sos, x, axis=-1, padtype="even", padlen=padlen)


def bandpass(rec: Recording, spec: BandPassSpec | None = None) -> Recording:
    spec = spec or BandPassSpec()
    return rec.with_channels(filtfilt_channels(rec.channels, spec, rec.fs))


def segment(rec: Recording, seconds: float, overlap_fraction: float = 0.0) -> list[Segment]:
    """Cut a recording into equal-length windows, dropping the tail remainder."""
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    m = int(round(seconds * rec.fs))
    if m < 2:
        raise ValueError(f"segment of {seconds} s at {rec.fs} Hz has fewer than 2 samples")
    n = rec.n_samples
    if m > n:
        raise EmptySegmentation(
            f"{rec.subject_id}: {m}-sample window exceeds {n}-sample recording")
    hop = max(1, int(round(m * (1 - overlap_fraction))))
    count = (n - m) // hop + 1
    return [
        Segment(rec.channels[:, i * hop:i * hop + m], rec.fs, rec.subject_id, i, rec.label)
        for i in range(count)
    ]


def discarded_samples(n: int, m: int) -> int:
    """Samples dropped by a zero-overlap segmentation of ``n`` into ``m``-sized windows."""
    return n - (n // m) * m if m <= n else n


def segment_samples(seconds: float, fs: float) -> int:
    return int(round(seconds * fs))
