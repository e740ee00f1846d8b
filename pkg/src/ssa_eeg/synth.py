"""Deterministic two-class synthetic EEG.

Every subject is a sum of band-limited oscillatory sources mixed across
channels, plus white sensor noise.  Within one band the C sources are
independent unit-variance filtered noise; mixing them with the symmetric
square root of a coupling matrix R makes the band signals of channels i and
j correlate by R[i, j].  Classes differ only in their coupling matrices, so
the class information lives in the cross-channel structure that the
PSD-correlation features are designed to pick up.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import SpecError
from .signal import BandPassSpec, Recording, filtfilt_channels, save_recording

CLASSES = ("control", "dyslexic")


@dataclass(frozen=True)
class Band:
    center_hz: float
    bandwidth_hz: float
    amplitude: float = 1.0

    @property
    def edges(self) -> tuple[float, float]:
        return (max(self.center_hz - self.bandwidth_hz / 2, 0.1),
                self.center_hz + self.bandwidth_hz / 2)


# delta, theta, alpha, beta, low gamma
DEFAULT_BANDS = (
    Band(2.0, 3.0, 2.0),
    Band(6.0, 4.0, 1.5),
    Band(10.0, 4.0, 1.0),
    Band(20.0, 10.0, 0.7),
    Band(32.0, 8.0, 0.5),
)


def equicorrelation(c: int, rho: float) -> np.ndarray:
    """Unit-diagonal coupling with every off-diagonal entry equal to ``rho``."""
    m = np.full((c, c), float(rho))
    np.fill_diagonal(m, 1.0)
    return m


@dataclass(frozen=True)
class SynthSpec:
    n_per_class: int = 16
    channels: int = 16
    duration_s: float = 80.0
    fs: float = 500.0
    bands: tuple[Band, ...] = DEFAULT_BANDS
    # per class, one within-band coupling level per band (equicorrelation) or
    # explicit C x C matrices
    coupling: dict = field(default_factory=lambda: {
        "control": (0.1,) * 5, "dyslexic": (0.8,) * 5})
    noise_level: float = 0.2
    seed: int = 0
    # per-subject jitter of the coupling level, keeps subjects non-identical
    coupling_jitter: float = 0.05

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.fs))

    def coupling_matrices(self, cls: str, shift: np.ndarray | None = None) -> list[np.ndarray]:
        levels = self.coupling[cls]
        if len(levels) != len(self.bands):
            raise SpecError(f"{cls}: {len(levels)} coupling entries for {len(self.bands)} bands")
        out = []
        for b, lvl in enumerate(levels):
            if np.ndim(lvl) == 0:
                rho = float(lvl) + (0.0 if shift is None else float(shift[b]))
                m = equicorrelation(self.channels, float(np.clip(rho, 0.0, 0.99)))
            else:
                m = np.asarray(lvl, dtype=np.float64)
            out.append(m)
        return out

    def validate(self) -> None:
        if self.n_per_class < 1 or self.channels < 1:
            raise SpecError("need at least one subject per class and one channel")
        if self.fs <= 0 or self.n_samples < 2:
            raise SpecError("fs and duration must give at least two samples")
        if self.noise_level < 0:
            raise SpecError("noise_level must be >= 0")
        for b in self.bands:
            lo, hi = b.edges
            if hi >= self.fs / 2:
                raise SpecError(f"band {b} reaches Nyquist at fs={self.fs}")
        for cls in CLASSES:
            if cls not in self.coupling:
                raise SpecError(f"missing coupling for class {cls!r}")
            for m in self.coupling_matrices(cls):
                mixing_matrix(m)


def mixing_matrix(coupling: np.ndarray) -> np.ndarray:
    """Symmetric square root of a coupling matrix (raises if not PSD)."""
    m = np.asarray(coupling, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise SpecError(f"coupling must be square, got {m.shape}")
    if not np.allclose(m, m.T, atol=1e-12):
        raise SpecError("coupling matrix is not symmetric")
    if not np.allclose(np.diag(m), 1.0, atol=1e-12):
        raise SpecError("coupling matrix must have unit diagonal")
    lam, vecs = np.linalg.eigh(m)
    if lam.min() < -1e-10:
        raise SpecError(f"coupling matrix is not positive semidefinite (min eigenvalue {lam.min():.3g})")
    return (vecs * np.sqrt(np.clip(lam, 0.0, None))) @ vecs.T


def band_limited_noise(rng: np.random.Generator, c: int, n: int, band: Band, fs: float) -> np.ndarray:
    lo, hi = band.edges
    x = filtfilt_channels(rng.standard_normal((c, n)), BandPassSpec(lo, hi, 4), fs)
    return x / x.std(axis=1, keepdims=True)


def generate_subject(spec: SynthSpec, index: int) -> Recording:
    """Subject ``index``; the first ``n_per_class`` are controls."""
    cls = CLASSES[0] if index < spec.n_per_class else CLASSES[1]
    rng = np.random.default_rng([spec.seed, index])
    shift = rng.uniform(-spec.coupling_jitter, spec.coupling_jitter, size=len(spec.bands))
    c, n = spec.channels, spec.n_samples
    x = np.zeros((c, n))
    for band, coupling in zip(spec.bands, spec.coupling_matrices(cls, shift)):
        sources = band_limited_noise(rng, c, n, band, spec.fs)
        x += band.amplitude * (mixing_matrix(coupling) @ sources)
    x += spec.noise_level * rng.standard_normal((c, n))
    return Recording(x, fs=spec.fs, subject_id=f"s{index:03d}", label=cls)


def generate(spec: SynthSpec | None = None) -> list[Recording]:
    spec = spec or SynthSpec()
    spec.validate()
    return [generate_subject(spec, i) for i in range(2 * spec.n_per_class)]


def preset(name: str, **overrides) -> SynthSpec:
    """Named specs: ``easy``, ``hard`` and ``group1`` (class signal in the dominant band only)."""
    if name == "easy":
        spec = SynthSpec()
    elif name == "hard":
        spec = SynthSpec(coupling={"control": (0.35,) * 5, "dyslexic": (0.5,) * 5},
                         noise_level=0.5)
    elif name == "group1":
        spec = SynthSpec(
            bands=(Band(2.0, 3.0, 3.0),) + DEFAULT_BANDS[1:],
            coupling={"control": (0.1, 0.5, 0.5, 0.5, 0.5),
                      "dyslexic": (0.8, 0.5, 0.5, 0.5, 0.5)})
    elif name == "null":
        spec = SynthSpec(coupling={"control": (0.5,) * 5, "dyslexic": (0.5,) * 5})
    else:
        raise SpecError(f"unknown preset {name!r}")
    return replace(spec, **overrides)


PRESETS = ("easy", "hard", "group1", "null")


def write_dataset(recs: list[Recording], directory, format: str = "raw-f64") -> Path:
    """Write recordings plus a ``labels.json`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".csv" if format == "csv" else ".f64"
    entries = []
    for rec in recs:
        fname = rec.subject_id + ext
        save_recording(rec, directory / fname, format)
        entries.append({"subject_id": rec.subject_id, "label": rec.label, "file": fname,
                        "fs": rec.fs})
    path = directory / "labels.json"
    path.write_text(json.dumps({"subjects": entries}, indent=1, sort_keys=True))
    return path


def read_dataset(directory) -> list[Recording]:
    from .signal import load_recording

    directory = Path(directory)
    manifest = json.loads((directory / "labels.json").read_text())
    return [load_recording(directory / e["file"], fs=e.get("fs", 500.0),
                           subject_id=e["subject_id"], label=e["label"])
            for e in manifest["subjects"]]
