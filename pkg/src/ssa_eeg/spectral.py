"""Welch-averaged PSDs of grouped SSA components and channel correlation matrices.

Each fixed-length EEG segment is one periodogram window: mean removed,
Hann-tapered, zero-padded to ``nfft`` and scaled to a one-sided density.
Periodograms of the same (channel, group) are averaged across segments and
the band-limited power vectors of all channels are Pearson-correlated into
a C x C feature matrix per group.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import get_window

from .config import PipelineConfig
from .errors import NoDataError, ShapeError
from .signal import Recording, read_raw_f64, segment, write_raw_f64
from .ssa import (
    ComponentGrouping,
    SsaConfig,
    group_components,
    pooled_grouping,
    reconstruct_groups,
    ssa_decompose,
    variance_explained,
    w_correlation,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PsdEstimate:
    freqs: np.ndarray
    power: np.ndarray
    nfft: int
    window: str
    fs: float

    def band(self, low: float, high: float) -> "PsdEstimate":
        keep = (self.freqs >= low) & (self.freqs <= high)
        return PsdEstimate(self.freqs[keep], self.power[keep], self.nfft, self.window, self.fs)

    @property
    def resolution(self) -> float:
        return self.fs / self.nfft


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    group_index: int = 0
    subject_id: str = ""
    undefined: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class FeatureSample:
    """All G feature matrices of one subject (or one segment of a subject)."""

    subject_id: str
    label: str | None
    matrices: np.ndarray  # G x C x C
    segment: int | None = None

    @property
    def n_groups(self) -> int:
        return self.matrices.shape[0]

    @property
    def n_channels(self) -> int:
        return self.matrices.shape[1]

    @property
    def key(self) -> str:
        return self.subject_id if self.segment is None else f"{self.subject_id}#{self.segment}"


@dataclass
class FeatureDataset:
    samples: list[FeatureSample]
    config_hash: str = ""
    # eigenvalue share per grouped component, averaged over subjects
    group_variance: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def subject_ids(self) -> list[str]:
        return list(dict.fromkeys(s.subject_id for s in self.samples))

    def labels(self) -> np.ndarray:
        return np.array([label_to_int(s.label) for s in self.samples])

    def tensor(self, groups: Sequence[int] | int | None = None) -> np.ndarray:
        """N x G' x C x C stack, optionally restricted to some groups."""
        x = np.stack([s.matrices for s in self.samples])
        if groups is None:
            return x
        if isinstance(groups, int):
            groups = [groups]
        return x[:, list(groups)]

    def subset(self, subject_ids) -> "FeatureDataset":
        keep = set(subject_ids)
        return FeatureDataset([s for s in self.samples if s.subject_id in keep],
                              self.config_hash, self.group_variance)

    def with_labels(self, mapping: dict) -> "FeatureDataset":
        return FeatureDataset(
            [FeatureSample(s.subject_id, mapping[s.subject_id], s.matrices, s.segment)
             for s in self.samples],
            self.config_hash, self.group_variance)


def label_to_int(label) -> int:
    if label == "dyslexic" or label == 1:
        return 1
    if label == "control" or label == 0:
        return 0
    raise ValueError(f"sample has no usable label: {label!r}")


def next_pow2(n: int) -> int:
    return 1 << max(0, math.ceil(math.log2(n)))


def welch_psd(segments, fs: float, nfft: int | None = None, window: str = "hann") -> PsdEstimate:
    """Average of Hann-windowed one-sided periodograms, one per segment."""
    segs = [np.asarray(s, dtype=np.float64) for s in segments]
    if not segs:
        raise NoDataError("welch_psd needs at least one segment")
    length = max(s.size for s in segs)
    nfft = nfft or next_pow2(length)
    if length > nfft:
        raise ValueError(f"segment of {length} samples does not fit nfft={nfft}")

    acc = np.zeros(nfft // 2 + 1)
    for s in segs:
        w = get_window(window, s.size)
        spec = np.fft.rfft((s - s.mean()) * w, n=nfft)
        acc += (spec.real ** 2 + spec.imag ** 2) / (fs * np.sum(w * w))
    power = acc / len(segs)
    if nfft % 2 == 0:
        power[1:-1] *= 2.0
    else:
        power[1:] *= 2.0
    freqs = np.fft.rfftfreq(nfft, d=1.0 / fs)
    return PsdEstimate(freqs, power, nfft, window, float(fs))


def pearson_matrix(rows: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    """Row-wise Pearson correlation; constant rows give 0 off-diagonal."""
    rows = np.asarray(rows, dtype=np.float64)
    centered = rows - rows.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", centered, centered))
    flat = tuple(int(i) for i in np.flatnonzero(norms == 0))
    z = centered / np.where(norms == 0, 1.0, norms)[:, None]
    corr = z @ z.T
    corr = 0.5 * (corr + corr.T)
    np.clip(corr, -1.0, 1.0, out=corr)
    if flat:
        corr[list(flat), :] = 0.0
        corr[:, list(flat)] = 0.0
    np.fill_diagonal(corr, 1.0)
    return corr, flat


def channel_correlation(psds: Sequence[PsdEstimate], band: tuple[float, float] | None = None,
                        *, group_index: int = 0, subject_id: str = "",
                        log_power: bool = False) -> FeatureMatrix:
    if not psds:
        raise NoDataError("channel_correlation needs at least one PSD")
    grid = psds[0].freqs
    for p in psds[1:]:
        if p.freqs.shape != grid.shape or not np.array_equal(p.freqs, grid):
            raise ValueError("all PSDs must share one frequency grid")
    if band is not None:
        psds = [p.band(*band) for p in psds]
    rows = np.stack([p.power for p in psds])
    if log_power:
        rows = np.log10(rows + np.finfo(float).tiny)
    corr, flat = pearson_matrix(rows)
    if flat:
        warnings.warn(f"{subject_id or 'sample'} group {group_index}: constant PSD on channels "
                      f"{flat}; correlation set to 0", RuntimeWarning, stacklevel=2)
    return FeatureMatrix(corr, group_index, subject_id, flat)


# --------------------------------------------------------------------------
# full feature build
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SubjectSsa:
    """What the SSA stage keeps per subject: enough to rebuild grouped series.

    ``eofs`` is S x C x L x k (segments, channels, window, retained
    components) and ``labels`` the S x C x k group index of each component.
    In subject grouping mode every (segment, channel) shares one labelling.
    """

    subject_id: str
    label: str | None
    eofs: np.ndarray
    labels: np.ndarray
    n_groups: int
    spectrum: np.ndarray  # mean normalized eigen spectrum over all L components
    share: np.ndarray  # mean eigenvalue share of each group

    def grouping(self, seg: int, ch: int) -> ComponentGrouping:
        lab = self.labels[seg, ch]
        return ComponentGrouping(tuple(tuple(np.flatnonzero(lab == g)) for g in range(self.n_groups)),
                                 lab.size)


def subject_ssa(rec: Recording, cfg: PipelineConfig) -> SubjectSsa:
    segs = segment(rec, cfg.signal.segment_seconds, cfg.signal.overlap)
    scfg = SsaConfig(cfg.ssa.window_length, cfg.ssa.n_components)
    G = cfg.ssa.groups
    S, C, L, k = len(segs), rec.n_channels, scfg.window_length, scfg.retained
    eofs = np.empty((S, C, L, k))
    ws, lams, totals, spectra = [], [], [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for si, seg in enumerate(segs):
            for ci, x in enumerate(seg.data):
                d = ssa_decompose(x, scfg)
                eofs[si, ci] = d.eofs
                ws.append(w_correlation(d).values)
                lams.append(d.eigenvalues)
                totals.append(d.total_variance)
                spectra.append(variance_explained(d.spectrum))

    if cfg.ssa.grouping == "subject":
        shared = pooled_grouping(ws, lams, G)
        groupings = [shared] * (S * C)
    else:
        groupings = [group_components(w, lam, G) for w, lam in zip(ws, lams)]
    labels = np.stack([g.labels() for g in groupings]).reshape(S, C, k)
    share = np.mean([_group_share(lam, tot, g) for lam, tot, g in zip(lams, totals, groupings)],
                    axis=0)
    spectrum = np.mean(spectra, axis=0)
    return SubjectSsa(rec.subject_id, rec.label, eofs, labels, G, spectrum / spectrum.sum(), share)


def _group_share(lam, total, g: ComponentGrouping) -> np.ndarray:
    lam = np.clip(lam, 0.0, None)
    return np.array([lam[list(m)].sum() for m in g.groups]) / total


def subject_features(rec: Recording, cfg: PipelineConfig,
                     ssa: SubjectSsa | None = None) -> tuple[list[FeatureSample], np.ndarray]:
    ssa = ssa if ssa is not None else subject_ssa(rec, cfg)
    segs = segment(rec, cfg.signal.segment_seconds, cfg.signal.overlap)
    if ssa.eofs.shape[:2] != (len(segs), rec.n_channels):
        raise ShapeError(f"{rec.subject_id}: SSA state covers {ssa.eofs.shape[:2]} "
                         f"(segments, channels), recording gives {(len(segs), rec.n_channels)}")
    series = [[reconstruct_groups(x, ssa.eofs[s, c], ssa.grouping(s, c))
               for c, x in enumerate(seg.data)] for s, seg in enumerate(segs)]
    fs = rec.fs
    nfft = cfg.features.nfft or next_pow2(segs[0].n_samples)
    band = (cfg.features.band_low_hz, cfg.features.band_high_hz)
    G, C = ssa.n_groups, rec.n_channels

    def matrices(seg_idx: Sequence[int]) -> np.ndarray:
        out = np.empty((G, C, C))
        for g in range(G):
            psds = [welch_psd([series[s][c][g] for s in seg_idx], fs, nfft) for c in range(C)]
            fm = channel_correlation(psds, band, group_index=g, subject_id=rec.subject_id,
                                     log_power=cfg.features.log_power)
            out[g] = fm.values
        return out

    if cfg.features.per_segment:
        samples = [FeatureSample(rec.subject_id, rec.label, matrices([s]), segment=s)
                   for s in range(len(segs))]
    else:
        samples = [FeatureSample(rec.subject_id, rec.label, matrices(range(len(segs))))]
    return samples, ssa.share


def _parallel_map(fn, items, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def build_ssa(recordings: Sequence[Recording], cfg: PipelineConfig | None = None,
              threads: int = 1) -> list[SubjectSsa]:
    cfg = (cfg or PipelineConfig()).validate()

    def one(rec):
        log.info("ssa: subject %s", rec.subject_id)
        return subject_ssa(rec, cfg)

    return _parallel_map(one, recordings, threads)


def build_features(recordings: Sequence[Recording], cfg: PipelineConfig | None = None,
                   threads: int = 1, ssa: dict | None = None) -> FeatureDataset:
    """SSA-group every channel, then emit G channel-correlation matrices per subject.

    Recordings are expected to be normalized and band-pass filtered already;
    segmentation happens here with ``cfg.signal`` settings.  ``ssa`` maps
    subject ids to precomputed :class:`SubjectSsa` state.
    """
    cfg = (cfg or PipelineConfig()).validate()
    ssa = ssa or {}

    def one(rec):
        log.info("features: subject %s", rec.subject_id)
        return subject_features(rec, cfg, ssa.get(rec.subject_id))

    results = _parallel_map(one, recordings, threads)
    samples = [s for res in results for s in res[0]]
    share = np.mean([res[1] for res in results], axis=0) if results else np.array([])
    return FeatureDataset(samples, cfg.config_hash(), [float(v) for v in share])


# --------------------------------------------------------------------------
# persistence: one raw-f64 tensor per sample plus a manifest
# --------------------------------------------------------------------------

def save_features(ds: FeatureDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        fname = f"{s.key.replace('#', '_seg')}.f64"
        G, C, _ = s.matrices.shape
        write_raw_f64(directory / fname, s.matrices.reshape(G * C, C), 0.0)
        entries.append({"subject_id": s.subject_id, "label": s.label, "segment": s.segment,
                        "G": G, "C": C, "file": fname})
    manifest = {"config_hash": ds.config_hash, "group_variance": ds.group_variance,
                "samples": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_features(directory) -> FeatureDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    samples = []
    for e in manifest["samples"]:
        data, _ = read_raw_f64(directory / e["file"])
        samples.append(FeatureSample(e["subject_id"], e["label"],
                                     data.reshape(e["G"], e["C"], e["C"]), e["segment"]))
    return FeatureDataset(samples, manifest.get("config_hash", ""),
                          manifest.get("group_variance", []))


def save_subject_ssa(obj: SubjectSsa, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    S, C, L, k = obj.eofs.shape
    write_raw_f64(directory / f"{obj.subject_id}.f64", obj.eofs.reshape(S * C * L, k), 0.0)
    meta = {"subject_id": obj.subject_id, "label": obj.label, "shape": [S, C, L, k],
            "n_groups": obj.n_groups, "labels": obj.labels.tolist(),
            "spectrum": obj.spectrum.tolist(), "share": obj.share.tolist()}
    path = directory / f"{obj.subject_id}.json"
    path.write_text(json.dumps(meta, sort_keys=True))
    return path


def load_subject_ssa(path) -> SubjectSsa:
    """Read one subject's SSA state from its ``.json`` (or ``.f64``) path."""
    path = Path(path).with_suffix(".json")
    meta = json.loads(path.read_text())
    data, _ = read_raw_f64(path.with_suffix(".f64"))
    return SubjectSsa(meta["subject_id"], meta["label"], data.reshape(meta["shape"]),
                      np.asarray(meta["labels"], dtype=int), meta["n_groups"],
                      np.asarray(meta["spectrum"]), np.asarray(meta["share"]))
