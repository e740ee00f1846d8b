"""Singular Spectrum Analysis of a single channel.

The series is embedded into its K x L trajectory matrix of lagged windows
(K = N - L + 1), the L x L lag-covariance is eigendecomposed, and each
eigenvector (EOF) yields one additive component: the trajectory is projected
onto the EOF and the resulting rank-1 matrix is diagonal-averaged back to a
length-N series.

Component indices are 0-based throughout the code.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve

from .errors import (
    DegenerateSpectrum,
    InvalidGroupCount,
    NumericError,
    WindowTooLarge,
)
from .signal import read_raw_f64, write_raw_f64

DEFAULT_WINDOW = 70


@dataclass(frozen=True)
class SsaConfig:
    window_length: int = DEFAULT_WINDOW
    n_components: int | None = None  # None keeps all L components

    @property
    def retained(self) -> int:
        return self.window_length if self.n_components is None else self.n_components

    def validate(self, n: int | None = None) -> None:
        L = self.window_length
        if L < 2:
            raise WindowTooLarge(f"window length must be >= 2, got {L}")
        if not 1 <= self.retained <= L:
            raise ValueError(f"n_components must be in [1, {L}], got {self.retained}")
        if n is not None and n < 2 * L:
            raise WindowTooLarge(f"series of length {n} is shorter than 2L = {2 * L}")


@dataclass(frozen=True, eq=False)
class SsaDecomposition:
    """Reconstructed components, eigenvalues and EOFs of one series.

    ``components`` is n_components x N, ``eofs`` is L x n_components, and
    ``total_variance`` is the trace of the lag-covariance (the eigenvalue sum
    over all L directions, retained or not).  ``spectrum`` keeps all L
    eigenvalues even when fewer components are retained.
    """

    components: np.ndarray
    eigenvalues: np.ndarray
    eofs: np.ndarray
    total_variance: float
    spectrum: np.ndarray | None = None

    def __post_init__(self):
        if self.spectrum is None:
            object.__setattr__(self, "spectrum", np.asarray(self.eigenvalues).copy())

    @property
    def window_length(self) -> int:
        return self.eofs.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def original_length(self) -> int:
        return self.components.shape[1]


@dataclass(frozen=True, eq=False)
class WCorrelationMatrix:
    values: np.ndarray
    zero_norm: tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ComponentGrouping:
    """Disjoint, exhaustive index sets ordered by descending summed eigenvalue."""

    groups: tuple[tuple[int, ...], ...]
    n_components: int = field(default=-1)

    def __post_init__(self):
        groups = tuple(tuple(sorted(int(i) for i in g)) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        flat = [i for g in groups for i in g]
        n = self.n_components if self.n_components >= 0 else len(flat)
        object.__setattr__(self, "n_components", n)
        if not groups or any(len(g) == 0 for g in groups):
            raise InvalidGroupCount("grouping needs at least one non-empty group")
        if sorted(flat) != list(range(n)):
            raise ValueError(f"groups {groups} do not partition range({n})")

    def __len__(self) -> int:
        return len(self.groups)

    def labels(self) -> np.ndarray:
        """Group index of every component."""
        out = np.empty(self.n_components, dtype=int)
        for g, members in enumerate(self.groups):
            out[list(members)] = g
        return out


def diagonal_weights(n: int, L: int) -> np.ndarray:
    """Number of trajectory-matrix cells that map onto each time index."""
    k = n - L + 1
    t = np.arange(1, n + 1)
    return np.minimum.reduce([t, np.full(n, L), np.full(n, k), n - t + 1]).astype(np.float64)


def trajectory_matrix(x: np.ndarray, L: int) -> np.ndarray:
    """K x L matrix whose rows are the lagged windows x[i:i+L]."""
    return np.ascontiguousarray(sliding_window_view(np.asarray(x, dtype=np.float64), L))


def ssa_decompose(x, cfg: SsaConfig | None = None) -> SsaDecomposition:
    cfg = cfg or SsaConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D series, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("series contains NaN or infinite samples")
    n = x.size
    cfg.validate(n)
    L = cfg.window_length

    X = trajectory_matrix(x, L)
    k = X.shape[0]
    cov = X.T @ X / k
    cov = 0.5 * (cov + cov.T)
    lam, vecs = np.linalg.eigh(cov)
    order = np.argsort(-lam, kind="stable")
    lam, vecs = lam[order], vecs[:, order]
    # sign convention: largest-magnitude loading of each EOF is positive
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(L)])
    signs[signs == 0] = 1.0
    vecs = vecs * signs

    r = cfg.retained
    eofs = np.ascontiguousarray(vecs[:, :r])
    proj = X @ eofs  # K x r principal components
    comps = _diagonal_average(proj, eofs, n)
    return SsaDecomposition(
        components=comps,
        eigenvalues=lam[:r].copy(),
        eofs=eofs,
        total_variance=float(np.trace(cov)),
        spectrum=lam,
    )


def _diagonal_average(proj: np.ndarray, eofs: np.ndarray, n: int) -> np.ndarray:
    # sum over anti-diagonals of proj[:, j] E[:, j]^T is a convolution
    return fftconvolve(proj.T, eofs.T, axes=1) / diagonal_weights(n, eofs.shape[0])


def reconstruct_groups(x, eofs: np.ndarray, g: ComponentGrouping) -> np.ndarray:
    """Grouped series of ``x`` rebuilt from known EOFs, G x N.

    Equivalent to ``merge_groups(ssa_decompose(x), g)`` when ``eofs`` came
    from that decomposition, without holding every component in memory.
    """
    x = np.asarray(x, dtype=np.float64)
    proj = trajectory_matrix(x, eofs.shape[0]) @ eofs
    comps = _diagonal_average(proj, eofs, x.size)
    return np.stack([comps[list(members)].sum(axis=0) for members in g.groups])


def variance_explained(d) -> np.ndarray:
    """Share of lag-covariance variance carried by each component.

    Accepts a decomposition or a bare eigenvalue vector (which is then its
    own total).
    """
    if isinstance(d, SsaDecomposition):
        lam, total = np.clip(d.eigenvalues, 0.0, None), d.total_variance
    else:
        lam = np.clip(np.asarray(d, dtype=np.float64), 0.0, None)
        total = lam.sum()
    if not np.any(lam > 0) or total <= 0:
        raise DegenerateSpectrum("no positive eigenvalue; spectrum is degenerate")
    if isinstance(d, SsaDecomposition) and d.n_components == d.window_length:
        total = lam.sum()
    return lam / total


def w_correlation(d: SsaDecomposition) -> WCorrelationMatrix:
    if d.n_components < 2:
        raise ValueError("w-correlation needs at least two components")
    w = diagonal_weights(d.original_length, d.window_length)
    Y = d.components
    gram = (Y * w) @ Y.T
    gram = 0.5 * (gram + gram.T)
    norms = np.sqrt(np.clip(np.diag(gram), 0.0, None))
    zero = tuple(int(i) for i in np.flatnonzero(norms == 0))
    if zero:
        warnings.warn(f"components {zero} have zero weighted norm; treated as uncorrelated",
                      RuntimeWarning, stacklevel=2)
    safe = np.where(norms == 0, 1.0, norms)
    corr = gram / np.outer(safe, safe)
    if zero:
        corr[list(zero), :] = 0.0
        corr[:, list(zero)] = 0.0
    np.clip(corr, -1.0, 1.0, out=corr)
    np.fill_diagonal(corr, 1.0)
    return WCorrelationMatrix(corr, zero)


def average_linkage(dist: np.ndarray, n_clusters: int) -> list[list[int]]:
    """Agglomerative clustering with UPGMA linkage, cut at ``n_clusters``.

    Ties between equally close pairs go to the pair whose smallest members
    have the lowest indices, which keeps the result deterministic.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if not 1 <= n_clusters <= n:
        raise InvalidGroupCount(f"cannot cut {n} items into {n_clusters} clusters")
    clusters = [[i] for i in range(n)]
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    active = list(range(n))  # row of d for each cluster, ordered by smallest member
    while len(clusters) > n_clusters:
        sub = d[np.ix_(active, active)]
        sub[np.tril_indices(len(active))] = np.inf
        a, b = np.unravel_index(np.argmin(sub), sub.shape)
        ra, rb = active[a], active[b]
        na, nb = len(clusters[a]), len(clusters[b])
        merged = (na * d[ra] + nb * d[rb]) / (na + nb)
        d[ra, :] = merged
        d[:, ra] = merged
        d[ra, ra] = np.inf
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
        del active[b]
    return clusters


def group_components(w, d, G: int) -> ComponentGrouping:
    """Cluster components on 1 - |w-corr| and order groups by eigenvalue mass.

    ``d`` may be a decomposition or a plain eigenvalue vector (e.g. the
    channel-averaged spectrum used for a consensus grouping).
    """
    values = w.values if isinstance(w, WCorrelationMatrix) else np.asarray(w, dtype=np.float64)
    lam = d.eigenvalues if isinstance(d, SsaDecomposition) else np.asarray(d, dtype=np.float64)
    n = values.shape[0]
    if lam.shape[0] != n:
        raise ValueError(f"{lam.shape[0]} eigenvalues for a {n}x{n} w-correlation")
    if not 1 <= G <= n:
        raise InvalidGroupCount(f"G={G} outside [1, {n}]")
    clusters = average_linkage(1.0 - np.abs(values), G)
    mass = [float(np.sum(lam[c])) for c in clusters]
    order = sorted(range(len(clusters)), key=lambda i: (-mass[i], clusters[i][0]))
    return ComponentGrouping(tuple(tuple(clusters[i]) for i in order), n)


def consensus_grouping(decomps: Sequence[SsaDecomposition], G: int) -> ComponentGrouping:
    """One grouping shared by several series (channels, segments).

    Uses the mean |w-correlation| and the mean eigenvalue spectrum so that
    group g refers to comparable components on every channel.
    """
    if not decomps:
        raise ValueError("consensus grouping needs at least one decomposition")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ws = [w_correlation(d).values for d in decomps]
    return pooled_grouping(ws, [d.eigenvalues for d in decomps], G)


def pooled_grouping(w_matrices, eigenvalues, G: int) -> ComponentGrouping:
    mean_w = np.mean([np.abs(w) for w in w_matrices], axis=0)
    return group_components(mean_w, np.mean(eigenvalues, axis=0), G)


def merge_groups(d: SsaDecomposition, g: ComponentGrouping) -> np.ndarray:
    """G x N array; row g is the sum of the member components of group g."""
    if g.n_components != d.n_components:
        raise ValueError(
            f"grouping covers {g.n_components} components, decomposition has {d.n_components}")
    return np.stack([d.components[list(members)].sum(axis=0) for members in g.groups])


def grouped_variance(d, g: ComponentGrouping) -> np.ndarray:
    frac = variance_explained(d)
    return np.array([frac[list(members)].sum() for members in g.groups])


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_decomposition(d: SsaDecomposition, path, grouping: ComponentGrouping | None = None,
                       fs: float = 0.0) -> tuple[Path, Path]:
    """Write components to a raw-f64 container plus a JSON sidecar."""
    path = Path(path)
    write_raw_f64(path, d.components, fs)
    sidecar = path.with_suffix(".json")
    meta = {
        "L": d.window_length,
        "n_components": d.n_components,
        "N": d.original_length,
        "eigenvalues": d.eigenvalues.tolist(),
        "total_variance": d.total_variance,
        "spectrum": d.spectrum.tolist(),
        "eofs": d.eofs.tolist(),
        "grouping": [list(g) for g in grouping.groups] if grouping is not None else None,
    }
    sidecar.write_text(json.dumps(meta, indent=1))
    return path, sidecar


def load_decomposition(path) -> tuple[SsaDecomposition, ComponentGrouping | None]:
    path = Path(path)
    comps, _ = read_raw_f64(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    d = SsaDecomposition(
        components=comps,
        eigenvalues=np.array(meta["eigenvalues"], dtype=np.float64),
        eofs=np.array(meta["eofs"], dtype=np.float64).reshape(meta["L"], meta["n_components"]),
        total_variance=float(meta["total_variance"]),
        spectrum=np.array(meta["spectrum"], dtype=np.float64),
    )
    grouping = None
    if meta.get("grouping") is not None:
        grouping = ComponentGrouping(tuple(tuple(g) for g in meta["grouping"]), d.n_components)
    return d, grouping
