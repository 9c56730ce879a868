"""Grid estimators for densities and their functionals.

Kernel density estimates are evaluated on regular node grids with a
separable Gaussian kernel cut at 6 bandwidths. Each sample's 1D kernel
profiles are renormalized on the grid, so the cell-quadrature mass of the
estimate equals the total weight exactly.

Normalizations: for a density ``F`` on ``(R^2)^N``,
``H(F) = (1/N) int F log F`` and ``I(F) = (1/N) int |grad F|^2 / F``; ``N`` is
inferred from the grid dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba as nb
import numpy as np
from scipy import integrate, optimize

from .core import GridGeometry, VortexEnsemble, rng_stream, STREAM_PAIRS

KDE_CUTOFF = 6.0
ENTROPY_FLOOR = 1e-300
FISHER_REL_THRESHOLD = 1e-8


@dataclass(frozen=True)
class KdeSpec:
    """Bandwidth rule and grid of a KDE.

    ``bandwidth`` is ``"silverman"`` or a fixed positive float. ``shape`` is the
    node count per axis (an int applies to every axis). Without ``geometry`` the
    grid spans the samples plus ``margin`` bandwidths on each side.
    """

    bandwidth: str | float = "silverman"
    shape: int | tuple[int, ...] = 128
    geometry: GridGeometry | None = None
    margin: float = 5.0

    def __post_init__(self):
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "silverman":
                raise ValueError(f"unknown bandwidth rule {self.bandwidth!r}")
        elif not float(self.bandwidth) > 0:
            raise ValueError("fixed bandwidth must be > 0")

    def describe(self) -> dict:
        g = self.geometry
        return {"bandwidth": self.bandwidth, "shape": self.shape, "margin": self.margin,
                "geometry": None if g is None else {"origin": list(g.origin), "spacing": list(g.spacing),
                                                    "shape": list(g.shape)}}


@dataclass(frozen=True)
class DensityGrid:
    """Node values on a grid; ``kind`` is ``"probability"`` or ``"signed"``."""

    geometry: GridGeometry
    values: np.ndarray
    kind: str = "probability"
    bandwidth: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("probability", "signed"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.values.shape != tuple(self.geometry.shape):
            raise ValueError("values do not match the grid geometry")

    def integral(self) -> float:
        return float(self.values.sum() * self.geometry.cell_volume)

    @property
    def n_particles(self) -> int:
        """Number of planar factors of the underlying space."""
        return self.geometry.ndim // 2

    def check_probability(self, tol: float = 1e-6) -> None:
        if self.kind != "probability":
            raise ValueError("a probability grid is required")
        mass = self.integral()
        if abs(mass - 1.0) > tol:
            raise ValueError(f"density grid integrates to {mass:.9g}, not 1")
        if np.any(self.values < 0):
            raise ValueError("probability grid has negative values")


def silverman_bandwidth(points: np.ndarray) -> np.ndarray:
    """Per-axis ``h = (4 / (d + 2))^(1/(d+4)) n^(-1/(d+4)) sd``; equals ``n^(-1/6) sd`` in 2D."""
    n, d = points.shape
    sd = points.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    return (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4)) * sd


def _resolve(points: np.ndarray, spec: KdeSpec):
    d = points.shape[1]
    if spec.bandwidth == "silverman":
        h = silverman_bandwidth(points)
    else:
        h = np.full(d, float(spec.bandwidth))
    geom = spec.geometry
    if np.any(h <= 0):
        # degenerate spread: fall back to the grid spacing, or unit width
        fallback = np.asarray(geom.spacing) if geom is not None else np.ones(d)
        h = np.where(h > 0, h, fallback)
    if geom is None:
        shape = (spec.shape,) * d if np.isscalar(spec.shape) else tuple(spec.shape)
        lo = points.min(axis=0) - spec.margin * h
        hi = points.max(axis=0) + spec.margin * h
        geom = GridGeometry.from_bounds(list(zip(lo, hi)), shape)
    elif geom.ndim != d:
        raise ValueError(f"grid has {geom.ndim} axes, samples have {d}")
    return h, geom


@nb.njit(cache=True)
def _profiles(points, origin, spacing, shape, h, cutoff):
    """Per-sample, per-axis kernel windows normalized to unit discrete mass."""
    n, d = points.shape
    width = 0
    for a in range(d):
        width = max(width, int(2 * cutoff * h[a] / spacing[a]) + 3)
    lo = np.zeros((n, d), dtype=np.int64)
    ln = np.zeros((n, d), dtype=np.int64)
    prof = np.zeros((n, d, width))
    for s in range(n):
        for a in range(d):
            c = (points[s, a] - origin[a]) / spacing[a]
            r = cutoff * h[a] / spacing[a]
            i0 = max(0, int(math.ceil(c - r)))
            i1 = min(shape[a] - 1, int(math.floor(c + r)))
            if i1 < i0:
                continue
            tot = 0.0
            for i in range(i0, i1 + 1):
                z = (i - c) * spacing[a] / h[a]
                v = math.exp(-0.5 * z * z)
                prof[s, a, i - i0] = v
                tot += v
            if tot > 0:
                for i in range(i1 - i0 + 1):
                    prof[s, a, i] /= tot * spacing[a]
                lo[s, a] = i0
                ln[s, a] = i1 - i0 + 1
    return lo, ln, prof


@nb.njit(parallel=True, cache=True)
def _accumulate_2d(weights, lo, ln, prof, nx, ny):
    out = np.zeros((nx, ny))
    n = weights.shape[0]
    for i in nb.prange(nx):
        for s in range(n):
            off = i - lo[s, 0]
            if off < 0 or off >= ln[s, 0]:
                continue
            a = weights[s] * prof[s, 0, off]
            j0 = lo[s, 1]
            for q in range(ln[s, 1]):
                out[i, j0 + q] += a * prof[s, 1, q]
    return out


@nb.njit(parallel=True, cache=True)
def _accumulate_4d(weights, lo, ln, prof, shape):
    out = np.zeros((shape[0], shape[1], shape[2], shape[3]))
    n = weights.shape[0]
    for i in nb.prange(shape[0]):
        for s in range(n):
            off = i - lo[s, 0]
            if off < 0 or off >= ln[s, 0]:
                continue
            a = weights[s] * prof[s, 0, off]
            for q1 in range(ln[s, 1]):
                b = a * prof[s, 1, q1]
                j = lo[s, 1] + q1
                for q2 in range(ln[s, 2]):
                    c = b * prof[s, 2, q2]
                    k = lo[s, 2] + q2
                    for q3 in range(ln[s, 3]):
                        out[i, j, k, lo[s, 3] + q3] += c * prof[s, 3, q3]
    return out


def kde(points, weights=None, spec: KdeSpec = KdeSpec()) -> DensityGrid:
    """Gaussian KDE on a grid over ``R^2`` or ``R^4``.

    Without weights each sample carries ``1/n`` and the result is a probability
    grid; explicit (possibly signed) weights are used as given.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("kde needs a non-empty (n, d) sample array")
    n, d = pts.shape
    if n < 2:
        raise ValueError("kde needs at least 2 samples")
    if d not in (2, 4):
        raise ValueError("kde supports 2 or 4 dimensions")
    if weights is None:
        w = np.full(n, 1.0 / n)
        kind = "probability"
    else:
        w = np.ascontiguousarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError("weights must have one entry per sample")
        kind = "signed"
    h, geom = _resolve(pts, spec)
    lo, ln, prof = _profiles(pts, np.asarray(geom.origin, dtype=np.float64),
                             np.asarray(geom.spacing, dtype=np.float64),
                             np.asarray(geom.shape, dtype=np.int64), h, KDE_CUTOFF)
    if d == 2:
        vals = _accumulate_2d(w, lo, ln, prof, geom.shape[0], geom.shape[1])
    else:
        vals = _accumulate_4d(w, lo, ln, prof, np.asarray(geom.shape, dtype=np.int64))
    return DensityGrid(geom, vals, kind, tuple(float(x) for x in h))


# -- functionals --------------------------------------------------------------

def entropy_H(f: DensityGrid, floor: float = ENTROPY_FLOOR) -> float:
    """Normalized Boltzmann entropy ``(1/N) int f log f`` by cell quadrature."""
    f.check_probability()
    v = f.values[f.values > floor]
    return float(np.sum(v * np.log(v)) * f.geometry.cell_volume / f.n_particles)


@dataclass(frozen=True)
class FisherEstimate:
    value: float
    excluded_mass: float
    threshold: float


def fisher_I(f: DensityGrid, rel_threshold: float = FISHER_REL_THRESHOLD,
             full_output: bool = False):
    """Normalized Fisher information ``(1/N) int |grad f|^2 / f``.

    Gradients are second-order centered differences (one-sided at the grid
    edge); cells with ``f <= rel_threshold * max f`` are excluded and their mass
    is reported with ``full_output=True``.
    """
    f.check_probability()
    g = f.geometry
    grads = np.gradient(f.values, *g.spacing, edge_order=2)
    if g.ndim == 1:
        grads = [grads]
    tau = rel_threshold * float(f.values.max())
    mask = f.values > tau
    num = sum(gr[mask] ** 2 for gr in grads)
    value = float(np.sum(num / f.values[mask]) * g.cell_volume / f.n_particles)
    if not full_output:
        return value
    excluded = float(f.values[~mask].sum() * g.cell_volume)
    return FisherEstimate(value, excluded, tau)


def lp_norm(f: DensityGrid, p: float) -> float:
    """``(int |f|^p)^(1/p)`` by cell quadrature; ``p = inf`` gives the maximum."""
    if not p >= 1:
        raise ValueError("p must be in [1, inf]")
    a = np.abs(f.values)
    if np.isinf(p):
        return float(a.max())
    return float((np.sum(a**p) * f.geometry.cell_volume) ** (1.0 / p))


@dataclass
class PartialFunctionals:
    """Circulation-conditioned entropy and Fisher information."""

    Ht: float
    It: float
    groups: list = field(default_factory=list)
    flagged: list = field(default_factory=list)


def partial_functionals(circulations, positions, spec: KdeSpec = KdeSpec(),
                        rel_threshold: float = FISHER_REL_THRESHOLD) -> PartialFunctionals:
    """``sum_j r_j H(f^j)`` and ``sum_j r_j I(f^j)`` over the distinct circulation values.

    ``r_j`` are empirical frequencies among the groups kept; groups with fewer
    than two samples are dropped and listed in ``flagged``.
    """
    m = np.asarray(circulations, dtype=np.float64)
    x = np.asarray(positions, dtype=np.float64)
    values, inverse, counts = np.unique(m, return_inverse=True, return_counts=True)
    keep = counts >= 2
    flagged = [{"m": float(v), "count": int(c)} for v, c, k in zip(values, counts, keep) if not k]
    if not keep.any():
        raise ValueError("no circulation group has at least 2 samples")
    total = counts[keep].sum()
    Ht = It = 0.0
    groups = []
    for g, (v, c) in enumerate(zip(values, counts)):
        if not keep[g]:
            continue
        f = kde(x[inverse == g], None, spec)
        h = entropy_H(f)
        fi = fisher_I(f, rel_threshold, full_output=True)
        r = c / total
        Ht += r * h
        It += r * fi.value
        groups.append({"m": float(v), "weight": float(r), "H": h, "I": fi.value,
                       "excluded_mass": fi.excluded_mass, "bandwidth": list(f.bandwidth)})
    return PartialFunctionals(float(Ht), float(It), groups, flagged)


@dataclass(frozen=True)
class NegMoment:
    value: float
    stderr: float
    n_pairs: int
    n_coincident: int


def neg_distance_moment(ensemble: VortexEnsemble | np.ndarray, gamma: float,
                        max_pairs: int = 1_000_000, seed: int = 0,
                        coincident: float = 1e-14) -> NegMoment:
    """Mean of ``|X_i - X_j|^(-gamma)`` over unordered pairs.

    All pairs are used when there are at most ``max_pairs``; otherwise
    ``max_pairs`` pairs are drawn uniformly with replacement. Pairs closer than
    ``coincident`` are excluded and counted. The standard error treats pairs as
    independent.
    """
    if not 0 < gamma < 2:
        raise ValueError("gamma must lie in (0, 2)")
    x = ensemble.positions if isinstance(ensemble, VortexEnsemble) else np.asarray(ensemble)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two vortices")
    total = n * (n - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(n, 1)
    else:
        rng = rng_stream(seed, STREAM_PAIRS)
        i = rng.integers(0, n, max_pairs)
        j = rng.integers(0, n - 1, max_pairs)
        j = j + (j >= i)
    d = np.sqrt(np.sum((x[i] - x[j]) ** 2, axis=1))
    ok = d >= coincident
    vals = d[ok] ** (-gamma)
    k = vals.size
    if k == 0:
        return NegMoment(math.nan, math.nan, 0, int((~ok).sum()))
    se = float(vals.std(ddof=1) / math.sqrt(k)) if k > 1 else math.nan
    return NegMoment(float(vals.mean()), se, int(k), int((~ok).sum()))


# -- closed forms and exact grids ------------------------------------------------

def gaussian_entropy(variance: float) -> float:
    """``-log(2 pi e variance)``: planar isotropic Gaussian, or any product of them
    under the per-factor normalization."""
    return -math.log(2 * math.pi * math.e * variance)


def gaussian_fisher(variance: float) -> float:
    """``2 / variance``, with the same normalization convention as :func:`gaussian_entropy`."""
    return 2.0 / variance


def gaussian_l2(variance: float) -> float:
    """``||f||_2`` of the planar Gaussian: ``1 / (2 sqrt(pi variance))``."""
    return 1.0 / (2.0 * math.sqrt(math.pi * variance))


def gaussian_grid(variance: float, geometry: GridGeometry, mean=None) -> DensityGrid:
    """Exact isotropic Gaussian density sampled at the nodes (any even dimension)."""
    d = geometry.ndim
    mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
    X = geometry.mesh()
    r2 = sum((X[a] - mean[a]) ** 2 for a in range(d))
    vals = np.exp(-r2 / (2 * variance)) / (2 * math.pi * variance) ** (d / 2)
    return DensityGrid(geometry, vals)


def centered_geometry(half_width: float, n: int, dim: int = 2) -> GridGeometry:
    return GridGeometry.from_bounds([(-half_width, half_width)] * dim, (n,) * dim)


def gaussian_Mk(variance: float, k: float) -> float:
    """``E (1 + |X|^2)^(k/2)`` for a planar Gaussian; ``|X|^2 / (2 variance)`` is Exp(1)."""
    val, _ = integrate.quad(lambda e: (1 + 2 * variance * e) ** (k / 2) * math.exp(-e), 0, np.inf)
    return val


def gaussian_entropy_moment_constant(k: float, lam: float) -> tuple[float, float]:
    """``-min_s [H + lam M_k]`` over isotropic Gaussians, with the minimizing variance.

    Within this family, ``H + lam M_k + C >= 0`` holds with the returned ``C``.
    """
    def objective(log_s2):
        s2 = math.exp(log_s2)
        return gaussian_entropy(s2) + lam * gaussian_Mk(s2, k)

    res = optimize.minimize_scalar(objective, bounds=(-20, 40), method="bounded",
                                   options={"xatol": 1e-10})
    return float(-res.fun), float(math.exp(res.x))


def lp_fisher_ratio(f: DensityGrid, p: float) -> float:
    """``||f||_p / I(f)^(1 - 1/p)``, the empirical constant of the Fisher-to-Lp bound."""
    return lp_norm(f, p) / fisher_I(f) ** (1 - 1 / p)
