"""Observables of the mean-field limit measured on particle runs.

Empirical and typical vorticities, two-particle chaos defects, the entropy
balance of mean-field runs and the path functional ``F_eps(Q^N)`` whose second
moment decays like ``1/N``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .core import (FunctionalReport, GridGeometry, VortexEnsemble, VorticityField, moment_Mk,
                   pairwise_min_distance, rng_stream)
from .estimators import (KdeSpec, DensityGrid, entropy_H, fisher_I, kde, lp_norm,
                         neg_distance_moment, partial_functionals)
from .kernels import KernelSpec
from .nbody import direct_drift
from .sde import TrajectoryStore, brownian_increment

log = logging.getLogger(__name__)

STREAM_BOOTSTRAP = 4
MAX_AXIS_4D = 32


def empirical_vorticity(ensemble: VortexEnsemble, spec: KdeSpec = KdeSpec()) -> DensityGrid:
    """Signed KDE of ``(1/N) sum_i M_i delta_{X_i}``."""
    return kde(ensemble.positions, ensemble.circulations / ensemble.n, spec)


def _pair_points(replicas: Sequence[VortexEnsemble], all_disjoint: bool):
    """4D points ``(X_a, X_b)`` and weights ``M_a M_b``; pairs (1,2) or every (2k-1, 2k)."""
    pts, wts = [], []
    for r in replicas:
        n = r.n if all_disjoint else 2
        n -= n % 2
        x, m = r.positions[:n], r.circulations[:n]
        pts.append(np.hstack([x[0::2], x[1::2]]))
        wts.append(m[0::2] * m[1::2])
    return np.vstack(pts), np.concatenate(wts)


def _capped(spec: KdeSpec, dim: int) -> KdeSpec:
    shape = (spec.shape,) * dim if np.isscalar(spec.shape) else tuple(spec.shape)
    if dim == 4:
        shape = tuple(min(s, MAX_AXIS_4D) for s in shape)
    return KdeSpec(spec.bandwidth, shape, spec.geometry, spec.margin)


def typical_vorticity(replicas: Sequence[VortexEnsemble], j: int,
                      spec: KdeSpec = KdeSpec()) -> DensityGrid:
    """Signed ``j``-particle marginal ``int m_1 .. m_j G^N`` from independent replicas.

    ``j = 1`` pools every vortex of every replica, weighted by its circulation.
    ``j = 2`` uses the index pair (1, 2) of each replica on a 4D grid of at
    most 32 nodes per axis.
    """
    if j not in (1, 2):
        raise ValueError("j must be 1 or 2")
    if len(replicas) < 2:
        raise ValueError("typical vorticity needs at least 2 replicas")
    if j == 1:
        x = np.vstack([r.positions for r in replicas])
        m = np.concatenate([r.circulations for r in replicas])
        return kde(x, m / m.size, spec)
    if len(replicas) < 50:
        log.warning("j=2 typical vorticity from only %d replicas", len(replicas))
    pts, w = _pair_points(replicas, all_disjoint=False)
    return kde(pts, w / w.size, _capped(spec, 4))


@dataclass
class ChaosReport:
    time: float
    l1_empirical_vs_pde: float
    chaos_defect_2: float
    cov_test: float
    n_replicas: int
    cov_stderr: float = math.nan
    n_pairs: int = 0
    l1_per_replica: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"time": self.time, "l1_empirical_vs_pde": self.l1_empirical_vs_pde,
                "chaos_defect_2": self.chaos_defect_2, "cov_test": self.cov_test,
                "cov_stderr": self.cov_stderr, "n_replicas": self.n_replicas,
                "n_pairs": self.n_pairs, "l1_per_replica": self.l1_per_replica}


def gaussian_test_function(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.sum(x**2, axis=-1))


def _pair_grid_spec(pairs: np.ndarray, spec: KdeSpec) -> KdeSpec:
    """One isotropic bandwidth and a grid whose two planar factors coincide."""
    planar = np.vstack([pairs[:, :2], pairs[:, 2:]])
    n, d = pairs.shape
    if spec.bandwidth == "silverman":
        sd = float(planar.std(axis=0, ddof=1).mean())
        h = (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4)) * sd
        h = h if h > 0 else 1.0
    else:
        h = float(spec.bandwidth)
    if spec.geometry is not None:
        g = spec.geometry
        if g.ndim != 4 or g.origin[:2] != g.origin[2:] or g.spacing[:2] != g.spacing[2:] \
                or g.shape[:2] != g.shape[2:]:
            raise ValueError("pair grid must be a product of two identical planar grids")
        return KdeSpec(h, geometry=g)
    lo = float((planar.min(axis=0) - spec.margin * h).min())
    hi = float((planar.max(axis=0) + spec.margin * h).max())
    shape = spec.shape if np.isscalar(spec.shape) else spec.shape[0]
    shape = min(int(shape), MAX_AXIS_4D)
    return KdeSpec(h, geometry=GridGeometry.from_bounds([(lo, hi)] * 4, (shape,) * 4))


def chaos_defect_2(pairs: np.ndarray, spec: KdeSpec = KdeSpec(shape=24)) -> float:
    """``L1`` distance between the KDE of ``(x1, y1, x2, y2)`` pairs and the
    square of its pooled one-particle marginal.

    Both estimates share one isotropic bandwidth and the same planar axes, so
    for a product law the two smoothings agree.
    """
    pspec = _pair_grid_spec(np.asarray(pairs, dtype=float), spec)
    f2 = kde(pairs, None, pspec)
    g = f2.geometry
    planar = np.vstack([pairs[:, :2], pairs[:, 2:]])
    f1 = kde(planar, None, KdeSpec(pspec.bandwidth,
                                   geometry=GridGeometry(g.origin[:2], g.spacing[:2], g.shape[:2])))
    prod = f1.values[:, :, None, None] * f1.values[None, None, :, :]
    return float(np.abs(f2.values - prod).sum() * g.cell_volume)


def chaos_metrics(replicas: Sequence[VortexEnsemble], pde_field: VorticityField,
                  spec: KdeSpec = KdeSpec(), pair_spec: KdeSpec = KdeSpec(shape=24),
                  phi: Callable[[np.ndarray], np.ndarray] = gaussian_test_function) -> ChaosReport:
    """Distance to the limit and two-particle factorization defects at one time.

    ``l1_empirical_vs_pde`` is the replica mean of ``||W^N - w||_1`` on the
    field's grid. The pair statistics use the disjoint index pairs
    ``(2k-1, 2k)`` of every replica, pooled.
    """
    if not replicas:
        raise ValueError("no replicas")
    t = replicas[0].time
    if any(abs(r.time - t) > 1e-9 for r in replicas):
        raise ValueError("replicas are not at a common time")
    if abs(pde_field.time - t) > 1e-9 * max(1.0, t):
        raise ValueError(f"field time {pde_field.time} differs from replica time {t}")
    geom = pde_field.geometry
    if spec.geometry is not None and spec.geometry != geom:
        raise ValueError("KDE grid does not match the field grid")
    espec = KdeSpec(spec.bandwidth, spec.shape, geom, spec.margin)
    l1s = []
    for r in replicas:
        w_hat = empirical_vorticity(r, espec)
        l1s.append(float(np.abs(w_hat.values - pde_field.values).sum() * geom.cell_volume))
    pairs, _ = _pair_points(replicas, all_disjoint=True)
    a = phi(pairs[:, :2])
    b = phi(pairs[:, 2:])
    prod = (a - a.mean()) * (b - b.mean())
    cov = float(prod.mean())
    cov_se = float(prod.std(ddof=1) / math.sqrt(len(prod))) if len(prod) > 1 else math.nan
    return ChaosReport(t, float(np.mean(l1s)), chaos_defect_2(pairs, pair_spec), abs(cov),
                       len(replicas), cov_se, len(pairs), l1s)


# -- entropy balance ------------------------------------------------------------------

@dataclass
class BalanceReport:
    times: list
    H_path: list
    I_path: list
    residual: float
    residual_path: list
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"times": self.times, "H_path": self.H_path, "I_path": self.I_path,
                "residual": self.residual, "residual_path": self.residual_path, "meta": self.meta}


def entropy_balance(store: TrajectoryStore, nu: float, spec: KdeSpec = KdeSpec(shape=256)) -> BalanceReport:
    """``H(g_t) + nu int_0^t I(g_s) ds - H(g_0)`` along the checkpoints of a run.

    Partial (circulation-conditioned) functionals are used throughout; with a
    single circulation value they reduce to the plain ones. The time integral
    is the trapezoid rule on the checkpoints; ``residual`` is the largest
    absolute value along the path. ``nu = 0`` skips the Fisher information.
    """
    if len(store.snapshots) < 3:
        raise ValueError("entropy balance needs at least 3 checkpoints")
    times, Hs, Is = [], [], []
    for s in store.snapshots:
        if nu > 0:
            pf = partial_functionals(s.circulations, s.positions, spec)
            Hs.append(pf.Ht)
            Is.append(pf.It)
        else:
            Hs.append(_partial_entropy(s, spec))
            Is.append(math.nan)
        times.append(s.time)
    res = [0.0]
    acc = 0.0
    for k in range(1, len(times)):
        if nu > 0:
            acc += 0.5 * (Is[k] + Is[k - 1]) * (times[k] - times[k - 1])
        res.append(Hs[k] + nu * acc - Hs[0])
    return BalanceReport(times, Hs, Is, float(np.max(np.abs(res))), res,
                         {"nu": nu, "kde": spec.describe()})


def _partial_entropy(s: VortexEnsemble, spec: KdeSpec) -> float:
    values, inverse, counts = np.unique(s.circulations, return_inverse=True, return_counts=True)
    keep = counts >= 2
    tot = counts[keep].sum()
    return float(sum(c / tot * entropy_H(kde(s.positions[inverse == g], None, spec))
                     for g, c in enumerate(counts) if keep[g]))


# -- martingale functional --------------------------------------------------------------

CATALOGUE_VERSION = 1


def _gauss(params):
    c = np.asarray(params.get("center", (0.0, 0.0)), dtype=float)
    ell2 = float(params.get("scale", 1.0)) ** 2

    def val(x):
        return np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * ell2))

    def grad(x):
        return -(x - c) / ell2 * val(x)[..., None]

    def lap(x):
        r2 = np.sum((x - c) ** 2, axis=-1)
        return (r2 / ell2**2 - 2 / ell2) * val(x)

    return val, grad, lap


def _trig(params):
    k = float(params.get("wavenumber", 1.0))

    def val(x):
        return np.sin(k * x[..., 0]) * np.cos(k * x[..., 1])

    def grad(x):
        return k * np.stack([np.cos(k * x[..., 0]) * np.cos(k * x[..., 1]),
                             -np.sin(k * x[..., 0]) * np.sin(k * x[..., 1])], axis=-1)

    def lap(x):
        return -2 * k * k * val(x)

    return val, grad, lap


def _one(params):
    return (lambda x: np.ones(x.shape[:-1]), lambda x: np.zeros(x.shape),
            lambda x: np.zeros(x.shape[:-1]))


TEST_FUNCTIONS = {"gauss": _gauss, "trig": _trig, "one": _one}
PSI_FUNCTIONS = {"one": lambda m: np.ones_like(m), "tanh": np.tanh}


@dataclass(frozen=True)
class MartingaleTest:
    """Test data ``psi, phi_1..phi_k, phi`` and times ``t_1 < .. < t_k < s < t``.

    Functions are named entries of the versioned catalogue, each given as
    ``(name, params)``.
    """

    marks: tuple = ()
    mark_times: tuple = ()
    phi: tuple = ("gauss", {"scale": 1.0})
    s: float = 0.0
    t: float = 1.0
    psi: str = "one"

    def __post_init__(self):
        if len(self.marks) != len(self.mark_times):
            raise ValueError("one mark time per mark function")
        times = list(self.mark_times) + [self.s, self.t]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("times must satisfy t_1 < .. < t_k < s < t")
        for name, _ in list(self.marks) + [self.phi]:
            if name not in TEST_FUNCTIONS:
                raise ValueError(f"unknown test function {name!r}")
        if self.psi not in PSI_FUNCTIONS:
            raise ValueError(f"unknown circulation test function {self.psi!r}")

    def to_dict(self) -> dict:
        return {"version": CATALOGUE_VERSION, "marks": [list(m) for m in self.marks],
                "mark_times": list(self.mark_times), "phi": list(self.phi), "s": self.s,
                "t": self.t, "psi": self.psi}


def _checkpoint_index(store: TrajectoryStore, t: float) -> int:
    times = np.asarray(store.times)
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"no checkpoint at required time {t}")
    return k


def _weights(store: TrajectoryStore, test: MartingaleTest) -> np.ndarray:
    first = store.snapshots[0]
    w = PSI_FUNCTIONS[test.psi](first.circulations).astype(float)
    for (name, params), tk in zip(test.marks, test.mark_times):
        val, _, _ = TEST_FUNCTIONS[name](params)
        w = w * val(store.snapshots[_checkpoint_index(store, tk)].positions)
    return w


def martingale_residual(store: TrajectoryStore, epsilon: float, test: MartingaleTest,
                        nu: float | None = None, interaction: bool = True) -> float:
    """``F_eps(Q^N)`` for the empirical path measure of one run.

    ``F = (1/N) sum_i psi(M_i) prod_k phi_k(X_i(t_k)) [phi(X_i(t)) - phi(X_i(s))
    - int_s^t b_i . grad phi(X_i) du - nu int_s^t lap phi(X_i) du]`` with
    ``b_i = (1/N) sum_j M_j K_eps(X_i - X_j)`` (``K_eps(0) = 0``). Time integrals
    use the trapezoid rule on every checkpoint in ``[s, t]``.
    ``interaction=False`` drops the kernel term, matching drift-free runs.
    ``nu`` defaults to ``sigma^2 / 2`` from the store metadata.
    """
    if nu is None:
        nu = 0.5 * float(store.meta["sigma"]) ** 2
    i_s = _checkpoint_index(store, test.s)
    i_t = _checkpoint_index(store, test.t)
    w = _weights(store, test)
    val, grad, lap = TEST_FUNCTIONS[test.phi[0]](test.phi[1])
    kspec = KernelSpec.from_epsilon(epsilon)
    integrand = []
    for snap in store.snapshots[i_s:i_t + 1]:
        x = snap.positions
        g = nu * lap(x)
        if interaction:
            g = g + np.einsum("ij,ij->i", direct_drift(snap, kspec), grad(x))
        integrand.append(g)
    times = np.asarray(store.times[i_s:i_t + 1])
    integral = integrate.trapezoid(np.asarray(integrand), times, axis=0)
    inc = val(store.snapshots[i_t].positions) - val(store.snapshots[i_s].positions) - integral
    return float(np.mean(w * inc))


def ito_reduced_residual(store: TrajectoryStore, test: MartingaleTest) -> float:
    """``(sigma/N) sum_i psi prod phi_k sum_n grad phi(X_i(t_n)) . dB_i^n`` over ``[s, t]``.

    Rebuilds the Brownian increments from the run's noise streams, so every
    step between ``s`` and ``t`` must be checkpointed.
    """
    sigma = float(store.meta["sigma"])
    i_s = _checkpoint_index(store, test.s)
    i_t = _checkpoint_index(store, test.t)
    w = _weights(store, test)
    _, grad, _ = TEST_FUNCTIONS[test.phi[0]](test.phi[1])
    total = np.zeros(store.snapshots[0].n)
    for a, b in zip(store.snapshots[i_s:i_t], store.snapshots[i_s + 1:i_t + 1]):
        if b.step != a.step + 1:
            raise ValueError("every step in [s, t] must be checkpointed")
        dB = brownian_increment(a.seed, a.step, a.n, b.time - a.time)
        total += np.einsum("ij,ij->i", grad(a.positions), dB)
    return float(sigma * np.mean(w * total))


# -- reports and fits ---------------------------------------------------------------

def functional_report(ensemble: VortexEnsemble, spec: KdeSpec = KdeSpec(), k: float = 1.0,
                      gammas: Sequence[float] = (0.5, 1.0, 1.5), ps=(1, 2, 4, np.inf),
                      max_pairs: int = 200_000, seed: int = 0) -> FunctionalReport:
    """Entropy, Fisher information, moments, norms and encounter statistics at one time.

    ``H`` and ``I`` refer to the position density; ``lp_norms`` to the
    empirical vorticity estimate.
    """
    f = kde(ensemble.positions, None, spec)
    fi = fisher_I(f, full_output=True)
    pf = partial_functionals(ensemble.circulations, ensemble.positions, spec)
    w = empirical_vorticity(ensemble, spec)
    lps = {("inf" if np.isinf(p) else str(p)): lp_norm(w, p) for p in ps}
    negs = {str(g): neg_distance_moment(ensemble, g, max_pairs, seed).value for g in gammas}
    return FunctionalReport(ensemble.time, entropy_H(f), fi.value, pf.Ht, pf.It,
                            moment_Mk(ensemble, k), lps, pairwise_min_distance(ensemble.positions),
                            negs, {"bandwidth": list(f.bandwidth), "excluded_mass": fi.excluded_mass,
                                   "entropy_floor": 1e-300, "fisher_threshold": fi.threshold,
                                   "flagged_groups": pf.flagged})


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    ci_low: float
    ci_high: float
    intercept: float


def fit_variance_slope(samples: dict, n_boot: int = 2000, seed: int = 0,
                       level: float = 0.95) -> SlopeFit:
    """Least-squares slope of ``log Var`` against ``log N`` with a percentile bootstrap CI.

    ``samples`` maps ``N`` to the values observed across seeds; the bootstrap
    resamples seeds independently within each ``N``.
    """
    ns = sorted(samples)
    x = np.log(np.asarray(ns, dtype=float))
    data = [np.asarray(samples[n], dtype=float) for n in ns]
    y = np.log([d.var(ddof=1) for d in data])
    slope, intercept = np.polyfit(x, y, 1)
    rng = rng_stream(seed, STREAM_BOOTSTRAP)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        yb = [np.log(d[rng.integers(0, d.size, d.size)].var(ddof=1)) for d in data]
        boots[b] = np.polyfit(x, yb, 1)[0]
    lo, hi = np.quantile(boots, [(1 - level) / 2, (1 + level) / 2])
    return SlopeFit(float(slope), float(lo), float(hi), float(intercept))
