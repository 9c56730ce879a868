"""Time integration of the vortex system and of its mean-field limit.

Interacting mode advances ``X_i <- X_i + b_i dt + sigma sqrt(dt) xi_i`` with
``b`` the pairwise Biot-Savart drift. Mean-field mode moves independent
copies in a prescribed velocity field (the PDE solution's ``K * w``).

The Gaussian increment of step ``n`` is regenerated from
``rng_stream(seed, STREAM_NOISE, n)``, one ``(N, 2)`` block in particle order,
so runs are reproducible and path increments need not be stored.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (CirculationLaw, SimConfig, VortexEnsemble, VorticityField, STREAM_NOISE,
                   read_snapshot, rng_stream, sample_ensemble, snap_indices, time_grid,
                   write_snapshot)
from .kernels import DriftField, KernelSpec, drift_from_field, sample_drift
from .nbody import _direct_arrays, drift_arrays

log = logging.getLogger(__name__)

SCHEMES = ("euler_maruyama", "srk_heun")
BACKENDS = ("direct", "tree", "none")


class IntegrationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class IntegratorSpec:
    scheme: str = "euler_maruyama"
    dt: float = 1e-3
    drift_backend: str = "direct"
    theta: float = 0.5
    order_p: int = 8
    kernel: KernelSpec = KernelSpec()
    clamp_step: float | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.drift_backend not in BACKENDS:
            raise ValueError(f"unknown drift backend {self.drift_backend!r}")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.clamp_step is not None and not self.clamp_step > 0:
            raise ValueError("clamp_step must be > 0 when set")

    @classmethod
    def from_config(cls, config: SimConfig, **kw) -> "IntegratorSpec":
        return cls(dt=config.dt, kernel=KernelSpec.from_epsilon(config.epsilon), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = asdict(self.kernel)
        return d


@dataclass
class ClampLog:
    """Clamp events as ``(step, number of clamped vortices)`` pairs."""

    events: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(c for _, c in self.events)


def brownian_increment(seed: int, step: int, n: int, dt: float) -> np.ndarray:
    """The ``(n, 2)`` Brownian increment used by step ``step`` of a run seeded ``seed``."""
    return math.sqrt(dt) * rng_stream(seed, STREAM_NOISE, step).standard_normal((n, 2))


def _clamp(disp: np.ndarray, limit: float | None):
    if limit is None:
        return disp, 0
    norm = np.sqrt(np.einsum("ij,ij->i", disp, disp))
    over = norm > limit
    if not over.any():
        return disp, 0
    disp = disp.copy()
    disp[over] *= (limit / norm[over])[:, None]
    return disp, int(over.sum())


def _drift_fn(m, spec: IntegratorSpec):
    """Drift evaluator ``pos -> b`` for fixed circulations."""
    if spec.drift_backend == "direct":
        targets = np.arange(len(m), dtype=np.int64)
        eps = spec.kernel.eps
        return lambda x: _direct_arrays(x, m, targets, eps)
    return lambda x: drift_arrays(x, m, spec.kernel, spec.drift_backend, spec.theta, spec.order_p)


def _advance(pos, drift, spec: IntegratorSpec, sigma, dt, seed, step, clamp_log):
    b = drift(pos)
    if sigma > 0:
        noise = sigma * brownian_increment(seed, step, len(pos), dt)
        if spec.scheme == "srk_heun":
            b = 0.5 * (b + drift(pos + b * dt + noise))
        disp = b * dt
    else:
        if spec.scheme == "srk_heun":
            b = 0.5 * (b + drift(pos + b * dt))
        disp = b * dt
        noise = None
    if spec.clamp_step is not None:
        disp, clamped = _clamp(disp, spec.clamp_step)
        if clamped and clamp_log is not None:
            clamp_log.events.append((step, clamped))
            log.info("step %d: clamped drift of %d vortices", step, clamped)
    new = pos + disp if noise is None else pos + disp + noise
    if not np.isfinite(new.sum()):
        raise IntegrationError(f"non-finite vortex positions after step {step}")
    return new


def step_interacting(ensemble: VortexEnsemble, spec: IntegratorSpec, sigma: float,
                     dt: float | None = None, clamp_log: ClampLog | None = None) -> VortexEnsemble:
    """One step of the interacting system; circulations are carried over unchanged."""
    dt = spec.dt if dt is None else dt
    drift = _drift_fn(ensemble.circulations, spec)
    new = _advance(ensemble.positions, drift, spec, sigma, dt,
                   ensemble.seed, ensemble.step, clamp_log)
    return VortexEnsemble(ensemble.circulations, new, ensemble.time + dt, ensemble.seed,
                          ensemble.step + 1)


@dataclass
class TrajectoryStore:
    """Ensemble snapshots at strictly increasing checkpoint times."""

    snapshots: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = self.times
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("checkpoint times must be strictly increasing")
        if self.snapshots:
            m0 = self.snapshots[0].circulations
            if any(not np.array_equal(s.circulations, m0) for s in self.snapshots[1:]):
                raise ValueError("circulations differ between checkpoints")

    @property
    def times(self) -> list[float]:
        return [s.time for s in self.snapshots]

    def at(self, t: float, tol: float = 1e-9) -> VortexEnsemble:
        for s in self.snapshots:
            if abs(s.time - t) <= tol * max(1.0, abs(t)):
                return s
        raise KeyError(f"no checkpoint at t={t}")

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = dict(self.meta, times=self.times, files=[])
        for k, s in enumerate(self.snapshots):
            name = f"snapshot_{k:04d}.csv"
            write_snapshot(d / name, s, self.meta.get("sigma", 0.0), self.meta.get("epsilon", 0.0))
            meta["files"].append(name)
        (d / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "TrajectoryStore":
        d = Path(directory)
        meta = json.loads((d / "metadata.json").read_text())
        snaps = [read_snapshot(d / f)[0] for f in meta.pop("files")]
        meta.pop("times", None)
        return cls(snaps, meta)


def _check_bound(g0: CirculationLaw, config: SimConfig):
    if g0.bound > config.circulation_bound_A * (1 + 1e-12):
        raise ValueError(f"circulation {g0.bound} exceeds the bound A = {config.circulation_bound_A}")


def run_interacting(g0: CirculationLaw, config: SimConfig, spec: IntegratorSpec | None = None,
                    initial: VortexEnsemble | None = None) -> TrajectoryStore:
    """Sample ``N`` vortices from ``g0`` (or start from ``initial``) and integrate to ``t_end``."""
    _check_bound(g0, config)
    spec = IntegratorSpec.from_config(config) if spec is None else spec
    if abs(spec.dt - config.dt) > 1e-15:
        raise ValueError("integrator dt differs from the configuration dt")
    ens = sample_ensemble(g0, config.n_particles, config.seed) if initial is None else initial
    grid = time_grid(config.t_end, config.dt)
    save_idx = set(snap_indices(config.save_times, grid))
    clamp_log = ClampLog()
    pos, m = ens.positions, ens.circulations
    drift = _drift_fn(m, spec)
    snaps = [ens] if 0 in save_idx else []
    for n in range(1, len(grid)):
        pos = _advance(pos, drift, spec, config.sigma, grid[n] - grid[n - 1], ens.seed, n - 1, clamp_log)
        if n in save_idx:
            snaps.append(VortexEnsemble(m, pos.copy(), float(grid[n]), ens.seed, n))
    meta = {"mode": "interacting", "config": config.to_dict(), "integrator": spec.to_dict(),
            "sigma": config.sigma, "epsilon": spec.kernel.eps, "seed": ens.seed,
            "clamp_events": clamp_log.total, "law": g0.describe()}
    if clamp_log.total:
        log.warning("%d drift clamp events during the run", clamp_log.total)
    return TrajectoryStore(snaps, meta)


class _FieldPath:
    """Piecewise-linear-in-time velocity from a sequence of vorticity fields."""

    def __init__(self, w_path: Sequence[VorticityField], normalization: str):
        self.times = np.array([w.time for w in w_path])
        if len(self.times) == 0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("w_path must be non-empty with strictly increasing times")
        self.fields: list[DriftField] = [drift_from_field(w, normalization) for w in w_path]

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), len(self.times) - 1)
        if k == len(self.times) - 1 or t <= self.times[k]:
            return sample_drift(self.fields[k], x)
        a = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (1 - a) * sample_drift(self.fields[k], x) + a * sample_drift(self.fields[k + 1], x)


def run_mean_field(g0: CirculationLaw, w_path: Sequence[VorticityField], config: SimConfig,
                   normalization: str = "paper_2pi_free", max_gap: float | None = None,
                   initial: VortexEnsemble | None = None) -> TrajectoryStore:
    """Euler-Maruyama for ``N`` independent copies driven by the velocity of ``w_path``.

    The path must cover ``[0, t_end]`` with consecutive fields at most
    ``max_gap`` apart (default ``10 dt``); it is interpolated linearly in time.
    """
    _check_bound(g0, config)
    max_gap = 10 * config.dt if max_gap is None else max_gap
    times = [w.time for w in w_path]
    tol = 1e-9 * max(1.0, config.t_end)
    if not times or times[0] > tol or times[-1] < config.t_end - tol:
        raise ValueError("w_path does not cover [0, t_end]")
    gaps = np.diff(times)
    if gaps.size and gaps.max() > max_gap + tol:
        raise ValueError(f"w_path gap {gaps.max()} exceeds tolerance {max_gap}")
    path = _FieldPath(w_path, normalization)
    ens = sample_ensemble(g0, config.n_particles, config.seed) if initial is None else initial
    grid = time_grid(config.t_end, config.dt)
    save_idx = set(snap_indices(config.save_times, grid))
    pos, m = ens.positions, ens.circulations
    snaps = [ens] if 0 in save_idx else []
    sigma = config.sigma
    for n in range(1, len(grid)):
        h = grid[n] - grid[n - 1]
        pos = pos + path(grid[n - 1], pos) * h
        if sigma > 0:
            pos = pos + sigma * brownian_increment(ens.seed, n - 1, len(m), h)
        if not np.all(np.isfinite(pos)):
            raise IntegrationError(f"non-finite positions after step {n - 1}")
        if n in save_idx:
            snaps.append(VortexEnsemble(m, pos.copy(), float(grid[n]), ens.seed, n))
    meta = {"mode": "mean_field", "config": config.to_dict(), "normalization": normalization,
            "sigma": sigma, "epsilon": config.epsilon, "seed": ens.seed, "law": g0.describe()}
    return TrajectoryStore(snaps, meta)


def kirchhoff_hamiltonian(ensemble: VortexEnsemble) -> float:
    """``-(1/N^2) sum_{i<j} M_i M_j log|X_i - X_j|``, conserved by the noiseless system."""
    x, m = ensemble.positions, ensemble.circulations
    n = len(m)
    iu = np.triu_indices(n, 1)
    d = np.linalg.norm(x[iu[0]] - x[iu[1]], axis=1)
    return float(-np.sum(m[iu[0]] * m[iu[1]] * np.log(d)) / n**2)


def center_of_vorticity(ensemble: VortexEnsemble) -> np.ndarray:
    return ensemble.circulations @ ensemble.positions
