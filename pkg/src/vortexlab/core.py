"""Domain types shared by every part of the laboratory.

Holds the run configuration, the vortex ensemble state, circulation laws
(the lifting of a signed vorticity into circulation/position pairs), grid
geometry, the periodic vorticity field type, seeded random streams and the
ensemble snapshot format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

# stream purposes, mixed into the seed sequence
STREAM_SAMPLE = 0
STREAM_NOISE = 1
STREAM_PAIRS = 2
STREAM_SYNTHETIC = 3


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-style random stream keyed by ``(seed, *keys)``.

    Streams with distinct keys are statistically independent, and the same
    key always reproduces the same stream, so callers can regenerate any
    block of draws (e.g. the noise of step ``n``) without replaying others.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one particle run. ``nu`` is always ``sigma**2 / 2``."""

    n_particles: int = 1000
    sigma: float = math.sqrt(0.2)
    moment_order_k: float = 1.0
    circulation_bound_A: float = 1.0
    dt: float = 1e-3
    t_end: float = 0.5
    epsilon: float | None = None
    seed: int = 0
    save_times: tuple[float, ...] | None = None
    nu: float = field(init=False)

    def __post_init__(self):
        if int(self.n_particles) != self.n_particles or self.n_particles < 1:
            raise ValueError(f"n_particles must be a positive integer, got {self.n_particles}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not (0 < self.moment_order_k <= 1):
            raise ValueError(f"moment_order_k must lie in (0, 1], got {self.moment_order_k}")
        if not self.circulation_bound_A > 0:
            raise ValueError(f"circulation_bound_A must be > 0, got {self.circulation_bound_A}")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not self.t_end >= 0:
            raise ValueError(f"t_end must be >= 0, got {self.t_end}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        object.__setattr__(self, "n_particles", int(self.n_particles))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "nu", 0.5 * self.sigma**2)
        if self.epsilon is None:
            # keeps the per-step drift displacement below the noise scale
            object.__setattr__(self, "epsilon", 10.0 * math.sqrt(self.dt) * self.sigma)
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.save_times is None:
            times = (0.0, float(self.t_end)) if self.t_end > 0 else (0.0,)
        else:
            times = tuple(float(t) for t in self.save_times)
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("save_times must be strictly increasing")
        if times and (times[0] < 0 or times[-1] > self.t_end + 1e-12):
            raise ValueError(f"save_times must lie in [0, {self.t_end}]")
        object.__setattr__(self, "save_times", times)

    def to_dict(self) -> dict:
        return {
            "n_particles": self.n_particles,
            "sigma": self.sigma,
            "nu": self.nu,
            "moment_order_k": self.moment_order_k,
            "circulation_bound_A": self.circulation_bound_A,
            "dt": self.dt,
            "t_end": self.t_end,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "save_times": list(self.save_times),
        }


@dataclass
class VortexEnsemble:
    """Circulations and planar positions of N point vortices at one time.

    ``seed`` and ``step`` locate the ensemble in its noise streams: the
    increment of step ``n`` is drawn from ``rng_stream(seed, STREAM_NOISE, n)``.
    """

    circulations: np.ndarray
    positions: np.ndarray
    time: float = 0.0
    seed: int = 0
    step: int = 0

    def __post_init__(self):
        self.circulations = np.ascontiguousarray(self.circulations, dtype=np.float64)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError(f"positions must have shape (N, 2), got {self.positions.shape}")
        if self.circulations.shape != (self.positions.shape[0],):
            raise ValueError("circulations and positions disagree on N")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite vortex position")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "VortexEnsemble":
        return VortexEnsemble(self.circulations.copy(), self.positions.copy(),
                              self.time, self.seed, self.step)


@dataclass
class FunctionalReport:
    """Estimated functionals of one ensemble at one time."""

    time: float
    entropy_H: float
    fisher_I: float
    partial_entropy_Ht: float
    partial_fisher_It: float
    moment_Mk: float
    lp_norms: dict
    min_pair_distance: float
    neg_moment_gamma: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"time": self.time, "entropy_H": self.entropy_H, "fisher_I": self.fisher_I,
                "partial_entropy_Ht": self.partial_entropy_Ht,
                "partial_fisher_It": self.partial_fisher_It, "moment_Mk": self.moment_Mk,
                "lp_norms": self.lp_norms, "min_pair_distance": self.min_pair_distance,
                "neg_moment_gamma": self.neg_moment_gamma, "meta": self.meta}

    def is_finite(self) -> bool:
        vals = [self.entropy_H, self.fisher_I, self.partial_entropy_Ht, self.partial_fisher_It,
                self.moment_Mk, *self.lp_norms.values(), *self.neg_moment_gamma.values()]
        return bool(np.all(np.isfinite(vals)))


@dataclass(frozen=True)
class GridGeometry:
    """Regular node grid: node ``idx`` sits at ``origin + idx * spacing``."""

    origin: tuple[float, ...]
    spacing: tuple[float, ...]
    shape: tuple[int, ...]

    @classmethod
    def from_bounds(cls, bounds, shape) -> "GridGeometry":
        """Endpoint-inclusive grid spanning ``bounds = [(lo, hi), ...]``."""
        shape = tuple(int(n) for n in shape)
        origin = tuple(float(lo) for lo, _ in bounds)
        spacing = tuple((float(hi) - float(lo)) / (n - 1) for (lo, hi), n in zip(bounds, shape))
        return cls(origin, spacing, shape)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis(self, d: int) -> np.ndarray:
        return self.origin[d] + self.spacing[d] * np.arange(self.shape[d])

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*(self.axis(d) for d in range(self.ndim)), indexing="ij")

    def upper(self, d: int) -> float:
        return self.origin[d] + self.spacing[d] * (self.shape[d] - 1)


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class VorticityField:
    """Vorticity sampled on an ``nx x ny`` node grid of the square torus of side L.

    ``values[i, j]`` is the vorticity at ``(origin[0] + i L/nx, origin[1] + j L/ny)``;
    the default origin centres the box on 0.
    """

    values: np.ndarray
    box_length: float
    time: float = 0.0
    origin: tuple[float, float] | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("vorticity values must be a 2D array")
        nx, ny = self.values.shape
        if not (_is_pow2(nx) and _is_pow2(ny)):
            raise ValueError(f"grid size must be powers of two, got {self.values.shape}")
        if not self.box_length > 0:
            raise ValueError("box_length must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite vorticity values")
        if self.origin is None:
            self.origin = (-0.5 * self.box_length, -0.5 * self.box_length)

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def geometry(self) -> GridGeometry:
        nx, ny = self.values.shape
        return GridGeometry(tuple(self.origin), (self.box_length / nx, self.box_length / ny), (nx, ny))

    def total(self) -> float:
        return float(self.values.sum() * self.geometry.cell_volume)

    @classmethod
    def from_function(cls, func, n, box_length, time=0.0) -> "VorticityField":
        nx, ny = (n, n) if np.isscalar(n) else n
        geom = GridGeometry((-0.5 * box_length,) * 2, (box_length / nx, box_length / ny), (nx, ny))
        X, Y = geom.mesh()
        return cls(func(X, Y), box_length, time)


# -- spatial densities ---------------------------------------------------------

@dataclass(frozen=True)
class GaussianDensity:
    """Isotropic planar Gaussian with per-component variance ``variance``."""

    variance: float
    mean: tuple[float, float] = (0.0, 0.0)

    tag = "gaussian"

    def pdf(self, x, y):
        s2 = self.variance
        r2 = (x - self.mean[0]) ** 2 + (y - self.mean[1]) ** 2
        return np.exp(-r2 / (2 * s2)) / (2 * np.pi * s2)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.asarray(self.mean) + math.sqrt(self.variance) * rng.standard_normal((n, 2))

    def describe(self) -> dict:
        return {"tag": self.tag, "variance": self.variance, "mean": list(self.mean)}


@dataclass(frozen=True)
class GridDensity:
    """Probability density given by node values on a planar grid.

    Sampling picks a node by inverse CDF on the flattened grid, then jitters
    uniformly inside that node's cell.
    """

    geometry: GridGeometry
    values: np.ndarray

    tag = "grid"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.shape != self.geometry.shape or v.ndim != 2:
            raise ValueError("grid density shape does not match its geometry")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("grid density must be finite and non-negative")
        mass = v.sum() * self.geometry.cell_volume
        if abs(mass - 1.0) > 1e-10:
            raise ValueError(f"grid density integrates to {mass!r}, not 1")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        w = self.values.ravel()
        cdf = np.cumsum(w)
        total = cdf[-1]
        if not total > 0:
            raise ValueError("cannot sample from an empty grid density")
        u = rng.random(n) * total
        flat = np.minimum(np.searchsorted(cdf, u, side="right"), w.size - 1)
        i, j = np.unravel_index(flat, self.values.shape)
        g = self.geometry
        jitter = rng.random((n, 2)) - 0.5
        x = g.origin[0] + (i + jitter[:, 0]) * g.spacing[0]
        y = g.origin[1] + (j + jitter[:, 1]) * g.spacing[1]
        return np.column_stack([x, y])

    def describe(self) -> dict:
        return {"tag": self.tag, "shape": list(self.geometry.shape),
                "origin": list(self.geometry.origin), "spacing": list(self.geometry.spacing)}


Density = Union[GaussianDensity, GridDensity]


@dataclass(frozen=True)
class GaussianVortex:
    """Analytic vorticity ``circulation * N(center, variance I)`` (a Lamb-Oseen profile)."""

    circulation: float = 1.0
    variance: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)

    def __call__(self, x, y):
        return self.circulation * GaussianDensity(self.variance, self.center).pdf(x, y)


@dataclass(frozen=True)
class Atom:
    m: float
    weight: float
    density: Density


@dataclass(frozen=True)
class CirculationLaw:
    """Finitely many circulation values, each with its own spatial density."""

    atoms: tuple[Atom, ...]

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        if not self.atoms:
            raise ValueError("a circulation law needs at least one atom")
        total = sum(a.weight for a in self.atoms)
        if abs(total - 1.0) > 1e-12 or any(a.weight < 0 for a in self.atoms):
            raise ValueError(f"atom weights must be non-negative and sum to 1, got {total!r}")

    @property
    def bound(self) -> float:
        return max(abs(a.m) for a in self.atoms)

    def vorticity_on(self, geometry: GridGeometry) -> np.ndarray:
        """Signed first moment ``sum_j r_j m_j f_j`` evaluated at the grid nodes."""
        out = np.zeros(geometry.shape)
        X = Y = None
        for a in self.atoms:
            if isinstance(a.density, GridDensity):
                if a.density.geometry != geometry:
                    raise ValueError("grid density lives on a different grid")
                out += a.weight * a.m * a.density.values
            else:
                if X is None:
                    X, Y = geometry.mesh()
                out += a.weight * a.m * a.density.pdf(X, Y)
        return out

    def describe(self) -> list[dict]:
        return [{"m": a.m, "weight": a.weight, "density": a.density.describe()} for a in self.atoms]


def lift_vorticity(w0, mode: str = "two-atom") -> CirculationLaw:
    """Lift a signed vorticity into a circulation law ``g0``.

    With ``a = int |w0|`` the law puts circulation ``+a`` on the normalized
    positive part and ``-a`` on the normalized negative part, with weights
    equal to their share of ``a``. Zero-mass parts are dropped, so a
    non-negative vorticity gives a single atom.

    ``w0`` is a :class:`VorticityField`, any object with ``geometry`` and
    ``values`` attributes (a density grid), or a :class:`GaussianVortex`.
    """
    if mode != "two-atom":
        raise ValueError(f"unknown lifting mode {mode!r}")
    if isinstance(w0, GaussianVortex):
        a = abs(w0.circulation)
        if a == 0:
            raise ValueError("cannot lift a zero vorticity")
        return CirculationLaw((Atom(math.copysign(a, w0.circulation), 1.0,
                                    GaussianDensity(w0.variance, w0.center)),))
    geom, values = w0.geometry, np.asarray(w0.values, dtype=np.float64)
    dv = geom.cell_volume
    plus = np.where(values > 0, values, 0.0)
    minus = np.where(values < 0, -values, 0.0)
    mp, mm = plus.sum() * dv, minus.sum() * dv
    a = mp + mm
    if not a > 0:
        raise ValueError("cannot lift a zero vorticity")
    atoms = []
    for sign, part, mass in ((1.0, plus, mp), (-1.0, minus, mm)):
        if mass > 0:
            dens = part / (part.sum() * dv)
            atoms.append(Atom(sign * a, mass / a, GridDensity(geom, dens)))
    # exact renormalization of the weights
    if len(atoms) == 2:
        atoms[1] = Atom(atoms[1].m, 1.0 - atoms[0].weight, atoms[1].density)
    else:
        atoms[0] = Atom(atoms[0].m, 1.0, atoms[0].density)
    return CirculationLaw(tuple(atoms))


def sample_ensemble(g0: CirculationLaw, n: int, seed: int) -> VortexEnsemble:
    """Draw ``n`` i.i.d. (circulation, position) pairs from ``g0``."""
    if n < 2:
        raise ValueError(f"need at least 2 vortices, got {n}")
    rng = rng_stream(seed, STREAM_SAMPLE)
    weights = np.array([a.weight for a in g0.atoms])
    cdf = np.cumsum(weights)
    u = rng.random(n) * cdf[-1]
    which = np.minimum(np.searchsorted(cdf, u, side="right"), len(g0.atoms) - 1)
    circ = np.empty(n)
    pos = np.empty((n, 2))
    for j, atom in enumerate(g0.atoms):
        idx = np.flatnonzero(which == j)
        circ[idx] = atom.m
        if idx.size:
            pos[idx] = atom.density.sample(rng, idx.size)
    if not np.all(np.isfinite(pos)):
        raise ValueError("sampler produced non-finite positions")
    return VortexEnsemble(circ, pos, 0.0, seed, 0)


def moment_Mk(ensemble: VortexEnsemble, k: float = 1.0) -> float:
    """Mean of ``<x>^k = (1 + |x|^2)^(k/2)`` over the vortices."""
    if not 0 < k < 2:
        raise ValueError(f"moment order must lie in (0, 2), got {k}")
    r2 = np.einsum("ij,ij->i", ensemble.positions, ensemble.positions)
    return float(np.mean((1.0 + r2) ** (0.5 * k)))


# -- ensemble snapshots ------------------------------------------------------

def write_snapshot(path, ensemble: VortexEnsemble, sigma: float = 0.0, epsilon: float = 0.0) -> None:
    """CSV ``i,m,x,y`` preceded by one JSON metadata line."""
    meta = {"time": ensemble.time, "seed": ensemble.seed, "step": ensemble.step,
            "N": ensemble.n, "sigma": sigma, "epsilon": epsilon}
    lines = [json.dumps(meta, sort_keys=True), "i,m,x,y"]
    for i, (m, (x, y)) in enumerate(zip(ensemble.circulations.tolist(), ensemble.positions.tolist())):
        lines.append(f"{i},{m!r},{x!r},{y!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_snapshot(path) -> tuple[VortexEnsemble, dict]:
    text = Path(path).read_text().splitlines()
    meta = json.loads(text[0])
    if text[1].strip() != "i,m,x,y":
        raise ValueError(f"{path}: bad snapshot header {text[1]!r}")
    rows = np.array([[float(v) for v in line.split(",")[1:]] for line in text[2:] if line])
    rows = rows.reshape(-1, 3)
    ens = VortexEnsemble(rows[:, 0], rows[:, 1:], meta["time"], meta["seed"], meta.get("step", 0))
    if ens.n != meta["N"]:
        raise ValueError(f"{path}: metadata says N={meta['N']}, found {ens.n} rows")
    return ens, meta


def pairwise_min_distance(positions: np.ndarray) -> float:
    from scipy.spatial import cKDTree

    if len(positions) < 2:
        return math.inf
    d, _ = cKDTree(positions).query(positions, k=2)
    return float(d[:, 1].min())


def time_grid(t_end: float, dt: float) -> np.ndarray:
    """Step boundaries ``0, dt, 2 dt, ...``; the last step is shortened to end at ``t_end``."""
    if t_end <= 0:
        return np.zeros(1)
    n = max(1, int(math.ceil(t_end / dt - 1e-9)))
    t = dt * np.arange(n + 1)
    t[-1] = t_end
    return t


def snap_indices(save_times: Sequence[float], grid: np.ndarray) -> list[int]:
    """Grid indices of the requested save times; each must sit on the grid."""
    idx = []
    for s in save_times:
        k = int(np.argmin(np.abs(grid - s)))
        if abs(grid[k] - s) > 1e-9 * max(1.0, abs(s)):
            raise ValueError(f"save time {s} is not on the step grid")
        idx.append(k)
    return idx
