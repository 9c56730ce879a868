"""Pseudo-spectral solver for the vorticity equation on the square torus.

Solves ``d_t w + u . grad w = nu lap w`` with ``u = c grad_perp(lap^{-1} w)``
(``c`` set by the kernel normalization, see :mod:`vortexlab.kernels`).
Diffusion is integrated exactly by the factor ``exp(-nu |k|^2 t)``; the
advection term uses classical RK4 on the transformed variable and the 2/3
rule for dealiasing. The mean mode is never touched.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import VorticityField, snap_indices, time_grid
from .kernels import NORMALIZATIONS, derivative_wavenumbers, velocity_hat, wavenumbers

log = logging.getLogger(__name__)


class SpectralBlowup(FloatingPointError):
    pass


@dataclass(frozen=True)
class SpectralState:
    """rfft2 coefficients of ``w`` plus the physical parameters of the run."""

    w_hat: np.ndarray
    shape: tuple[int, int]
    box_length: float
    nu: float
    time: float = 0.0
    origin: tuple[float, float] | None = None

    @classmethod
    def from_field(cls, w: VorticityField, nu: float) -> "SpectralState":
        if nu < 0:
            raise ValueError("nu must be non-negative")
        return cls(np.fft.rfft2(w.values), w.values.shape, w.box_length, float(nu), w.time,
                   tuple(w.origin))

    def to_field(self) -> VorticityField:
        return VorticityField(np.fft.irfft2(self.w_hat, s=self.shape), self.box_length,
                              self.time, self.origin)

    def mean(self) -> float:
        """Spatial mean of ``w`` (the zero mode)."""
        return float(self.w_hat[0, 0].real / (self.shape[0] * self.shape[1]))


class _Operators:
    """Wavenumber arrays for one grid, cached across steps."""

    _cache: dict = {}

    def __init__(self, shape, box_length):
        KX, KY = wavenumbers(shape, box_length)
        self.k2 = KX**2 + KY**2
        self.DX, self.DY = derivative_wavenumbers(shape, box_length)
        nx, ny = shape
        ix = np.abs(np.fft.fftfreq(nx, 1.0 / nx))[:, None]
        iy = np.fft.rfftfreq(ny, 1.0 / ny)[None, :]
        self.dealias = (ix < nx / 3.0) & (iy < ny / 3.0)

    @classmethod
    def get(cls, shape, box_length):
        key = (tuple(shape), float(box_length))
        if key not in cls._cache:
            cls._cache[key] = cls(shape, box_length)
        return cls._cache[key]


def _velocity(w_hat, shape, box_length, normalization):
    ux_hat, uy_hat = velocity_hat(w_hat, shape, box_length, normalization)
    return np.fft.irfft2(ux_hat, s=shape), np.fft.irfft2(uy_hat, s=shape)


def _advection_rhs(w_hat, shape, box_length, ops, normalization):
    """``-P(u . grad w)`` in spectral space, ``P`` the 2/3 truncation."""
    ux, uy = _velocity(w_hat, shape, box_length, normalization)
    wx = np.fft.irfft2(1j * ops.DX * w_hat, s=shape)
    wy = np.fft.irfft2(1j * ops.DY * w_hat, s=shape)
    n_hat = -np.fft.rfft2(ux * wx + uy * wy)
    n_hat *= ops.dealias
    n_hat[0, 0] = 0.0
    return n_hat


def cfl_number(state: SpectralState, dt: float, normalization: str = "standard") -> float:
    """``max|u| dt / dx``; values above 0.5 trigger an advisory warning."""
    ux, uy = _velocity(state.w_hat, state.shape, state.box_length, normalization)
    umax = float(np.sqrt(ux**2 + uy**2).max())
    return umax * dt / (state.box_length / max(state.shape))


def ns2d_step(state: SpectralState, dt: float, normalization: str = "standard",
              advection: bool = True, warnings: list | None = None) -> SpectralState:
    """One integrating-factor RK4 step of length ``dt``.

    ``advection=False`` drops the transport term, leaving the exact heat
    semigroup. CFL violations are appended to ``warnings`` (if given) and
    logged; they are not fatal.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")
    ops = _Operators.get(state.shape, state.box_length)
    E = np.exp(-state.nu * ops.k2 * dt)
    w = state.w_hat
    if advection:
        shape, L = state.shape, state.box_length
        cfl = cfl_number(state, dt, normalization)
        if cfl > 0.5:
            rec = {"time": state.time, "dt": dt, "cfl": cfl}
            if warnings is not None:
                warnings.append(rec)
            log.warning("CFL number %.3g exceeds 0.5 at t=%g", cfl, state.time)
        E2 = np.exp(-state.nu * ops.k2 * dt / 2)
        k1 = _advection_rhs(w, shape, L, ops, normalization)
        k2 = _advection_rhs(E2 * (w + dt / 2 * k1), shape, L, ops, normalization)
        k3 = _advection_rhs(E2 * w + dt / 2 * k2, shape, L, ops, normalization)
        k4 = _advection_rhs(E * w + dt * E2 * k3, shape, L, ops, normalization)
        w_new = E * w + dt / 6 * (E * k1 + 2 * E2 * (k2 + k3) + k4)
    else:
        w_new = E * w
    if not np.all(np.isfinite(w_new)):
        raise SpectralBlowup(f"non-finite spectral coefficients at t={state.time + dt}")
    return replace(state, w_hat=w_new, time=state.time + dt)


# -- monitors -------------------------------------------------------------------

def upsample(values: np.ndarray, factor: int = 4) -> np.ndarray:
    """Trigonometric interpolation of a periodic grid onto a ``factor``x finer grid."""
    nx, ny = values.shape
    if factor == 1:
        return values.copy()
    w_hat = np.fft.rfft2(values)
    big = np.zeros((factor * nx, factor * ny // 2 + 1), dtype=complex)
    hx = nx // 2
    hy = ny // 2
    # Nyquist coefficients are dropped so the interpolant stays real and symmetric
    big[:hx, :hy] = w_hat[:hx, :hy]
    big[-(nx - hx - 1):, :hy] = w_hat[hx + 1:, :hy]
    return np.fft.irfft2(big, s=(factor * nx, factor * ny)) * factor**2


def field_lp_norms(w: VorticityField, ps: Sequence[float] = (1, 2, 4, np.inf),
                   factor: int = 4) -> dict:
    """Lebesgue norms of the field's trigonometric interpolant, by fine-grid quadrature."""
    fine = np.abs(upsample(w.values, factor))
    dA = w.geometry.cell_volume / factor**2
    out = {}
    for p in ps:
        if np.isinf(p):
            out["inf"] = float(fine.max())
        else:
            out[str(int(p)) if float(p).is_integer() else str(p)] = float((np.sum(fine**p) * dA) ** (1 / p))
    return out


def enstrophy(state: SpectralState) -> float:
    """``int w^2 dx`` by Parseval."""
    return _parseval(state.w_hat, state.shape, state.box_length)


def _parseval(a_hat, shape, box_length, weight=None):
    nx, ny = shape
    a2 = np.abs(a_hat) ** 2 if weight is None else weight * np.abs(a_hat) ** 2
    # rfft stores half the spectrum; interior ky columns count twice
    full = a2[:, 0].sum() + 2 * a2[:, 1:(ny + 1) // 2].sum()
    if ny % 2 == 0:
        full += a2[:, ny // 2].sum()
    return float(full * box_length**2 / (nx * ny) ** 2)


def _dissipation_increment(a_hat, b_hat, ops, state, dt):
    """``2 nu int_t^{t+dt} int |grad w|^2`` with each mode's squared amplitude
    interpolated log-linearly between the step ends (exact for pure diffusion)."""
    a2 = np.abs(a_hat) ** 2
    b2 = np.abs(b_hat) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        lm = np.where((a2 > 0) & (b2 > 0) & (np.abs(a2 - b2) > 1e-14 * (a2 + b2)),
                      (a2 - b2) / (np.log(a2) - np.log(b2)), 0.5 * (a2 + b2))
    lm = np.where((a2 > 0) & (b2 > 0), lm, 0.5 * (a2 + b2))
    weight = 2 * state.nu * ops.k2 * dt
    return _parseval(np.sqrt(lm), state.shape, state.box_length, weight)


@dataclass
class Ns2dMonitor:
    """Invariant bookkeeping along one run."""

    times: list = field(default_factory=list)
    lp_norms: list = field(default_factory=list)
    enstrophy: list = field(default_factory=list)
    dissipation: list = field(default_factory=list)
    mean: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    steps: int = 0

    def lp_violations(self, rtol: float = 1e-10) -> list:
        """Saved pairs ``t0 < t1`` where some norm grew by more than ``rtol`` relative."""
        bad = []
        for a in range(len(self.times)):
            for b in range(a + 1, len(self.times)):
                for p, v0 in self.lp_norms[a].items():
                    if self.lp_norms[b][p] > v0 * (1 + rtol):
                        bad.append((self.times[a], self.times[b], p))
        return bad

    def enstrophy_residuals(self) -> list:
        """``(int w^2(t1) + dissipation(t0, t1) - int w^2(t0)) / int w^2(t0)`` per saved interval."""
        out = []
        for a in range(len(self.times) - 1):
            e0 = self.enstrophy[a]
            d = self.dissipation[a + 1] - self.dissipation[a]
            out.append((self.enstrophy[a + 1] + d - e0) / e0 if e0 > 0 else 0.0)
        return out

    def to_dict(self) -> dict:
        return {"times": self.times, "lp_norms": self.lp_norms, "enstrophy": self.enstrophy,
                "dissipation": self.dissipation, "mean": self.mean, "warnings": self.warnings,
                "steps": self.steps}


class Ns2dRun(list):
    """Saved fields of a run (a list of :class:`VorticityField`) with its monitor."""

    def __init__(self, fields, monitor: Ns2dMonitor, meta: dict):
        super().__init__(fields)
        self.monitor = monitor
        self.meta = meta


def run_ns2d(w0: VorticityField, nu: float, t_end: float, dt: float,
             save_times: Sequence[float] | None = None, normalization: str = "standard",
             advection: bool = True, lp_factor: int = 4) -> Ns2dRun:
    """Integrate from ``w0`` to ``t_end`` and return the fields at ``save_times``.

    ``save_times`` default to ``(0, t_end)`` and must lie on the step grid;
    a final partial step lands exactly on ``t_end``.
    """
    save_times = (0.0, t_end) if save_times is None else tuple(save_times)
    if t_end == 0:
        save_times = (0.0,)
    grid = time_grid(t_end, dt)
    save_idx = snap_indices(save_times, grid)
    if sorted(set(save_idx)) != save_idx:
        raise ValueError("save_times must be strictly increasing")
    state = SpectralState.from_field(w0, nu)
    ops = _Operators.get(state.shape, state.box_length)
    mon = Ns2dMonitor()
    fields = []
    dissipated = 0.0

    def record(st):
        f = st.to_field()
        fields.append(f)
        mon.times.append(st.time)
        mon.lp_norms.append(field_lp_norms(f, factor=lp_factor))
        mon.enstrophy.append(enstrophy(st))
        mon.dissipation.append(dissipated)
        mon.mean.append(st.mean())

    wanted = set(save_idx)
    if 0 in wanted:
        record(state)
    for n in range(1, len(grid)):
        h = float(grid[n] - grid[n - 1])
        new = ns2d_step(state, h, normalization, advection, mon.warnings)
        dissipated += _dissipation_increment(state.w_hat, new.w_hat, ops, state, h)
        state = replace(new, time=float(grid[n]))
        mon.steps += 1
        if n in wanted:
            record(state)
    meta = {"nu": nu, "dt": dt, "t_end": t_end, "normalization": normalization,
            "advection": advection, "shape": list(w0.values.shape), "box_length": w0.box_length}
    return Ns2dRun(fields, mon, meta)


# -- reference solutions ----------------------------------------------------------

def lamb_oseen(circulation: float, nu: float, t: float, t0: float):
    """Vorticity ``(G / (4 pi nu (t + t0))) exp(-|x|^2 / (4 nu (t + t0)))`` as a function of ``(x, y)``."""
    s4 = 4 * nu * (t + t0)

    def w(x, y):
        return circulation / (np.pi * s4) * np.exp(-(x**2 + y**2) / s4)

    return w


def lamb_oseen_field(n: int, box_length: float, circulation: float, nu: float, t: float,
                     t0: float) -> VorticityField:
    return VorticityField.from_function(lamb_oseen(circulation, nu, t, t0), n, box_length, t)


def relative_l1_error(w: VorticityField, exact: VorticityField) -> float:
    return float(np.abs(w.values - exact.values).sum() / np.abs(exact.values).sum())


# -- field IO -----------------------------------------------------------------------

def write_field(path, w: VorticityField, nu: float | None = None) -> None:
    """Flat row-major float64 binary at ``path`` plus a JSON sidecar ``path.json``."""
    path = Path(path)
    w.values.astype("<f8").tofile(path)
    meta = {"grid": list(w.values.shape), "box_length": w.box_length, "time": w.time,
            "origin": list(w.origin), "nu": nu}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_field(path) -> tuple[VorticityField, dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    values = np.fromfile(path, dtype="<f8").reshape(meta["grid"])
    return VorticityField(values, meta["box_length"], meta["time"], tuple(meta["origin"])), meta


def export_csv(path, w: VorticityField) -> None:
    """``x,y,w`` rows for small grids."""
    X, Y = w.geometry.mesh()
    rows = np.column_stack([X.ravel(), Y.ravel(), w.values.ravel()])
    np.savetxt(path, rows, delimiter=",", header="x,y,w", comments="", fmt="%.17g")
