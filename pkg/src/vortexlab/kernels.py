"""Biot-Savart kernel, its bounded regularization, and grid drift fields.

The free-space kernel is ``K(x) = x_perp / |x|^2`` with ``x_perp = (-x2, x1)``.
The regularized kernel is ``K_eps(x) = K(x max(|x|, eps) / |x|)``: equal to
``K`` outside the disc of radius ``eps`` and of constant modulus ``1/eps`` inside.

Velocity fields from gridded vorticity come from the stream function
``psi`` with ``laplacian(psi) = w`` and ``u = grad_perp(psi) = (-d_y psi, d_x psi)``.
That is convolution with ``x_perp / (2 pi |x|^2)`` (the ``"standard"``
normalization); ``"paper_2pi_free"`` multiplies by ``2 pi`` so the field matches
the particle drift built from ``K`` itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import GridGeometry, VorticityField

NORMALIZATIONS = {"standard": 1.0, "paper_2pi_free": 2.0 * math.pi}


@dataclass(frozen=True)
class KernelSpec:
    variant: str = "exact"
    epsilon: float = 0.0

    def __post_init__(self):
        if self.variant not in ("exact", "regularized"):
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")

    @classmethod
    def from_epsilon(cls, epsilon: float) -> "KernelSpec":
        return cls("regularized", float(epsilon)) if epsilon > 0 else cls("exact", 0.0)

    @property
    def eps(self) -> float:
        """Effective cutoff radius (0 for the exact kernel)."""
        return self.epsilon if self.variant == "regularized" else 0.0


def biot_savart(x, spec: KernelSpec = KernelSpec()) -> np.ndarray:
    """Kernel value at a single planar point."""
    x1, x2 = float(x[0]), float(x[1])
    r = math.hypot(x1, x2)
    eps = spec.eps
    if r == 0.0:
        if eps > 0:
            return np.zeros(2)
        raise ZeroDivisionError("exact Biot-Savart kernel evaluated at x = 0")
    if r >= eps:
        return np.array([-x2, x1]) / (r * r)
    # rescale first so the unit vector stays accurate for subnormal inputs
    s = max(abs(x1), abs(x2))
    u1, u2 = x1 / s, x2 / s
    return np.array([-u2, u1]) / (math.hypot(u1, u2) * eps)


def biot_savart_many(x: np.ndarray, spec: KernelSpec = KernelSpec()) -> np.ndarray:
    """Vectorized kernel on an ``(n, 2)`` array of points."""
    x = np.asarray(x, dtype=np.float64)
    r2 = np.einsum("...i,...i->...", x, x)
    r = np.sqrt(r2)
    eps = spec.eps
    zero = np.all(x == 0, axis=-1)
    if eps == 0 and np.any(zero):
        raise ZeroDivisionError("exact Biot-Savart kernel evaluated at x = 0")
    inner = (r < eps) & ~zero
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out = np.stack([-x[..., 1], x[..., 0]], axis=-1) / r2[..., None]
        if np.any(inner):
            # rescale first so the unit vector stays accurate for subnormal inputs
            xi = x[inner]
            u = xi / np.abs(xi).max(axis=-1, keepdims=True)
            u = u / np.linalg.norm(u, axis=-1, keepdims=True)
            out[inner] = np.stack([-u[:, 1], u[:, 0]], axis=-1) / eps
    out[zero] = 0.0
    return out


# -- spectral helpers shared with the torus solver --------------------------

def wavenumbers(shape, box_length):
    """Angular wavenumbers for an rfft2 layout, Nyquist entries kept."""
    nx, ny = shape
    kx = 2 * np.pi / box_length * np.fft.fftfreq(nx, 1.0 / nx)
    ky = 2 * np.pi / box_length * np.fft.rfftfreq(ny, 1.0 / ny)
    return np.meshgrid(kx, ky, indexing="ij")


def derivative_wavenumbers(shape, box_length):
    """Wavenumbers with the Nyquist modes zeroed, for odd derivatives of real fields."""
    KX, KY = wavenumbers(shape, box_length)
    nx, ny = shape
    KX = KX.copy()
    KY = KY.copy()
    KX[nx // 2, :] = 0.0
    KY[:, ny // 2] = 0.0
    return KX, KY


def velocity_hat(w_hat, shape, box_length, normalization="standard"):
    """Spectral velocity ``c * grad_perp(laplacian^{-1} w)`` of the mean-free part."""
    c = NORMALIZATIONS[normalization]
    KX, KY = wavenumbers(shape, box_length)
    DX, DY = derivative_wavenumbers(shape, box_length)
    k2 = KX**2 + KY**2
    k2[0, 0] = 1.0
    psi = -w_hat / k2
    psi[0, 0] = 0.0
    return -1j * DY * psi * c, 1j * DX * psi * c


@dataclass(frozen=True)
class DriftField:
    """Velocity samples at the nodes of a torus grid (``u[i, j] = (u_x, u_y)``)."""

    geometry: GridGeometry
    box_length: float
    u: np.ndarray
    normalization: str = "standard"
    time: float = 0.0

    def __add__(self, other: "DriftField") -> "DriftField":
        return DriftField(self.geometry, self.box_length, self.u + other.u, self.normalization, self.time)

    def scaled(self, a: float) -> "DriftField":
        return DriftField(self.geometry, self.box_length, a * self.u, self.normalization, self.time)


def drift_from_field(w: VorticityField, normalization: str = "standard",
                     stencil: str = "spectral") -> DriftField:
    """Divergence-free velocity of the mean-free part of ``w``.

    The stream function is always solved spectrally. With ``stencil="spectral"``
    it is differentiated spectrally too; with ``"centered"`` the perpendicular
    gradient uses periodic centered differences, which makes the field
    exactly divergence-free for the centered-difference divergence at the
    price of second-order accuracy.
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")
    shape = w.values.shape
    w_hat = np.fft.rfft2(w.values)
    if stencil == "spectral":
        ux_hat, uy_hat = velocity_hat(w_hat, shape, w.box_length, normalization)
        u = np.stack([np.fft.irfft2(ux_hat, s=shape), np.fft.irfft2(uy_hat, s=shape)], axis=-1)
    elif stencil == "centered":
        KX, KY = wavenumbers(shape, w.box_length)
        k2 = KX**2 + KY**2
        k2[0, 0] = 1.0
        psi_hat = -w_hat / k2
        psi_hat[0, 0] = 0.0
        psi = np.fft.irfft2(psi_hat, s=shape) * NORMALIZATIONS[normalization]
        dx, dy = w.geometry.spacing
        u = np.stack([-(np.roll(psi, -1, 1) - np.roll(psi, 1, 1)) / (2 * dy),
                      (np.roll(psi, -1, 0) - np.roll(psi, 1, 0)) / (2 * dx)], axis=-1)
    else:
        raise ValueError(f"unknown stencil {stencil!r}")
    return DriftField(w.geometry, w.box_length, u, normalization, w.time)


def sample_drift(field: DriftField, x) -> np.ndarray:
    """Periodic bilinear interpolation of the field at one point or an ``(n, 2)`` array."""
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    g = field.geometry
    nx, ny = g.shape
    fx = (pts[:, 0] - g.origin[0]) / g.spacing[0]
    fy = (pts[:, 1] - g.origin[1]) / g.spacing[1]
    ix = np.floor(fx)
    iy = np.floor(fy)
    tx = (fx - ix)[:, None]
    ty = (fy - iy)[:, None]
    i0 = ix.astype(np.int64) % nx
    j0 = iy.astype(np.int64) % ny
    i1 = (i0 + 1) % nx
    j1 = (j0 + 1) % ny
    u = field.u
    out = ((1 - tx) * (1 - ty) * u[i0, j0] + tx * (1 - ty) * u[i1, j0]
           + (1 - tx) * ty * u[i0, j1] + tx * ty * u[i1, j1])
    return out[0] if single else out


def spectral_divergence(field: DriftField) -> np.ndarray:
    shape = field.geometry.shape
    DX, DY = derivative_wavenumbers(shape, field.box_length)
    div_hat = 1j * DX * np.fft.rfft2(field.u[..., 0]) + 1j * DY * np.fft.rfft2(field.u[..., 1])
    return np.fft.irfft2(div_hat, s=shape)


def centered_divergence(field: DriftField) -> np.ndarray:
    """Periodic centered-difference divergence at the grid nodes."""
    dx, dy = field.geometry.spacing
    ux, uy = field.u[..., 0], field.u[..., 1]
    return ((np.roll(ux, -1, 0) - np.roll(ux, 1, 0)) / (2 * dx)
            + (np.roll(uy, -1, 1) - np.roll(uy, 1, 1)) / (2 * dy))
