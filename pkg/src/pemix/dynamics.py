"""
Nonlinear terms of the reduced primitive equations.

    b(u, v) = (u . grad_2) v - (int_{-h}^z div_2 u dxi) dv/dz

evaluated pseudo-spectrally: every factor is truncated to the 2/3 band, the
product is formed on the collocation grid and transformed back, and the
result is truncated to the band again.  For band-limited inputs the products
are therefore exact and the energy identity <b(u, v), v> = 0 holds to
round-off.

All functions accept either ``SpectralField`` values or raw coefficient
arrays with leading batch axes plus a ``GridSpec``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .spectral import (
    GridSpec,
    SpectralField,
    _cos_to_phys,
    _phys_to_cos,
    _phys_to_sin,
    _sin_to_phys,
    _unwrap,
    barotropic_divergence,
    project,
)

__all__ = [
    "B",
    "TangentDirection",
    "adjoint_rhs",
    "advect",
    "pressure_gradient",
    "tangent_rhs",
    "vertical_velocity",
]


class NotInV(ValueError):
    """Field violates the barotropic incompressibility constraint."""


def _wrap(result: np.ndarray, like, g: GridSpec):
    if isinstance(like, SpectralField):
        return SpectralField(result, g)
    return result


def _w_coeffs(vb: np.ndarray, g: GridSpec) -> np.ndarray:
    # sine coefficients of u_3 = -int_{-h}^z div_2 v; the k = 0 part is dropped
    div = 1j * (g.kx * vb[..., 0, :, :, :] + g.ky * vb[..., 1, :, :, :])
    kz = g.kz.copy()
    kz[..., 0] = 1.0
    w = -div / kz
    w[..., 0] = 0.0
    return w


def _check_barotropic(v: np.ndarray, g: GridSpec, tol: float) -> None:
    div0 = barotropic_divergence(v, g)
    scale = max(1.0, float(np.max(np.abs(v))) * float(np.max(np.abs(g.kx))))
    worst = float(np.max(np.abs(div0))) if div0.size else 0.0
    if worst > tol * scale:
        raise NotInV(f"k = 0 divergence {worst:.3e} exceeds {tol:g} (field not in V)")


def vertical_velocity(v, g: Optional[GridSpec] = None, tol: float = 1e-10) -> np.ndarray:
    """Sine-series coefficients of u_3 reconstructed from incompressibility.

    The returned array has shape ``(..., Nx, Ny, Nz)`` and represents
    ``u_3 = sum w(m, n, k) exp(2 pi i (m x + n y) / L) sin(2 pi k z / h)``,
    so u_3 vanishes identically at z = 0 and is odd in z.
    """
    coeffs, g = _unwrap(v, g)
    _check_barotropic(coeffs, g, tol)
    return _w_coeffs(coeffs, g)


def _advect_band(ub: np.ndarray, vb: np.ndarray, g: GridSpec) -> np.ndarray:
    """b(u, v) for band-limited coefficient arrays; output truncated to the band."""
    w = _w_coeffs(ub, g)
    dx = 1j * g.kx * vb
    dy = 1j * g.ky * vb
    dz = -g.kz * vb
    cos_in = np.concatenate([ub, dx, dy], axis=-4)
    cos_phys = _cos_to_phys(cos_in, g)
    sin_in = np.concatenate([w[..., None, :, :, :], dz], axis=-4)
    sin_phys = _sin_to_phys(sin_in, g)
    U1 = cos_phys[..., 0:1, :, :, :]
    U2 = cos_phys[..., 1:2, :, :, :]
    Dx = cos_phys[..., 2:4, :, :, :]
    Dy = cos_phys[..., 4:6, :, :, :]
    W = sin_phys[..., 0:1, :, :, :]
    Dz = sin_phys[..., 1:3, :, :, :]
    prod = U1 * Dx + U2 * Dy + W * Dz
    return _phys_to_cos(prod, g) * g.band


def advect(u, v, g: Optional[GridSpec] = None) -> np.ndarray:
    """Un-projected nonlinear term b(u, v) as a coefficient array.

    ``u`` must satisfy the barotropic constraint (its vertical velocity is
    reconstructed from it).  The result is z-even and Hermitian but contains
    the k = 0 gradient part that the pressure removes.
    """
    cu, g = _unwrap(u, g)
    cv, _ = _unwrap(v, g)
    _check_barotropic(cu, g, 1e-10)
    ub = cu * g.band
    vb = ub if cu is cv else cv * g.band
    return _advect_band(ub, vb, g)


def B(u, v, g: Optional[GridSpec] = None):
    """Projected nonlinear term P b(u, v)."""
    cu, g = _unwrap(u, g)
    cv, _ = _unwrap(v, g)
    out = project(advect(cu, cv, g), g)
    return _wrap(out, u, g)


def pressure_gradient(v, g: Optional[GridSpec] = None) -> np.ndarray:
    """grad_2 p = b(v, v) - B(v, v): the k = 0 gradient part of the advection."""
    cv, g = _unwrap(v, g)
    b = advect(cv, cv, g)
    return b - project(b, g)


@dataclass(frozen=True)
class TangentDirection:
    """Perturbation ``w`` attached to the linearisation point ``base``."""

    w: SpectralField
    base: SpectralField

    def __post_init__(self):
        if self.w.grid != self.base.grid:
            raise ValueError("w and base live on different grids")


def _tangent_band(ub: np.ndarray, wb: np.ndarray, g: GridSpec) -> np.ndarray:
    return project(_advect_band(ub, wb, g) + _advect_band(wb, ub, g), g)


def tangent_rhs(d, w=None, g: Optional[GridSpec] = None):
    """B(u, w) + B(w, u), the bilinear part of the linearised operator.

    Call either with a ``TangentDirection`` or as ``tangent_rhs(base, w, g)``.
    """
    if isinstance(d, TangentDirection):
        base, w = d.base, d.w
    else:
        base = d
    cu, g = _unwrap(base, g)
    cw, _ = _unwrap(w, g)
    _check_barotropic(cu, g, 1e-10)
    _check_barotropic(cw, g, 1e-10)
    out = _tangent_band(cu * g.band, cw * g.band, g)
    return _wrap(out, w, g)


def _adjoint_band(ub: np.ndarray, wb: np.ndarray, g: GridSpec) -> np.ndarray:
    term = -_advect_band(ub, wb, g)
    cos_in = np.concatenate([wb, 1j * g.kx * ub, 1j * g.ky * ub], axis=-4)
    cos_phys = _cos_to_phys(cos_in, g)
    Wp = cos_phys[..., 0:2, :, :, :]
    dxu = cos_phys[..., 2:4, :, :, :]
    dyu = cos_phys[..., 4:6, :, :, :]
    dzu = _sin_to_phys(-g.kz * ub, g)
    # ((d_2 u^*) w)_i = sum_l w_l d_i u_l
    dual = np.stack([(Wp * dxu).sum(axis=-4), (Wp * dyu).sum(axis=-4)], axis=-4)
    term = term + _phys_to_cos(dual, g) * g.band
    # F(z) = int_{-h}^z w . du/dz; sin(kz z) integrates to -cos(kz z)/kz
    gz = _phys_to_sin((Wp * dzu).sum(axis=-4), g) * g.band
    kz = g.kz.copy()
    kz[..., 0] = 1.0
    F = -gz / kz
    F[..., 0] = 0.0
    gradF = np.stack([1j * g.kx * F, 1j * g.ky * F], axis=-4)
    term = term - gradF
    return project(term, g) * g.band


def adjoint_rhs(base, w, g: Optional[GridSpec] = None):
    """The operator w -> B_u(w) dual to v -> B(u, v) + B(v, u) in L^2.

    B_u(w) = P(-b(u, w) + (d_2 u^*) w - grad_2 int_{-h}^z w . du/dz),
    so that <B(u, v) + B(v, u), w> = <v, B_u(w)> for u, v, w in V.
    """
    cu, g = _unwrap(base, g)
    cw, _ = _unwrap(w, g)
    _check_barotropic(cu, g, 1e-10)
    out = _adjoint_band(cu * g.band, cw * g.band, g)
    return _wrap(out, w, g)
