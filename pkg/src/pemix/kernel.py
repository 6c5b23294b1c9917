"""
Band-limited evaluation of the nonlinear terms on a compact layout.

Inside the time stepper every field lives in the 2/3 band, so only the
coefficients with 0 <= m <= Kx, |n| <= Ky, 0 <= k <= Kz are stored (the
m < 0 half follows from Hermitian symmetry).  Transforms are pruned partial
DFTs written as small matrix products, and the physical grid keeps only the
half period 0 <= z <= h/2 (z-even products are even, odd x odd is even, and
z-odd factors are reconstructed from sine series on the same points).

The results coincide with the FFT-based operators in ``dynamics`` to
round-off; that equality is part of the test suite.

Layouts: compact coefficients are ``(..., c, m, n, k)``, physical samples are
``(..., c, z, y, x)``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .spectral import GridSpec


def _mm(a: np.ndarray, M: np.ndarray) -> np.ndarray:
    # contract the last axis of ``a`` with the rows of ``M``
    return a @ M


class BandKernel:
    def __init__(self, g: GridSpec):
        self.g = g
        Kx, Ky, Kz = g.kmax_x, g.kmax_y, g.kmax_z
        self.Kx, self.Ky, self.Kz = Kx, Ky, Kz
        self.mvals = np.arange(0, Kx + 1)
        self.nvals = np.arange(-Ky, Ky + 1)
        self.kvals = np.arange(0, Kz + 1)
        self.shape = (2, Kx + 1, 2 * Ky + 1, Kz + 1)
        self.nzh = g.Nz  # half-period points l = 0 .. Nz-1

        tp = 2 * np.pi
        self.kx = (tp / g.L * self.mvals)[:, None, None]
        self.ky = (tp / g.L * self.nvals)[None, :, None]
        self.kz = (tp / g.h * self.kvals)[None, None, :]
        self.lam = self.kx**2 + self.ky**2 + self.kz**2
        # sum over the full spectrum = sum(m = 0) + 2 sum(m >= 1)
        herm = np.where(self.mvals == 0, 1.0, 2.0)[:, None, None]
        wz = np.where(self.kvals == 0, 1.0, 0.5)[None, None, :] * g.volume
        self.weight = herm * wz
        self.weight = np.broadcast_to(self.weight, (Kx + 1, 2 * Ky + 1, Kz + 1)).copy()

        Nx, Ny, Nzp = g.Nx, g.Ny, g.nz_phys
        x = np.arange(Nx)
        y = np.arange(Ny)
        l = np.arange(self.nzh)
        # z: inverse cos / sin, forward cos / sin (trapezoid weights on the half period)
        ang_z = tp * np.outer(self.kvals, l) / Nzp  # (k, l)
        self.z_cos_inv = np.cos(ang_z).T.copy()  # (l, k) -> used as C @ z_cos_inv.T
        self.z_sin_inv = np.sin(ang_z).T.copy()
        cl = np.full(self.nzh, 2.0)
        cl[0] = 1.0
        cl[-1] = 1.0
        ak = np.where(self.kvals == 0, 1.0, 2.0)
        self.z_cos_fwd = (ak[:, None] * cl[None, :] * np.cos(ang_z) / Nzp)  # (k, l)
        sl = np.full(self.nzh, 1.0)
        sl[0] = 0.0
        sl[-1] = 0.0
        self.z_sin_fwd = 4.0 / Nzp * sl[None, :] * np.sin(ang_z)  # (k, l)
        self.z_sin_fwd[0] = 0.0
        # y: complex partial DFTs
        self.y_inv = np.exp(1j * tp * np.outer(self.nvals, y) / Ny)  # (n, y)
        self.y_fwd = np.exp(-1j * tp * np.outer(y, self.nvals) / Ny) / Ny  # (y, n)
        # x: real <-> half-complex
        wm = np.where(self.mvals == 0, 1.0, 2.0)
        ang_x = tp * np.outer(self.mvals, x) / Nx  # (m, x)
        self.x_inv = np.concatenate([wm[:, None] * np.cos(ang_x), -wm[:, None] * np.sin(ang_x)])
        self.x_fwd = np.concatenate([np.cos(ang_x).T, -np.sin(ang_x).T], axis=1) / Nx  # (x, 2M)

        # complex copies of the z matrices, laid out for right multiplication
        self._zci = self.z_cos_inv.T.astype(complex)
        self._zsi = self.z_sin_inv.T.astype(complex)
        self._zcf = self.z_cos_fwd.T.astype(complex)
        self._zsf = self.z_sin_fwd.T.astype(complex)

        # full <-> compact index maps
        self._mi = self.mvals % g.Nx
        self._ni = self.nvals % g.Ny
        self._mneg = (-self.mvals) % g.Nx
        self._nneg = (-self.nvals) % g.Ny

    # -- layout conversion -----------------------------------------------------
    def pack(self, full: np.ndarray) -> np.ndarray:
        sub = full[..., self._mi, :, :][..., self._ni, :][..., : self.Kz + 1]
        return np.ascontiguousarray(sub)

    def unpack(self, c: np.ndarray) -> np.ndarray:
        g = self.g
        out = np.zeros(c.shape[:-3] + (g.Nx, g.Ny, g.Nz), dtype=complex)
        kk = slice(0, self.Kz + 1)
        out[..., self._mi[:, None], self._ni[None, :], kk] = c
        conj = np.conj(c[..., 1:, :, :])
        out[..., self._mneg[1:, None], self._nneg[None, :], kk] = conj
        return out

    # -- transforms ------------------------------------------------------------
    def _xy_inv(self, a: np.ndarray) -> np.ndarray:
        # a: (..., m, n, l) complex -> (..., l, y, x) real
        a = _mm(np.swapaxes(a, -1, -2), self.y_inv)  # (..., m, l, y)
        a = np.moveaxis(a, -3, -1)  # (..., l, y, m)
        ri = np.concatenate([a.real, a.imag], axis=-1)
        return _mm(ri, self.x_inv)

    def cos_inv(self, c: np.ndarray) -> np.ndarray:
        return self._xy_inv(_mm(c, self._zci))

    def sin_inv(self, s: np.ndarray) -> np.ndarray:
        return self._xy_inv(_mm(s, self._zsi))

    def _xy_fwd(self, p: np.ndarray) -> np.ndarray:
        # p: (..., l, y, x) real -> (..., m, n, l) complex
        r = _mm(p, self.x_fwd)  # (..., l, y, 2M)
        M = self.Kx + 1
        t = r[..., :M] + 1j * r[..., M:]
        t = np.moveaxis(t, -1, -3)  # (..., m, l, y)
        t = _mm(t, self.y_fwd)  # (..., m, l, n)
        return np.swapaxes(t, -1, -2)  # (..., m, n, l)

    def cos_fwd(self, p: np.ndarray) -> np.ndarray:
        return _mm(self._xy_fwd(p), self._zcf)

    def sin_fwd(self, p: np.ndarray) -> np.ndarray:
        return _mm(self._xy_fwd(p), self._zsf)

    # -- linear algebra on compact fields --------------------------------------
    def project(self, c: np.ndarray) -> np.ndarray:
        out = c.copy()
        kx = self.kx[:, :, 0]
        ky = self.ky[:, :, 0]
        k2 = kx**2 + ky**2
        k2 = np.where(k2 == 0, 1.0, k2)
        v1 = out[..., 0, :, :, 0]
        v2 = out[..., 1, :, :, 0]
        par = (kx * v1 + ky * v2) / k2
        out[..., 0, :, :, 0] = v1 - par * kx
        out[..., 1, :, :, 0] = v2 - par * ky
        out[..., :, 0, self.Ky, 0] = 0.0
        return out

    def w_coeffs(self, c: np.ndarray) -> np.ndarray:
        div = 1j * (self.kx * c[..., 0, :, :, :] + self.ky * c[..., 1, :, :, :])
        kz = np.where(self.kz == 0, 1.0, self.kz)
        w = -div / kz
        w[..., 0] = 0.0
        return w

    def _fields(self, c: np.ndarray):
        """Physical u, du/dx, du/dy (cos), and u_3, du/dz (sin) of compact ``c``."""
        cos_in = np.concatenate([c, 1j * self.kx * c, 1j * self.ky * c], axis=-4)
        sin_in = np.concatenate([self.w_coeffs(c)[..., None, :, :, :], -self.kz * c], axis=-4)
        cp = self.cos_inv(cos_in)
        sp = self.sin_inv(sin_in)
        return cp[..., 0:2, :, :, :], cp[..., 2:4, :, :, :], cp[..., 4:6, :, :, :], \
            sp[..., 0:1, :, :, :], sp[..., 1:3, :, :, :]

    @staticmethod
    def _advect_phys(Ua, Wa, dxv, dyv, dzv):
        return Ua[..., 0:1, :, :, :] * dxv + Ua[..., 1:2, :, :, :] * dyv + Wa * dzv

    def b(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        U, _, _, W, _ = self._fields(u)
        _, dxv, dyv, _, dzv = self._fields(v)
        return self.cos_fwd(self._advect_phys(U, W, dxv, dyv, dzv))

    def B_self(self, u: np.ndarray) -> np.ndarray:
        U, dx, dy, W, dz = self._fields(u)
        return self.project(self.cos_fwd(self._advect_phys(U, W, dx, dy, dz)))

    def tangent(self, u: np.ndarray, w: np.ndarray, phys_u=None) -> np.ndarray:
        """P(b(u, w) + b(w, u)); ``phys_u`` may carry precomputed fields of u."""
        Uu, dxu, dyu, Wu, dzu = phys_u if phys_u is not None else self._fields(u)
        Uw, dxw, dyw, Ww, dzw = self._fields(w)
        p = self._advect_phys(Uu, Wu, dxw, dyw, dzw) + self._advect_phys(Uw, Ww, dxu, dyu, dzu)
        return self.project(self.cos_fwd(p))

    def adjoint(self, u: np.ndarray, w: np.ndarray, phys_u=None) -> np.ndarray:
        """P(-b(u, w) + (d_2 u^*) w - grad_2 int_{-h}^z w . du/dz)."""
        Uu, dxu, dyu, Wu, dzu = phys_u if phys_u is not None else self._fields(u)
        Uw, dxw, dyw, _, dzw = self._fields(w)
        p = -self._advect_phys(Uu, Wu, dxw, dyw, dzw)
        p = p + np.concatenate(
            [(Uw * dxu).sum(axis=-4, keepdims=True), (Uw * dyu).sum(axis=-4, keepdims=True)],
            axis=-4,
        )
        out = self.cos_fwd(p)
        gz = self.sin_fwd((Uw * dzu).sum(axis=-4))
        kz = np.where(self.kz == 0, 1.0, self.kz)
        F = -gz / kz
        F[..., 0] = 0.0
        out = out - np.stack([1j * self.kx * F, 1j * self.ky * F], axis=-4)
        return self.project(out)

    def fields(self, u: np.ndarray):
        return self._fields(u)

    # -- norms -------------------------------------------------------------------
    def sobolev_norm(self, c: np.ndarray, j: int = 0) -> np.ndarray:
        dens = np.abs(c) ** 2 * self.weight
        # n < 0 entries of the m = 0 column duplicate n > 0 ones; the weights
        # above count each stored entry once, which is exactly the full sum
        if j:
            dens = dens * self.lam**j
        return np.sqrt(dens.sum(axis=(-4, -3, -2, -1)))

    def inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        dens = (np.conj(a) * b).real * self.weight
        return dens.sum(axis=(-4, -3, -2, -1))


@lru_cache(maxsize=8)
def get_kernel(g: GridSpec) -> BandKernel:
    return BandKernel(g)
