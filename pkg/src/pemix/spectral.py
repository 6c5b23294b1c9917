"""
Spectral representation of z-even, zero-mean, two-component velocity fields.

A field on the box (R/LZ)^2 x (R/hZ) is stored as its truncated expansion

    v_c(x, y, z) = sum_{m,n,k} vhat_c(m, n, k) exp(2 pi i (m x + n y) / L) cos(2 pi k z / h)

with c in {1, 2}, m and n in FFT order along the first two spatial axes and
k = 0 .. Nz-1 along the last one.  That layout coincides with the output of a
real FFT over a full z-period sampled at 2 (Nz - 1) points, so the transforms
below are thin wrappers around ``scipy.fft.rfftn``.

Every routine accepts coefficient arrays with arbitrary leading batch axes,
``(..., 2, Nx, Ny, Nz)``; ensembles are evolved as one stacked array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Optional, Sequence

import numpy as np
import scipy.fft as sfft

__all__ = [
    "GridSpec",
    "ModeIndex",
    "SpectralField",
    "basis_field",
    "basis_modes",
    "barotropic_divergence",
    "dealias",
    "eigenvalue",
    "from_physical",
    "inner",
    "primed_norm",
    "project",
    "random_field",
    "sobolev_norm",
    "to_physical",
]


@dataclass(frozen=True)
class GridSpec:
    """Box size, truncation and norm parameters.

    Parameters
    ----------
    L, h : float
        Horizontal and vertical periods.
    Nx, Ny : int
        Number of horizontal wavenumbers (and collocation points) per axis.
    Nz : int
        Number of cosine modes k = 0 .. Nz-1; the z collocation grid has
        2 (Nz - 1) points over one period.
    m_sobolev : int
        Sobolev index used by the V^m norms.
    delta : float
        Weight of the V^m part in the primed norm.
    """

    L: float = 2 * np.pi
    h: float = 2 * np.pi
    Nx: int = 16
    Ny: int = 16
    Nz: int = 9
    m_sobolev: int = 2
    delta: float = 0.1

    def __post_init__(self):
        if not (self.L > 0 and self.h > 0):
            raise ValueError("L and h must be positive")
        for name in ("Nx", "Ny"):
            n = getattr(self, name)
            if int(n) != n or n < 4 or n % 2:
                raise ValueError(f"{name} must be an even integer >= 4, got {n}")
        if int(self.Nz) != self.Nz or self.Nz < 2:
            raise ValueError(f"Nz must be an integer >= 2, got {self.Nz}")
        if int(self.m_sobolev) != self.m_sobolev or self.m_sobolev < 2:
            raise ValueError(f"m_sobolev must be an integer >= 2, got {self.m_sobolev}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    # -- shapes --------------------------------------------------------------
    @property
    def nz_phys(self) -> int:
        return 2 * (self.Nz - 1)

    @property
    def shape(self) -> tuple:
        """Coefficient array shape of one field."""
        return (2, self.Nx, self.Ny, self.Nz)

    @property
    def phys_shape(self) -> tuple:
        return (2, self.Nx, self.Ny, self.nz_phys)

    @property
    def volume(self) -> float:
        return self.L * self.L * self.h

    # -- wavenumbers -----------------------------------------------------------
    @cached_property
    def m_index(self) -> np.ndarray:
        """Integer horizontal wavenumbers in FFT order (Nyquist reported as +Nx/2)."""
        m = np.fft.fftfreq(self.Nx, 1.0 / self.Nx).astype(int)
        m[self.Nx // 2] = self.Nx // 2
        return m

    @cached_property
    def n_index(self) -> np.ndarray:
        n = np.fft.fftfreq(self.Ny, 1.0 / self.Ny).astype(int)
        n[self.Ny // 2] = self.Ny // 2
        return n

    @cached_property
    def k_index(self) -> np.ndarray:
        return np.arange(self.Nz)

    @cached_property
    def kx(self) -> np.ndarray:
        """Derivative multipliers 2 pi m / L broadcast as (Nx, 1, 1); zero at Nyquist."""
        kx = 2 * np.pi / self.L * self.m_index.astype(float)
        kx[self.Nx // 2] = 0.0
        return kx[:, None, None]

    @cached_property
    def ky(self) -> np.ndarray:
        ky = 2 * np.pi / self.L * self.n_index.astype(float)
        ky[self.Ny // 2] = 0.0
        return ky[None, :, None]

    @cached_property
    def kz(self) -> np.ndarray:
        return (2 * np.pi / self.h * self.k_index.astype(float))[None, None, :]

    @cached_property
    def lam(self) -> np.ndarray:
        """Eigenvalues of -Laplacian on every stored (m, n, k), shape (Nx, Ny, Nz)."""
        mm = self.m_index[:, None, None].astype(float)
        nn = self.n_index[None, :, None].astype(float)
        kk = self.k_index[None, None, :].astype(float)
        return (2 * np.pi / self.L) ** 2 * (mm**2 + nn**2) + (2 * np.pi / self.h) ** 2 * kk**2

    @cached_property
    def weight(self) -> np.ndarray:
        """L^2 mass of exp(i.)cos(.) per coefficient: Vol for k = 0, Vol/2 otherwise."""
        w = np.full(self.Nz, 0.5 * self.volume)
        w[0] = self.volume
        return np.broadcast_to(w[None, None, :], (self.Nx, self.Ny, self.Nz))

    # -- dealiasing band -------------------------------------------------------
    @property
    def kmax_x(self) -> int:
        return (self.Nx - 1) // 3

    @property
    def kmax_y(self) -> int:
        return (self.Ny - 1) // 3

    @property
    def kmax_z(self) -> int:
        return min((self.nz_phys - 1) // 3, self.Nz - 1)

    @cached_property
    def band(self) -> np.ndarray:
        """Boolean mask of the 2/3-rule band; products of band fields alias only outside it."""
        mx = np.abs(self.m_index)[:, None, None] <= self.kmax_x
        my = np.abs(self.n_index)[None, :, None] <= self.kmax_y
        mz = self.k_index[None, None, :] <= self.kmax_z
        mask = mx & my & mz
        mask[self.Nx // 2, :, :] = False
        mask[:, self.Ny // 2, :] = False
        return mask

    @cached_property
    def _cos_scale(self) -> np.ndarray:
        # rfft coefficient / cosine coefficient, per k
        s = np.full(self.Nz, 0.5)
        s[0] = 1.0
        s[-1] = 1.0
        return s

    @cached_property
    def _sin_scale(self) -> np.ndarray:
        # rfft coefficient / sine coefficient, per k (Nyquist sine vanishes on the grid)
        s = np.full(self.Nz, -0.5j)
        s[0] = 0.0
        s[-1] = 0.0
        return s

    def as_dict(self) -> dict:
        return {
            "L": self.L,
            "h": self.h,
            "Nx": self.Nx,
            "Ny": self.Ny,
            "Nz": self.Nz,
            "m_sobolev": self.m_sobolev,
            "delta": self.delta,
        }


# ---------------------------------------------------------------------------
# Basis of V
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=False)
class ModeIndex:
    """One real basis function of the retained part of V.

    ``sign`` is ``"+"`` (polarisation along (m, n)), ``"-"`` (along (-n, m)),
    or ``"e1"``/``"e2"`` for the horizontally constant modes at (m, n) = (0, 0).
    ``part`` selects the cosine (``"c"``) or sine (``"s"``) real part of the
    horizontal exponential.
    """

    m: int
    n: int
    k: int
    sign: str
    part: str = "c"


def eigenvalue(idx: ModeIndex, g: GridSpec) -> float:
    """Eigenvalue of -Laplacian for the mode ``idx``."""
    return float(
        (2 * np.pi / g.L) ** 2 * (idx.m**2 + idx.n**2) + (2 * np.pi / g.h) ** 2 * idx.k**2
    )


def _iter_modes(g: GridSpec) -> Iterator[ModeIndex]:
    kx, ky, kz = g.kmax_x, g.kmax_y, g.kmax_z
    for k in range(0, kz + 1):
        if k >= 1:
            yield ModeIndex(0, 0, k, "e1", "c")
            yield ModeIndex(0, 0, k, "e2", "c")
        for m in range(0, kx + 1):
            for n in range(-ky, ky + 1):
                if m == 0 and n <= 0:
                    continue
                signs = ("-",) if k == 0 else ("+", "-")
                for sgn in signs:
                    for part in ("c", "s"):
                        yield ModeIndex(m, n, k, sgn, part)


_SIGN_ORDER = {"+": 0, "-": 1, "e1": 2, "e2": 3}
_PART_ORDER = {"c": 0, "s": 1}


def basis_modes(g: GridSpec) -> list:
    """Retained real basis of V sorted by ascending eigenvalue.

    Ties are broken lexicographically by (k, m, n, sign, part), which makes the
    ordering, and therefore the noise construction, platform independent.
    """

    def key(idx):
        lam = round(eigenvalue(idx, g), 9)
        return (lam, idx.k, idx.m, idx.n, _SIGN_ORDER[idx.sign], _PART_ORDER[idx.part])

    return sorted(_iter_modes(g), key=key)


def basis_field(idx: ModeIndex, g: GridSpec) -> np.ndarray:
    """L^2-normalised coefficient array of one real basis function."""
    c = np.zeros(g.shape, dtype=complex)
    if idx.m == 0 and idx.n == 0:
        if idx.k < 1:
            raise ValueError("(0, 0, 0) is not part of V")
        comp = 0 if idx.sign == "e1" else 1
        c[comp, 0, 0, idx.k] = 1.0
        return c / np.sqrt(0.5 * g.volume)
    if idx.sign == "+":
        vec = np.array([idx.m, idx.n], dtype=float)
    elif idx.sign == "-":
        vec = np.array([-idx.n, idx.m], dtype=float)
    else:
        raise ValueError(f"invalid polarisation {idx.sign!r} for (m, n) != (0, 0)")
    if idx.k == 0 and idx.sign == "+":
        raise ValueError("k = 0 gradient modes are not part of V")
    vec /= np.hypot(*vec)
    amp = 0.5 if idx.part == "c" else -0.5j
    i, j = idx.m % g.Nx, idx.n % g.Ny
    ic, jc = (-idx.m) % g.Nx, (-idx.n) % g.Ny
    c[:, i, j, idx.k] = amp * vec
    c[:, ic, jc, idx.k] = np.conj(amp) * vec
    norm2 = g.volume * 0.5 * (1.0 if idx.k == 0 else 0.5)
    return c / np.sqrt(norm2)


def basis_matrix(g: GridSpec, count: int) -> np.ndarray:
    """Stack of the first ``count`` basis fields, shape (count, 2, Nx, Ny, Nz)."""
    modes = basis_modes(g)
    if count > len(modes):
        raise ValueError(f"grid retains only {len(modes)} modes, {count} requested")
    if count == 0:
        return np.zeros((0,) + g.shape, dtype=complex)
    return np.stack([basis_field(idx, g) for idx in modes[:count]])


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


def _cos_to_phys(coeffs: np.ndarray, g: GridSpec) -> np.ndarray:
    f = coeffs * g._cos_scale
    return sfft.irfftn(f, s=(g.Nx, g.Ny, g.nz_phys), axes=(-3, -2, -1), norm="forward")


def _sin_to_phys(coeffs: np.ndarray, g: GridSpec) -> np.ndarray:
    f = coeffs * g._sin_scale
    return sfft.irfftn(f, s=(g.Nx, g.Ny, g.nz_phys), axes=(-3, -2, -1), norm="forward")


def _phys_to_cos(samples: np.ndarray, g: GridSpec) -> np.ndarray:
    f = sfft.rfftn(samples, axes=(-3, -2, -1), norm="forward")
    return f / g._cos_scale


def _phys_to_sin(samples: np.ndarray, g: GridSpec) -> np.ndarray:
    f = sfft.rfftn(samples, axes=(-3, -2, -1), norm="forward")
    out = np.zeros_like(f)
    out[..., 1:-1] = f[..., 1:-1] / g._sin_scale[1:-1]
    return out


def to_physical(f, g: Optional[GridSpec] = None) -> np.ndarray:
    """Evaluate the truncated series on the collocation grid.

    Returns real samples of shape ``(..., 2, Nx, Ny, 2 (Nz - 1))`` at
    x_i = i L / Nx, y_j = j L / Ny, z_l = l h / (2 (Nz - 1)).
    """
    coeffs, g = _unwrap(f, g)
    return _cos_to_phys(coeffs, g)


def from_physical(samples: np.ndarray, g: GridSpec, tol: float = 1e-10) -> "SpectralField":
    """Coefficients of the interpolating series of z-even samples.

    Samples whose odd-in-z part exceeds ``tol`` relative to their size are
    rejected.  The (0, 0, 0) coefficient is kept as computed; ``project``
    removes it.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.shape[-4:] != g.phys_shape:
        raise ValueError(f"expected trailing shape {g.phys_shape}, got {samples.shape}")
    mirrored = np.roll(samples[..., ::-1], 1, axis=-1)
    scale = max(np.max(np.abs(samples)), np.finfo(float).tiny)
    odd = np.max(np.abs(samples - mirrored)) / scale
    if odd > tol:
        raise ValueError(f"samples are not even in z (relative odd part {odd:.3e})")
    coeffs = _phys_to_cos(samples, g)
    coeffs = _hermitian_enforce(coeffs, g)
    return SpectralField(coeffs, g)


def _hermitian_enforce(coeffs: np.ndarray, g: GridSpec) -> np.ndarray:
    flipped = np.conj(np.roll(coeffs[..., ::-1, ::-1, :], (1, 1), axis=(-3, -2)))
    return 0.5 * (coeffs + flipped)


# ---------------------------------------------------------------------------
# Projection and norms
# ---------------------------------------------------------------------------


def project(f, g: Optional[GridSpec] = None):
    """Orthogonal projection onto V.

    Zeroes the (0, 0, 0) mean, removes the component of (vhat_1, vhat_2) along
    (m, n) at k = 0, and zeroes the horizontal Nyquist planes (where the
    direction of (m, n) is not defined for a real field).  Returns the same
    kind of object it was given.
    """
    coeffs, g = _unwrap(f, g)
    out = np.array(coeffs, dtype=complex, copy=True)
    kx = g.kx[..., 0]
    ky = g.ky[..., 0]
    k2 = kx**2 + ky**2
    k2[k2 == 0] = 1.0
    v1 = out[..., 0, :, :, 0]
    v2 = out[..., 1, :, :, 0]
    par = (kx * v1 + ky * v2) / k2
    out[..., 0, :, :, 0] = v1 - par * kx
    out[..., 1, :, :, 0] = v2 - par * ky
    out[..., :, 0, 0, 0] = 0.0
    out[..., :, g.Nx // 2, :, :] = 0.0
    out[..., :, :, g.Ny // 2, :] = 0.0
    if isinstance(f, SpectralField):
        return SpectralField(out, g)
    return out


def dealias(f, g: Optional[GridSpec] = None):
    """Zero everything outside the 2/3-rule band."""
    coeffs, g = _unwrap(f, g)
    out = coeffs * g.band
    if isinstance(f, SpectralField):
        return SpectralField(out, g)
    return out


def _sum_fields(a: np.ndarray) -> np.ndarray:
    return a.sum(axis=(-4, -3, -2, -1))


def sobolev_norm(f, j: int = 0, g: Optional[GridSpec] = None):
    """(sum lambda^j |vhat|^2 weight)^(1/2); j = 0 is the L^2 norm.

    Batched inputs give one norm per leading index.
    """
    coeffs, g = _unwrap(f, g)
    if j < 0:
        raise ValueError("j must be non-negative")
    dens = np.abs(coeffs) ** 2 * g.weight
    if j:
        dens = dens * g.lam**j
    out = np.sqrt(_sum_fields(dens))
    return float(out) if np.ndim(out) == 0 else out


def primed_norm(f, g: Optional[GridSpec] = None, delta: Optional[float] = None):
    """||f||_{L^2} + delta ||f||_{V^m}; ``delta`` defaults to the grid's (0 is allowed here)."""
    coeffs, g = _unwrap(f, g)
    delta = g.delta if delta is None else delta
    if delta < 0:
        raise ValueError("delta must be non-negative")
    return sobolev_norm(coeffs, 0, g) + delta * sobolev_norm(coeffs, g.m_sobolev, g)


def inner(a, b, g: Optional[GridSpec] = None, j: int = 0):
    """Real inner product <a, b> in L^2 (or the homogeneous H^j product)."""
    ca, g = _unwrap(a, g)
    cb, _ = _unwrap(b, g)
    dens = (np.conj(ca) * cb).real * g.weight
    if j:
        dens = dens * g.lam**j
    out = _sum_fields(dens)
    return float(out) if np.ndim(out) == 0 else out


def barotropic_divergence(f, g: Optional[GridSpec] = None) -> np.ndarray:
    """k = 0 coefficients of div_2 v, i.e. the divergence of the vertical mean."""
    coeffs, g = _unwrap(f, g)
    return 1j * (g.kx[..., 0] * coeffs[..., 0, :, :, 0] + g.ky[..., 0] * coeffs[..., 1, :, :, 0])


def random_field(
    g: GridSpec,
    rng: np.random.Generator,
    *,
    decay: float = 1.0,
    band: bool = True,
    batch: Sequence[int] = (),
    in_V: bool = True,
) -> np.ndarray:
    """Random element of V with spectrum ~ lambda^(-decay/2).

    Built from physical white noise so it is exactly Hermitian; the result is
    not normalised.  ``in_V=False`` skips the projection (and keeps the mean
    zero), giving a generic z-even field.
    """
    shape = tuple(batch) + g.phys_shape
    noise = rng.standard_normal(shape)
    noise = 0.5 * (noise + np.roll(noise[..., ::-1], 1, axis=-1))
    coeffs = _phys_to_cos(noise, g)
    lam = np.where(g.lam > 0, g.lam, 1.0)
    coeffs = coeffs * lam ** (-decay / 2)
    if band:
        coeffs = coeffs * g.band
    if not in_V:
        coeffs[..., :, 0, 0, 0] = 0.0
        return coeffs
    return project(coeffs, g)


# ---------------------------------------------------------------------------
# Field container
# ---------------------------------------------------------------------------


def _unwrap(f, g):
    if isinstance(f, SpectralField):
        if g is not None and g != f.grid:
            raise ValueError("field lives on a different grid")
        return f.coeffs, f.grid
    if g is None:
        raise TypeError("a GridSpec is required for raw coefficient arrays")
    return np.asarray(f), g


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Immutable coefficient array of one field together with its grid."""

    coeffs: np.ndarray
    grid: GridSpec = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex, copy=True)
        if c.shape != self.grid.shape:
            raise ValueError(f"expected coefficient shape {self.grid.shape}, got {c.shape}")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, g: GridSpec) -> "SpectralField":
        return cls(np.zeros(g.shape, dtype=complex), g)

    # arithmetic
    def _coerce(self, other):
        if isinstance(other, SpectralField):
            if other.grid != self.grid:
                raise ValueError("grid mismatch")
            return other.coeffs
        return NotImplemented

    def __add__(self, other):
        o = self._coerce(other)
        if o is NotImplemented:
            return o
        return SpectralField(self.coeffs + o, self.grid)

    def __sub__(self, other):
        o = self._coerce(other)
        if o is NotImplemented:
            return o
        return SpectralField(self.coeffs - o, self.grid)

    def __mul__(self, a):
        if not np.isscalar(a):
            return NotImplemented
        return SpectralField(self.coeffs * a, self.grid)

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(-self.coeffs, self.grid)

    def __truediv__(self, a):
        return self * (1.0 / a)

    # diagnostics
    def norm(self, j: int = 0) -> float:
        return sobolev_norm(self, j)

    def primed_norm(self) -> float:
        return primed_norm(self)

    def invariant_residuals(self) -> dict:
        """Sizes of the violations of Hermitian symmetry, zero mean and barotropic divergence."""
        c = self.coeffs
        g = self.grid
        flipped = np.conj(np.roll(c[..., ::-1, ::-1, :], (1, 1), axis=(-3, -2)))
        div = barotropic_divergence(c, g)
        div[0, 0] = 0.0
        return {
            "hermitian": float(np.max(np.abs(c - flipped))),
            "mean": float(np.max(np.abs(c[:, 0, 0, 0]))),
            "divergence": float(np.max(np.abs(div))),
        }

    def is_valid(self, tol: float = 1e-12) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.coeffs))))
        return all(v <= tol * scale for v in self.invariant_residuals().values())
