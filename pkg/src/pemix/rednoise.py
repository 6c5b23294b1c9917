"""
Bounded red noise built from Haar series.

On each unit interval [n, n+1) the forcing is

    eta(t) = sum_i b_i (xi0_i + sum_j c_j sum_k xi_{j,k,i} h_{j,k}(t)) lambda_i^(-m/2) e_i

with i.i.d. draws bounded by one.  Draws come from a Philox counter-based
generator keyed by the master seed; the counter encodes
(position, mode i, interval n, stream), so any single draw can be reproduced
without generating the ones before it and segments can be built in any order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .spectral import GridSpec, SpectralField, basis_matrix, basis_modes, eigenvalue

__all__ = [
    "NoiseSegment",
    "RedNoiseSpec",
    "draw_segment",
    "epanechnikov_cdf",
    "evaluate",
    "haar",
    "haar0",
    "sample_xi",
]

_KEY_SALT = 0x5045515300000000  # "PEQS"


@dataclass(frozen=True)
class RedNoiseSpec:
    """Coefficient rules b_i = b0 i^(-alpha), c_j = 2^(-beta j) and truncation sizes."""

    I_max: int = 12
    J_max: int = 5
    alpha: float = 1.0
    beta: float = 0.5
    b0: float = 0.5
    m_sobolev: int = 2

    def __post_init__(self):
        if self.I_max < 0 or self.J_max < 0:
            raise ValueError("I_max and J_max must be non-negative")
        if not self.alpha > 0.5:
            raise ValueError("alpha must exceed 1/2 for square-summable b_i")
        if not self.beta > 0:
            raise ValueError("beta must be positive for summable c_j")
        if not self.b0 > 0:
            raise ValueError("b0 must be positive")

    @property
    def b(self) -> np.ndarray:
        i = np.arange(1, self.I_max + 1, dtype=float)
        return self.b0 * i ** (-self.alpha)

    @property
    def c(self) -> np.ndarray:
        return 2.0 ** (-self.beta * np.arange(self.J_max, dtype=float))

    def bound(self) -> float:
        """sum_i b_i^2 (1 + (sum_j c_j)^2), the bound on ||eta(t)||^2_{V^m}."""
        return float(np.sum(self.b**2) * (1.0 + np.sum(self.c) ** 2))

    def pathwise_bound(self) -> float:
        """sum_i b_i^2 (1 + sum_j c_j)^2, the bound that follows from |xi| <= 1 alone."""
        return float(np.sum(self.b**2) * (1.0 + np.sum(self.c)) ** 2)

    def as_dict(self) -> dict:
        return {
            "I_max": self.I_max,
            "J_max": self.J_max,
            "alpha": self.alpha,
            "beta": self.beta,
            "b0": self.b0,
        }


# ---------------------------------------------------------------------------
# Haar functions
# ---------------------------------------------------------------------------


def haar0(t: float) -> int:
    """Indicator of [0, 1]."""
    return 1 if 0.0 <= t <= 1.0 else 0


def haar(j: int, k: int, t: float, left: bool = False) -> int:
    """h_{j,k}(t): +1 on the first half of [k/2^j, (k+1)/2^j), -1 on the second.

    Values are right-continuous, so exactly one h_{j,k} per level is non-zero
    at every t in [0, 1); t = 1 takes the left limit.  ``left=True`` returns
    left limits everywhere (used at the end point of a time step).
    """
    if not 0 <= k < 2**j:
        raise IndexError(f"shift k={k} out of range for level j={j}")
    if not 0.0 <= t <= 1.0:
        return 0
    s = t * 2**j - k
    if left or t == 1.0:
        if 0.0 < s <= 0.5:
            return 1
        if 0.5 < s <= 1.0:
            return -1
        return 0
    if 0.0 <= s < 0.5:
        return 1
    if 0.5 <= s < 1.0:
        return -1
    return 0


def _active(J: int, t: float, left: bool):
    """Index k and sign of the single active Haar function on each level."""
    levels = 2 ** np.arange(J)
    if (left and t > 0.0) or t >= 1.0:
        # left limit: use the sub-interval ending at t
        pos = t * levels
        k = np.clip(np.ceil(pos).astype(int) - 1, 0, levels - 1)
        s = pos - k
        sign = np.where(s <= 0.5, 1.0, -1.0)
    else:
        pos = t * levels
        k = np.clip(np.floor(pos).astype(int), 0, levels - 1)
        s = pos - k
        sign = np.where(s < 0.5, 1.0, -1.0)
    return k, sign


# ---------------------------------------------------------------------------
# Coefficient law
# ---------------------------------------------------------------------------


def epanechnikov_cdf(r):
    """CDF of rho(r) = 3/4 (1 - r^2) on [-1, 1]."""
    r = np.clip(r, -1.0, 1.0)
    return (2.0 + 3.0 * r - r**3) / 4.0


def sample_xi(u):
    """Inverse CDF of the Epanechnikov law applied to uniforms ``u`` in [0, 1].

    The cubic F(r) = u has the closed-form root r = 2 sin(asin(2u - 1) / 3)
    inside [-1, 1]; accepts a generator in place of ``u`` for a single draw.
    """
    if isinstance(u, np.random.Generator):
        u = u.random()
    u = np.asarray(u, dtype=float)
    r = 2.0 * np.sin(np.arcsin(np.clip(2.0 * u - 1.0, -1.0, 1.0)) / 3.0)
    return float(r) if r.ndim == 0 else r


def _uniforms(master_seed: int, interval_index: int, i: int, stream: int, count: int):
    key = np.array([int(master_seed) & 0xFFFFFFFFFFFFFFFF, _KEY_SALT], dtype=np.uint64)
    counter = np.array([0, i, int(interval_index), int(stream)], dtype=np.uint64)
    bitgen = np.random.Philox(key=key, counter=counter)
    return np.random.Generator(bitgen).random(count)


@dataclass(frozen=True, eq=False)
class NoiseSegment:
    """Draws for one unit interval.

    ``xi`` is stored in heap order: column 2^j - 1 + k holds xi_{j,k}.
    """

    xi0: np.ndarray
    xi: np.ndarray
    spec: RedNoiseSpec = field(repr=False)
    interval_index: int = 0
    stream: int = 0

    def xi_jk(self, i: int, j: int, k: int) -> float:
        return float(self.xi[i, 2**j - 1 + k])

    def coefficients(self, t: float, left: bool = False) -> np.ndarray:
        """Per-mode amplitudes b_i (xi0 + sum_j c_j Sigma_j(t)), shape (I_max,)."""
        return _coefficients(self.xi0, self.xi, self.spec, t, left)

    def to_csv(self, path) -> None:
        """Dump the draws as rows (i, j, k, xi); xi0 is written with j = -1, k = 0."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "k", "xi"])
            for i in range(self.spec.I_max):
                w.writerow([i + 1, -1, 0, repr(float(self.xi0[i]))])
                for j in range(self.spec.J_max):
                    for k in range(2**j):
                        w.writerow([i + 1, j, k, repr(self.xi_jk(i, j, k))])

    @classmethod
    def zero(cls, spec: RedNoiseSpec, interval_index: int = 0) -> "NoiseSegment":
        return cls(
            np.zeros(spec.I_max),
            np.zeros((spec.I_max, max(2**spec.J_max - 1, 0))),
            spec,
            interval_index,
        )


def _coefficients(xi0, xi, spec: RedNoiseSpec, t: float, left: bool) -> np.ndarray:
    # xi0: (..., I), xi: (..., I, 2^J - 1)
    amp = np.array(xi0, dtype=float, copy=True)
    if spec.J_max:
        k, sign = _active(spec.J_max, t, left)
        cols = 2 ** np.arange(spec.J_max) - 1 + k
        amp = amp + np.einsum("...ij,j->...i", xi[..., cols], spec.c * sign)
    return spec.b * amp


def draw_segment(
    spec: RedNoiseSpec, master_seed: int, interval_index: int, stream: int = 0
) -> NoiseSegment:
    """Draw the segment forcing [n, n+1) for ``interval_index`` n.

    Identical arguments reproduce identical draws; different interval indices
    or streams give independent draws.
    """
    per_mode = 2**spec.J_max
    xi0 = np.empty(spec.I_max)
    xi = np.empty((spec.I_max, per_mode - 1))
    for i in range(spec.I_max):
        r = sample_xi(_uniforms(master_seed, interval_index, i, stream, per_mode))
        xi0[i] = r[0]
        xi[i] = r[1:]
    return NoiseSegment(xi0, xi, spec, int(interval_index), int(stream))


@lru_cache(maxsize=16)
def _scaled_basis(g: GridSpec, spec: RedNoiseSpec) -> np.ndarray:
    """lambda_i^(-m/2) e_i for the first I_max modes, shape (I_max, 2, Nx, Ny, Nz)."""
    E = basis_matrix(g, spec.I_max)
    modes = basis_modes(g)[: spec.I_max]
    lam = np.array([eigenvalue(idx, g) for idx in modes])
    E = E * (lam ** (-spec.m_sobolev / 2))[:, None, None, None, None]
    E.flags.writeable = False
    return E


@lru_cache(maxsize=16)
def _scaled_basis_compact(g: GridSpec, spec: RedNoiseSpec):
    """Band part of ``_scaled_basis`` on the kernel layout, and whether it is all of it."""
    from .kernel import get_kernel

    K = get_kernel(g)
    E = _scaled_basis(g, spec)
    Ec = K.pack(E)
    Ec.flags.writeable = False
    return Ec, bool(np.allclose(K.unpack(Ec), E, rtol=0.0, atol=0.0))


def evaluate(seg: NoiseSegment, t_local: float, g: GridSpec, left: bool = False) -> SpectralField:
    """The noise eta(t) at local time ``t_local`` in [0, 1] as a field in V."""
    amp = seg.coefficients(t_local, left)
    E = _scaled_basis(g, seg.spec)
    return SpectralField(np.tensordot(amp, E, axes=(0, 0)), g)


def evaluate_batch(
    xi0: np.ndarray, xi: np.ndarray, spec: RedNoiseSpec, t_local: float, g: GridSpec,
    left: bool = False,
) -> np.ndarray:
    """Vectorised ``evaluate`` over stacked segments (leading axis = member)."""
    amp = _coefficients(xi0, xi, spec, t_local, left)
    E = _scaled_basis(g, spec)
    return np.tensordot(amp, E, axes=(-1, 0))


def stack_segments(segs) -> tuple:
    return np.stack([s.xi0 for s in segs]), np.stack([s.xi for s in segs])


class NoiseForcing:
    """Forcing callback f(t, left) for one or several segments on [0, 1].

    The time argument is local to the unit interval; ``left=True`` asks for
    the left limit, which the stepper uses at the end of a step so that a
    step never sees the value of the next dyadic sub-interval.
    """

    def __init__(self, segs, g: GridSpec, t0: float = 0.0):
        if isinstance(segs, NoiseSegment):
            segs = [segs]
            self._single = True
        else:
            self._single = False
        self.spec = segs[0].spec
        self.g = g
        self.t0 = t0
        self.xi0, self.xi = stack_segments(segs)
        self._basis_c, self.in_band = _scaled_basis_compact(g, self.spec)

    def __call__(self, t: float, left: bool = False) -> np.ndarray:
        out = evaluate_batch(self.xi0, self.xi, self.spec, t - self.t0, self.g, left)
        return out[0] if self._single else out

    def compact(self, t: float, left: bool = False) -> np.ndarray:
        """Same as calling, on the band layout of ``kernel.BandKernel``."""
        tl = t - self.t0
        if not 0.0 <= tl <= 1.0:
            return np.zeros_like(self._table[0])
        # eta is constant on the 2^J dyadic sub-intervals; tabulate them once
        n = len(self._table)
        if (left and tl > 0.0) or tl >= 1.0:
            s = min(max(int(np.ceil(tl * n)) - 1, 0), n - 1)
        else:
            s = min(int(np.floor(tl * n)), n - 1)
        return self._table[s]

    @property
    def _table(self) -> np.ndarray:
        tab = self.__dict__.get("_tab")
        if tab is None:
            n = 2**self.spec.J_max
            mids = (np.arange(n) + 0.5) / n
            amps = [_coefficients(self.xi0, self.xi, self.spec, m, False) for m in mids]
            tab = np.tensordot(np.stack(amps), self._basis_c, axes=(-1, 0))
            if self._single:
                tab = tab[:, 0]
            self.__dict__["_tab"] = tab
        return tab


def sup_norm_sq(seg: NoiseSegment, g: GridSpec, resolution: Optional[int] = None) -> float:
    """max over a dyadic time grid of ||eta(t)||^2_{V^m}."""
    from .spectral import sobolev_norm

    res = resolution if resolution is not None else 2 ** (seg.spec.J_max + 2)
    worst = 0.0
    for n in range(res + 1):
        eta = evaluate(seg, n / res, g)
        worst = max(worst, sobolev_norm(eta, g.m_sobolev) ** 2)
    return worst
