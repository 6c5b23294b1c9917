"""
Integrating-factor Heun integration of the projected equation

    dv/dt - Laplacian v + B(v, v) = f

and of its tangent and adjoint linearisations.  With E = exp(-lambda dt) per
mode and N the non-stiff right-hand side,

    predictor  vt = E (v + dt N(v, t))
    corrector  v+ = E v + dt/2 (E N(v, t) + N(vt, t + dt)).

The linear part is integrated exactly; the scheme is second order in dt.
Forcing callbacks have the signature ``f(t, left=False)`` and may return
``None`` for zero forcing; the stepper requests the left limit at the end of
each step so that Haar jumps on step boundaries are never sampled from the
wrong side.

Internally the state is split into its 2/3-band part, which is evolved on the
compact layout of ``kernel.BandKernel``, and the out-of-band remainder.  The
nonlinear terms never reach outside the band, so the remainder only feels the
heat flow and the out-of-band part of the forcing; it is carried only when it
is non-zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .kernel import BandKernel, get_kernel
from .spectral import GridSpec, SpectralField, _unwrap, sobolev_norm

__all__ = [
    "AbsorbingSetViolation",
    "NonFiniteState",
    "StepperConfig",
    "Trajectory",
    "adjoint_propagate",
    "solve",
    "tangent_propagate",
    "time_one_map",
]

Forcing = Callable[..., Optional[np.ndarray]]

# members integrated together; larger stacks fall out of cache and get slower
CHUNK = 8


class AbsorbingSetViolation(RuntimeError):
    """||v(t)||_{V^m} left the monitored ball."""


class NonFiniteState(FloatingPointError):
    """A coefficient became NaN or infinite."""


def dyadic_exponent(dt: float) -> Optional[int]:
    """p such that dt == 2^-p exactly, or None."""
    if not dt > 0:
        return None
    mant, exp = math.frexp(dt)
    if mant != 0.5:
        return None
    return 1 - exp


@dataclass(frozen=True)
class StepperConfig:
    dt: float = 2.0**-7
    t_end: float = 1.0
    monitor_K: Optional[float] = None

    def __post_init__(self):
        p = dyadic_exponent(self.dt)
        if p is None:
            raise ValueError(f"dt must be a power of two, got {self.dt}")
        if not 0 < self.dt <= 0.25:
            raise ValueError(f"dt must lie in (0, 1/4], got {self.dt}")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.monitor_K is not None and not self.monitor_K > 0:
            raise ValueError("monitor_K must be positive")

    @property
    def p(self) -> int:
        return dyadic_exponent(self.dt)

    def n_steps(self, duration: Optional[float] = None) -> int:
        duration = self.t_end if duration is None else duration
        n = duration / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"duration {duration} is not a multiple of dt={self.dt}")
        return int(round(n))

    def check_noise_depth(self, J_max: int) -> None:
        if self.p < J_max:
            raise ValueError(
                f"dt=2^-{self.p} is coarser than the Haar resolution 2^-{J_max}"
            )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States at step times t0 + j dt, with the predictor stages that produced them.

    ``compact`` has shape (n_steps + 1, ..., *kernel.shape) and holds the band
    part; ``remainder`` (same leading shape, full layout) the out-of-band
    part, or None when it vanishes.  ``states`` assembles full coefficient
    arrays on first access.
    """

    t0: float
    dt: float
    compact: np.ndarray = field(repr=False)
    grid: GridSpec = field(repr=False)
    predictors: Optional[np.ndarray] = field(default=None, repr=False)
    remainder: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_steps(self) -> int:
        return self.compact.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * self.n_steps

    @cached_property
    def states(self) -> np.ndarray:
        out = get_kernel(self.grid).unpack(self.compact)
        if self.remainder is not None:
            out = out + self.remainder
        out.flags.writeable = False
        return out

    def index(self, t: float) -> int:
        j = (t - self.t0) / self.dt
        if abs(j - round(j)) > 1e-9 or not -1e-9 <= j <= self.n_steps + 1e-9:
            raise ValueError(f"time {t} is not a step time of this trajectory")
        return int(round(j))

    def field(self, t: float) -> SpectralField:
        return SpectralField(self.states[self.index(t)], self.grid)

    def __len__(self):
        return self.n_steps + 1

    def __getitem__(self, j) -> SpectralField:
        return SpectralField(self.states[j], self.grid)

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]


# ---------------------------------------------------------------------------
# State and forcing splitting
# ---------------------------------------------------------------------------


def _split(full: np.ndarray, K: BandKernel):
    c = K.pack(full)
    r = full - K.unpack(c)
    return c, (r if np.any(r) else None)


class _SplitForcing:
    """Wraps ``f(t, left)`` to return (band part, out-of-band part or None)."""

    def __init__(self, f: Optional[Forcing], K: BandKernel):
        self.f = f
        self.K = K
        self.fast = getattr(f, "in_band", False)

    def __call__(self, t: float, left: bool):
        if self.f is None:
            return None, None
        if self.fast:
            return self.f.compact(t, left), None
        out = self.f(t, left=left)
        if out is None:
            return None, None
        if isinstance(out, SpectralField):
            out = out.coeffs
        return _split(np.asarray(out, dtype=complex), self.K)


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _check(c, r, K: BandKernel, bound: Optional[float], t: float):
    if not np.all(np.isfinite(c)) or (r is not None and not np.all(np.isfinite(r))):
        raise NonFiniteState(f"non-finite coefficients at t={t:.6g}")
    if bound is not None:
        m = K.g.m_sobolev
        sq = K.sobolev_norm(c, m) ** 2
        if r is not None:
            sq = sq + sobolev_norm(r, m, K.g) ** 2
        nrm = float(np.max(np.sqrt(sq)))
        if nrm > bound:
            raise AbsorbingSetViolation(f"||v||_V^m = {nrm:.4g} > K = {bound:g} at t={t:.6g}")


def _heun(v, t, dt, E, N, j, f):
    """One integrating-factor Heun step on the band part; returns (v+, predictor, f0, f1).

    ``N(x, t, j, stage)`` is the non-stiff term on step ``j``; ``stage`` is
    None at the start of the step and ``"pred"`` for the predictor.  ``f``
    returns the split forcing, whose out-of-band halves are handed back.
    """
    f0c, f0r = f(t, False)
    n0 = _add(N(v, t, j, None), f0c)
    vt = E * (v + dt * n0)
    f1c, f1r = f(t + dt, True)
    n1 = _add(N(vt, t + dt, j, "pred"), f1c)
    return E * v + 0.5 * dt * (E * n0 + n1), vt, f0r, f1r


def _integrate(c0, r0, K: BandKernel, dt, N, force, t0, n_steps, keep_stages=True,
               bound=None, record=True):
    """Returns (band states, predictors, remainder states); unrecorded runs keep endpoints."""
    Ec = np.exp(-K.lam * dt)
    Er = np.exp(-K.g.lam * dt)
    states = np.empty((n_steps + 1,) + c0.shape, dtype=complex) if record else None
    preds = np.empty((n_steps,) + c0.shape, dtype=complex) if keep_stages else None
    rem = [r0] if record else None
    c, r = c0, r0
    if record:
        states[0] = c0
    _check(c, r, K, bound, t0)
    for j in range(n_steps):
        t = t0 + j * dt
        c, ct, f0r, f1r = _heun(c, t, dt, Ec, N, j, force)
        if keep_stages:
            preds[j] = ct
        if r is not None or f0r is not None or f1r is not None:
            lin = 0.0 if r is None else Er * r
            src = _add(None if f0r is None else Er * f0r, f1r)
            r = lin + (0.0 if src is None else 0.5 * dt * src)
        _check(c, r, K, bound, t + dt)
        if record:
            states[j + 1] = c
            rem.append(r)
    if not record:
        states = np.stack([c0, c])
        rem = [r0, r]
    return states, preds, _stack_remainder(rem, c0.shape[:-4], K)


def _stack_remainder(rem, lead, K: BandKernel):
    if all(r is None for r in rem):
        return None
    full = lead + K.g.shape
    return np.stack([np.zeros(full, dtype=complex) if r is None else r for r in rem])


# ---------------------------------------------------------------------------
# Public drivers
# ---------------------------------------------------------------------------


def _self_advection(K: BandKernel):
    def N(v, t, j, stage):
        return -K.B_self(v)

    return N


def solve(v0, forcing: Optional[Forcing], cfg: StepperConfig, g: Optional[GridSpec] = None,
          t0: float = 0.0, keep_stages: bool = True, record: bool = True) -> Trajectory:
    """Integrate the forced projected equation from ``t0`` to ``t0 + cfg.t_end``.

    Parameters
    ----------
    v0 : SpectralField or ndarray
        Initial state; raw arrays may carry leading batch axes.
    forcing : callable or None
        ``forcing(t, left=False)`` returning coefficients (or a field) in V
        with the same leading shape as ``v0``.
    cfg : StepperConfig
    keep_stages : bool
        Keep the predictor stages (needed for exact tangent propagation).
    record : bool
        Keep every step; otherwise the trajectory holds only the endpoints
        (its ``dt`` is then the whole duration).

    Raises
    ------
    AbsorbingSetViolation
        If ``cfg.monitor_K`` is set and the V^m norm exceeds it.
    NonFiniteState
        If a coefficient stops being finite.
    """
    c0, g = _unwrap(v0, g)
    K = get_kernel(g)
    c, r = _split(np.asarray(c0, dtype=complex), K)
    n = cfg.n_steps()
    states, preds, rem = _integrate(
        c, r, K, cfg.dt, _self_advection(K), _SplitForcing(forcing, K), t0, n,
        keep_stages and record, cfg.monitor_K, record,
    )
    if not record:
        return Trajectory(t0, cfg.dt * n, states, g, None, rem)
    return Trajectory(t0, cfg.dt, states, g, preds, rem)


def time_one_map(v0, seg, cfg: Optional[StepperConfig] = None, g: Optional[GridSpec] = None):
    """S(v0, eta): endpoint of the solution on [0, 1] forced by the noise segment(s).

    ``seg`` is a ``NoiseSegment``, a list of them (one per member of a batch
    ``v0`` of shape (B, 2, Nx, Ny, Nz)) or None for zero forcing.  Returns the
    same kind of object as ``v0``.
    """
    from .rednoise import NoiseForcing, NoiseSegment

    cfg = cfg or StepperConfig()
    if cfg.t_end != 1.0:
        cfg = StepperConfig(cfg.dt, 1.0, cfg.monitor_K)
    c0, g = _unwrap(v0, g)
    c0 = np.asarray(c0, dtype=complex)
    if seg is not None:
        spec = seg.spec if isinstance(seg, NoiseSegment) else seg[0].spec
        cfg.check_noise_depth(spec.J_max)
    batched = c0.ndim == len(g.shape) + 1
    if batched and isinstance(seg, NoiseSegment):
        raise ValueError("a batch of initial states needs one segment per member")
    if batched and seg is not None and len(seg) != c0.shape[0]:
        raise ValueError(f"{len(seg)} segments for {c0.shape[0]} members")
    if not batched or c0.shape[0] <= CHUNK:
        forcing = None if seg is None else NoiseForcing(seg, g)
        out = solve(c0, forcing, cfg, g, record=False).endpoint
    else:
        parts = []
        for a in range(0, c0.shape[0], CHUNK):
            sl = slice(a, a + CHUNK)
            forcing = None if seg is None else NoiseForcing(list(seg[sl]), g)
            parts.append(solve(c0[sl], forcing, cfg, g, record=False).endpoint)
        out = np.concatenate(parts)
    return SpectralField(out, g) if isinstance(v0, SpectralField) else out


def _forcing_for(h, g):
    if h is None or callable(h):
        return h
    coeffs, _ = _unwrap(h, g)
    return lambda t, left=False: coeffs


def _lift(u: np.ndarray, extra: int) -> np.ndarray:
    return u.reshape((1,) * extra + u.shape) if extra else u


def tangent_propagate(w0, base_traj: Trajectory, t1: float, t2: float,
                      h: Optional[Forcing] = None, g: Optional[GridSpec] = None):
    """S_{t1}^{t2} w0 (plus the response to forcing ``h``) along ``base_traj``.

    The predictor is linearised about the base trajectory's own predictor
    stage, so the result is the exact derivative of the discrete time-stepper.
    ``w0`` may carry extra leading batch axes (several directions at once).
    """
    g = base_traj.grid
    K = get_kernel(g)
    c0, _ = _unwrap(w0, g)
    c0 = np.asarray(c0, dtype=complex)
    j0, j1 = base_traj.index(t1), base_traj.index(t2)
    if j1 < j0:
        raise ValueError("t2 must not precede t1")
    states = base_traj.compact
    preds = base_traj.predictors
    extra = c0.ndim - (states.ndim - 1)

    def base_at(j, stage):
        if stage is None:
            u = states[j0 + j]
        elif preds is not None:
            u = preds[j0 + j]
        else:
            u = states[j0 + j + 1]
        return _lift(u, extra)

    def N(w, t, j, stage):
        return -K.tangent(base_at(j, stage), w)

    c, r = _split(c0, K)
    out_c, _, rem = _integrate(c, r, K, base_traj.dt, N, _SplitForcing(_forcing_for(h, g), K),
                               t1, j1 - j0, keep_stages=False, record=False)
    out = K.unpack(out_c[-1])
    if rem is not None:
        out = out + rem[-1]
    return SpectralField(out, g) if isinstance(w0, SpectralField) else out


def adjoint_propagate(w2, base_traj: Trajectory, t2: float, t1: float,
                      g: Optional[GridSpec] = None):
    """Sbar_{t2}^{t1} w2: solve dw/dt + Laplacian w - B_u(w) = 0 backward from t2.

    Integrated forward in reversed time s, wbar(s) = w(t1 + t2 - s), with the
    same scheme; the base flow is sampled at step times only.
    """
    g = base_traj.grid
    K = get_kernel(g)
    c2, _ = _unwrap(w2, g)
    c2 = np.asarray(c2, dtype=complex)
    j1, j2 = base_traj.index(t1), base_traj.index(t2)
    if j2 < j1:
        raise ValueError("t1 must not exceed t2")
    states = base_traj.compact
    extra = c2.ndim - (states.ndim - 1)

    def N(w, t, j, stage):
        idx = j2 - j if stage is None else j2 - j - 1
        return -K.adjoint(_lift(states[idx], extra), w)

    c, r = _split(c2, K)
    out_c, _, rem = _integrate(c, r, K, base_traj.dt, N, _SplitForcing(None, K), t1, j2 - j1,
                               keep_stages=False, record=False)
    out = K.unpack(out_c[-1])
    if rem is not None:
        out = out + rem[-1]
    return SpectralField(out, g) if isinstance(w2, SpectralField) else out
