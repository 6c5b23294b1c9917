"""
Markov chain driver and mixing diagnostics.

The chain is u_{k+1} = S(u_k, eta_k), with eta_k the noise segment drawn for
interval k.  Segment lineage is (master seed, interval index, stream): the
reference chain uses stream 0, ensemble member i uses stream i + 1, so every
trajectory in an experiment can be regenerated on its own.

Law distances are estimated with a fixed dictionary of bounded Lipschitz
functionals g(u) = psi(s <u, phi> - o) / (1 + s lip) with psi in {tanh, ramp}; each
has ||g||_L <= 1, so the maximum over the dictionary of the difference of
ensemble means is a lower bound of the dual-Lipschitz distance, and it is a
maximum of pseudo-metrics (symmetric, triangle inequality).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .rednoise import NoiseSegment, RedNoiseSpec, draw_segment
from .spectral import (
    GridSpec,
    SpectralField,
    _unwrap,
    basis_matrix,
    basis_modes,
    eigenvalue,
    primed_norm,
    random_field,
    sobolev_norm,
)
from .timestep import StepperConfig, solve, tangent_propagate, time_one_map

__all__ = [
    "ChainState",
    "CouplingReport",
    "EmptyEnsemble",
    "FitFailure",
    "GramianReport",
    "MixingReport",
    "TestFunctionalDictionary",
    "dual_lipschitz",
    "fit_decay",
    "gramian_nondegeneracy",
    "mixing_experiment",
    "noise_floor",
    "run_chain",
    "run_coupled",
]


class EmptyEnsemble(ValueError):
    """An ensemble passed to a distance estimate has no members."""


class FitFailure(RuntimeError):
    """Too few usable distance estimates for the exponential fit."""


# ---------------------------------------------------------------------------
# Chains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainState:
    """State u_n of one chain; the segment that advances it is
    ``draw_segment(spec, seed, step, stream)``."""

    field: SpectralField
    step: int
    seed: int
    stream: int = 0

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step must be non-negative")


def _segment(spec: Optional[RedNoiseSpec], seed: int, n: int, stream: int):
    return None if spec is None else draw_segment(spec, seed, n, stream)


def run_chain(u0, n_steps: int, spec: Optional[RedNoiseSpec], master_seed: int,
              cfg: Optional[StepperConfig] = None, g: Optional[GridSpec] = None,
              stream: int = 0, start: int = 0) -> List[ChainState]:
    """Iterate the time-one map ``n_steps`` times.

    ``spec=None`` runs the unforced chain.  ``cfg.monitor_K``, if set, is
    checked at every time step.  Returns the ``n_steps + 1`` states, starting
    with ``u0`` at step ``start``.
    """
    c, g = _unwrap(u0, g)
    cfg = cfg or StepperConfig()
    u = SpectralField(c, g)
    out = [ChainState(u, start, master_seed, stream)]
    for n in range(start, start + n_steps):
        u = time_one_map(u, _segment(spec, master_seed, n, stream), cfg)
        out.append(ChainState(u, n + 1, master_seed, stream))
    return out


@dataclass(frozen=True, eq=False)
class CouplingReport:
    """Difference norms of two chains driven by identical noise, k = 0 .. n_steps."""

    diff_L2: np.ndarray
    diff_Vm: np.ndarray
    diff_primed: np.ndarray

    @property
    def ratios(self) -> np.ndarray:
        d = self.diff_L2
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(d[:-1] > 0, d[1:] / d[:-1], 0.0)

    def mean_factor(self) -> float:
        """Geometric mean of the one-step L^2 contraction factors."""
        d = self.diff_L2
        if d[0] == 0:
            return 0.0
        n = len(d) - 1
        return float((d[-1] / d[0]) ** (1.0 / n)) if d[-1] > 0 else 0.0

    def expanding_steps(self, tol: float = 0.05) -> np.ndarray:
        """Steps k at which ||u_{k+1} - u'_{k+1}|| > (1 + tol) ||u_k - u'_k||."""
        return np.nonzero(self.ratios > 1.0 + tol)[0]

    def log_slope(self, floor: float = 1e-13) -> float:
        """Least-squares slope of log diff_L2 over the steps above ``floor`` relative."""
        d = self.diff_L2
        keep = d > floor * max(d[0], 1e-300)
        k = np.nonzero(keep)[0]
        if len(k) < 2:
            return float("nan")
        return float(np.polyfit(k, np.log(d[keep]), 1)[0])


def run_coupled(u0, u0p, n_steps: int, master_seed: int, spec: Optional[RedNoiseSpec],
                cfg: Optional[StepperConfig] = None, g: Optional[GridSpec] = None,
                stream: int = 0) -> CouplingReport:
    """Advance u0 and u0' with the same noise segments and record their distance."""
    a, g = _unwrap(u0, g)
    b, _ = _unwrap(u0p, g)
    cfg = cfg or StepperConfig()
    pair = np.stack([a, b]).astype(complex)
    rows = [_diff_norms(pair, g)]
    for n in range(n_steps):
        seg = _segment(spec, master_seed, n, stream)
        pair = time_one_map(pair, None if seg is None else [seg, seg], cfg, g)
        rows.append(_diff_norms(pair, g))
    rows = np.array(rows)
    return CouplingReport(rows[:, 0], rows[:, 1], rows[:, 2])


def _diff_norms(pair, g):
    d = pair[0] - pair[1]
    return (sobolev_norm(d, 0, g), sobolev_norm(d, g.m_sobolev, g), primed_norm(d, g))


# ---------------------------------------------------------------------------
# Distance estimate
# ---------------------------------------------------------------------------


def _ramp(x):
    return np.clip(x, -1.0, 1.0)


_WRAPPERS = {"tanh": np.tanh, "ramp": _ramp}


@dataclass(frozen=True, eq=False)
class TestFunctionalDictionary:
    """Fixed family g_{p,s,o}(u) = psi(s <u, phi_p> - o) / (1 + s lip).

    Parameters
    ----------
    directions : ndarray
        (P, 2, Nx, Ny, Nz) coefficient arrays of unit L^2 norm.
    scales : ndarray
        Saturation scales s > 0.
    kinds : tuple of str
        Wrappers psi, from {"tanh", "ramp"}; both are 1-Lipschitz and bounded by one.
    offsets : tuple of float
        Centre shifts o; o = +-1 lets a ramp span [-1, 1] between two states.
    lip : float
        Lipschitz constant of u -> <u, phi> with respect to the V^m norm,
        max(1, lambda_1^(-m/2)); including it keeps ||g||_L <= 1 in V^m.
    """

    __test__ = False  # not a pytest class

    directions: np.ndarray
    grid: GridSpec = field(repr=False)
    scales: np.ndarray = field(default_factory=lambda: 2.0 ** (np.arange(-24, 25) / 4))
    kinds: tuple = ("tanh", "ramp")
    lip: float = 1.0
    offsets: tuple = (-1.0, 0.0, 1.0)

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=complex)
        if d.ndim != 5 or d.shape[1:] != self.grid.shape:
            raise ValueError("directions must have shape (P, 2, Nx, Ny, Nz)")
        norms = sobolev_norm(d, 0, self.grid)
        if not np.allclose(norms, 1.0, rtol=1e-10):
            raise ValueError("directions must have unit L^2 norm")
        if np.any(np.asarray(self.scales) <= 0):
            raise ValueError("scales must be positive")
        unknown = set(self.kinds) - set(_WRAPPERS)
        if unknown:
            raise ValueError(f"unknown wrapper(s) {sorted(unknown)}")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=float))
        # <u, phi> = Re sum conj(phi) u w, flattened once
        w = np.conj(d) * self.grid.weight
        object.__setattr__(self, "_dual", w.reshape(len(d), -1))

    @classmethod
    def default(cls, g: GridSpec, P: int = 64, n_coordinates: Optional[int] = None,
                seed: int = 0, **kw) -> "TestFunctionalDictionary":
        """Lowest-mode coordinates followed by random unit directions in V."""
        n_coord = P // 2 if n_coordinates is None else n_coordinates
        n_coord = min(n_coord, P, len(basis_modes(g)))
        coords = basis_matrix(g, n_coord)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x44494354]))
        rand = random_field(g, rng, batch=(P - n_coord,))
        rand = rand / sobolev_norm(rand, 0, g)[:, None, None, None, None] if len(rand) else rand
        lam1 = eigenvalue(basis_modes(g)[0], g)
        lip = max(1.0, lam1 ** (-g.m_sobolev / 2))
        return cls(np.concatenate([coords, rand]), g, lip=lip, **kw)

    @property
    def size(self) -> int:
        return len(self.directions) * len(self.scales) * len(self.kinds) * len(self.offsets)

    def projections(self, U: np.ndarray) -> np.ndarray:
        """<u, phi_p> for an ensemble U of shape (N, 2, Nx, Ny, Nz); returns (N, P)."""
        flat = np.asarray(U).reshape(len(U), -1)
        return (flat @ self._dual.T).real

    def evaluate(self, U: np.ndarray) -> np.ndarray:
        """All functionals on all members, shape (N, size)."""
        T = self.projections(U)
        s = self.scales
        sT = T[:, :, None] * s[None, None, :]
        out = [
            _WRAPPERS[k](sT - o) / (1.0 + s * self.lip)
            for k in self.kinds
            for o in self.offsets
        ]
        return np.concatenate([o.reshape(len(U), -1) for o in out], axis=1)


def _as_ensemble(E, g):
    if isinstance(E, np.ndarray) and E.ndim == 5:
        return E
    items = list(E)
    if not items:
        raise EmptyEnsemble("ensemble has no members")
    return np.stack([_unwrap(x, g)[0] for x in items])


def dual_lipschitz(A, B, dictionary: TestFunctionalDictionary) -> float:
    """max over the dictionary of |E_A g - E_B g|; a lower bound of the metric, in [0, 2].

    ``A`` and ``B`` are sequences of fields (or stacked coefficient arrays).
    """
    g = dictionary.grid
    A = _as_ensemble(A, g)
    B = _as_ensemble(B, g)
    if len(A) == 0 or len(B) == 0:
        raise EmptyEnsemble("ensemble has no members")
    diff = dictionary.evaluate(A).mean(axis=0) - dictionary.evaluate(B).mean(axis=0)
    return float(np.max(np.abs(diff)))


def noise_floor(A, B, dictionary: TestFunctionalDictionary, rng: np.random.Generator,
                n_boot: int = 200, paired: bool = False) -> float:
    """Root-mean-square of the distance estimate under the null of equal laws.

    Unpaired ensembles are pooled and re-split at random; paired ensembles
    (member i of A and of B share their noise) swap partners at random.
    """
    g = dictionary.grid
    GA = dictionary.evaluate(_as_ensemble(A, g))
    GB = dictionary.evaluate(_as_ensemble(B, g))
    if paired:
        if len(GA) != len(GB):
            raise ValueError("paired ensembles must have equal size")
        signs = rng.choice([-1.0, 1.0], size=(n_boot, len(GA)))
        stats = np.abs(signs @ (GA - GB)) / len(GA)
    else:
        na, nb = len(GA), len(GB)
        Z = np.concatenate([GA, GB])
        base = np.concatenate([np.full(na, 1.0 / na), np.full(nb, -1.0 / nb)])
        W = np.stack([rng.permutation(base) for _ in range(n_boot)])
        stats = np.abs(W @ Z)
    return float(np.sqrt(np.mean(np.max(stats, axis=1) ** 2)))


# ---------------------------------------------------------------------------
# Mixing experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MixingReport:
    """Distance estimates d_k between the law of u_k(u0) and the reference, k = 0 .. n.

    ``stderr`` is the bootstrap noise floor of each estimate.  The fit
    d_k ~ C kappa^k uses the k with d_k > 2 stderr_k; when fewer than
    ``min_points`` qualify, ``fit_error`` holds the reason and the fitted
    values are None.
    """

    d: np.ndarray
    stderr: np.ndarray
    ensemble_size: int
    config: dict = field(default_factory=dict)
    C: Optional[float] = None
    kappa: Optional[float] = None
    r2: Optional[float] = None
    fit_mask: Optional[np.ndarray] = None
    fit_error: Optional[str] = None

    @property
    def fit_ok(self) -> bool:
        return self.fit_error is None


def fit_decay(d: np.ndarray, stderr: np.ndarray, factor: float = 2.0, min_points: int = 5):
    """Least squares of log d_k = log C + k log kappa over the significant k.

    Returns (C, kappa, r2, mask); raises FitFailure when fewer than
    ``min_points`` estimates are positive and exceed ``factor`` standard errors.
    """
    d = np.asarray(d, dtype=float)
    stderr = np.asarray(stderr, dtype=float)
    mask = (d > 0) & (d > factor * stderr)
    k = np.nonzero(mask)[0]
    if len(k) < min_points:
        raise FitFailure(f"{len(k)} significant estimates, need {min_points}")
    y = np.log(d[mask])
    slope, icpt = np.polyfit(k, y, 1)
    resid = y - (icpt + slope * k)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(math.exp(icpt)), float(math.exp(slope)), r2, mask


def _advance(X: np.ndarray, segs, cfg: StepperConfig, g: GridSpec, workers: int = 1):
    if workers <= 1 or len(X) <= 8:
        return time_one_map(X, segs, cfg, g)
    from concurrent.futures import ProcessPoolExecutor

    bounds = np.array_split(np.arange(len(X)), workers)
    with ProcessPoolExecutor(workers) as ex:
        futs = [
            ex.submit(time_one_map, X[b], None if segs is None else [segs[i] for i in b], cfg, g)
            for b in bounds if len(b)
        ]
        return np.concatenate([f.result() for f in futs])


def reference_ensemble(size: int, spec: Optional[RedNoiseSpec], master_seed: int,
                       cfg: StepperConfig, g: GridSpec, burn_in: int = 50, thin: int = 5,
                       start=None) -> np.ndarray:
    """States burn_in, burn_in + thin, ... of one chain on stream 0 (the empirical mu)."""
    u = np.zeros(g.shape, dtype=complex) if start is None else _unwrap(start, g)[0]
    out = []
    n = 0
    last = burn_in + thin * (size - 1)
    while n <= last:
        if n >= burn_in and (n - burn_in) % thin == 0:
            out.append(u)
        if n == last:
            break
        u = time_one_map(u, _segment(spec, master_seed, n, 0), cfg, g)
        n += 1
    return np.stack(out)


def mixing_experiment(u0s: Sequence, n_steps: int = 50, ensemble_size: int = 64,
                      burn_in: int = 50, thin: int = 5, spec: Optional[RedNoiseSpec] = None,
                      master_seed: int = 0, cfg: Optional[StepperConfig] = None,
                      g: Optional[GridSpec] = None,
                      dictionary: Optional[TestFunctionalDictionary] = None,
                      synchronous: bool = True, n_boot: int = 200, reference=None,
                      workers: int = 1, min_points: int = 5) -> List[MixingReport]:
    """Distance between the law of u_k(u0) and the empirical stationary law, per u0.

    Member i of every ensemble is driven by the segments of stream i + 1.
    With ``synchronous=True`` the reference ensemble is advanced by the same
    segments as the members (reference member i with stream i + 1); it stays
    distributed as mu, the two ensembles become paired, and the noise of the
    estimate shrinks with the pathwise distance.  Otherwise the reference is
    held fixed.

    Parameters
    ----------
    u0s : sequence of fields
        Initial conditions; each gets its own report.
    reference : ndarray, optional
        Precomputed reference states (ensemble_size, 2, Nx, Ny, Nz); built
        with ``reference_ensemble`` when omitted.
    workers : int
        Process pool size for advancing the ensembles.

    Returns
    -------
    list of MixingReport
        One report per u0; a failed fit is recorded in ``fit_error``.
    """
    if ensemble_size < 32:
        raise ValueError("ensemble_size must be at least 32")
    if not u0s:
        raise EmptyEnsemble("no initial conditions")
    g = g or _unwrap(u0s[0], None)[1]
    cfg = cfg or StepperConfig()
    if dictionary is None:
        dictionary = TestFunctionalDictionary.default(g, seed=master_seed)
    if reference is None:
        R = reference_ensemble(ensemble_size, spec, master_seed, cfg, g, burn_in, thin)
    else:
        R = np.asarray(reference, dtype=complex)
        if len(R) != ensemble_size:
            raise ValueError("reference size must equal ensemble_size")
    E = ensemble_size
    n0 = len(u0s)
    X = np.concatenate([np.repeat(_unwrap(u, g)[0][None], E, axis=0) for u in u0s] + [R])
    X = X.astype(complex)
    d = np.zeros((n0, n_steps + 1))
    se = np.zeros((n0, n_steps + 1))
    for k in range(n_steps + 1):
        Rk = X[n0 * E:]
        for j in range(n0):
            Xj = X[j * E:(j + 1) * E]
            d[j, k] = dual_lipschitz(Xj, Rk, dictionary)
            rng = np.random.default_rng([master_seed & 0xFFFFFFFF, k, j, 0x4D4958])
            se[j, k] = noise_floor(Xj, Rk, dictionary, rng, n_boot, paired=synchronous)
        if k == n_steps:
            break
        segs = None if spec is None else [draw_segment(spec, master_seed, k, i + 1) for i in range(E)]
        if synchronous:
            X = _advance(X, None if segs is None else segs * (n0 + 1), cfg, g, workers)
        else:
            X = np.concatenate([
                _advance(X[:n0 * E], None if segs is None else segs * n0, cfg, g, workers),
                X[n0 * E:],
            ])
    config = {
        "n_steps": n_steps,
        "ensemble_size": E,
        "burn_in": burn_in,
        "thin": thin,
        "synchronous": synchronous,
        "master_seed": master_seed,
        "dt": cfg.dt,
        "dictionary_size": dictionary.size,
        "noise": None if spec is None else spec.as_dict(),
        "grid": g.as_dict(),
    }
    reports = []
    for j in range(n0):
        try:
            C, kappa, r2, mask = fit_decay(d[j], se[j], min_points=min_points)
            reports.append(MixingReport(d[j], se[j], E, config, C, kappa, r2, mask))
        except FitFailure as exc:
            reports.append(MixingReport(d[j], se[j], E, config, fit_error=str(exc)))
    return reports


# ---------------------------------------------------------------------------
# Controllability Gramian
# ---------------------------------------------------------------------------


class _ProbeForcing:
    """h_a(t) = 1[t in slot tau_a] lambda_{i_a}^(-m/2) e_{i_a}, one probe per batch member."""

    def __init__(self, fields: np.ndarray, slots: np.ndarray, n_slots: int, g: GridSpec):
        from .kernel import get_kernel

        K = get_kernel(g)
        self.fields = fields
        self.slots = np.asarray(slots)
        self.n_slots = n_slots
        self._compact = K.pack(fields)
        self.in_band = bool(np.array_equal(K.unpack(self._compact), fields))

    def _mask(self, t: float, left: bool) -> np.ndarray:
        if not 0.0 <= t <= 1.0:
            return np.zeros(len(self.slots))
        pos = t * self.n_slots
        if (left and t > 0.0) or t >= 1.0:
            active = min(max(math.ceil(pos) - 1, 0), self.n_slots - 1)
        else:
            active = min(int(math.floor(pos)), self.n_slots - 1)
        return (self.slots == active).astype(float)

    def __call__(self, t: float, left: bool = False) -> np.ndarray:
        return self.fields * self._mask(t, left)[:, None, None, None, None]

    def compact(self, t: float, left: bool = False) -> np.ndarray:
        return self._compact * self._mask(t, left)[:, None, None, None, None]


@dataclass(frozen=True, eq=False)
class GramianReport:
    """Probe Gramian M[a, b] = <D_eta S h_a, D_eta S h_b>_{V^m} and its range-side restriction.

    ``eigenvalues`` is the (ascending) spectrum of M.  ``range_matrix`` is
    Y^T Y, with Y[a, i] the V^m coordinate of D_eta S h_a along the i-th of
    the probed modes (V^m-normalised); it has the same non-zero spectrum as M
    compressed to the span of those modes, and its smallest eigenvalue is
    positive exactly when the responses span them.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray
    probes: list
    range_matrix: Optional[np.ndarray] = None
    range_eigenvalues: Optional[np.ndarray] = None

    @property
    def smallest(self) -> float:
        """Smallest eigenvalue of the Gramian restricted to the probed modes."""
        ev = self.eigenvalues if self.range_eigenvalues is None else self.range_eigenvalues
        return float(ev[0])

    @property
    def condition(self) -> float:
        ev = self.eigenvalues if self.range_eigenvalues is None else self.range_eigenvalues
        return float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf")

    @property
    def probe_smallest(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def psd_ok(self) -> bool:
        return bool(self.eigenvalues[0] >= -1e-10 * np.trace(self.matrix))


def gramian_nondegeneracy(u0, seg: Optional[NoiseSegment], n_probe_modes: int = 10,
                          n_time_slots: int = 4, cfg: Optional[StepperConfig] = None,
                          g: Optional[GridSpec] = None,
                          modes: Optional[Sequence[int]] = None) -> GramianReport:
    """Gramian of D_eta S(u0, eta) on slot-indicator x scaled-mode probes.

    The probes are 1[slot tau](t) lambda_i^(-m/2) e_i for the ``n_probe_modes``
    lowest modes (or the basis indices ``modes``, repeats allowed) and
    ``n_time_slots`` equal slots of [0, 1].  Their responses are computed by
    one batched tangent propagation along Sol(u0, seg) with zero initial
    perturbation, and compared in the V^m inner product.
    """
    from .rednoise import NoiseForcing

    c0, g = _unwrap(u0, g)
    cfg = cfg or StepperConfig()
    if cfg.t_end != 1.0:
        cfg = StepperConfig(cfg.dt, 1.0, cfg.monitor_K)
    per_slot = 1.0 / n_time_slots / cfg.dt
    if n_time_slots < 1 or abs(per_slot - round(per_slot)) > 1e-9 or per_slot < 1:
        raise ValueError("time slots must be whole numbers of steps")
    if seg is not None:
        cfg.check_noise_depth(seg.spec.J_max)
    idx = list(range(n_probe_modes)) if modes is None else list(modes)
    all_modes = basis_modes(g)
    basis = basis_matrix(g, max(idx) + 1)
    lam = np.array([eigenvalue(all_modes[i], g) for i in idx])
    scaled = basis[idx] * (lam ** (-g.m_sobolev / 2))[:, None, None, None, None]
    fields = np.concatenate([scaled] * n_time_slots)
    slots = np.repeat(np.arange(n_time_slots), len(idx))
    probes = [(int(s), int(i)) for s in range(n_time_slots) for i in idx]

    forcing = None if seg is None else NoiseForcing(seg, g)
    base = solve(c0, forcing, cfg, g)
    h = _ProbeForcing(fields, slots, n_time_slots, g)
    W = tangent_propagate(np.zeros_like(fields), base, 0.0, 1.0, h=h)
    Wf = W.reshape(len(W), -1)
    D = np.broadcast_to(g.lam**g.m_sobolev * g.weight, g.shape).reshape(-1)
    M = (np.conj(Wf) * D) @ Wf.T
    M = 0.5 * (M.real + M.real.T)
    # coordinates along lambda_i^(-m/2) e_i, orthonormal in V^m
    uniq = sorted(set(idx))
    lam_u = np.array([eigenvalue(all_modes[i], g) for i in uniq])
    Eu = basis[uniq].reshape(len(uniq), -1) * (lam_u ** (-g.m_sobolev / 2))[:, None]
    Y = (np.conj(Eu) * D) @ Wf.T
    Y = Y.real
    R = Y @ Y.T
    R = 0.5 * (R + R.T)
    return GramianReport(M, np.linalg.eigvalsh(M), probes, R, np.linalg.eigvalsh(R))
