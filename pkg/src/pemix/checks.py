"""
Invariant suite run by ``pemix check``.

Each check draws its own random inputs from a seeded generator and returns a
``CheckResult`` with the worst observed value and the threshold it was held
to.  The suite is deterministic for a fixed seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .dynamics import B, adjoint_rhs, advect
from .rednoise import RedNoiseSpec, draw_segment, haar, haar0, sup_norm_sq
from .rednoise import NoiseForcing
from .spectral import (
    GridSpec,
    barotropic_divergence,
    basis_field,
    basis_modes,
    eigenvalue,
    from_physical,
    inner,
    project,
    random_field,
    sobolev_norm,
    to_physical,
)
from .timestep import StepperConfig, adjoint_propagate, solve, tangent_propagate

__all__ = ["CheckResult", "run_checks", "CHECKS"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def row(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{self.name:<22} {mark}  value={self.value:.3e}  limit={self.threshold:.1e}  {self.detail}"


def _norm(a, g, j=0):
    return sobolev_norm(a, j, g)


def check_energy(g: GridSpec, rng, n: int = 200, **_) -> CheckResult:
    """<b(u, v), v> = 0 for u in V and band-limited v."""
    worst = 0.0
    for _ in range(n):
        u = random_field(g, rng)
        v = random_field(g, rng, in_V=False)
        lhs = abs(inner(advect(u, v, g), v, g))
        worst = max(worst, lhs / (_norm(u, g, 1) * _norm(v, g, 1) ** 2))
    return CheckResult("energy_orthogonality", worst <= 1e-11, worst, 1e-11)


def check_projection(g: GridSpec, rng, n: int = 200, **_) -> CheckResult:
    """P is idempotent, L^2-orthogonal and lands in the divergence-free set."""
    worst = 0.0
    for _ in range(n):
        v = random_field(g, rng, in_V=False)
        p = project(v, g)
        nv = _norm(v, g)
        idem = _norm(project(p, g) - p, g) / nv
        orth = abs(inner(p, v - p, g)) / nv**2
        div = np.max(np.abs(barotropic_divergence(p, g))) / nv
        worst = max(worst, idem, orth, div)
    return CheckResult("projection", worst <= 1e-12, worst, 1e-12)


def check_poincare(g: GridSpec, rng, n: int = 200, **_) -> CheckResult:
    """||f|| <= lambda_1^(-1/2) ||grad f||, with equality on the first mode."""
    lam1 = eigenvalue(basis_modes(g)[0], g)
    worst = 0.0
    for _ in range(n):
        f = random_field(g, rng)
        worst = max(worst, _norm(f, g) * np.sqrt(lam1) / _norm(f, g, 1))
    e1 = basis_field(basis_modes(g)[0], g)
    tight = abs(_norm(e1, g) * np.sqrt(lam1) / _norm(e1, g, 1) - 1.0)
    ok = worst <= 1.0 + 1e-12 and tight <= 1e-12
    return CheckResult("poincare", ok, worst, 1.0,
                       f"max sqrt(lam1) ||f|| / ||grad f||; eigenmode gap {tight:.1e}",
                       extra={"eigenmode_gap": tight})


def check_bilinear_audit(g: GridSpec, rng, n: int = 100, **_) -> CheckResult:
    """||B(u, v)|| <= ||b(u, v)|| and the empirical constant of the V^3 x V^1 estimate."""
    worst = 0.0
    ratios = []
    for _ in range(n):
        u = random_field(g, rng)
        v = random_field(g, rng)
        bb = advect(u, v, g)
        nB, nb = _norm(project(bb, g), g), _norm(bb, g)
        worst = max(worst, (nB - nb) / max(nb, 1e-300))
        den = min(_norm(u, g, 3) * _norm(v, g, 1), _norm(u, g, 1) * _norm(v, g, 3))
        ratios.append(nB / den)
    C = float(np.max(ratios))
    return CheckResult("bilinear_estimate", worst <= 1e-12, max(worst, 0.0), 1e-12,
                       f"empirical C = {C:.3e}", extra={"C": C})


def check_adjoint(g: GridSpec, rng, n: int = 200, **_) -> CheckResult:
    """<B(u, v) + B(v, u), w> = <v, B_u(w)>."""
    worst = 0.0
    for _ in range(n):
        u, v, w = (random_field(g, rng) for _ in range(3))
        lhs = inner(B(u, v, g) + B(v, u, g), w, g)
        rhs = inner(v, adjoint_rhs(u, w, g), g)
        worst = max(worst, abs(lhs - rhs) / (_norm(u, g) * _norm(v, g) * _norm(w, g)))
    return CheckResult("adjoint_identity", worst <= 1e-10, worst, 1e-10)


def check_propagator_duality(g: GridSpec, rng, spec: Optional[RedNoiseSpec] = None,
                             seed: int = 0, exponents=(6, 7, 8, 9), **_) -> CheckResult:
    """<S v, w> - <v, Sbar w> vanishes at second order (or faster) in dt."""
    spec = spec or RedNoiseSpec()
    u0 = random_field(g, rng)
    u0 = u0 / _norm(u0, g, g.m_sobolev)
    v, w = random_field(g, rng), random_field(g, rng)
    seg = draw_segment(spec, seed, 0)
    mism = []
    for p in exponents:
        cfg = StepperConfig(2.0**-p)
        base = solve(u0, NoiseForcing(seg, g), cfg, g)
        a = inner(tangent_propagate(v, base, 0.0, 1.0), w, g)
        b = inner(v, adjoint_propagate(w, base, 1.0, 0.0), g)
        mism.append(abs(a - b) / (_norm(v, g) * _norm(w, g)))
    slope = float(np.polyfit(-np.array(exponents, float) * np.log(2), np.log(mism), 1)[0])
    return CheckResult("propagator_duality", slope >= 1.9, slope, 1.9,
                       "mismatch " + ", ".join(f"{m:.1e}" for m in mism),
                       extra={"mismatch": mism})


def check_noise_bound(g: GridSpec, rng, spec: Optional[RedNoiseSpec] = None, seed: int = 0,
                      n: int = 100, **_) -> CheckResult:
    """sup_t ||eta(t)||^2_{V^m} <= sum b_i^2 (1 + (sum c_j)^2), and Haar orthonormality."""
    spec = spec or RedNoiseSpec(m_sobolev=g.m_sobolev)
    C = spec.bound()
    violations = 0
    worst = 0.0
    for i in range(n):
        s = sup_norm_sq(draw_segment(spec, seed, i, stream=7), g)
        worst = max(worst, s / C)
        violations += s > C
    haar_res = haar_residual(spec.J_max)
    ok = violations == 0 and haar_res <= 1e-6
    return CheckResult("noise_bound", ok, worst, 1.0,
                       f"{violations} violations, Haar residual {haar_res:.1e}",
                       extra={"haar_residual": haar_res})


def haar_residual(J: int, extra_levels: int = 4) -> float:
    """Max deviation of the Riemann-sum Gram matrix of {h0, 2^(j/2) h_jk} from the identity."""
    res = 2 ** (J + extra_levels)
    t = (np.arange(res) + 0.5) / res
    rows = [np.array([haar0(x) for x in t], dtype=float)]
    for j in range(J):
        for k in range(2**j):
            rows.append(2 ** (j / 2) * np.array([haar(j, k, x) for x in t], dtype=float))
    H = np.stack(rows)
    G = H @ H.T / res
    return float(np.max(np.abs(G - np.eye(len(G)))))


def check_roundtrip(g: GridSpec, rng, n: int = 20, **_) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        f = random_field(g, rng)
        back = from_physical(to_physical(f, g), g).coeffs
        worst = max(worst, np.max(np.abs(back - f)) / np.max(np.abs(f)))
    return CheckResult("transform_roundtrip", worst <= 1e-12, worst, 1e-12)


CHECKS: List[Callable] = [
    check_roundtrip,
    check_projection,
    check_poincare,
    check_energy,
    check_bilinear_audit,
    check_adjoint,
    check_propagator_duality,
    check_noise_bound,
]


def run_checks(g: GridSpec, spec: Optional[RedNoiseSpec] = None, seed: int = 0,
               n: Optional[int] = None) -> List[CheckResult]:
    """Run every check with its own generator derived from ``seed``."""
    out = []
    for i, fn in enumerate(CHECKS):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, i])
        kw = {"spec": spec, "seed": seed}
        if n is not None and fn not in (check_propagator_duality,):
            kw["n"] = n
        t0 = time.perf_counter()
        res = fn(g, rng, **kw)
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out
