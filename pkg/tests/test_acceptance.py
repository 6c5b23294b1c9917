"""Acceptance criteria at desk scale (default grid), one test and one printed line each."""

import numpy as np
import pytest

from helpers import Manufactured, low_mode_fields, observed_order, report

from pemix import checks
from pemix.mixing import gramian_nondegeneracy, mixing_experiment, run_coupled
from pemix.rednoise import RedNoiseSpec, draw_segment
from pemix.spectral import (
    GridSpec,
    basis_field,
    basis_modes,
    eigenvalue,
    primed_norm,
    random_field,
    sobolev_norm,
)
from pemix.timestep import StepperConfig, time_one_map


def _rng(i):
    return np.random.default_rng([2024, i])


def test_01_energy_orthogonality(g):
    r = checks.check_energy(g, _rng(1), n=200)
    assert report(1, "energy orthogonality", r.passed,
                  f"max |<b(u,v),v>| / (|u|_1 |v|_1^2) = {r.value:.2e} <= 1e-11")


def test_02_projection(g):
    r = checks.check_projection(g, _rng(2), n=200)
    assert report(2, "projection", r.passed,
                  f"max idempotence/orthogonality/divergence residual {r.value:.2e} <= 1e-12")


def test_03_poincare(g):
    r = checks.check_poincare(g, _rng(3), n=200)
    assert report(3, "Poincare", r.passed,
                  f"max sqrt(lam1)|f|/|grad f| = {r.value:.6f} <= 1, "
                  f"eigenmode gap {r.extra['eigenmode_gap']:.1e} <= 1e-12")


def test_04_adjoint_identity(g):
    r = checks.check_adjoint(g, _rng(4), n=200)
    assert report(4, "adjoint identity", r.passed, f"max relative mismatch {r.value:.2e} <= 1e-10")


def test_05_propagator_duality(g):
    r = checks.check_propagator_duality(g, _rng(5), RedNoiseSpec(), seed=5, exponents=(6, 7, 8, 9))
    mism = np.array(r.extra["mismatch"])
    C = float(np.max(mism / 2.0 ** (-2 * np.arange(6, 10))))
    assert report(5, "propagator duality", r.passed,
                  f"order {r.value:.3f} >= 1.9 over dt 2^-6..2^-9, mismatch <= {C:.2e} dt^2")


def test_06_stepper_order(g):
    ms = Manufactured(g)
    ps = [6, 7, 8, 9, 10]
    errs = [ms.error(p) for p in ps]
    slope = observed_order(ps, errs)
    ok = abs(slope - 2.0) <= 0.1
    assert report(6, "stepper order", ok, f"manufactured-solution slope {slope:.3f} (2.0 +- 0.1)")


def test_07_single_mode_decay():
    g = GridSpec(L=2 * np.pi)
    a = 1.3
    e = basis_field(basis_modes(g)[0], g)  # Lambda_{1,0}^{0-}
    end = time_one_map(a * e, None, StepperConfig(2.0**-10), g)
    want = a * np.exp(-1.0) * sobolev_norm(e, 0, g)
    rel = abs(sobolev_norm(end, 0, g) - want) / want
    assert report(7, "single-mode decay", rel <= 1e-4, f"relative error {rel:.2e} <= 1e-4")


def test_08_dissipativity(g):
    rng = _rng(8)
    lam1 = eigenvalue(basis_modes(g)[0], g)
    cfg = StepperConfig()
    U = random_field(g, rng, batch=(20,))
    radius = rng.uniform(0.1, 2.0, 20)
    U = U * (radius / sobolev_norm(U, g.m_sobolev, g))[:, None, None, None, None]
    S = time_one_map(U, None, cfg, g)
    ratio = sobolev_norm(S, 0, g) / sobolev_norm(U, 0, g)
    gamma = float(np.max(primed_norm(S, g) / primed_norm(U, g)))
    ok = bool(np.all(ratio <= np.exp(-lam1 / 2))) and gamma < 1
    assert report(8, "dissipativity", ok,
                  f"max |S(u0,0)|/|u0| = {ratio.max():.4f} <= e^(-lam1/2) = {np.exp(-lam1 / 2):.4f}; "
                  f"primed-norm gamma = {gamma:.4f} (delta = {g.delta})")


def test_09_noise_bound(g):
    r = checks.check_noise_bound(g, _rng(9), RedNoiseSpec(), seed=9, n=100)
    assert report(9, "noise bound", r.passed,
                  f"{r.detail}; max sup|eta|^2 / bound = {r.value:.3f}")


def test_10_gramian(g):
    dt = 2.0**-7
    cfg = StepperConfig(dt)
    lam = np.array([eigenvalue(m, g) for m in basis_modes(g)[:10]])
    heat = gramian_nondegeneracy(np.zeros(g.shape, complex), None, 10, 1, cfg, g)
    err = float(np.max(np.abs(np.diag(heat.matrix) - ((1 - np.exp(-lam)) / lam) ** 2)))
    u0 = low_mode_fields(g, 1, norm=1.0, seed=10)[0]
    gen = gramian_nondegeneracy(u0, draw_segment(RedNoiseSpec(), 10, 0), 10, 4, cfg, g)
    ok = err <= dt**2 and gen.smallest > 0 and gen.psd_ok
    assert report(10, "Gramian non-degeneracy", ok,
                  f"heat diagonal error {err:.2e} <= dt^2 = {dt**2:.2e}; generic smallest "
                  f"eigenvalue {gen.smallest:.3e}, condition {gen.condition:.2e}")


def test_11_mixing(g):
    u0s = low_mode_fields(g, 3, norm=2.0, seed=11)
    reps = mixing_experiment(u0s, n_steps=50, ensemble_size=64, burn_in=50, thin=5,
                             spec=RedNoiseSpec(), master_seed=11, cfg=StepperConfig(2.0**-5), g=g)
    fits = [(r.kappa, r.r2) for r in reps]
    each = all(r.fit_ok and r.kappa < 1 and r.r2 >= 0.9 for r in reps)
    kappas = [r.kappa for r in reps if r.fit_ok]
    spread = max(kappas) - min(kappas) if len(kappas) == 3 else float("inf")
    detail = ", ".join(f"kappa={k:.3f} R2={r2:.3f}" if k is not None else "fit failed"
                       for k, r2 in fits)
    assert report(11, "mixing", each and spread <= 0.15, f"{detail}; spread {spread:.3f} <= 0.15")


def test_12_coupling(g):
    rng = _rng(12)
    u0 = random_field(g, rng)
    u0 *= 1.0 / sobolev_norm(u0, g.m_sobolev, g)
    d = random_field(g, rng)
    u0p = u0 + 1e-3 * d / sobolev_norm(d, 0, g)
    rep = run_coupled(u0, u0p, 50, 12, RedNoiseSpec(), StepperConfig(), g)
    factor = rep.mean_factor()
    expanding = rep.expanding_steps().tolist()
    assert report(12, "coupling", factor < 1,
                  f"mean factor per step {factor:.4f} < 1; steps expanding by > 5%: {expanding}")
