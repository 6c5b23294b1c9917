import numpy as np
import pytest

from helpers import Manufactured, observed_order

from pemix.rednoise import NoiseForcing, RedNoiseSpec, draw_segment
from pemix.spectral import (
    GridSpec,
    SpectralField,
    basis_field,
    basis_modes,
    eigenvalue,
    inner,
    primed_norm,
    random_field,
    sobolev_norm,
)
from pemix.timestep import (
    AbsorbingSetViolation,
    NonFiniteState,
    StepperConfig,
    Trajectory,
    adjoint_propagate,
    dyadic_exponent,
    solve,
    tangent_propagate,
    time_one_map,
)


def _ball(g, rng, radius=2.0, batch=()):
    u = random_field(g, rng, batch=batch)
    n = sobolev_norm(u, g.m_sobolev, g)
    return u * (radius / np.asarray(n))[(...,) + (None,) * 4] if batch else u * (radius / n)


@pytest.mark.parametrize("dt", [0.3, 0.5, 1.0, -0.125, 0.0])
def test_stepper_config_rejects(dt):
    with pytest.raises(ValueError):
        StepperConfig(dt)


def test_dyadic_exponent_and_noise_depth():
    assert dyadic_exponent(2.0**-7) == 7
    assert dyadic_exponent(0.3) is None
    StepperConfig(2.0**-5).check_noise_depth(5)
    with pytest.raises(ValueError):
        StepperConfig(2.0**-4).check_noise_depth(5)
    with pytest.raises(ValueError):
        StepperConfig(2.0**-3, t_end=0.3).n_steps()


def test_zero_state_zero_forcing(g):
    traj = solve(np.zeros(g.shape, complex), None, StepperConfig(2.0**-4), g)
    assert np.all(traj.states == 0)
    assert np.all(time_one_map(SpectralField.zeros(g), None).coeffs == 0)


def test_single_mode_heat_decay(g):
    a = 0.8
    e = basis_field(basis_modes(g)[0], g)  # Lambda_{1,0}^{0-}, B(e, e) = 0
    end = time_one_map(a * e, None, StepperConfig(2.0**-6), g)
    # the integrating factor is exact for a mode the nonlinearity does not touch
    assert np.allclose(end, a * np.exp(-1.0) * e, atol=1e-15)


def test_manufactured_solution_is_second_order(g):
    ms = Manufactured(g)
    ps = [5, 6, 7, 8]
    errs = [ms.error(p) for p in ps]
    assert all(e2 < e1 for e1, e2 in zip(errs, errs[1:]))
    assert abs(observed_order(ps, errs) - 2.0) <= 0.1


def test_unforced_energy_decays_monotonically_and_dissipates(g, rng):
    lam1 = eigenvalue(basis_modes(g)[0], g)
    for _ in range(3):
        u0 = _ball(g, rng)
        traj = solve(u0, None, StepperConfig(2.0**-6), g)
        n = sobolev_norm(traj.states, 0, g)
        assert np.all(np.diff(n) <= 0)
        assert n[-1] <= np.exp(-lam1 / 2) * n[0]
        assert primed_norm(traj.endpoint, g) < primed_norm(u0, g)


def test_trajectory_iterates_stay_in_V(g, rng):
    seg = draw_segment(RedNoiseSpec(), 1, 0)
    traj = solve(_ball(g, rng), NoiseForcing(seg, g), StepperConfig(2.0**-5), g)
    for j in range(0, len(traj), 8):
        assert traj[j].is_valid(1e-12)
    assert traj.times[-1] == pytest.approx(1.0)
    assert np.array_equal(traj.field(0.5).coeffs, traj.states[16])
    with pytest.raises(ValueError):
        traj.index(0.3)
    assert isinstance(traj, Trajectory)


def test_time_one_map_batch_matches_single(g, rng):
    spec = RedNoiseSpec()
    segs = [draw_segment(spec, 5, 0, stream=i) for i in range(3)]
    X = _ball(g, rng, batch=(3,))
    cfg = StepperConfig(2.0**-5)
    batch = time_one_map(X, segs, cfg, g)
    for i in range(3):
        one = time_one_map(SpectralField(X[i], g), segs[i], cfg)
        assert np.allclose(batch[i], one.coeffs, atol=1e-15, rtol=0)
    with pytest.raises(ValueError):
        time_one_map(X, segs[:2], cfg, g)


def test_in_band_fast_path_equals_generic_forcing(g, rng):
    seg = draw_segment(RedNoiseSpec(), 2, 0)
    fast = NoiseForcing(seg, g)
    assert fast.in_band

    def slow(t, left=False):
        return fast(t, left)

    u0 = _ball(g, rng)
    cfg = StepperConfig(2.0**-5)
    a = solve(u0, fast, cfg, g).endpoint
    b = solve(u0, slow, cfg, g).endpoint
    assert np.allclose(a, b, atol=1e-15)


def test_out_of_band_remainder_is_carried(g, rng):
    u = random_field(g, rng, band=False)
    traj = solve(u, None, StepperConfig(2.0**-4), g)
    assert traj.remainder is not None
    # above the band the flow is pure heat decay
    outside = ~g.band
    decay = np.exp(-g.lam)[None]
    assert np.allclose(traj.endpoint[:, outside], (u * decay)[:, outside], atol=1e-15)


def test_monitor_and_non_finite(g, rng):
    u = _ball(g, rng)
    with pytest.raises(AbsorbingSetViolation):
        solve(u, None, StepperConfig(2.0**-4, monitor_K=0.5), g)
    bad = u.copy()
    bad[0, 1, 1, 1] = np.nan
    with pytest.raises(NonFiniteState):
        solve(bad, None, StepperConfig(2.0**-4), g)


def test_tangent_heat_propagator_and_linearity(g, rng):
    cfg = StepperConfig(2.0**-5)
    base = solve(np.zeros(g.shape, complex), None, cfg, g)
    w = random_field(g, rng)
    out = tangent_propagate(w, base, 0.25, 1.0)
    assert np.allclose(out, w * np.exp(-0.75 * g.lam), atol=1e-15)
    back = adjoint_propagate(w, base, 1.0, 0.25)
    assert np.allclose(back, out, atol=1e-15)
    assert np.all(tangent_propagate(np.zeros(g.shape, complex), base, 0.0, 1.0) == 0)

    base = solve(_ball(g, rng), NoiseForcing(draw_segment(RedNoiseSpec(), 3, 0), g), cfg, g)
    w2 = random_field(g, rng)
    a, b = 0.7, -2.1
    lhs = tangent_propagate(a * w + b * w2, base, 0.0, 1.0)
    rhs = a * tangent_propagate(w, base, 0.0, 1.0) + b * tangent_propagate(w2, base, 0.0, 1.0)
    assert np.max(np.abs(lhs - rhs)) <= 1e-13 * np.max(np.abs(rhs))
    assert np.all(adjoint_propagate(np.zeros(g.shape, complex), base, 1.0, 0.0) == 0)


def test_tangent_finite_difference_consistency(g, rng):
    cfg = StepperConfig(2.0**-5)
    f = NoiseForcing(draw_segment(RedNoiseSpec(), 4, 0), g)
    u0 = _ball(g, rng)
    w = random_field(g, rng)
    w = w / sobolev_norm(w, 0, g)
    base = solve(u0, f, cfg, g)
    lin = tangent_propagate(w, base, 0.0, 1.0)
    res = []
    for eps in (1e-3, 1e-4):
        pert = solve(u0 + eps * w, f, cfg, g).endpoint
        res.append(sobolev_norm(pert - base.endpoint - eps * lin, 0, g))
    # O(eps^2): a tenfold smaller eps shrinks the residual about a hundredfold
    assert 60 <= res[0] / res[1] <= 140


def test_duality_mismatch_is_second_order(g, rng):
    f = NoiseForcing(draw_segment(RedNoiseSpec(), 6, 0), g)
    u0 = _ball(g, rng)
    v, w = random_field(g, rng), random_field(g, rng)
    mism = []
    for p in (5, 6, 7):
        base = solve(u0, f, StepperConfig(2.0**-p), g)
        a = inner(tangent_propagate(v, base, 0.0, 1.0), w, g)
        b = inner(v, adjoint_propagate(w, base, 1.0, 0.0), g)
        mism.append(abs(a - b) / (sobolev_norm(v, 0, g) * sobolev_norm(w, 0, g)))
    assert observed_order([5, 6, 7], mism) >= 1.9


def test_propagators_on_sub_interval_and_batches(g, rng):
    cfg = StepperConfig(2.0**-5)
    base = solve(_ball(g, rng), None, cfg, g)
    W = random_field(g, rng, batch=(2,))
    out = tangent_propagate(W, base, 0.25, 0.75)
    for i in range(2):
        assert np.allclose(out[i], tangent_propagate(W[i], base, 0.25, 0.75), atol=1e-15)
    with pytest.raises(ValueError):
        tangent_propagate(W[0], base, 0.3, 0.75)
    with pytest.raises(ValueError):
        adjoint_propagate(W[0], base, 0.25, 0.75)
