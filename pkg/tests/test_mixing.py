import numpy as np
import pytest

from helpers import low_mode_fields

from pemix.mixing import (
    ChainState,
    EmptyEnsemble,
    FitFailure,
    TestFunctionalDictionary,
    _advance,
    dual_lipschitz,
    fit_decay,
    gramian_nondegeneracy,
    mixing_experiment,
    noise_floor,
    reference_ensemble,
    run_chain,
    run_coupled,
)
from pemix.rednoise import RedNoiseSpec, draw_segment
from pemix.spectral import (
    SpectralField,
    basis_modes,
    eigenvalue,
    random_field,
    sobolev_norm,
)
from pemix.timestep import StepperConfig, solve, tangent_propagate, time_one_map

CFG = StepperConfig(2.0**-5)


@pytest.fixture(scope="module")
def dictionary(g):
    return TestFunctionalDictionary.default(g)


# -- chains -------------------------------------------------------------------


def test_chain_zero_noise_from_zero(g):
    states = run_chain(np.zeros(g.shape, complex), 3, None, 0, CFG, g)
    assert len(states) == 4 and [s.step for s in states] == [0, 1, 2, 3]
    assert all(np.all(s.field.coeffs == 0) for s in states)


def test_chain_zero_noise_dissipates(g):
    lam1 = eigenvalue(basis_modes(g)[0], g)
    u0 = random_field(g, np.random.default_rng(4))
    u0 *= 2.0 / sobolev_norm(u0, g.m_sobolev, g)
    n = [s.field.norm() for s in run_chain(u0, 4, None, 0, CFG, g)]
    for k in range(5):
        assert n[k] <= np.exp(-k * lam1 / 2) * n[0] * (1 + 1e-12)


def test_chain_is_deterministic(g):
    u0 = low_mode_fields(g, 1)[0]
    a = run_chain(u0, 2, RedNoiseSpec(), 17, CFG, g)
    b = run_chain(u0, 2, RedNoiseSpec(), 17, CFG, g)
    assert all(np.array_equal(x.field.coeffs, y.field.coeffs) for x, y in zip(a, b))
    c = run_chain(u0, 2, RedNoiseSpec(), 18, CFG, g)
    assert not np.array_equal(a[-1].field.coeffs, c[-1].field.coeffs)
    with pytest.raises(ValueError):
        ChainState(SpectralField.zeros(g), -1, 0, 0)


def test_coupled_identical_start(g):
    u0 = low_mode_fields(g, 1)[0]
    rep = run_coupled(u0, u0, 3, 1, RedNoiseSpec(), CFG, g)
    assert np.all(rep.diff_L2 == 0) and np.all(rep.diff_primed == 0)
    assert rep.mean_factor() == 0.0


def test_coupled_small_perturbation_follows_tangent(g):
    rng = np.random.default_rng(7)
    u0 = low_mode_fields(g, 1)[0]
    w = random_field(g, rng)
    w /= sobolev_norm(w, 0, g)
    eps = 1e-6
    rep = run_coupled(u0, u0 + eps * w, 1, 0, None, CFG, g)
    lin = tangent_propagate(w, solve(u0, None, CFG, g), 0.0, 1.0)
    assert rep.diff_L2[1] == pytest.approx(eps * sobolev_norm(lin, 0, g), rel=1e-4)


def test_coupled_generic_pair_contracts(g):
    rng = np.random.default_rng(8)
    u0 = low_mode_fields(g, 1, seed=3)[0]
    d = random_field(g, rng)
    rep = run_coupled(u0, u0 + 1e-3 * d / sobolev_norm(d, 0, g), 10, 5, RedNoiseSpec(), CFG, g)
    assert rep.log_slope() < 0
    assert rep.mean_factor() < 1
    assert len(rep.expanding_steps()) == 0


# -- distance estimate ------------------------------------------------------------


def test_dictionary_functionals_are_admissible(g, dictionary, rng):
    # sup |g| + Lip(g) <= 1 with Lip measured in V^m
    X = random_field(g, rng, batch=(20,)) * 5
    Y = X + random_field(g, rng, batch=(20,)) * 0.3
    GX, GY = dictionary.evaluate(X), dictionary.evaluate(Y)
    s = np.tile(np.repeat(dictionary.scales[None, :], len(dictionary.directions), 0).ravel(),
                len(dictionary.kinds) * len(dictionary.offsets))
    sup = 1.0 / (1.0 + s * dictionary.lip)
    lip = s * dictionary.lip / (1.0 + s * dictionary.lip)
    assert np.all(np.abs(GX) <= sup + 1e-15)
    dist = sobolev_norm(X - Y, g.m_sobolev, g)[:, None]
    assert np.all(np.abs(GX - GY) <= lip * dist + 1e-15)
    assert np.all(sup + lip <= 1 + 1e-15)


def test_dictionary_validation(g):
    with pytest.raises(ValueError):
        TestFunctionalDictionary(np.ones((2,) + g.shape), g)
    d = TestFunctionalDictionary.default(g, P=4)
    with pytest.raises(ValueError):
        TestFunctionalDictionary(d.directions, g, kinds=("sigmoid",))


def test_dual_lipschitz_basic_properties(g, dictionary, rng):
    A = random_field(g, rng, batch=(10,))
    B = random_field(g, rng, batch=(12,)) * 2
    C = random_field(g, rng, batch=(8,)) + 0.5 * low_mode_fields(g, 1)[0]
    assert dual_lipschitz(A, A, dictionary) == 0.0
    dAB, dBA = dual_lipschitz(A, B, dictionary), dual_lipschitz(B, A, dictionary)
    assert dAB == dBA and 0 <= dAB <= 2
    dAC, dCB = dual_lipschitz(A, C, dictionary), dual_lipschitz(C, B, dictionary)
    assert dAB <= dAC + dCB + 1e-15
    assert dual_lipschitz([SpectralField(a, g) for a in A], B, dictionary) == dAB
    with pytest.raises(EmptyEnsemble):
        dual_lipschitz([], B, dictionary)


def _best_piecewise_linear(d):
    # brute force over g = a ramp((t - c) / w) with a + a / w <= 1
    best = 0.0
    for w in np.geomspace(1e-3, 1e3, 2001):
        a = w / (w + 1)
        for c in np.linspace(-0.5 * d, 1.5 * d, 41):
            best = max(best, abs(a * (np.clip((d - c) / w, -1, 1) - np.clip(-c / w, -1, 1))))
    return best


@pytest.mark.parametrize("d", [0.05, 0.5, 2.0, 10.0])
def test_point_masses_reach_closed_form(g, dictionary, d):
    opt = 2 * d / (d + 2)
    assert _best_piecewise_linear(d) == pytest.approx(opt, rel=1e-3)
    assert _best_piecewise_linear(d) <= opt + 1e-12
    phi = dictionary.directions[0]
    x = np.zeros((1,) + g.shape, complex)
    est = dual_lipschitz(x, x + d * phi, dictionary)
    assert 0.8 * opt <= est <= opt + 1e-12


def test_same_chain_ensembles_are_indistinguishable(g, dictionary):
    R = reference_ensemble(64, RedNoiseSpec(), 3, CFG, g, burn_in=50, thin=2)
    A, B = R[:32], R[32:]
    d = dual_lipschitz(A, B, dictionary)
    se = noise_floor(A, B, dictionary, np.random.default_rng(0))
    assert d <= 2 * se


def test_noise_floor_paired_requires_equal_sizes(g, dictionary, rng):
    A = random_field(g, rng, batch=(4,))
    with pytest.raises(ValueError):
        noise_floor(A, A[:3], dictionary, rng, paired=True)
    assert noise_floor(A, A, dictionary, rng, paired=True) == 0.0


# -- fit and experiment -----------------------------------------------------------


def test_fit_decay_recovers_geometric_sequence():
    k = np.arange(20)
    d = 3.0 * 0.5**k
    C, kappa, r2, mask = fit_decay(d, np.zeros_like(d))
    assert C == pytest.approx(3.0) and kappa == pytest.approx(0.5) and r2 == pytest.approx(1.0)
    se = np.where(k < 4, 0.0, 1.0)
    with pytest.raises(FitFailure):
        fit_decay(d, se)


def test_mixing_zero_noise_from_zero(g):
    ref = np.zeros((32,) + g.shape, complex)
    reps = mixing_experiment([np.zeros(g.shape, complex)], n_steps=3, ensemble_size=32,
                             spec=None, cfg=CFG, g=g, reference=ref, n_boot=10)
    assert np.all(reps[0].d == 0)
    assert not reps[0].fit_ok and reps[0].kappa is None


def test_mixing_zero_noise_bounded_by_point_mass_formula(g):
    u0 = low_mode_fields(g, 1, seed=5)[0]
    ref = np.zeros((32,) + g.shape, complex)
    rep = mixing_experiment([u0], n_steps=4, ensemble_size=32, spec=None, cfg=CFG, g=g,
                            reference=ref, n_boot=10)[0]
    r = np.array([sobolev_norm(s.field.coeffs, g.m_sobolev, g)
                  for s in run_chain(u0, 4, None, 0, CFG, g)])
    assert np.all(rep.d <= 2 * r / (r + 2) + 1e-15)
    assert np.all(np.diff(rep.d) < 0)


def test_mixing_input_validation(g):
    with pytest.raises(ValueError):
        mixing_experiment([np.zeros(g.shape)], ensemble_size=16, g=g)
    with pytest.raises(EmptyEnsemble):
        mixing_experiment([], g=g)
    with pytest.raises(ValueError):
        mixing_experiment([np.zeros(g.shape)], ensemble_size=32, g=g,
                          reference=np.zeros((5,) + g.shape))


def test_mixing_is_deterministic(g):
    u0 = low_mode_fields(g, 1)[0]
    kw = dict(n_steps=2, ensemble_size=32, burn_in=2, thin=1, spec=RedNoiseSpec(),
              master_seed=9, cfg=CFG, g=g, n_boot=20)
    a = mixing_experiment([u0], **kw)[0]
    b = mixing_experiment([u0], **kw)[0]
    assert np.array_equal(a.d, b.d) and np.array_equal(a.stderr, b.stderr)
    assert a.config["ensemble_size"] == 32


def test_parallel_advance_matches_serial(g):
    X = np.stack(low_mode_fields(g, 12))
    segs = [draw_segment(RedNoiseSpec(), 1, 0, stream=i) for i in range(12)]
    assert np.array_equal(_advance(X, segs, CFG, g, workers=2), time_one_map(X, segs, CFG, g))


# -- Gramian ------------------------------------------------------------------------


def test_gramian_heat_diagonal_second_order(g):
    lam = np.array([eigenvalue(m, g) for m in basis_modes(g)[:10]])
    exact = ((1 - np.exp(-lam)) / lam) ** 2
    errs = []
    for p in (5, 6, 7):
        rep = gramian_nondegeneracy(np.zeros(g.shape, complex), None, 10, 1, StepperConfig(2.0**-p), g)
        errs.append(np.max(np.abs(np.diag(rep.matrix) - exact)))
        assert np.allclose(rep.matrix, rep.matrix.T)
    assert errs[-1] <= 2.0 ** (-2 * 7)
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.05)


def test_gramian_duplicate_probes_singular(g):
    rep = gramian_nondegeneracy(np.zeros(g.shape, complex), None, modes=[0, 0, 3],
                                n_time_slots=1, cfg=CFG, g=g)
    assert abs(rep.probe_smallest) <= 1e-12 * np.trace(rep.matrix)
    assert rep.psd_ok


def test_gramian_generic_positive(g):
    u0 = low_mode_fields(g, 1, norm=1.0)[0]
    seg = draw_segment(RedNoiseSpec(), 2, 0)
    rep = gramian_nondegeneracy(u0, seg, 10, 4, CFG, g)
    assert rep.psd_ok and rep.smallest > 0
    assert rep.range_matrix.shape == (10, 10) and rep.matrix.shape == (40, 40)
    assert np.isfinite(rep.condition)
    with pytest.raises(ValueError):
        gramian_nondegeneracy(u0, seg, 10, 3, CFG, g)
