import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feedbackpf.errors import ModelError, NumericalError
from feedbackpf.fpf import (
    ConstantStrategy,
    DnsKdeStrategy,
    FpfOptions,
    GalerkinStrategy,
    KalmanStrategy,
    ParticleEnsemble,
    ensemble_stats,
    fpf_step,
    innovation_increment,
    make_gain_strategy,
    run_fpf,
    wong_zakai_correction,
)
from feedbackpf.gain import ConstantGain, CustomGain
from feedbackpf.models import build_linear_model
from feedbackpf.reference import initial_grid_density, run_ks_grid
from feedbackpf.sde import TimeGrid, simulate_truth, wiener_increments

from conftest import scalar_model


class ZeroStrategy:
    name = "zero"

    def __call__(self, X, dh, model):
        return ConstantGain(np.zeros((X.shape[1], dh.shape[1])))


class CallableStrategy:
    def __init__(self, gain):
        self.gain = gain

    def __call__(self, X, dh, model):
        return self.gain


# --- statistics and innovation -----------------------------------------------


def test_ensemble_stats_examples():
    s = ensemble_stats(np.array([[-1.0], [1.0]]), h=lambda x: x)
    assert s.mean[0] == 0.0 and s.cov[0, 0] == 2.0 and s.hhat[0] == 0.0
    s = ensemble_stats(np.full((7, 2), 3.3))
    assert np.all(s.cov == 0.0)
    np.testing.assert_array_equal(s.mean, [3.3, 3.3])


def test_ensemble_stats_large_sample(rng):
    X = rng.normal(3.0, 2.0, size=(100_000, 1))
    s = ensemble_stats(ParticleEnsemble(X))
    assert abs(s.mean[0] - 3.0) <= 0.02
    assert abs(s.cov[0, 0] - 4.0) <= 0.06


def test_ensemble_stats_needs_two():
    with pytest.raises(ValueError):
        ensemble_stats(np.zeros((1, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40), st.integers(1, 4))
def test_ensemble_cov_symmetric_psd(seed, n, d):
    X = np.random.default_rng(seed).normal(size=(n, d)) * np.arange(1, d + 1)
    cov = ensemble_stats(X).cov
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov)[0] >= -1e-12 * max(1.0, np.abs(cov).max())


def test_innovation_examples():
    assert innovation_increment(0.0, 0.0, 0.0, 0.01) == 0.0
    assert innovation_increment(0.1, 1.0, 0.5, 0.01) == pytest.approx(0.0925, abs=1e-15)
    assert innovation_increment(0.3, 2.0, 2.0, 0.1) == pytest.approx(0.3 - 0.2, abs=1e-15)
    with pytest.raises(ValueError):
        innovation_increment(0.0, 0.0, 0.0, 0.0)


def test_innovation_wraps_angles():
    dt = 0.01
    # a measured bearing just below pi and a predicted one just above -pi
    dz = np.array([3.1, 0.5]) * dt
    h_i = np.array([-3.1, 0.4])
    hhat = np.array([-3.12, 0.45])
    dI = innovation_increment(dz, h_i, hhat, dt, angular=np.array([True, False]))
    expected0 = 0.5 * ((6.2 - 2 * np.pi) + (6.22 - 2 * np.pi)) * dt
    assert dI[0] == pytest.approx(expected0, abs=1e-12)
    assert dI[1] == pytest.approx(0.5 * dt - 0.5 * (0.4 + 0.45) * dt, abs=1e-15)


def test_wong_zakai_dispatch():
    x = np.array([[0.3]])
    assert wong_zakai_correction(CustomGain(lambda y: y), x)[0, 0] == pytest.approx(0.15, abs=1e-8)
    assert wong_zakai_correction(ConstantGain([[1.5]]), x)[0, 0] == 0.0


# --- a single step -------------------------------------------------------------


def test_zero_gain_reduces_to_prior_step(rng):
    model = scalar_model(lambda x: np.sin(x), lambda x: x ** 3)
    X = rng.normal(size=(50, 1))
    ens = ParticleEnsemble(X)
    new, _, _ = fpf_step(ens, model, ZeroStrategy(), np.array([0.7]), 0.01, seed=4, step=3)
    dB = wiener_increments(4, "particle", np.arange(50), 3, 0.01, 1)
    np.testing.assert_allclose(new.states, X + np.sin(X) * 0.01 + dB, atol=1e-15)
    assert new.t == pytest.approx(0.01)


def test_linear_step_matches_closed_form(rng):
    A = np.array([[-0.3, 1.0], [0.0, -0.5]])
    H = np.array([[1.0, 0.5]])
    model = build_linear_model(A, H, [0.0, 0.0], np.eye(2))
    X = rng.normal(size=(300, 2))
    dz = np.array([0.02])
    dt = 0.01
    new, gain, _ = fpf_step(ParticleEnsemble(X), model, KalmanStrategy(), dz, dt, seed=1, step=0)
    mu = X.mean(axis=0)
    S = np.cov(X.T)
    dB = wiener_increments(1, "particle", np.arange(300), 0, dt, 2)
    expected = X + X @ A.T * dt + dB + (S @ H.T @ (dz - H @ ((X + mu) / 2).T * dt)).T
    np.testing.assert_allclose(new.states, expected, atol=1e-12)
    np.testing.assert_allclose(gain.matrix, S @ H.T, atol=1e-12)


def test_single_particle_innovation(rng):
    # N = 1: hhat = h(X^1) so dI = dZ - h(X^1) dt
    model = scalar_model(lambda x: np.zeros_like(x), lambda x: 2 * x, process_noise_scale=np.zeros((1, 0)))
    X = np.array([[0.4]])
    gain = ConstantGain([[0.5]])
    new, _, _ = fpf_step(ParticleEnsemble(X), model, CallableStrategy(gain), np.array([0.03]), 0.01, 0, 0)
    assert new.states[0, 0] == pytest.approx(0.4 + 0.5 * (0.03 - 0.8 * 0.01), abs=1e-15)


def test_nonfinite_update_names_particle():
    model = scalar_model(lambda x: np.where(x == 2.0, np.inf, 0.0), lambda x: x)
    X = np.array([[0.0], [2.0], [0.5]])
    with pytest.raises(NumericalError, match="particle 1.*step 5") as exc:
        fpf_step(ParticleEnsemble(X), model, ZeroStrategy(), np.array([0.0]), 0.01, 0, 5)
    assert exc.value.context["particle"] == 1 and exc.value.step == 5


def test_ensemble_rejects_nonfinite_states():
    with pytest.raises(NumericalError, match="particle 2"):
        ParticleEnsemble(np.array([0.0, 1.0, np.nan]))


def test_strategy_factory():
    assert isinstance(make_gain_strategy("galerkin", n_cells=3), GalerkinStrategy)
    assert make_gain_strategy("dns_kde").grid_points == 401
    with pytest.raises(ValueError):
        make_gain_strategy("magic")


def test_scalar_only_strategies_reject_vectors(rng):
    model = build_linear_model(-np.eye(2), np.eye(2), [0, 0], np.eye(2))
    X = rng.normal(size=(20, 2))
    for strat in (GalerkinStrategy(), DnsKdeStrategy()):
        with pytest.raises(ModelError):
            strat(X, np.zeros((20, 2)), model)
    nonlinear = scalar_model(lambda x: -x, lambda x: x ** 2)
    with pytest.raises(ModelError):
        KalmanStrategy()(X[:, :1], np.zeros((20, 1)), nonlinear)


def test_whitened_gain_units(rng):
    # observation noise scale s: particle update uses K dI with K = cov H / s^2 in original units
    s = 2.0
    model = build_linear_model([[0.0]], [[1.0]], [0.0], [[1.0]], process_noise_scale=np.zeros((1, 0)),
                               obs_noise_scale=[[s]])
    X = rng.normal(size=(400, 1))
    dz = np.array([0.05])
    new, _, _ = fpf_step(ParticleEnsemble(X), model, ConstantStrategy(), dz, 0.01, 0, 0)
    mu = X.mean()
    kappa = np.mean((X[:, 0] - mu) * X[:, 0])
    expected = X[:, 0] + kappa / s ** 2 * (dz[0] - 0.5 * (X[:, 0] + mu) * 0.01)
    np.testing.assert_allclose(new.states[:, 0], expected, atol=1e-13)


# --- runs ----------------------------------------------------------------------


def short_truth(model, steps=100, dt=0.01, seed=3):
    return simulate_truth(model, TimeGrid(0.0, dt, steps), seed)


def test_zero_noise_zero_gain_follows_flow():
    model = scalar_model(lambda x: -x, lambda x: x, process_noise_scale=np.zeros((1, 0)))
    truth = short_truth(model, steps=50)
    X0 = np.linspace(-1, 1, 9)[:, None]
    tr = run_fpf(model, ZeroStrategy(), truth, 9, seed=0, options=FpfOptions(initial_states=X0))
    np.testing.assert_allclose(tr.extra["final_states"], X0 * (1 - 0.01) ** 50, atol=1e-14)


def test_run_records_snapshots_and_metadata(scalar_linear):
    truth = short_truth(scalar_linear, steps=40)
    tr = run_fpf(scalar_linear, GalerkinStrategy(n_cells=3), truth, 200, seed=2,
                 options=FpfOptions(tag="g", snapshot_times=(0.1, 0.4)), name="gal")
    assert tr.name == "gal" and tr.kind == "fpf"
    assert tr.means.shape == (41, 1) and tr.covs.shape == (41, 1, 1) and tr.hhat.shape == (41, 1)
    assert sorted(tr.snapshots) == [pytest.approx(0.1), pytest.approx(0.4)]
    assert all(v.shape == (200, 1) for v in tr.snapshots.values())
    assert tr.extra["strategy"] == "galerkin" and "degenerate_steps" in tr.extra


def test_run_rejects_dimension_mismatch(scalar_linear):
    other = build_linear_model(-np.eye(2), np.eye(2), [0, 0], np.eye(2))
    truth = short_truth(other, steps=5)
    with pytest.raises(ModelError):
        run_fpf(scalar_linear, ConstantStrategy(), truth, 10, seed=0)


def test_run_is_deterministic(scalar_linear):
    truth = short_truth(scalar_linear, steps=30)
    a = run_fpf(scalar_linear, DnsKdeStrategy(grid_points=101), truth, 100, seed=8)
    b = run_fpf(scalar_linear, DnsKdeStrategy(grid_points=101), truth, 100, seed=8)
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(a.extra["final_states"], b.extra["final_states"])


def test_gauge_invariance():
    # shifting h by a constant leaves every trajectory unchanged up to rounding
    c = 3.25
    base = scalar_model(lambda x: -x, lambda x: np.sin(x))
    shifted = scalar_model(lambda x: -x, lambda x: np.sin(x) + c)
    grid = TimeGrid(0.0, 0.01, 60)
    runs = []
    for model in (base, shifted):
        truth = simulate_truth(model, grid, seed=11)
        tr = run_fpf(model, ConstantStrategy(), truth, 64, seed=5)
        runs.append(tr.extra["final_states"])
    np.testing.assert_allclose(runs[0], runs[1], rtol=0, atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.permutations(list(range(12))))
def test_exchangeability(perm):
    model = scalar_model(lambda x: x - x ** 3, lambda x: x)
    truth = simulate_truth(model, TimeGrid(0.0, 0.01, 20), seed=1)
    X = np.linspace(-1.5, 1.5, 12)[:, None]
    perm = np.array(perm)
    ens_a = ParticleEnsemble(X, np.arange(12))
    ens_b = ParticleEnsemble(X[perm], perm)
    for k in range(truth.steps):
        ens_a, _, _ = fpf_step(ens_a, model, GalerkinStrategy(n_cells=2), truth.dz[k], truth.dt, 0, k)
        ens_b, _, _ = fpf_step(ens_b, model, GalerkinStrategy(n_cells=2), truth.dz[k], truth.dt, 0, k)
    np.testing.assert_allclose(ens_b.states, ens_a.states[perm], atol=1e-12)


def test_zero_gain_law_matches_fokker_planck():
    # with no feedback the ensemble evolves under the prior; compare with the grid solver
    drift = lambda x: x - x ** 3
    model = scalar_model(drift, lambda x: x ** 2, mean=0.5, var=0.25)
    prior = scalar_model(drift, lambda x: np.zeros_like(x), mean=0.5, var=0.25)
    dt, steps, N = 1e-3, 500, 20_000
    truth = simulate_truth(model, TimeGrid(0.0, dt, steps), seed=2)
    tr = run_fpf(model, ZeroStrategy(), truth, N, seed=9)
    dens = initial_grid_density(prior, -4.0, 4.0, dx=0.02)
    ref = run_ks_grid(prior, truth, dens, substeps=6)
    X = tr.extra["final_states"][:, 0]
    m_ref, v_ref = ref.means[-1, 0], ref.covs[-1, 0, 0]
    se_mean = np.sqrt(v_ref / N)
    se_var = np.sqrt(np.var((X - X.mean()) ** 2) / N)
    assert abs(X.mean() - m_ref) <= 3 * se_mean
    assert abs(np.var(X, ddof=1) - v_ref) <= 3 * se_var


@pytest.mark.slow
def test_linear_gaussian_root_n_consistency():
    from feedbackpf.reference import run_kalman_bucy
    model = build_linear_model([[-0.5]], [[1.0]], [0.0], [[1.0]])
    grid = TimeGrid(0.0, 2e-3, 200)
    devs = {}
    for N in (10_000, 40_000):
        total = 0.0
        for r in range(50):
            truth = simulate_truth(model, grid, seed=100 + r)
            kb = run_kalman_bucy(model, truth)
            tr = run_fpf(model, KalmanStrategy(), truth, N, seed=r, options=FpfOptions(keep_final_gain=False))
            total += np.mean(np.abs(tr.means - kb.means)[1:, 0] + np.abs(tr.covs - kb.covs)[1:, 0, 0])
        devs[N] = total / 50
    ratio = devs[10_000] / devs[40_000]
    assert 1.5 <= ratio <= 2.8, (devs, ratio)
