import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feedbackpf.errors import CFLError, ModelError, StabilityError
from feedbackpf.grid import GridDensity1D
from feedbackpf.models import build_linear_model
from feedbackpf.reference import (
    GaussianBelief,
    grid_moments,
    initial_grid_density,
    kalman_bucy_step,
    ks_cfl_limit,
    ks_grid_step_1d,
    run_kalman_bucy,
    run_ks_grid,
)
from feedbackpf.sde import TimeGrid, simulate_truth

from conftest import scalar_model


# --- Kalman-Bucy ---------------------------------------------------------------


def test_riccati_fixed_point():
    b = GaussianBelief([0.3], [[1.0]])
    for _ in range(100):
        b = kalman_bucy_step(b, [[0.0]], [[1.0]], b.mean * 0.01 + 0.004, 0.01)
    assert b.cov[0, 0] == 1.0


def test_exact_prediction_gives_no_correction():
    A = np.array([[-0.2, 0.1], [0.0, 0.4]])
    H = np.array([[1.0, 2.0]])
    b = GaussianBelief([1.0, -0.5], np.diag([0.5, 2.0]))
    dt = 0.01
    new = kalman_bucy_step(b, A, H, H @ b.mean * dt, dt)
    np.testing.assert_allclose(new.mean, b.mean + A @ b.mean * dt, atol=1e-15)


def test_riccati_stationary_root():
    b = GaussianBelief([0.0], [[3.0]])
    for _ in range(20_000):
        b = kalman_bucy_step(b, [[-1.0]], [[1.0]], [0.0], 1e-3)
    assert b.cov[0, 0] == pytest.approx(np.sqrt(2) - 1, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 5.0).filter(lambda s: abs(s - 1.0) > 1e-3))
def test_riccati_monotone_toward_one(s0):
    b = GaussianBelief([0.0], [[s0]])
    prev = s0
    for _ in range(300):
        b = kalman_bucy_step(b, [[0.0]], [[1.0]], [0.0], 0.01)
        s = b.cov[0, 0]
        if s0 > 1:
            assert 1.0 <= s <= prev
        else:
            assert prev <= s <= 1.0
        prev = s


def test_covariance_stays_symmetric():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    b = GaussianBelief([0.0, 0.0], [[1.0, 0.2], [0.2, 0.5]])
    for _ in range(200):
        b = kalman_bucy_step(b, A, np.eye(2), np.zeros(2), 0.01)
        assert np.array_equal(b.cov, b.cov.T)


def test_kalman_bucy_step_errors():
    with pytest.raises(ValueError):
        kalman_bucy_step(GaussianBelief([0.0], [[1.0]]), [[0.0]], [[1.0]], [0.0], 0.0)
    # a huge step overshoots the Riccati flow into negative variance
    with pytest.raises(StabilityError, match="smaller dt"):
        kalman_bucy_step(GaussianBelief([0.0], [[10.0]]), [[0.0]], [[1.0]], [0.0], 1.0, process_cov=[[0.0]])


def test_run_kalman_bucy_requires_linear_model():
    model = scalar_model(lambda x: -x, lambda x: x ** 2)
    truth = simulate_truth(model, TimeGrid(0.0, 0.01, 5), 0)
    with pytest.raises(ModelError):
        run_kalman_bucy(model, truth)


def test_run_kalman_bucy_noise_covariances():
    # with obs scale s the gain is Sigma / s^2
    s = 3.0
    model = build_linear_model([[0.0]], [[1.0]], [0.0], [[2.0]], obs_noise_scale=[[s]])
    truth = simulate_truth(model, TimeGrid(0.0, 0.01, 1), 4)
    tr = run_kalman_bucy(model, truth)
    dz = truth.dz[0, 0]
    assert tr.means[1, 0] == pytest.approx(2.0 / s ** 2 * dz, rel=1e-12)
    assert tr.covs[1, 0, 0] == pytest.approx(2.0 + (1.0 - 4.0 / s ** 2) * 0.01, rel=1e-12)


# --- grid moments ----------------------------------------------------------------


def test_grid_moments_standard_normal():
    g = GridDensity1D.gaussian(0.0, 1.0, radius=8, dx=0.01)
    mean, var, hh = grid_moments(g, h=lambda x: x[:, 0] ** 2)
    assert abs(mean) <= 1e-6
    assert var == pytest.approx(1.0, abs=1e-4)
    assert hh[0] == pytest.approx(1.0, abs=1e-4)


def test_grid_moments_symmetric_and_point_mass():
    x = np.linspace(-2, 2, 41)
    g = GridDensity1D(x, np.exp(-np.abs(x))).normalized()
    assert abs(grid_moments(g)[0]) <= 1e-15
    p = np.zeros(41)
    p[30] = 1.0
    mean, var, _ = grid_moments(GridDensity1D(x, p))
    assert mean == pytest.approx(x[30], abs=1e-15) and var == pytest.approx(0.0, abs=1e-24)


# --- Kushner-Stratonovich grid ---------------------------------------------------


def ou_model():
    # stationary law N(0, 1) for unit process noise
    return scalar_model(lambda x: -0.5 * x, lambda x: np.zeros_like(x))


def test_cfl_limit_values():
    g = GridDensity1D.gaussian(0.0, 1.0, radius=8, dx=0.01)
    pure = scalar_model(lambda x: np.zeros_like(x), lambda x: x)
    assert ks_cfl_limit(pure, g) == pytest.approx(0.01 ** 2 / 2)
    frozen = scalar_model(lambda x: -x, lambda x: x, process_noise_scale=np.zeros((1, 0)))
    assert ks_cfl_limit(frozen, g) == pytest.approx(0.01 / np.max(np.abs(0.5 * (g.nodes[1:] + g.nodes[:-1]))))


def test_cfl_violation_suggests_dt():
    g = GridDensity1D.gaussian(0.0, 1.0, radius=8, dx=0.01)
    model = ou_model()
    with pytest.raises(CFLError) as exc:
        ks_grid_step_1d(g, model, [0.0], 1e-3)
    suggested = exc.value.suggested_dt
    assert suggested == pytest.approx(ks_cfl_limit(model, g))
    ks_grid_step_1d(g, model, [0.0], suggested)
    ks_grid_step_1d(g, model, [0.0], 1e-3, substeps=int(np.ceil(1e-3 / suggested)))


def test_ou_density_stationary():
    g0 = GridDensity1D.gaussian(0.0, 1.0, radius=8, dx=0.01)
    model = ou_model()
    dt = 5e-5
    g = g0
    for k in range(2000):  # T = 0.1
        g = ks_grid_step_1d(g, model, [0.0], dt)
    drift_rate = np.sum(np.abs(g.values - g0.values)) * g.dx / 0.1
    assert drift_rate <= 1e-3


def test_normalisation_every_step(scalar_linear):
    truth = simulate_truth(scalar_linear, TimeGrid(0.0, 5e-5, 200), 1)
    g = initial_grid_density(scalar_linear, dx=0.01)
    for k in range(truth.steps):
        g = ks_grid_step_1d(g, scalar_linear, truth.dz[k] * 40, truth.dt)
        assert abs(np.sum(g.values) * g.dx - 1.0) <= 1e-8
        assert np.all(g.values >= 0)


def test_zero_observation_equals_fokker_planck():
    drift = lambda x: x - x ** 3
    ks = scalar_model(drift, lambda x: np.zeros_like(x))
    g = GridDensity1D.gaussian(0.3, 0.5, radius=8, dx=0.02)
    dt = 1e-4
    p = np.array(g.values)
    x = g.nodes
    faces = 0.5 * (x[:-1] + x[1:])
    a = drift(faces)
    for _ in range(50):
        g = ks_grid_step_1d(g, ks, [0.37], dt, substeps=2)
        for _ in range(2):
            flux = a * 0.5 * (p[:-1] + p[1:]) - 0.5 * (p[1:] - p[:-1]) / g.dx
            div = np.concatenate([[flux[0]], np.diff(flux), [-flux[-1]]])
            p = p - dt / 2 / g.dx * div
    p = np.clip(p, 0, None)
    p /= p.sum() * g.dx
    np.testing.assert_allclose(g.values, p, atol=1e-12)


def test_tracks_kalman_bucy(scalar_linear):
    truth = simulate_truth(scalar_linear, TimeGrid(0.0, 5e-5, 20_000), 7)
    kb = run_kalman_bucy(scalar_linear, truth)
    ks = run_ks_grid(scalar_linear, truth, initial_grid_density(scalar_linear, dx=0.01))
    assert np.max(np.abs(ks.means - kb.means)) <= 1e-2
    assert np.max(np.abs(ks.covs - kb.covs)) <= 1e-2
    assert isinstance(ks.extra["final_density"], GridDensity1D)


def test_grid_refinement():
    model = ou_model()
    init = lambda x: np.exp(-(x - 1.0) ** 2) / np.sqrt(np.pi)
    T = 0.25

    def solve(dx):
        g = GridDensity1D.from_pdf(init, -8.0, 8.0, dx=dx)
        dt = ks_cfl_limit(model, g) * 0.9
        steps = int(np.ceil(T / dt))
        dt = T / steps
        for _ in range(steps):
            g = ks_grid_step_1d(g, model, [0.0], dt)
        return g

    ref = solve(0.005)

    def l1(g):
        stride = int(round(g.dx / ref.dx))
        return np.sum(np.abs(g.values - ref.values[::stride])) * g.dx

    coarse, fine = l1(solve(0.08)), l1(solve(0.04))
    assert coarse / fine >= 1.7, (coarse, fine)


def test_run_ks_grid_snapshots(scalar_linear):
    truth = simulate_truth(scalar_linear, TimeGrid(0.0, 5e-5, 400), 2)
    tr = run_ks_grid(scalar_linear, truth, initial_grid_density(scalar_linear, dx=0.01),
                     snapshot_times=(0.01,))
    assert list(tr.snapshots) == [pytest.approx(0.01)]
    assert tr.kind == "ks_grid" and tr.means.shape == (401, 1)


def test_ks_grid_rejects_vector_state():
    model = build_linear_model(-np.eye(2), np.eye(2), [0, 0], np.eye(2))
    g = GridDensity1D.gaussian(0.0, 1.0, dx=0.1)
    with pytest.raises(ModelError):
        ks_grid_step_1d(g, model, [0.0, 0.0], 1e-4)
