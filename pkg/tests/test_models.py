import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from feedbackpf.errors import ModelError, SingularGeometryError
from feedbackpf.models import (
    BearingOnlyScenario,
    DynamicsModel,
    GaussianInitial,
    LinearGaussianModel,
    MixtureDensity1D,
    bearing_jacobian,
    bearing_observation,
    build_linear_model,
    default_benchmark_mixture,
    wrap_angle,
)


def test_scalar_zero_drift_model():
    m = build_linear_model([[0.0]], [[1.0]], [0.0], [[1.0]])
    assert m.dim_state == 1 and m.dim_obs == 1
    assert m.drift(np.array([[2.0]]))[0, 0] == 0.0
    assert m.observation(np.array([[2.0]]))[0, 0] == 2.0


def test_double_integrator_products():
    m = build_linear_model([[0, 1], [0, 0]], [[1, 0]], [0, 0], np.eye(2))
    np.testing.assert_array_equal(m.drift(np.array([[1.0, 3.0]])), [[3.0, 0.0]])
    np.testing.assert_array_equal(m.observation(np.array([[1.0, 3.0]])), [[1.0]])


def test_white_noise_acceleration_drift():
    m = BearingOnlyScenario().to_model()
    x = np.array([[1.5, -0.3, 2.5, 0.7]])
    np.testing.assert_array_equal(m.drift(x), [[-0.3, 0.0, 0.7, 0.0]])


def test_linear_round_trip_keeps_matrices():
    A = np.array([[0.1, 0.2], [-0.3, 0.4]])
    H = np.array([[1.0, -2.0]])
    m = build_linear_model(A, H, [0, 0], np.eye(2))
    np.testing.assert_array_equal(m.linear.A, A)
    np.testing.assert_array_equal(m.linear.H, H)
    x = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_array_equal(m.drift(x), x @ A.T)
    np.testing.assert_array_equal(m.observation(x), x @ H.T)


@pytest.mark.parametrize("kwargs, word", [
    (dict(A=[[1, 2, 3], [4, 5, 6]], H=[[1, 0, 0]], initial_mean=[0, 0], initial_cov=np.eye(2)), "A"),
    (dict(A=np.eye(2), H=[[1, 0, 0]], initial_mean=[0, 0], initial_cov=np.eye(2)), "H"),
    (dict(A=np.eye(2), H=[[1, 0]], initial_mean=[0, 0, 0], initial_cov=np.eye(2)), "initial_mean"),
    (dict(A=np.eye(2), H=[[1, 0]], initial_mean=[0, 0], initial_cov=np.eye(3)), "initial_cov"),
])
def test_dimension_errors_name_matrix(kwargs, word):
    with pytest.raises(ModelError, match=word):
        LinearGaussianModel(**kwargs)


def test_initial_cov_must_be_spd():
    with pytest.raises(ModelError, match="symmetric"):
        LinearGaussianModel(np.eye(2), [[1, 0]], [0, 0], [[1.0, 0.1], [0.0, 1.0]])
    with pytest.raises(ModelError, match="positive definite"):
        LinearGaussianModel(np.eye(2), [[1, 0]], [0, 0], [[1.0, 2.0], [2.0, 1.0]])


def test_noise_scales_need_full_rank():
    with pytest.raises(ModelError, match="full rank"):
        build_linear_model([[0.0]], [[1.0]], [0], [[1]], obs_noise_scale=[[0.0]])
    with pytest.raises(ModelError, match="full rank"):
        build_linear_model(np.eye(2), [[1, 0]], [0, 0], np.eye(2), process_noise_scale=[[1, 1], [1, 1]])


def test_probe_rejects_non_finite_callables():
    with pytest.raises(ModelError, match="non-finite"):
        DynamicsModel(1, 1, lambda x: np.where(x > 0, np.nan, x), lambda x: x)


def test_probe_rejects_wrong_shape():
    with pytest.raises(ModelError, match="shape"):
        DynamicsModel(2, 1, lambda x: x[..., :1], lambda x: x[..., :1])


def test_bearing_axes():
    s = [(0.0, 0.0)]
    assert bearing_observation([1, 0, 0, 0], s)[0] == 0.0
    assert bearing_observation([0, 0, 1, 0], s)[0] == pytest.approx(np.pi / 2, abs=1e-15)


def test_bearing_two_sensor_geometry():
    h = bearing_observation([1, 0, 1, 0], [(0, 0), (2, 0)])
    np.testing.assert_allclose(h, [np.pi / 4, 3 * np.pi / 4], atol=1e-15)


def test_bearing_range_excludes_minus_pi():
    h = bearing_observation([-1, 0, -0.0, 0], [(0, 0)])
    assert h[0] == np.pi


def test_bearing_coincident_sensor():
    with pytest.raises(SingularGeometryError):
        bearing_observation([1, 0, 2, 0], [(1, 2), (0, 0)])
    with pytest.raises(SingularGeometryError):
        bearing_jacobian(np.array([1.0, 0, 2, 0]), [(1, 2), (0, 0)])


def test_bearing_jacobian_matches_finite_differences():
    sensors = [(-1.0, -2.0), (1.0, -2.0)]
    x = np.array([0.7, 0.2, 1.3, -0.5])
    J = bearing_jacobian(x, sensors)
    eps = 1e-6
    fd = np.stack([(bearing_observation(x + eps * e, sensors) - bearing_observation(x - eps * e, sensors)) / (2 * eps)
                   for e in np.eye(4)], axis=1)
    np.testing.assert_allclose(J, fd, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(r=st.floats(0.1, 50), phi=st.floats(-2.5, 2.5), theta=st.floats(-0.5, 0.5),
       sx=st.floats(-5, 5), sy=st.floats(-5, 5))
def test_bearing_rotation_consistency(r, phi, theta, sx, sy):
    s = [(sx, sy)]
    target = [sx + r * np.cos(phi), 0.0, sy + r * np.sin(phi), 0.0]
    rotated = [sx + r * np.cos(phi + theta), 0.0, sy + r * np.sin(phi + theta), 0.0]
    h0 = bearing_observation(target, s)[0]
    h1 = bearing_observation(rotated, s)[0]
    assert wrap_angle(h1 - h0 - theta) == pytest.approx(0.0, abs=1e-9)


def test_published_bearing_defaults():
    sc = BearingOnlyScenario()
    assert sc.sigma_b == 0.1 and sc.sigma_w == 0.017 and sc.n_particles == 200
    assert sc.initial_state[1] == 0.2 and sc.initial_state[3] == -5.0
    m = sc.to_model()
    np.testing.assert_allclose(m.obs_cov, 0.017 ** 2 * np.eye(2))
    np.testing.assert_allclose(m.process_cov, np.diag([0, 0.01, 0, 0.01]))


def test_wrap_angle_range():
    x = np.linspace(-20, 20, 2001)
    w = wrap_angle(x)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    np.testing.assert_allclose(np.cos(w), np.cos(x), atol=1e-12)
    assert wrap_angle(-np.pi) == np.pi


def test_angular_obs_mean_and_difference():
    sc = BearingOnlyScenario()
    m = sc.to_model()
    h = np.array([[np.pi - 0.1, 0.2], [-np.pi + 0.1, 0.4]])
    mean = m.obs_mean(h)
    assert abs(abs(mean[0]) - np.pi) < 1e-12
    assert mean[1] == pytest.approx(0.3)
    d = m.obs_difference(h, mean)
    np.testing.assert_allclose(np.abs(d[:, 0]), 0.1, atol=1e-12)


def test_mixture_validation():
    with pytest.raises(ModelError, match="sum to 1"):
        MixtureDensity1D([0.5, 0.6], [0, 1], [1, 1])
    with pytest.raises(ModelError, match="variances"):
        MixtureDensity1D([0.5, 0.5], [0, 1], [1, 0])
    MixtureDensity1D([0.3, 0.3, 0.4 + 5e-13], [0, 1, 2], [1, 1, 1])


def test_mixture_normalisation_and_cdf():
    mix = default_benchmark_mixture()
    lo, hi = mix.support()
    total, _ = integrate.quad(mix.pdf, lo, hi, points=[-1, 0, 1], epsabs=1e-13, epsrel=1e-13, limit=200)
    assert abs(total - 1.0) < 1e-8
    x = np.linspace(lo, hi, 5001)
    assert np.all(mix.pdf(x) >= 0)
    assert np.all(np.diff(mix.cdf(x)) >= 0)
    assert mix.cdf(hi) == pytest.approx(1.0, abs=1e-12)


def test_mixture_grad_potential_matches_log_derivative():
    mix = default_benchmark_mixture()
    x = np.linspace(-2, 2, 9)
    eps = 1e-6
    fd = -(mix.logpdf(x + eps) - mix.logpdf(x - eps)) / (2 * eps)
    np.testing.assert_allclose(mix.grad_potential(x), fd, atol=1e-6)


def test_gaussian_sampler_moments():
    mean = np.array([1.0, -2.0])
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    n = 100_000
    x = GaussianInitial(mean, cov).sample(seed=5, n=n)
    se_mean = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(x.mean(axis=0) - mean) < 3 * se_mean)
    # variance of a sample covariance entry: (s_ii s_jj + s_ij^2) / n
    se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / n)
    assert np.all(np.abs(np.cov(x.T) - cov) < 3 * se_cov)


def test_mixture_sampler_moments():
    mix = default_benchmark_mixture()
    n = 100_000
    x = mix.sample(seed=9, n=n)[:, 0]
    assert abs(x.mean() - mix.mean()) < 3 * np.sqrt(mix.var() / n)
    m4 = np.mean((x - x.mean()) ** 4)
    assert abs(x.var() - mix.var()) < 3 * np.sqrt((m4 - mix.var() ** 2) / n)


def test_gaussian_pdf_matches_scipy():
    from scipy.stats import multivariate_normal

    g = GaussianInitial([0.5, -1.0], [[1.5, 0.3], [0.3, 0.7]])
    x = np.random.default_rng(1).standard_normal((6, 2))
    np.testing.assert_allclose(g.pdf(x), multivariate_normal(g.mean, g.cov).pdf(x), rtol=1e-12)


def test_models_are_immutable():
    m = build_linear_model([[0.0]], [[1.0]], [0.0], [[1.0]])
    with pytest.raises(Exception):
        m.dim_state = 3
    with pytest.raises(ValueError):
        m.linear.A[0, 0] = 1.0
