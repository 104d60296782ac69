"""Filtering problem definitions.

A model is data: drift and observation callables plus noise scales and an
initial density.  Callables must broadcast over leading axes, mapping an
array of shape (..., d) to (..., d) for the drift and (..., m) for the
observation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .errors import ModelError, SingularGeometryError
from .sde import standard_normal_rows, uniform_rows


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def wrap_angle(x):
    """Map angles to (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    return np.pi - np.mod(np.pi - x, 2 * np.pi)


# ---------------------------------------------------------------------------
# initial densities


@dataclass(frozen=True, eq=False)
class GaussianInitial:
    mean: np.ndarray
    cov: np.ndarray
    kind = "gaussian"

    def __post_init__(self):
        mean = _frozen(np.atleast_1d(self.mean))
        cov = _frozen(np.atleast_2d(self.cov))
        if cov.shape != (len(mean), len(mean)):
            raise ModelError(f"initial cov shape {cov.shape} does not match mean length {len(mean)}")
        if not np.array_equal(cov, cov.T):
            raise ModelError("initial cov must be exactly symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            # zero-covariance (deterministic) starts are allowed
            if not np.all(np.linalg.eigvalsh(cov) >= -1e-14):
                raise ModelError("initial cov is not positive semidefinite") from None
            w, v = np.linalg.eigh(cov)
            chol = v * np.sqrt(np.clip(w, 0, None))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", _frozen(chol))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def pdf(self, x):
        """Density at points of shape (..., d); a trailing axis may be omitted when d == 1."""
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        diff = x - self.mean
        sol = np.linalg.solve(self.cov, diff[..., None])[..., 0]
        quad = np.sum(diff * sol, axis=-1)
        norm = np.sqrt((2 * np.pi) ** self.dim * np.linalg.det(self.cov))
        return np.exp(-0.5 * quad) / norm

    def sample(self, seed, purpose="init", indices=None, n=None):
        if indices is None:
            indices = np.arange(n)
        z = standard_normal_rows(seed, purpose, indices, 0, self.dim)
        return self.mean + z @ self._chol.T


@dataclass(frozen=True, eq=False)
class MixtureDensity1D:
    """Scalar Gaussian mixture sum_j w_j N(mean_j, var_j)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    kind = "mixture1d"

    def __post_init__(self):
        w, mu, var = (_frozen(np.atleast_1d(v)) for v in (self.weights, self.means, self.variances))
        if not (len(w) == len(mu) == len(var)) or len(w) == 0:
            raise ModelError("mixture weights, means and variances must have equal non-zero length")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ModelError(f"mixture weights must be positive and sum to 1, got sum {w.sum()!r}")
        if np.any(var <= 0):
            raise ModelError("mixture variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return 1

    def _component_logpdf(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        return (np.log(self.weights) - 0.5 * np.log(2 * np.pi * self.variances)
                - 0.5 * (x - self.means) ** 2 / self.variances)

    def logpdf(self, x):
        return special.logsumexp(self._component_logpdf(x), axis=-1)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        return np.sum(self.weights * special.ndtr((x - self.means) / np.sqrt(self.variances)), axis=-1)

    def grad_potential(self, x):
        """Gradient of -log p, computed through component responsibilities."""
        x = np.asarray(x, dtype=float)
        # loop over the few components: reductions along a short trailing axis are slow
        logc = np.log(self.weights) - 0.5 * np.log(self.variances)
        z = [x - m for m in self.means]
        lc = [c - 0.5 * zj * zj / v for c, zj, v in zip(logc, z, self.variances)]
        top = np.maximum.reduce(lc) if len(lc) > 1 else lc[0]
        num = np.zeros_like(x)
        den = np.zeros_like(x)
        for lj, zj, v in zip(lc, z, self.variances):
            r = np.exp(lj - top)
            den += r
            num += r * zj / v
        return num / den

    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def var(self) -> float:
        m2 = np.dot(self.weights, self.variances + self.means ** 2)
        return float(m2 - self.mean() ** 2)

    def support(self, radius=8.0):
        sd = np.sqrt(self.variances)
        return float(np.min(self.means - radius * sd)), float(np.max(self.means + radius * sd))

    def sample(self, seed, purpose="init", indices=None, n=None):
        if indices is None:
            indices = np.arange(n)
        u = uniform_rows(seed, purpose + ":component", indices, 0, 1)[:, 0]
        z = standard_normal_rows(seed, purpose, indices, 0, 1)[:, 0]
        comp = np.minimum(np.searchsorted(np.cumsum(self.weights), u, side="right"),
                          self.n_components - 1)
        return (self.means[comp] + np.sqrt(self.variances[comp]) * z)[:, None]


def default_benchmark_mixture() -> MixtureDensity1D:
    """Three-component mixture used by the static gain benchmark."""
    return MixtureDensity1D(weights=[0.3, 0.4, 0.3], means=[-1.0, 0.0, 1.0],
                            variances=[0.2, 0.2, 0.2])


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True, eq=False)
class LinearGaussianModel:
    A: np.ndarray
    H: np.ndarray
    initial_mean: np.ndarray
    initial_cov: np.ndarray

    def __post_init__(self):
        A = _frozen(np.atleast_2d(self.A))
        H = _frozen(np.atleast_2d(self.H))
        mu0 = _frozen(np.atleast_1d(self.initial_mean))
        cov0 = _frozen(np.atleast_2d(self.initial_cov))
        d = A.shape[0]
        if A.shape != (d, d):
            raise ModelError(f"A must be square, got shape {A.shape}")
        if H.shape[1] != d:
            raise ModelError(f"H has {H.shape[1]} columns but A is {d}x{d}")
        if mu0.shape != (d,):
            raise ModelError(f"initial_mean has shape {mu0.shape}, expected ({d},)")
        if cov0.shape != (d, d):
            raise ModelError(f"initial_cov has shape {cov0.shape}, expected ({d}, {d})")
        if not np.array_equal(cov0, cov0.T):
            raise ModelError("initial_cov must be exactly symmetric")
        try:
            np.linalg.cholesky(cov0)
        except np.linalg.LinAlgError:
            raise ModelError("initial_cov is not positive definite") from None
        for name, val in (("A", A), ("H", H), ("initial_mean", mu0), ("initial_cov", cov0)):
            object.__setattr__(self, name, val)

    @property
    def dim_state(self) -> int:
        return self.A.shape[0]

    @property
    def dim_obs(self) -> int:
        return self.H.shape[0]

    def to_dynamics_model(self, process_noise_scale=None, obs_noise_scale=None, name="linear"):
        A, H = self.A, self.H
        return DynamicsModel(
            dim_state=self.dim_state,
            dim_obs=self.dim_obs,
            drift=lambda x: np.asarray(x, dtype=float) @ A.T,
            observation=lambda x: np.asarray(x, dtype=float) @ H.T,
            process_noise_scale=process_noise_scale,
            obs_noise_scale=obs_noise_scale,
            initial_density=GaussianInitial(self.initial_mean, self.initial_cov),
            linear=self,
            name=name,
        )


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    """dX = drift(X) dt + G dB,  dZ = observation(X) dt + S dW.

    ``process_noise_scale`` is G (d x k) and ``obs_noise_scale`` is S
    (m x m); both default to identity, and k = 0 means no process noise.  ``angular_channels`` lists
    observation channels that are angles, whose differences are wrapped
    to (-pi, pi].  ``linear`` keeps the exact A, H when the model came
    from :func:`build_linear_model`.
    """

    dim_state: int
    dim_obs: int
    drift: Callable
    observation: Callable
    process_noise_scale: np.ndarray | None = None
    obs_noise_scale: np.ndarray | None = None
    initial_density: object = None
    angular_channels: tuple = ()
    linear: LinearGaussianModel | None = None
    name: str = "custom"

    def __post_init__(self):
        d, m = self.dim_state, self.dim_obs
        if int(d) != d or d < 1:
            raise ModelError(f"dim_state must be a positive integer, got {d}")
        if int(m) != m or m < 1:
            raise ModelError(f"dim_obs must be a positive integer, got {m}")
        G = np.eye(d) if self.process_noise_scale is None else np.atleast_2d(self.process_noise_scale)
        S = np.eye(m) if self.obs_noise_scale is None else np.atleast_2d(self.obs_noise_scale)
        if G.shape[0] != d:
            raise ModelError(f"process_noise_scale has {G.shape[0]} rows, expected {d}")
        # a d x 0 matrix means no process noise
        if G.shape[1] > 0 and np.linalg.matrix_rank(G) < min(G.shape):
            raise ModelError("process_noise_scale must have full rank")
        if S.shape != (m, m):
            raise ModelError(f"obs_noise_scale must be {m}x{m}, got {S.shape}")
        if np.linalg.matrix_rank(S) < m:
            raise ModelError("obs_noise_scale must have full rank (observation noise covariance must be positive definite)")
        object.__setattr__(self, "process_noise_scale", _frozen(G))
        object.__setattr__(self, "obs_noise_scale", _frozen(S))
        object.__setattr__(self, "_obs_scale_inv", _frozen(np.linalg.inv(S)))
        object.__setattr__(self, "angular_channels", tuple(int(c) for c in self.angular_channels))
        mask = np.zeros(m, dtype=bool)
        mask[list(self.angular_channels)] = True
        mask.setflags(write=False)
        object.__setattr__(self, "_angular", mask)
        if self.initial_density is not None and self.initial_density.dim != d:
            raise ModelError(f"initial density has dimension {self.initial_density.dim}, expected {d}")
        self._probe()

    def _probe(self):
        rng = np.random.default_rng(0)
        probes = np.vstack([np.zeros(self.dim_state), np.ones(self.dim_state),
                            rng.standard_normal((6, self.dim_state))])
        # bearing models are singular at sensor positions; shift probes off the lattice
        probes = probes + 0.1234
        a = np.asarray(self.drift(probes))
        h = np.asarray(self.observation(probes))
        if a.shape != probes.shape:
            raise ModelError(f"drift returned shape {a.shape} for input {probes.shape}")
        if h.shape != (len(probes), self.dim_obs):
            raise ModelError(f"observation returned shape {h.shape}, expected {(len(probes), self.dim_obs)}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(h))):
            raise ModelError("drift or observation is non-finite on probe points")

    @property
    def process_cov(self) -> np.ndarray:
        G = self.process_noise_scale
        return G @ G.T

    @property
    def obs_cov(self) -> np.ndarray:
        S = self.obs_noise_scale
        return S @ S.T

    def obs_mean(self, h_values) -> np.ndarray:
        """Ensemble mean of observations, circular for angular channels.

        The mean is anchored at the first row so constant inputs give
        their value back exactly.
        """
        h = np.atleast_2d(np.asarray(h_values, dtype=float))
        anchor = h[0]
        diff = self.obs_difference(h, anchor)
        return self._unwrap_add(anchor, diff.mean(axis=0))

    def obs_difference(self, h, ref):
        """h - ref, wrapped to (-pi, pi] on angular channels."""
        diff = np.asarray(h, dtype=float) - np.asarray(ref, dtype=float)
        if self._angular.any():
            diff = np.where(self._angular, wrap_angle(diff), diff)
        return diff

    def _unwrap_add(self, base, delta):
        out = np.asarray(base, dtype=float) + delta
        if self._angular.any():
            out = np.where(self._angular, wrap_angle(out), out)
        return out

    def whiten(self, v):
        """Apply S^-1 along the last axis (observation-noise whitening)."""
        return np.asarray(v, dtype=float) @ self._obs_scale_inv.T


def build_linear_model(A, H, mu0, sigma0, process_noise_scale=None, obs_noise_scale=None):
    """DynamicsModel for dX = AX dt + dB, dZ = HX dt + dW with Gaussian start."""
    lin = LinearGaussianModel(A=A, H=H, initial_mean=mu0, initial_cov=sigma0)
    return lin.to_dynamics_model(process_noise_scale, obs_noise_scale)


# ---------------------------------------------------------------------------
# bearing-only tracking


def bearing_observation(state, sensors):
    """Bearing from each sensor to the target, in (-pi, pi].

    ``state`` is (..., 4) ordered (x1, v1, x2, v2); ``sensors`` is a
    sequence of planar positions.  Returns (..., n_sensors).
    """
    state = np.asarray(state, dtype=float)
    sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
    dx = state[..., 0, None] - sensors[:, 0]
    dy = state[..., 2, None] - sensors[:, 1]
    if np.any((dx == 0) & (dy == 0)):
        raise SingularGeometryError("target position coincides with a sensor; bearing undefined")
    ang = np.arctan2(dy, dx)
    return np.where(ang == -np.pi, np.pi, ang)


def bearing_jacobian(state, sensors):
    """d(bearing_j)/d(state) evaluated at a single state, shape (n_sensors, 4)."""
    state = np.asarray(state, dtype=float)
    sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
    dx = state[0] - sensors[:, 0]
    dy = state[2] - sensors[:, 1]
    r2 = dx ** 2 + dy ** 2
    if np.any(r2 == 0):
        raise SingularGeometryError("target position coincides with a sensor; bearing undefined")
    J = np.zeros((len(sensors), 4))
    J[:, 0] = -dy / r2
    J[:, 2] = dx / r2
    return J


WHITE_NOISE_ACCELERATION = np.array([[0.0, 1.0, 0.0, 0.0],
                                     [0.0, 0.0, 0.0, 0.0],
                                     [0.0, 0.0, 0.0, 1.0],
                                     [0.0, 0.0, 0.0, 0.0]])


@dataclass(frozen=True, eq=False)
class BearingOnlyScenario:
    """Single planar target observed by two bearing-only sensors.

    The target follows a white-noise acceleration model; state ordering is
    (x1, v1, x2, v2).  Sensor positions and the initial target position
    are declared defaults (configurable), not measured values.
    """

    sigma_b: float = 0.1
    sigma_w: float = 0.017
    sensors: tuple = ((-1.0, -2.0), (1.0, -2.0))
    initial_state: tuple = (2.0, 0.2, 10.0, -5.0)
    prior_mean: tuple | None = None
    prior_cov: tuple | None = None
    n_particles: int = 200

    def __post_init__(self):
        if not (self.sigma_b > 0 and self.sigma_w > 0):
            raise ModelError("sigma_b and sigma_w must be positive")
        sensors = np.asarray(self.sensors, dtype=float)
        if sensors.shape != (2, 2):
            raise ModelError(f"expected two planar sensor positions, got shape {sensors.shape}")
        x0 = np.asarray(self.initial_state, dtype=float)
        if x0.shape != (4,):
            raise ModelError("initial_state must have 4 entries (x1, v1, x2, v2)")
        mean = x0 if self.prior_mean is None else np.asarray(self.prior_mean, dtype=float)
        cov = (np.diag([0.5, 0.1, 0.5, 0.1]) ** 2 if self.prior_cov is None
               else np.asarray(self.prior_cov, dtype=float))
        object.__setattr__(self, "sensors", tuple(map(tuple, sensors.tolist())))
        object.__setattr__(self, "initial_state", tuple(x0.tolist()))
        object.__setattr__(self, "prior_mean", tuple(mean.tolist()))
        object.__setattr__(self, "prior_cov", tuple(map(tuple, cov.tolist())))

    @property
    def A(self) -> np.ndarray:
        return WHITE_NOISE_ACCELERATION.copy()

    @property
    def gamma(self) -> np.ndarray:
        return self.sigma_b * np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])

    def observation(self, x):
        return bearing_observation(x, self.sensors)

    def jacobian(self, x):
        return bearing_jacobian(x, self.sensors)

    def to_model(self) -> DynamicsModel:
        A = WHITE_NOISE_ACCELERATION
        sensors = np.asarray(self.sensors)
        return DynamicsModel(
            dim_state=4,
            dim_obs=2,
            drift=lambda x: np.asarray(x, dtype=float) @ A.T,
            observation=lambda x: bearing_observation(x, sensors),
            process_noise_scale=self.gamma,
            obs_noise_scale=self.sigma_w * np.eye(2),
            initial_density=GaussianInitial(np.asarray(self.prior_mean), np.asarray(self.prior_cov)),
            angular_channels=(0, 1),
            name="bearing_only",
        )
