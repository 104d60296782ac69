"""The feedback particle filter.

Each particle follows

    dX^i = a(X^i) dt + G dB^i + K(X^i) dI^i + Omega(X^i) dt,
    dI^i = dZ - (h(X^i) + hhat) / 2 dt,

with the gain K recomputed from the current ensemble at every step.  All
gain computations run in whitened observation units (dZ and h multiplied
by S^-1), so gain solvers always see unit observation noise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import BlowUpError, GainError, GalerkinDegeneracyWarning, ModelError, NumericalError
from .gain import (
    GainField,
    GalerkinBasis1D,
    GridGain1D,
    assemble_galerkin,
    constant_gain,
    dns_gain_1d,
    kalman_gain,
    solve_galerkin,
)
from .grid import GridDensity1D, kde_on_grid
from .models import wrap_angle
from .sde import BLOWUP_THRESHOLD, wiener_increments
from .trace import FilterTrace, snapshot_steps

__all__ = [
    "ParticleEnsemble",
    "EnsembleStats",
    "ensemble_stats",
    "innovation_increment",
    "wong_zakai_correction",
    "fpf_step",
    "KalmanStrategy",
    "ConstantStrategy",
    "GalerkinStrategy",
    "DnsKdeStrategy",
    "make_gain_strategy",
    "FpfOptions",
    "run_fpf",
]


@dataclass(eq=False)
class ParticleEnsemble:
    states: np.ndarray
    stream_ids: np.ndarray = None
    t: float = 0.0

    def __post_init__(self):
        X = np.asarray(self.states, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if not np.all(np.isfinite(X)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(X), axis=1))[0])
            raise NumericalError(f"particle {bad} has a non-finite state")
        self.states = X
        ids = np.arange(len(X)) if self.stream_ids is None else np.asarray(self.stream_ids, dtype=np.int64)
        if ids.shape != (len(X),):
            raise ValueError("stream_ids must hold one id per particle")
        self.stream_ids = ids

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True, eq=False)
class EnsembleStats:
    mean: np.ndarray
    cov: np.ndarray
    hhat: np.ndarray


def _anchored_mean(X):
    return X[0] + np.mean(X - X[0], axis=0)


def _states(ensemble):
    if isinstance(ensemble, ParticleEnsemble):
        return ensemble.states
    X = np.asarray(ensemble, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def ensemble_stats(ensemble, h=None, h_values=None, obs_mean=None) -> EnsembleStats:
    """Sample mean, sample covariance (1/(N-1)) and mean of h over the ensemble.

    ``obs_mean`` replaces the plain average of h (a model's circular mean
    for angular channels, for instance).
    """
    X = _states(ensemble)
    N = X.shape[0]
    if N < 2:
        raise ValueError("ensemble statistics need at least two particles")
    mu = _anchored_mean(X)
    D = X - mu
    cov = D.T @ D / (N - 1)
    cov = 0.5 * (cov + cov.T)
    hhat = None
    if h_values is None and h is not None:
        h_values = h(X)
    if h_values is not None:
        hv = np.asarray(h_values, dtype=float).reshape(N, -1)
        hhat = obs_mean(hv) if obs_mean is not None else _anchored_mean(hv)
    return EnsembleStats(mu, cov, hhat)


def innovation_increment(dz, h_i, hhat, dt, angular=None):
    """dI = dZ - (h_i + hhat)/2 dt.

    For channels flagged in ``angular`` the rate differences dZ/dt - h are
    wrapped to (-pi, pi] before averaging, so a bearing crossing the branch
    cut does not produce a 2 pi jump.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    dz = np.asarray(dz, dtype=float)
    h_i = np.asarray(h_i, dtype=float)
    hhat = np.asarray(hhat, dtype=float)
    dI = dz - 0.5 * (h_i + hhat) * dt
    if angular is not None and np.any(angular):
        rate = dz / dt
        wrapped = 0.5 * (wrap_angle(rate - h_i) + wrap_angle(rate - hhat)) * dt
        dI = np.where(angular, wrapped, dI)
    return dI


def wong_zakai_correction(gain: GainField, x):
    """Omega_l = 1/2 sum_k sum_s K_ks dK_ls/dx_k."""
    return gain.wong_zakai(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# gain strategies
#
# A strategy maps (states, centred whitened observations, model) to a
# GainField in whitened units.


class KalmanStrategy:
    """Sigma^(N) H^T from the ensemble covariance; needs a linear model."""

    name = "kalman"

    def __call__(self, X, dh, model):
        if model.linear is None:
            raise ModelError("kalman gain strategy needs a linear model")
        H = model.whiten(model.linear.H.T).T
        return kalman_gain(ensemble_stats(X).cov, H)


class ConstantStrategy:
    """kappa = (1/N) sum_i X^i (h(X^i) - hhat)^T."""

    name = "constant"

    def __call__(self, X, dh, model):
        return constant_gain(X, dh, hhat=np.zeros(dh.shape[1]))


@dataclass
class GalerkinStrategy:
    """Particle-assembled Galerkin gain on L uniform cells over mean +/- width std.

    Steps where the ridge fallback fired are counted in ``degenerate_steps``.
    """

    n_cells: int = 5
    width: float = 4.0
    degenerate_steps: int = 0
    name: str = "galerkin"

    def __call__(self, X, dh, model):
        if X.shape[1] != 1:
            raise ModelError("galerkin gain strategy supports scalar states only")
        x = X[:, 0]
        mu = _anchored_mean(x)
        sd = np.std(x, ddof=1)
        if not sd > 0:
            raise GainError("ensemble collapsed; Galerkin partition undefined")
        basis = GalerkinBasis1D.uniform(mu - self.width * sd, mu + self.width * sd, self.n_cells)
        A, b = assemble_galerkin(basis, particles=x, h_values=dh)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", GalerkinDegeneracyWarning)
            gain = solve_galerkin(A, b, basis)
        if any(issubclass(w.category, GalerkinDegeneracyWarning) for w in caught):
            self.degenerate_steps += 1
        return gain


@dataclass
class DnsKdeStrategy:
    """Direct 1-D solution on a kernel density estimate of the ensemble.

    The grid spans mean +/- width std with ``grid_points`` nodes and a
    Silverman bandwidth.  The gain table is cut to nodes where the
    estimate exceeds ``rel_floor`` times its peak.
    """

    grid_points: int = 401
    width: float = 6.0
    rel_floor: float = 1e-10
    name: str = "dns_kde"

    def __call__(self, X, dh, model):
        if X.shape[1] != 1:
            raise ModelError("dns_kde gain strategy supports scalar states only")
        x = X[:, 0]
        mu = _anchored_mean(x)
        sd = np.std(x, ddof=1)
        if not sd > 0:
            raise GainError("ensemble collapsed; density estimate undefined")
        nodes = np.linspace(mu - self.width * sd, mu + self.width * sd, self.grid_points)
        dens = GridDensity1D(nodes, kde_on_grid(x, nodes)).normalized()
        h = lambda y: model.whiten(model.observation(y))
        sol = dns_gain_1d(dens, h)
        # K = -F/p is meaningless where the estimate has no mass; keep the
        # supported range and let evaluation clamp beyond it
        p = dens.values
        keep = np.flatnonzero(p > self.rel_floor * p.max())
        lo, hi = keep[0], keep[-1] + 1
        return GridGain1D(nodes[lo:hi], sol.K[lo:hi])


def make_gain_strategy(kind: str, **options):
    kinds = {
        "kalman": KalmanStrategy,
        "constant": ConstantStrategy,
        "galerkin": GalerkinStrategy,
        "dns_kde": DnsKdeStrategy,
    }
    if kind not in kinds:
        raise ValueError(f"unknown gain strategy {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind](**options)


# ---------------------------------------------------------------------------
# stepping


def _clip_gain(K, cap):
    norm = np.sqrt(np.sum(K * K, axis=(-2, -1)))
    scale = np.minimum(1.0, cap / np.maximum(norm, 1e-300))
    return K * scale[:, None, None]


def fpf_step(ensemble: ParticleEnsemble, model, strategy, dz, dt, seed, step, purpose="particle",
             gain_clip=None):
    """Advance every particle by one Euler-Maruyama step of the controlled SDE.

    Returns ``(new_ensemble, gain, stats)`` where ``stats`` describes the
    pre-update ensemble used for hhat and the gain.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    X = ensemble.states
    hv = np.asarray(model.observation(X), dtype=float)
    hhat = model.obs_mean(hv)
    dh = model.whiten(model.obs_difference(hv, hhat))
    gain = strategy(X, dh, model)
    K = np.asarray(gain.evaluate(X), dtype=float)
    if gain_clip is not None:
        K = _clip_gain(K, gain_clip)
    dI = model.whiten(innovation_increment(np.asarray(dz, dtype=float), hv, hhat, dt, model._angular))
    G = model.process_noise_scale
    dB = wiener_increments(seed, purpose, ensemble.stream_ids, step, dt, G.shape[1])
    with warnings.catch_warnings():
        # the stencil clamp only matters at the extreme tail of the ensemble
        warnings.simplefilter("ignore")
        omega = gain.wong_zakai(X)
    Xn = X + model.drift(X) * dt + dB @ G.T + np.einsum("ndm,nm->nd", K, dI) + omega * dt
    finite = np.all(np.isfinite(Xn), axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise NumericalError(f"particle {bad} became non-finite at step {step}", step=step,
                             context={"particle": bad})
    big = np.abs(Xn).max(axis=1) > BLOWUP_THRESHOLD
    if big.any():
        bad = int(np.flatnonzero(big)[0])
        raise BlowUpError(f"particle {bad} exceeded {BLOWUP_THRESHOLD:g} at step {step}", step=step,
                          context={"particle": bad})
    stats = EnsembleStats(None, None, hhat)
    return ParticleEnsemble(Xn, ensemble.stream_ids, ensemble.t + dt), gain, stats


@dataclass
class FpfOptions:
    """Run options: ``tag`` names the RNG streams, ``initial_states`` overrides
    sampling from the model's initial density."""

    tag: str = "fpf"
    snapshot_times: tuple = ()
    gain_clip: float | None = None
    initial_states: np.ndarray | None = None
    keep_final_gain: bool = True
    extra: dict = field(default_factory=dict)


def run_fpf(model, strategy, truth, N, seed, options: FpfOptions | None = None, name=None) -> FilterTrace:
    """Run the filter along ``truth.dz``; returns per-step ensemble statistics."""
    opts = options or FpfOptions()
    if truth.dz.shape[1] != model.dim_obs or truth.states.shape[1] != model.dim_state:
        raise ModelError("truth path dimensions do not match the model")
    if opts.initial_states is not None:
        X0 = np.asarray(opts.initial_states, dtype=float).reshape(N, model.dim_state)
    else:
        X0 = model.initial_density.sample(seed, purpose=f"fpf-init:{opts.tag}", indices=np.arange(N))
        X0 = np.asarray(X0, dtype=float).reshape(N, model.dim_state)
    ens = ParticleEnsemble(X0, np.arange(N), float(truth.times[0]))
    snap = snapshot_steps(truth.times, opts.snapshot_times)
    purpose = f"particle:{opts.tag}"
    dt = truth.dt
    steps = truth.steps
    d = model.dim_state
    means = np.empty((steps + 1, d))
    covs = np.empty((steps + 1, d, d))
    hhats = np.empty((steps + 1, model.dim_obs))
    snapshots = {}
    gain = None

    def record(k, e):
        s = ensemble_stats(e, h=model.observation, obs_mean=model.obs_mean)
        means[k], covs[k], hhats[k] = s.mean, s.cov, s.hhat
        if k in snap:
            snapshots[snap[k]] = e.states.copy()

    record(0, ens)
    for k in range(steps):
        try:
            ens, gain, _ = fpf_step(ens, model, strategy, truth.dz[k], dt, seed, k, purpose, opts.gain_clip)
        except NumericalError as exc:
            if exc.step is None:
                exc.step = k
            raise
        record(k + 1, ens)
    extra = {"final_states": ens.states, "strategy": getattr(strategy, "name", type(strategy).__name__)}
    if opts.keep_final_gain:
        extra["final_gain"] = gain
    if hasattr(strategy, "degenerate_steps"):
        extra["degenerate_steps"] = strategy.degenerate_steps
    return FilterTrace(name=name or opts.tag, kind="fpf", times=truth.times, means=means, covs=covs,
                       hhat=hhats, snapshots=snapshots, extra=extra)
