"""Reference filters used as ground truth.

* Kalman-Bucy mean/Riccati recursion (exact for linear-Gaussian models),
  plus a variant linearised about a known trajectory.
* Kushner-Stratonovich solver for scalar states on a uniform grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CFLError, ModelError, StabilityError
from .grid import GridDensity1D
from .trace import FilterTrace, snapshot_steps

__all__ = [
    "GaussianBelief",
    "GridDensity1D",
    "kalman_bucy_step",
    "run_kalman_bucy",
    "run_linearized_kalman_bucy",
    "ks_grid_step_1d",
    "ks_cfl_limit",
    "grid_moments",
    "initial_grid_density",
    "run_ks_grid",
]


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))


def kalman_bucy_step(belief: GaussianBelief, A, H, dz, dt, process_cov=None, obs_cov=None,
                     predicted_obs=None, innovation=None) -> GaussianBelief:
    """One explicit Euler step of the Kalman-Bucy filter.

    mean += A mean dt + Sigma H^T R^-1 (dz - H mean dt)
    Sigma += (A Sigma + Sigma A^T + Q - Sigma H^T R^-1 H Sigma) dt

    Q and R default to identity.  ``predicted_obs`` replaces ``H mean``
    (used for linearisation about a trajectory); ``innovation`` overrides
    the whole ``dz - predicted dt`` term.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    A = np.atleast_2d(A)
    H = np.atleast_2d(H)
    mu, S = belief.mean, belief.cov
    d, m = len(mu), H.shape[0]
    Q = np.eye(d) if process_cov is None else np.atleast_2d(process_cov)
    Rinv = np.eye(m) if obs_cov is None else np.linalg.inv(np.atleast_2d(obs_cov))
    if innovation is None:
        pred = H @ mu if predicted_obs is None else np.asarray(predicted_obs, dtype=float)
        innovation = np.asarray(dz, dtype=float) - pred * dt
    gain = S @ H.T @ Rinv
    mu_new = mu + A @ mu * dt + gain @ innovation
    S_new = S + (A @ S + S @ A.T + Q - gain @ H @ S) * dt
    S_new = 0.5 * (S_new + S_new.T)
    min_eig = np.linalg.eigvalsh(S_new)[0]
    if min_eig < -1e-10 * max(1.0, np.abs(S_new).max()):
        raise StabilityError(f"Riccati covariance lost positive semidefiniteness "
                             f"(eigenvalue {min_eig:.3g}); use a smaller dt")
    return GaussianBelief(mu_new, S_new)


def _gaussian_trace(name, kind, times, beliefs, hhat, snapshots=None):
    return FilterTrace(
        name=name, kind=kind, times=np.asarray(times),
        means=np.array([b.mean for b in beliefs]),
        covs=np.array([b.cov for b in beliefs]),
        hhat=np.asarray(hhat), snapshots=snapshots or {},
    )


def run_kalman_bucy(model, truth, belief0: GaussianBelief | None = None, name="kalman_bucy") -> FilterTrace:
    """Kalman-Bucy filter over a truth path; ``model`` must be linear."""
    lin = model.linear
    if lin is None:
        raise ModelError("Kalman-Bucy reference needs a linear model (build_linear_model)")
    if belief0 is None:
        belief0 = GaussianBelief(lin.initial_mean, lin.initial_cov)
    Q, R = model.process_cov, model.obs_cov
    dt = truth.dt
    beliefs = [belief0]
    b = belief0
    for k in range(truth.steps):
        try:
            b = kalman_bucy_step(b, lin.A, lin.H, truth.dz[k], dt, Q, R)
        except StabilityError as exc:
            exc.step = k
            raise
        beliefs.append(b)
    hhat = np.array([lin.H @ b.mean for b in beliefs])
    return _gaussian_trace(name, "kalman_bucy", truth.times, beliefs, hhat)


def run_linearized_kalman_bucy(model, truth, A, jacobian, belief0: GaussianBelief,
                               name="linearized_kalman_bucy") -> FilterTrace:
    """Kalman-Bucy filter for a linear drift ``A`` and an observation linearised about the truth.

    At each step H_t = jacobian(X_t) and the predicted observation is
    h(X_t) + H_t (mean - X_t).  Angular channels are wrapped.
    """
    A = np.atleast_2d(A)
    Q, R = model.process_cov, model.obs_cov
    dt = truth.dt
    beliefs = [belief0]
    b = belief0
    for k in range(truth.steps):
        xk = truth.states[k]
        Hk = np.atleast_2d(jacobian(xk))
        pred = model.observation(xk[None, :])[0] + Hk @ (b.mean - xk)
        innov = model.obs_difference(truth.dz[k] / dt, pred) * dt
        b = kalman_bucy_step(b, A, Hk, None, dt, Q, R, innovation=innov)
        beliefs.append(b)
    hhat = model.observation(np.array([b.mean for b in beliefs]))
    return _gaussian_trace(name, "kalman_bucy", truth.times, beliefs, hhat)


# ---------------------------------------------------------------------------
# Kushner-Stratonovich on a grid


def ks_cfl_limit(model, density: GridDensity1D) -> float:
    """Largest stable explicit step for the Fokker-Planck part on this grid.

    Combines the pure-diffusion bound dx^2 / (4 D) with the
    advection-diffusion bound 1 / (max|a|/dx + 2D/dx^2), where D is half
    the process-noise variance.
    """
    x = density.nodes
    dx = density.dx
    D = 0.5 * float(model.process_cov[0, 0])
    faces = 0.5 * (x[:-1] + x[1:])
    amax = float(np.max(np.abs(model.drift(faces[:, None]))))
    rate = amax / dx + 2 * D / dx ** 2
    limits = [1.0 / rate if rate > 0 else np.inf]
    if D > 0:
        limits.append(dx * dx / (4 * D))
    return min(limits)


def _fp_substep(p, a_face, D, dx, dt):
    flux = a_face * 0.5 * (p[:-1] + p[1:]) - D * (p[1:] - p[:-1]) / dx
    div = np.empty_like(p)
    div[0] = flux[0]
    div[1:-1] = flux[1:] - flux[:-1]
    div[-1] = -flux[-1]
    return p - dt / dx * div


def ks_grid_step_1d(density: GridDensity1D, model, dz, dt, substeps=1,
                    _cache=None) -> GridDensity1D:
    """Operator-split Kushner-Stratonovich step for a scalar state.

    (i) ``substeps`` explicit finite-volume Fokker-Planck steps with
    zero-flux ends; (ii) multiplicative update
    p <- p (1 + (h - hhat)^T R^-1 (dz - hhat dt)), then clipping at zero and
    renormalisation so that sum(p) dx = 1.
    """
    if model.dim_state != 1:
        raise ModelError("grid Kushner-Stratonovich solver supports scalar states only")
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = density.nodes
    dx = density.dx
    if _cache is None:
        _cache = _ks_cache(model, density)
    a_face, D, limit, hv = _cache
    sub_dt = dt / substeps
    if sub_dt > limit * (1 + 1e-12):
        raise CFLError(f"Fokker-Planck sub-step {sub_dt:.3g} exceeds the stable limit {limit:.3g} "
                       f"for dx={dx:.3g}; use dt <= {limit * substeps:.3g} or more substeps",
                       suggested_dt=limit * substeps)
    p = np.array(density.values)
    for _ in range(substeps):
        p = _fp_substep(p, a_face, D, dx, sub_dt)
    p = np.clip(p, 0.0, None)
    w = p * dx
    w[0] *= 0.5
    w[-1] *= 0.5
    w = w / w.sum()
    hhat = w @ hv
    centered = model.whiten(model.obs_difference(hv, hhat))
    dI = model.whiten(np.asarray(dz, dtype=float) - hhat * dt)
    p = p * (1.0 + centered @ dI)
    p = np.clip(p, 0.0, None)
    mass = p.sum() * dx
    if not mass > 0:
        raise StabilityError("grid density lost all mass; reduce dt")
    return GridDensity1D(x, p / mass)


def _ks_cache(model, density):
    x = density.nodes
    faces = 0.5 * (x[:-1] + x[1:])
    a_face = np.asarray(model.drift(faces[:, None]), dtype=float)[:, 0]
    D = 0.5 * float(model.process_cov[0, 0])
    hv = np.asarray(model.observation(x[:, None]), dtype=float)
    return a_face, D, ks_cfl_limit(model, density), hv


def grid_moments(density: GridDensity1D, h=None):
    """Trapezoid mean, variance and (optionally) E[h] of a grid density."""
    w = density.quadrature_weights()
    x = density.nodes
    mean = float(w @ x)
    var = float(w @ (x - mean) ** 2)
    if h is None:
        return mean, var, None
    hv = np.asarray(h(x[:, None]), dtype=float)
    hv = hv.reshape(len(x), -1)
    return mean, var, w @ hv


def initial_grid_density(model, lo=None, hi=None, dx=0.01, radius=8.0) -> GridDensity1D:
    """Grid version of a scalar model's initial density.

    Bounds default to mean +/- ``radius`` standard deviations.
    """
    init = model.initial_density
    if lo is None or hi is None:
        if hasattr(init, "support"):
            lo0, hi0 = init.support(radius)
        else:
            sd = float(np.sqrt(init.cov[0, 0]))
            lo0, hi0 = float(init.mean[0]) - radius * sd, float(init.mean[0]) + radius * sd
        lo = lo0 if lo is None else lo
        hi = hi0 if hi is None else hi
    return GridDensity1D.from_pdf(lambda x: init.pdf(x), lo, hi, dx=dx)


def run_ks_grid(model, truth, density0: GridDensity1D, substeps=1, snapshot_times=(),
                name="ks_grid") -> FilterTrace:
    """Kushner-Stratonovich grid filter along a truth path.

    Snapshots hold GridDensity1D objects; the final density is stored in
    ``extra["final_density"]``.
    """
    cache = _ks_cache(model, density0)
    snap = snapshot_steps(truth.times, snapshot_times)
    dens = density0
    h = model.observation
    means, covs, hhats = [], [], []
    snapshots = {}

    def record(k, g):
        mean, var, hh = grid_moments(g, h)
        means.append([mean])
        covs.append([[var]])
        hhats.append(hh)
        if k in snap:
            snapshots[snap[k]] = g

    record(0, dens)
    for k in range(truth.steps):
        try:
            dens = ks_grid_step_1d(dens, model, truth.dz[k], truth.dt, substeps=substeps, _cache=cache)
        except StabilityError as exc:
            exc.step = k
            raise
        record(k + 1, dens)
    return FilterTrace(name=name, kind="ks_grid", times=truth.times, means=np.array(means),
                       covs=np.array(covs), hhat=np.array(hhats), snapshots=snapshots,
                       extra={"final_density": dens})
