"""Gain-function solvers for the feedback particle filter.

The gain K(x) is a d x m matrix field whose j-th column is the gradient of
the solution phi_j of the weighted Poisson equation

    div(p grad phi_j) = -(h_j - hhat_j) p,   E_p[phi_j] = 0.

Solvers here work in whitened observation units (unit observation noise);
the filter takes care of whitening.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.linalg import eigh_tridiagonal

from .errors import BlowUpError, ExtrapolationWarning, GainError, GalerkinDegeneracyWarning
from .grid import GridDensity1D
from .sde import BLOWUP_THRESHOLD, wiener_increments

P_FLOOR = 1e-300


def _anchored_mean(values):
    # exact for constant columns: every row minus row 0 is exactly zero
    values = np.asarray(values, dtype=float)
    return values[0] + np.mean(values - values[0], axis=0)


def _as_columns(values, n):
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    elif v.ndim > 2:
        v = v.reshape(n, -1)
    if v.shape[0] != n:
        raise GainError(f"observation values have {v.shape[0]} rows, expected {n}")
    return v


def _eval_h_1d(h, x):
    """Evaluate a scalar-state observation at 1-D points, returning (n, m)."""
    x = np.asarray(x, dtype=float).ravel()
    return _as_columns(h(x[:, None]), len(x))


# ---------------------------------------------------------------------------
# gain fields


def _fd_wong_zakai(evaluate, x, dim_state):
    """Wong-Zakai drift 0.5 * sum_k sum_s K_ks dK_ls/dx_k by central differences."""
    x = np.asarray(x, dtype=float)
    K = evaluate(x)
    omega = np.zeros(x.shape)
    for k in range(dim_state):
        eps = 1e-4 * (1.0 + np.abs(x[..., k]))
        shift = np.zeros(x.shape)
        shift[..., k] = eps
        dK = (evaluate(x + shift) - evaluate(x - shift)) / (2 * eps)[..., None, None]
        omega += 0.5 * np.einsum("...s,...ls->...l", K[..., k, :], dK)
    return omega


class GainField:
    """Evaluator x -> K(x) in R^{d x m}.

    ``evaluate`` takes (..., d) and returns (..., d, m); ``wong_zakai``
    returns the correction drift with shape (..., d).
    """

    variant = "abstract"
    dim_state: int
    dim_obs: int

    def evaluate(self, x):
        raise NotImplementedError

    def wong_zakai(self, x):
        return _fd_wong_zakai(self.evaluate, x, self.dim_state)

    def __call__(self, x):
        return self.evaluate(x)


class ConstantGain(GainField):
    variant = "constant"

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.dim_state, self.dim_obs = self.matrix.shape

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.matrix, x.shape[:-1] + self.matrix.shape)

    def wong_zakai(self, x):
        return np.zeros(np.shape(x))


class KalmanGain(ConstantGain):
    variant = "kalman"


class CustomGain(GainField):
    """Wraps an arbitrary callable; the correction term uses finite differences."""

    variant = "custom"

    def __init__(self, func, dim_state=1, dim_obs=1):
        self.func = func
        self.dim_state = dim_state
        self.dim_obs = dim_obs

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.func(x), dtype=float).reshape(x.shape[:-1] + (self.dim_state, self.dim_obs))


class GalerkinGain1D(GainField):
    """Piecewise-constant gain: kappa_l on [a_{l-1}, a_l), zero outside."""

    variant = "galerkin_1d"
    dim_state = 1

    def __init__(self, nodes, kappa, empty_cells=(), regularized=False):
        self.nodes = np.asarray(nodes, dtype=float)
        kappa = np.asarray(kappa, dtype=float)
        self.kappa = kappa[:, None] if kappa.ndim == 1 else kappa
        self.dim_obs = self.kappa.shape[1]
        self.empty_cells = tuple(empty_cells)
        self.regularized = regularized

    @property
    def n_cells(self) -> int:
        return len(self.nodes) - 1

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.nodes, x[..., 0], side="right") - 1
        inside = (idx >= 0) & (idx < self.n_cells)
        vals = self.kappa[np.clip(idx, 0, self.n_cells - 1)]
        vals = np.where(inside[..., None], vals, 0.0)
        return vals[..., None, :]

    def wong_zakai(self, x):
        # derivative vanishes inside every cell
        return np.zeros(np.shape(x))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            cols = ["kappa"] if self.dim_obs == 1 else [f"kappa_{j + 1}" for j in range(self.dim_obs)]
            w.writerow(["cell_left", "cell_right"] + cols)
            for l in range(self.n_cells):
                w.writerow([repr(float(self.nodes[l])), repr(float(self.nodes[l + 1]))]
                           + [repr(float(v)) for v in self.kappa[l]])


class GridGain1D(GainField):
    """Gain tabulated on grid nodes, linearly interpolated (clamped outside)."""

    variant = "grid_1d"
    dim_state = 1

    def __init__(self, nodes, values):
        self.nodes = np.asarray(nodes, dtype=float)
        values = np.asarray(values, dtype=float)
        self.values = values[:, None] if values.ndim == 1 else values
        self.dim_obs = self.values.shape[1]
        steps = np.diff(self.nodes)
        self._uniform = len(self.nodes) > 1 and np.ptp(steps) <= 1e-9 * steps.mean()

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)[..., 0]
        nodes = self.nodes
        if not self._uniform:
            cols = [np.interp(x, nodes, self.values[:, j]) for j in range(self.dim_obs)]
            return np.stack(cols, axis=-1)[..., None, :]
        # uniform grid: locate the cell arithmetically instead of by bisection
        n = len(nodes)
        dx = (nodes[-1] - nodes[0]) / (n - 1)
        pos = np.clip((x - nodes[0]) / dx, 0.0, n - 1.0)
        i = np.minimum(pos.astype(np.int64), n - 2)
        frac = (pos - i)[..., None]
        vals = self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
        return vals[..., None, :]

    def wong_zakai(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.nodes[0], self.nodes[-1]
        eps = 1e-4 * (1.0 + np.abs(x[..., 0]))
        xp = x[..., 0] + eps
        xm = x[..., 0] - eps
        if np.any(xp > hi) or np.any(xm < lo):
            warnings.warn(ExtrapolationWarning(
                "Wong-Zakai stencil outside gain grid support; using clamped stencil"), stacklevel=2)
        xp = np.clip(xp, lo, hi)
        xm = np.clip(xm, lo, hi)
        width = xp - xm
        K = self.evaluate(x)[..., 0, :]
        Kp = self.evaluate(xp[..., None])[..., 0, :]
        Km = self.evaluate(xm[..., None])[..., 0, :]
        safe = np.where(width > 0, width, 1.0)
        dK = np.where((width > 0)[..., None], (Kp - Km) / safe[..., None], 0.0)
        return 0.5 * np.sum(K * dK, axis=-1)[..., None]


# ---------------------------------------------------------------------------
# closed-form gains


def kalman_gain(sigma, H) -> KalmanGain:
    """Gain Sigma H^T, exact for a Gaussian density and linear observation."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if np.linalg.norm(sigma - sigma.T) > 1e-10 * np.linalg.norm(sigma):
        raise GainError("covariance passed to kalman_gain is not symmetric")
    if H.shape[1] != sigma.shape[0]:
        raise GainError(f"H has {H.shape[1]} columns, covariance is {sigma.shape}")
    return KalmanGain(sigma @ H.T)


def constant_gain(states, h_values, hhat=None) -> ConstantGain:
    """kappa = (1/N) sum_i (h(X^i) - hhat) X^i^T, arranged d x m.

    ``hhat`` defaults to the ensemble mean of ``h_values``.
    """
    X = np.asarray(states, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    N = X.shape[0]
    if N < 2:
        raise GainError("constant gain needs at least two particles")
    hv = _as_columns(h_values, N)
    if hhat is None:
        hhat = _anchored_mean(hv)
    centered = hv - np.asarray(hhat, dtype=float)
    return ConstantGain(X.T @ centered / N)


# ---------------------------------------------------------------------------
# Galerkin with indicator basis and |x - a_k| test functions


class GalerkinBasis1D:
    """Indicator basis on a partition a_0 < ... < a_L with test functions |x - a_k|."""

    def __init__(self, nodes):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim != 1 or len(nodes) < 2:
            raise GainError("partition needs at least two nodes")
        if np.any(np.diff(nodes) <= 0):
            raise GainError("partition nodes must be strictly increasing")
        self.nodes = nodes

    @classmethod
    def uniform(cls, lo, hi, n_cells):
        return cls(np.linspace(lo, hi, n_cells + 1))

    @property
    def n_cells(self) -> int:
        return len(self.nodes) - 1

    def chi(self, x):
        x = np.asarray(x, dtype=float).ravel()[:, None]
        return ((x >= self.nodes[:-1]) & (x < self.nodes[1:])).astype(float)

    def zeta(self, x):
        """Piecewise-linear potentials whose derivatives are the indicators."""
        x = np.asarray(x, dtype=float).ravel()[:, None]
        return np.clip(x, self.nodes[:-1], self.nodes[1:]) - self.nodes[:-1]

    def psi(self, x):
        x = np.asarray(x, dtype=float).ravel()[:, None]
        return np.abs(x - self.nodes[1:])

    def cell_signs(self):
        """Value of grad psi_k on the interior of cell l, as an L x L matrix."""
        k = np.arange(self.n_cells)
        return np.where(k[:, None] < k[None, :], 1.0, -1.0)

    def grad_psi(self, x):
        # sign with sign(0) = +1
        x = np.asarray(x, dtype=float).ravel()[:, None]
        return np.where(x - self.nodes[1:] >= 0, 1.0, -1.0)


def assemble_galerkin(basis: GalerkinBasis1D, h=None, particles=None, density=None, h_values=None):
    """Galerkin matrix A_kl = E[chi_l grad psi_k] and vector b_k = E[(h - hhat) psi_k].

    Pass ``particles`` for the ensemble-average version or ``density`` (a
    GridDensity1D) for grid quadrature.  ``h`` is a callable; in particle
    mode precomputed ``h_values`` may be given instead.  ``b`` has shape
    (L,) for a single channel, (L, m) otherwise.
    """
    if (particles is None) == (density is None):
        raise GainError("give exactly one of particles or density")
    if particles is not None:
        x = np.asarray(particles, dtype=float).ravel()
        if len(x) < 1:
            raise GainError("particle assembly needs at least one particle")
        hv = _as_columns(h_values, len(x)) if h_values is not None else _eval_h_1d(h, x)
        w = np.full(len(x), 1.0 / len(x))
        hhat = _anchored_mean(hv)
    else:
        x = density.nodes
        hv = _eval_h_1d(h, x)
        w = density.quadrature_weights()
        hhat = w @ hv
    if particles is not None:
        A = basis.grad_psi(x).T @ (basis.chi(x) * w[:, None])
    else:
        # grad psi_k is constant on each cell, so A only needs cell masses;
        # taking them from the grid CDF splits boundary nodes correctly
        mass = np.diff(density.cdf(basis.nodes))
        A = basis.cell_signs() * mass
    b = basis.psi(x).T @ ((hv - hhat) * w[:, None])
    if b.shape[1] == 1:
        b = b[:, 0]
    return A, b


def solve_galerkin(A, b, partition) -> GalerkinGain1D:
    """Solve A kappa = b, falling back to a ridge shift when A is singular."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    nodes = partition.nodes if isinstance(partition, GalerkinBasis1D) else np.asarray(partition, dtype=float)
    L = A.shape[0]
    if A.shape != (L, L):
        raise GainError(f"Galerkin matrix must be square, got {A.shape}")
    if len(nodes) != L + 1:
        raise GainError(f"partition has {len(nodes) - 1} cells but A is {L}x{L}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise GainError("Galerkin system contains non-finite entries")
    empty = np.flatnonzero(np.all(A == 0, axis=0))
    if len(empty) == L:
        raise GainError("every Galerkin cell is empty; no particle lies inside the partition")
    norm = np.linalg.norm(A, 2)
    smin = np.linalg.svd(A, compute_uv=False)[-1]
    regularized = False
    if smin <= 1e-12 * norm:
        delta = 1e-8 * np.trace(A) / L
        if delta == 0:
            delta = 1e-8 * norm
        A = A + delta * np.eye(L)
        regularized = True
        warnings.warn(GalerkinDegeneracyWarning(
            f"singular Galerkin matrix (empty cells {empty.tolist()}); ridge shift {delta:.3g} applied",
            empty_cells=empty.tolist()), stacklevel=2)
    kappa = np.linalg.solve(A, b)
    return GalerkinGain1D(nodes, kappa, empty_cells=empty.tolist(), regularized=regularized)


def galerkin_gain(basis, h=None, particles=None, density=None, h_values=None) -> GalerkinGain1D:
    A, b = assemble_galerkin(basis, h, particles=particles, density=density, h_values=h_values)
    return solve_galerkin(A, b, basis)


# ---------------------------------------------------------------------------
# direct numerical solution in one dimension


@dataclass(frozen=True, eq=False)
class PoissonSolution1D:
    """phi and K = dphi/dx on grid nodes, with the density and hhat used."""

    nodes: np.ndarray
    phi: np.ndarray
    K: np.ndarray
    hhat: np.ndarray
    density: GridDensity1D

    @property
    def dim_obs(self) -> int:
        return self.K.shape[1]

    def as_gain(self) -> GridGain1D:
        return GridGain1D(self.nodes, self.K)

    def to_csv(self, path):
        m = self.dim_obs
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if m == 1:
                w.writerow(["x", "phi", "K"])
            else:
                w.writerow(["x"] + [f"phi_{j + 1}" for j in range(m)] + [f"K_{j + 1}" for j in range(m)])
            for i, x in enumerate(self.nodes):
                w.writerow([repr(float(x))] + [repr(float(v)) for v in self.phi[i]]
                           + [repr(float(v)) for v in self.K[i]])


def dns_gain_1d(density: GridDensity1D, h) -> PoissonSolution1D:
    """K(x) = -(1/p(x)) * integral_{-inf}^x (h - hhat) p dy on the grid.

    The cumulative integral is taken from the left below the median and
    from the right above it, which avoids cancellation in the upper tail.
    """
    x = density.nodes
    p = density.values
    dx = density.dx
    if not np.sum(p) > 0:
        raise GainError("density has zero mass on the grid")
    hv = _eval_h_1d(h, x)
    cum_p = cumulative_simpson(p, dx=dx, initial=0.0)
    cum_hp = cumulative_simpson(hv * p[:, None], dx=dx, axis=0, initial=0.0)
    hhat = cum_hp[-1] / cum_p[-1]
    f = (hv - hhat) * p[:, None]
    left = cumulative_simpson(f, dx=dx, axis=0, initial=0.0)
    right = -cumulative_simpson(f[::-1], dx=dx, axis=0, initial=0.0)[::-1]
    upper = (cum_p > 0.5 * cum_p[-1])[:, None]
    F = np.where(upper, right, left)
    K = -F / np.maximum(p, P_FLOOR)[:, None]
    phi = cumulative_simpson(K, dx=dx, axis=0, initial=0.0)
    phi = phi - (p @ phi) / np.sum(p)
    return PoissonSolution1D(nodes=x, phi=phi, K=K, hhat=hhat, density=density)


def weighted_l2_gain_error(gain: GainField, reference: PoissonSolution1D, channel=0) -> float:
    """sqrt(E_p[(K_gain - K_ref)^2]) on the reference solution's grid."""
    x = reference.nodes
    kg = gain.evaluate(x[:, None])[:, 0, channel]
    w = reference.density.quadrature_weights()
    return float(np.sqrt(w @ (kg - reference.K[:, channel]) ** 2))


# ---------------------------------------------------------------------------
# Monte-Carlo solution of Poisson's equation along Smoluchowski paths


@dataclass(frozen=True)
class SmoluchowskiSpec:
    """Langevin diffusion dPhi = -grad G dt + sqrt(2) dxi with G = -log p."""

    grad_potential: object
    horizon: float = 20.0
    dt: float = 1e-3
    replicates: int = 10_000

    def __post_init__(self):
        if not (self.horizon > 0 and self.dt > 0 and self.replicates > 0):
            raise ValueError("horizon, dt and replicates must be positive")
        probe = np.asarray(self.grad_potential(np.linspace(-1.0, 1.0, 5)[:, None]), dtype=float)
        if not np.all(np.isfinite(probe)):
            raise ValueError("potential gradient is non-finite on probe points")


@dataclass(frozen=True)
class MonteCarloEstimate:
    value: np.ndarray
    stderr: np.ndarray


def smoluchowski_phi_mc(spec: SmoluchowskiSpec, h, hhat, x, seed=0) -> MonteCarloEstimate:
    """phi_j(x) = int_0^T E[h_j(Phi_t) - hhat_j | Phi_0 = x] dt by Euler-Maruyama paths.

    ``x`` is one point of shape (d,) or a batch of probe points of shape
    (P, d); each probe gets its own ``replicates`` independent paths and the
    whole batch is advanced together.  ``grad_potential`` and ``h`` take
    arrays of shape (n, d).  Returns the replicate mean and its standard
    error per channel, shaped (m,) or (P, m).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x = np.atleast_2d(np.atleast_1d(x))
    P, d = x.shape
    R = spec.replicates
    n = P * R
    n_steps = int(round(spec.horizon / spec.dt))
    hhat = np.atleast_1d(np.asarray(hhat, dtype=float))
    phi = np.repeat(x, R, axis=0)
    ids = np.arange(n)
    acc = np.zeros((n, len(hhat)))
    root2 = np.sqrt(2.0)
    for k in range(n_steps):
        acc += (_as_columns(h(phi), n) - hhat) * spec.dt
        drift = np.asarray(spec.grad_potential(phi), dtype=float).reshape(n, d)
        phi = phi - drift * spec.dt + root2 * wiener_increments(seed, "smoluchowski", ids, k, spec.dt, d)
        bad = ~np.all(np.abs(phi) <= BLOWUP_THRESHOLD, axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise BlowUpError(f"Smoluchowski path blew up in replicate {i % R} (probe {i // R}) at step {k}",
                              step=k, context={"replicate": i % R, "probe": i // R})
    acc = acc.reshape(P, R, -1)
    mean = acc.mean(axis=1)
    stderr = acc.std(axis=1, ddof=1) / np.sqrt(R) if R > 1 else np.full_like(mean, np.inf)
    if single:
        mean, stderr = mean[0], stderr[0]
    return MonteCarloEstimate(value=mean, stderr=stderr)


# ---------------------------------------------------------------------------
# Poincare bound


@dataclass(frozen=True)
class PoincareReport:
    lhs: np.ndarray
    rhs: np.ndarray
    lam: float
    satisfied: bool

    def as_dict(self):
        return {"lhs": [float(v) for v in np.atleast_1d(self.lhs)],
                "rhs": [float(v) for v in np.atleast_1d(self.rhs)],
                "lambda": float(self.lam), "satisfied": bool(self.satisfied)}


def _report(lhs, rhs, lam):
    lhs = np.atleast_1d(lhs)
    rhs = np.atleast_1d(rhs)
    ok = bool(np.all(lhs <= rhs * (1 + 1e-6) + 1e-12))
    return PoincareReport(lhs=lhs, rhs=rhs, lam=float(lam), satisfied=ok)


def poincare_diagnostic(density, h, solution, lam=None) -> PoincareReport:
    """Compare E|grad phi|^2 with (1/lam) E|h - hhat|^2, channel by channel.

    ``density`` is a GridDensity1D (``lam`` must be supplied, for example
    from :func:`weighted_laplacian_gap`) or a Gaussian belief with ``mean``
    and ``cov`` attributes (lam defaults to 1 / largest eigenvalue of cov).
    For Gaussian beliefs in more than one dimension ``h`` must be the
    observation matrix H and ``solution`` a constant gain.
    """
    if isinstance(density, GridDensity1D):
        if lam is None:
            raise GainError("no spectral gap available for a non-Gaussian density; pass lam "
                            "(for example lam=weighted_laplacian_gap(density))")
        return _poincare_grid(density, h, solution, lam)
    mean = np.atleast_1d(np.asarray(density.mean, dtype=float))
    cov = np.atleast_2d(np.asarray(density.cov, dtype=float))
    if lam is None:
        lam = 1.0 / np.max(np.linalg.eigvalsh(cov))
    if len(mean) == 1 and callable(h):
        grid = GridDensity1D.gaussian(mean[0], cov[0, 0], radius=10.0, n=4001)
        return _poincare_grid(grid, h, solution, lam)
    if callable(h):
        raise GainError("multivariate Gaussian diagnostic needs the observation matrix H, not a callable")
    if not isinstance(solution, ConstantGain):
        raise GainError("multivariate Gaussian diagnostic needs a constant or Kalman gain")
    H = np.atleast_2d(np.asarray(h, dtype=float))
    K = solution.matrix
    lhs = np.sum(K ** 2, axis=0)
    rhs = np.diag(H @ cov @ H.T) / lam
    return _report(lhs, rhs, lam)


def _poincare_grid(density, h, solution, lam):
    x = density.nodes
    w = density.quadrature_weights()
    hv = _eval_h_1d(h, x)
    hhat = w @ hv
    if isinstance(solution, PoissonSolution1D):
        if len(solution.nodes) == len(x) and np.allclose(solution.nodes, x):
            K = solution.K
        else:
            K = solution.as_gain().evaluate(x[:, None])[:, 0, :]
    else:
        K = solution.evaluate(x[:, None])[:, 0, :]
    lhs = w @ K ** 2
    rhs = w @ (hv - hhat) ** 2 / lam
    return _report(lhs, rhs, lam)


def weighted_laplacian_gap(density: GridDensity1D, rel_floor=1e-10) -> float:
    """Smallest non-zero eigenvalue of -(1/p) d/dx (p d/dx) with Neumann ends.

    Nodes where p falls below ``rel_floor * max(p)`` are dropped; the
    remaining range must be contiguous.
    """
    p = density.values
    keep = np.flatnonzero(p > rel_floor * p.max())
    lo, hi = keep[0], keep[-1] + 1
    p = p[lo:hi]
    if np.any(p <= 0):
        raise GainError("density support is not contiguous above the floor")
    dx2 = density.dx ** 2
    face = 0.5 * (p[:-1] + p[1:])
    diag = np.zeros(len(p))
    diag[:-1] += face
    diag[1:] += face
    diag /= dx2 * p
    off = -face / (dx2 * np.sqrt(p[:-1] * p[1:]))
    vals = eigh_tridiagonal(diag, off, eigvals_only=True, select="i", select_range=(0, 1))
    return float(vals[1])
