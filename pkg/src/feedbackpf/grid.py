"""Uniform 1-D grid densities and binned kernel density estimates."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import GainError


@dataclass(frozen=True, eq=False)
class GridDensity1D:
    """Density values on a uniform grid, normalised so that sum(p) * dx = 1."""

    nodes: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        x = np.array(self.nodes, dtype=float)
        p = np.array(self.values, dtype=float)
        if x.ndim != 1 or x.shape != p.shape or len(x) < 3:
            raise ValueError("nodes and values must be equal-length 1-D arrays with at least 3 points")
        steps = np.diff(x)
        if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * steps.mean():
            raise ValueError("grid nodes must be uniformly spaced and increasing")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("density values must be finite and non-negative")
        x.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "nodes", x)
        object.__setattr__(self, "values", p)

    @classmethod
    def from_pdf(cls, pdf, lo, hi, dx=None, n=None, normalize=True):
        if (dx is None) == (n is None):
            raise ValueError("give exactly one of dx or n")
        if n is None:
            n = int(round((hi - lo) / dx)) + 1
        x = np.linspace(lo, hi, n)
        p = np.asarray(pdf(x), dtype=float)
        g = cls(x, p)
        return g.normalized() if normalize else g

    @classmethod
    def gaussian(cls, mean, var, radius=8.0, dx=None, n=None):
        sd = np.sqrt(var)
        pdf = lambda x: np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)
        return cls.from_pdf(pdf, mean - radius * sd, mean + radius * sd, dx=dx, n=n)

    @property
    def dx(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def bounds(self):
        return float(self.nodes[0]), float(self.nodes[-1])

    def mass(self) -> float:
        return float(np.sum(self.values) * self.dx)

    def normalized(self) -> "GridDensity1D":
        m = self.mass()
        if not m > 0:
            raise GainError("density has zero mass on the grid")
        return GridDensity1D(self.nodes, self.values / m)

    def quadrature_weights(self) -> np.ndarray:
        """Trapezoid weights times p, scaled to sum to one."""
        w = self.values * self.dx
        w = w.copy()
        w[0] *= 0.5
        w[-1] *= 0.5
        total = w.sum()
        if not total > 0:
            raise GainError("density has zero mass on the grid")
        return w / total

    def cdf(self, x) -> np.ndarray:
        """Integral of the piecewise-linear interpolant of p up to x, scaled to end at one."""
        x = np.clip(np.asarray(x, dtype=float), self.nodes[0], self.nodes[-1])
        p = self.values
        dx = self.dx
        cum = np.concatenate([[0.0], np.cumsum(0.5 * dx * (p[:-1] + p[1:]))])
        i = np.clip(np.floor((x - self.nodes[0]) / dx).astype(np.int64), 0, len(p) - 2)
        s = x - self.nodes[i]
        slope = (p[i + 1] - p[i]) / dx
        return (cum[i] + s * p[i] + 0.5 * s ** 2 * slope) / cum[-1]

    def expect(self, values) -> np.ndarray:
        return self.quadrature_weights() @ np.asarray(values, dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "p"])
            for x, p in zip(self.nodes, self.values):
                w.writerow([repr(float(x)), repr(float(p))])


def silverman_bandwidth(samples) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5)."""
    x = np.asarray(samples, dtype=float).ravel()
    std = np.std(x, ddof=1) if len(x) > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(std, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = std
    if spread <= 0:
        raise GainError("ensemble has collapsed to a point; bandwidth undefined")
    return 0.9 * spread * len(x) ** -0.2


def kde_on_grid(samples, nodes, bandwidth=None) -> np.ndarray:
    """Gaussian KDE evaluated on a uniform grid via linear binning and FFT.

    Samples outside the grid are assigned to the nearest end node.
    """
    x = np.asarray(samples, dtype=float).ravel()
    nodes = np.asarray(nodes, dtype=float)
    if bandwidth is None:
        bandwidth = silverman_bandwidth(x)
    dx = nodes[1] - nodes[0]
    n = len(nodes)
    pos = np.clip((x - nodes[0]) / dx, 0.0, n - 1.0)
    left = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = pos - left
    counts = (np.bincount(left, weights=1.0 - frac, minlength=n)
              + np.bincount(left + 1, weights=frac, minlength=n))
    half = int(np.ceil(6.0 * bandwidth / dx))
    half = min(half, n - 1)
    offsets = dx * np.arange(-half, half + 1)
    kernel = np.exp(-0.5 * (offsets / bandwidth) ** 2) / (bandwidth * np.sqrt(2 * np.pi))
    dens = fftconvolve(counts, kernel, mode="same") / len(x)
    return np.clip(dens, 0.0, None)


def kde_density(samples, lo, hi, n=401, bandwidth=None) -> GridDensity1D:
    nodes = np.linspace(lo, hi, n)
    return GridDensity1D(nodes, kde_on_grid(samples, nodes, bandwidth)).normalized()
