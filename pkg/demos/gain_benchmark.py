"""Gain approximations for a fixed three-component Gaussian mixture.

The density is 0.3 N(-1, 0.2) + 0.4 N(0, 0.2) + 0.3 N(1, 0.2) and the
observation is h(x) = x^2.  The exact gain comes from the direct 1-D
formula; the Galerkin gains use L indicator cells on [-2, 2], assembled
either by quadrature against the density or from 1000 samples.

A Monte-Carlo solution of the same Poisson equation, obtained by running
Langevin paths started at a few points, is printed as an independent check
of phi.  Set FAST=0 in the environment to use the full replicate count.

Run:  python3 demos/gain_benchmark.py [out_dir]
"""

import os
import sys
import warnings
from pathlib import Path

import numpy as np

from feedbackpf import (
    GalerkinBasis1D,
    GalerkinDegeneracyWarning,
    GridDensity1D,
    SmoluchowskiSpec,
    default_benchmark_mixture,
    dns_gain_1d,
    galerkin_gain,
    smoluchowski_phi_mc,
    weighted_l2_gain_error,
)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "out/demo_gain")
out.mkdir(parents=True, exist_ok=True)

mix = default_benchmark_mixture()
h = lambda x: x[:, 0] ** 2
lo, hi = mix.support(8)
dens = GridDensity1D.from_pdf(mix.pdf, lo, hi, dx=1e-3)
exact = dns_gain_1d(dens, h)
exact.to_csv(out / "dns_solution.csv")

x = mix.sample(0, purpose="demo", n=1000)[:, 0]
print(f"{'L':>3} {'quadrature L2 err':>18} {'particle L2 err':>16}")
for L in (1, 5, 15):
    basis = GalerkinBasis1D.uniform(-2.0, 2.0, L)
    quad = galerkin_gain(basis, h, density=dens)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", GalerkinDegeneracyWarning)
        part = galerkin_gain(basis, h, particles=x)
    flag = "  (singular matrix, ridge applied)" if caught else ""
    quad.to_csv(out / f"galerkin_quadrature_L{L}.csv")
    print(f"{L:3d} {weighted_l2_gain_error(quad, exact):18.4f} {weighted_l2_gain_error(part, exact):16.4f}{flag}")

# a cell with no particles makes the particle matrix singular
basis = GalerkinBasis1D.uniform(-2.0, 2.0, 15)
emptied = x[x < basis.nodes[-2]]
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always", GalerkinDegeneracyWarning)
    gain = galerkin_gain(basis, h, particles=emptied)
print(f"last cell emptied: {caught[0].message}")
print(f"kappa stays finite: {np.all(np.isfinite(gain.kappa))}")

fast = os.environ.get("FAST", "1") != "0"
spec = SmoluchowskiSpec(mix.grad_potential, horizon=20.0, dt=2e-3, replicates=1000 if fast else 10_000)
probes = np.array([-1.0, 0.0, 1.0])
est = smoluchowski_phi_mc(spec, h, exact.hhat, probes[:, None], seed=1)
for p, v, se in zip(probes, est.value[:, 0], est.stderr[:, 0]):
    print(f"phi({p:+.1f}): direct {np.interp(p, exact.nodes, exact.phi[:, 0]):+.4f}   "
          f"Langevin {v:+.4f} +/- {se:.4f}")
print(f"wrote {out}/")
