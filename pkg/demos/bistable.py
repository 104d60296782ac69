"""Particle filter against the Kushner-Stratonovich grid solution.

Signal dX = (X - X^3) dt + dB in a double well, observed through
dZ = X dt + dW.  The grid solver gives the exact posterior density (up to
discretisation); the particle filter uses a gain computed from a kernel
density estimate of its own ensemble.  At the end we compare densities in
L1 and print a coarse text histogram of both.

Run:  python3 demos/bistable.py
"""

import numpy as np

from feedbackpf import (
    DnsKdeStrategy,
    DynamicsModel,
    GaussianInitial,
    TimeGrid,
    initial_grid_density,
    kde_on_grid,
    run_fpf,
    run_ks_grid,
    simulate_truth,
)

model = DynamicsModel(
    dim_state=1, dim_obs=1,
    drift=lambda x: x - x ** 3,
    observation=lambda x: x,
    initial_density=GaussianInitial([0.0], [[1.0]]),
)
truth = simulate_truth(model, TimeGrid(0.0, 1e-4, 5000), seed=1)

grid0 = initial_grid_density(model, -4.0, 4.0, dx=0.01)
ks = run_ks_grid(model, truth, grid0, substeps=2)
pf = run_fpf(model, DnsKdeStrategy(), truth, N=5000, seed=1)

post = ks.extra["final_density"]
kde = kde_on_grid(pf.extra["final_states"][:, 0], post.nodes)
kde /= kde.sum() * post.dx
print(f"true state at T=0.5: {truth.states[-1, 0]:+.3f}")
print(f"posterior mean: grid {ks.means[-1, 0]:+.3f}   particles {pf.means[-1, 0]:+.3f}")
print(f"L1(particle KDE, grid density) = {np.sum(np.abs(kde - post.values)) * post.dx:.4f}")

print("\n   x     grid      particles")
for xv in np.arange(-2.0, 2.01, 0.25):
    i = int(np.argmin(np.abs(post.nodes - xv)))
    print(f"{xv:+5.2f}  {'#' * int(40 * post.values[i]):<20} {'*' * int(40 * kde[i])}")
