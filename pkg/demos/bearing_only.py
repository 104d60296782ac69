"""Bearing-only tracking with two fixed sensors.

A target moves with white-noise acceleration of strength sigma_B = 0.1
and two sensors at (-1, -2) and (1, -2) measure its bearing with noise
sigma_W = 0.017.  The particle filter uses the constant-gain
approximation with 200 particles.  For scale, the same observations are
also fed to a Kalman-Bucy filter linearised about the true path, which a
real tracker could not run.

Run:  python3 demos/bearing_only.py [seed]
"""

import sys

import numpy as np

from feedbackpf import (
    BearingOnlyScenario,
    ConstantStrategy,
    GaussianBelief,
    TimeGrid,
    run_fpf,
    run_linearized_kalman_bucy,
    simulate_truth,
)

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
scenario = BearingOnlyScenario()
model = scenario.to_model()
truth = simulate_truth(model, TimeGrid(0.0, 0.01, 1000), seed, x0=scenario.initial_state)

pf = run_fpf(model, ConstantStrategy(), truth, N=200, seed=seed)
kb = run_linearized_kalman_bucy(model, truth, scenario.A, scenario.jacobian,
                                GaussianBelief(scenario.prior_mean, scenario.prior_cov))


def position_error(tr):
    err = tr.means[:, [0, 2]] - truth.states[:, [0, 2]]
    return np.sqrt(np.sum(err ** 2, axis=1))


e_pf, e_kb = position_error(pf), position_error(kb)
print(" t     target (x, y)       particle filter      |err|   linearised KB  |err|")
for k in range(0, truth.steps + 1, 100):
    tx, ty = truth.states[k, [0, 2]]
    px, py = pf.means[k, [0, 2]]
    print(f"{truth.times[k]:4.1f}  ({tx:+7.3f}, {ty:+7.3f})  ({px:+7.3f}, {py:+7.3f})  {e_pf[k]:6.3f}   {e_kb[k]:13.3f}")
print(f"time-averaged position error: particle filter {e_pf.mean():.3f}, linearised KB {e_kb.mean():.3f}")
