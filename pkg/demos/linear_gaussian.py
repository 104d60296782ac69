"""Feedback particle filter vs the Kalman-Bucy filter on a scalar linear model.

    dX = -0.5 X dt + dB,    dZ = X dt + dW,    X_0 ~ N(0, 1)

With the gain taken as Sigma^(N) H^T from the ensemble, the particle
filter reproduces the Kalman-Bucy mean and variance up to Monte-Carlo
error.  The constant-gain formula gives the same gain in this model, so
both particle filters should sit on top of the exact filter.

Run:  python3 demos/linear_gaussian.py
"""

import numpy as np

from feedbackpf import (
    ConstantStrategy,
    KalmanStrategy,
    TimeGrid,
    build_linear_model,
    run_fpf,
    run_kalman_bucy,
    simulate_truth,
)

model = build_linear_model(A=[[-0.5]], H=[[1.0]], mu0=[0.0], sigma0=[[1.0]])
truth = simulate_truth(model, TimeGrid(t0=0.0, dt=1e-3, steps=2000), seed=7)

kb = run_kalman_bucy(model, truth)
runs = {
    "kalman gain": run_fpf(model, KalmanStrategy(), truth, N=5000, seed=7),
    "constant gain": run_fpf(model, ConstantStrategy(), truth, N=5000, seed=8),
}

print(f"{'filter':<15} {'mean |mu - mu_kb|':>18} {'mean |S - S_kb|':>16} {'final S':>9}")
for name, tr in runs.items():
    dm = np.mean(np.abs(tr.means[:, 0] - kb.means[:, 0]))
    ds = np.mean(np.abs(tr.covs[:, 0, 0] - kb.covs[:, 0, 0]))
    print(f"{name:<15} {dm:18.4f} {ds:16.4f} {tr.covs[-1, 0, 0]:9.4f}")
print(f"{'kalman-bucy':<15} {'':>18} {'':>16} {kb.covs[-1, 0, 0]:9.4f}")
print(f"stationary Riccati root (sqrt(5) - 1) / 2 = {(np.sqrt(5) - 1) / 2:.4f}")
