"""Per-step filter output shared by the particle filter and the reference filters."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(eq=False)
class FilterTrace:
    name: str
    kind: str
    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    hhat: np.ndarray
    snapshots: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def dim_state(self) -> int:
        return self.means.shape[1]

    @property
    def variances(self) -> np.ndarray:
        return np.diagonal(self.covs, axis1=1, axis2=2)

    def columns(self):
        d = self.dim_state
        m = self.hhat.shape[1]
        upper = [f"sigma_{i + 1}{j + 1}" for i in range(d) for j in range(i, d)]
        return ["t"] + [f"mu_{i + 1}" for i in range(d)] + upper + [f"hhat_{j + 1}" for j in range(m)]

    def to_csv(self, path, dz_digest=None) -> None:
        """Write ``t, mu_*, sigma_ij (upper triangle), hhat_*``.

        When ``dz_digest`` is given it is written as a leading ``#`` comment
        so every trace file names the observation path it consumed.
        """
        iu = np.triu_indices(self.dim_state)
        with open(path, "w", newline="") as fh:
            if dz_digest is not None:
                fh.write(f"# dz_sha256={dz_digest}\n")
            w = csv.writer(fh)
            w.writerow(self.columns())
            for k, t in enumerate(self.times):
                row = [t, *self.means[k], *self.covs[k][iu], *self.hhat[k]]
                w.writerow([repr(float(v)) for v in row])

    def snapshots_to_csv(self, path_for_time) -> list:
        """Write each snapshot ensemble as ``t, particle_id, x_*``; returns the paths."""
        paths = []
        for t, states in sorted(self.snapshots.items()):
            path = path_for_time(t)
            d = states.shape[1]
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "particle_id"] + [f"x_{i + 1}" for i in range(d)])
                for i, x in enumerate(states):
                    w.writerow([repr(float(t)), i] + [repr(float(v)) for v in x])
            paths.append(path)
        return paths


def snapshot_steps(times, snapshot_times):
    """Map requested snapshot times to the nearest step indices."""
    times = np.asarray(times)
    out = {}
    for t in snapshot_times:
        k = int(np.argmin(np.abs(times - t)))
        out[k] = float(times[k])
    return out
