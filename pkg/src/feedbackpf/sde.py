"""Euler-Maruyama stepping and counter-based Wiener increments.

Every random draw in the toolkit is a pure function of
``(seed, purpose, index, counter)``.  A Philox generator is keyed by the
seed and a hash of the purpose tag; the counter (the step number) selects
the block, and the stream index selects a row within that block.  Because
numpy fills arrays sequentially, row ``j`` of a block does not depend on
how many rows were requested, so a single stream and a batch of streams
agree bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import BlowUpError, NumericalError

_MASK64 = (1 << 64) - 1
BLOWUP_THRESHOLD = 1e9


def _purpose_key(purpose: str) -> int:
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_generator(seed: int, purpose: str, counter: int = 0) -> np.random.Generator:
    """Philox generator for one (seed, purpose, counter) block."""
    if not 0 <= int(seed) <= _MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    if counter < 0:
        raise ValueError("counter must be non-negative")
    key = np.array([int(seed), _purpose_key(purpose)], dtype=np.uint64)
    # counter lives in the third 64-bit word; the low words advance within a block
    bitgen = np.random.Philox(key=key, counter=int(counter) << 128)
    return np.random.Generator(bitgen)


def standard_normal_rows(seed, purpose, indices, counter, dim):
    """Standard normal rows for the given stream indices, shape (len(indices), dim)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return np.empty((0, dim))
    if indices.min() < 0:
        raise ValueError("stream indices must be non-negative")
    block = stream_generator(seed, purpose, counter).standard_normal((int(indices.max()) + 1, dim))
    return block[indices]


def uniform_rows(seed, purpose, indices, counter, dim):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return np.empty((0, dim))
    block = stream_generator(seed, purpose, counter).random((int(indices.max()) + 1, dim))
    return block[indices]


@dataclass(frozen=True)
class NoiseStream:
    """Identifies one reproducible source of Gaussian noise.

    Distinct ``(purpose, index)`` pairs are independent; ``counter`` is
    the position along the stream (normally the time-step number).
    """

    seed: int
    purpose: str
    index: int = 0
    counter: int = 0

    def at(self, counter: int) -> "NoiseStream":
        return replace(self, counter=counter)

    def advance(self, n: int = 1) -> "NoiseStream":
        return replace(self, counter=self.counter + n)


def wiener_increment(stream: NoiseStream, dt: float, dim: int) -> np.ndarray:
    """Brownian increment over ``dt``: i.i.d. N(0, dt) entries."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    z = standard_normal_rows(stream.seed, stream.purpose, [stream.index], stream.counter, dim)
    return np.sqrt(dt) * z[0]


def wiener_increments(seed, purpose, indices, counter, dt, dim):
    """Vectorised :func:`wiener_increment` over many stream indices."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return np.sqrt(dt) * standard_normal_rows(seed, purpose, indices, counter, dim)


def euler_maruyama_step(x, drift_value, diffusion, dW, dt, step=None):
    """Return ``x + drift_value*dt + diffusion @ dW``.

    Works on a single state (d,) or a batch (n, d); ``diffusion`` is d x k
    and ``dW`` has trailing dimension k.  Inputs are not modified.
    """
    x = np.asarray(x, dtype=float)
    drift_value = np.asarray(drift_value, dtype=float)
    diffusion = np.atleast_2d(np.asarray(diffusion, dtype=float))
    dW = np.asarray(dW, dtype=float)
    if drift_value.shape != x.shape:
        raise ValueError(f"drift shape {drift_value.shape} does not match state shape {x.shape}")
    if diffusion.shape[0] != x.shape[-1] or diffusion.shape[1] != dW.shape[-1]:
        raise ValueError(
            f"diffusion {diffusion.shape} incompatible with state {x.shape} and noise {dW.shape}"
        )
    for name, arr in (("state", x), ("drift", drift_value), ("noise", dW)):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite {name} at step {step}", step=step)
    return x + drift_value * dt + dW @ diffusion.T


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    steps: int

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError(f"dt must be positive and finite, got {self.dt}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if not np.isfinite(self.t0 + self.steps * self.dt):
            raise ValueError("time horizon is not finite")

    @property
    def horizon(self) -> float:
        return self.t0 + self.steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)


@dataclass(frozen=True, eq=False)
class TruthPath:
    """Simulated signal and observation increments.

    ``states`` has ``steps + 1`` rows (initial state included); ``dz[k]``
    is the observation increment over ``[times[k], times[k+1])``.
    """

    times: np.ndarray
    states: np.ndarray
    dz: np.ndarray
    seed: int = 0
    replicate: int = 0

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def steps(self) -> int:
        return len(self.dz)

    def dz_digest(self) -> str:
        """SHA-256 of the observation increments, used to prove filters shared them."""
        return hashlib.sha256(np.ascontiguousarray(self.dz, dtype="<f8").tobytes()).hexdigest()

    def to_csv(self, path) -> None:
        d = self.states.shape[1]
        m = self.dz.shape[1]
        header = ["t"] + [f"x_{i + 1}" for i in range(d)] + [f"dz_{j + 1}" for j in range(m)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.times):
                dz = self.dz[k] if k < len(self.dz) else [""] * m
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.states[k]]
                           + [v if v == "" else repr(float(v)) for v in dz])

    @classmethod
    def from_csv(cls, path) -> "TruthPath":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(1 for h in header if h.startswith("x_"))
        times = np.array([float(r[0]) for r in body])
        states = np.array([[float(v) for v in r[1:1 + d]] for r in body])
        dz = np.array([[float(v) for v in r[1 + d:]] for r in body[:-1]])
        return cls(times=times, states=states, dz=dz)


def _simulate(model, grid: TimeGrid, seed: int, indices, x0=None):
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indices)
    d, m = model.dim_state, model.dim_obs
    gamma = model.process_noise_scale
    obs_scale = model.obs_noise_scale
    if x0 is None:
        x = model.initial_density.sample(seed, purpose="truth-init", indices=indices)
    else:
        x = np.broadcast_to(np.asarray(x0, dtype=float), (n, d)).copy()
    states = np.empty((n, grid.steps + 1, d))
    dz = np.empty((n, grid.steps, m))
    states[:, 0] = x
    dt = grid.dt
    for k in range(grid.steps):
        db = wiener_increments(seed, "signal", indices, k, dt, gamma.shape[1])
        dw = wiener_increments(seed, "observation", indices, k, dt, m)
        dz[:, k] = model.observation(x) * dt + dw @ obs_scale.T
        x = euler_maruyama_step(x, model.drift(x), gamma, db, dt, step=k)
        if not np.all(np.abs(x) <= BLOWUP_THRESHOLD):
            raise BlowUpError(f"truth state exceeded {BLOWUP_THRESHOLD:g} at step {k}", step=k)
        states[:, k + 1] = x
    return states, dz


def simulate_truth(model, grid: TimeGrid, seed: int, x0=None, replicate: int = 0) -> TruthPath:
    """Simulate one signal path and its observation increments.

    The initial state is drawn from ``model.initial_density`` unless ``x0``
    is given.  ``replicate`` selects the noise stream index, so replicate
    ``r`` here equals row ``r`` of :func:`simulate_truth_batch`.
    """
    states, dz = _simulate(model, grid, seed, [replicate], x0)
    return TruthPath(times=grid.times, states=states[0], dz=dz[0], seed=seed, replicate=replicate)


def simulate_truth_batch(model, grid: TimeGrid, seed: int, replicates: int, x0=None):
    """Independent truth replicates, returned as (states, dz) arrays.

    ``states`` is (R, steps+1, d) and ``dz`` is (R, steps, m).
    """
    return _simulate(model, grid, seed, np.arange(replicates), x0)
