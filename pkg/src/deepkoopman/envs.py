"""Surrogate continuous-time systems, RK4 stepping and training-data generation.

Two systems are provided:

* :class:`OracleSystem` -- ``x1' = mu x1``, ``x2' = lam (x2 - x1^2)``. The
  observables ``(x1, x2, x1^2)`` evolve exactly linearly, so its discrete
  Koopman matrix is known in closed form.
* :class:`MeanFieldWake` -- a forced Stuart-Landau oscillator whose stable
  limit cycle (radius ``sqrt(sigma)``) plays the role of periodic vortex
  shedding and whose unstable origin plays the role of steady flow.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import matrix_exp


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""


@dataclass(frozen=True)
class SnapshotSequence:
    """States ``x_1 .. x_{T+1}`` with the inputs ``u_1 .. u_T`` between them.

    ``states`` is ``(T+1, n)``, ``inputs`` is ``(T, p)``; ``p`` may be 0.
    """

    states: np.ndarray
    inputs: np.ndarray
    dt: float

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        inputs = np.asarray(self.inputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if inputs.ndim != 2 or inputs.shape[0] != states.shape[0] - 1:
            raise ValueError(f"need len(inputs) == len(states) - 1, got {inputs.shape} vs {states.shape}")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(inputs))):
            raise ValueError("sequence contains non-finite values")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def p(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class OracleSystem:
    mu: float = -0.05
    lam: float = -1.0
    dt: float = 0.02

    def __post_init__(self):
        if not (self.mu < 0 and self.lam < 0 and self.dt > 0):
            raise ValueError("OracleSystem needs mu < 0, lam < 0, dt > 0")

    n_state = 2
    n_input = 0

    def rhs(self, x, u=0.0):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([self.mu * x1, self.lam * (x2 - x1 * x1)], axis=-1)

    def to_dict(self) -> dict:
        return {"kind": "oracle", **asdict(self)}


@dataclass(frozen=True)
class MeanFieldWake:
    sigma: float = 0.1
    omega: float = 1.0
    gamma: float = 1.0
    dt: float = 0.05

    def __post_init__(self):
        if not (self.sigma > 0 and self.omega != 0 and self.dt > 0 and self.dt * abs(self.omega) < 0.5):
            raise ValueError("MeanFieldWake needs sigma > 0, omega != 0, 0 < dt*|omega| < 0.5")

    n_state = 2
    n_input = 1

    def rhs(self, x, u=0.0):
        x1, x2 = x[..., 0], x[..., 1]
        r2 = x1 * x1 + x2 * x2
        dx = self.sigma * x1 - self.omega * x2 - r2 * x1
        dy = self.omega * x1 + self.sigma * x2 - r2 * x2 + self.gamma * u
        return np.stack([dx, dy], axis=-1)

    @property
    def cycle_radius(self) -> float:
        return float(np.sqrt(self.sigma))

    def to_dict(self) -> dict:
        return {"kind": "wake", **asdict(self)}


def env_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "oracle":
        return OracleSystem(**d)
    if kind == "wake":
        return MeanFieldWake(**d)
    raise ValueError(f"unknown environment kind {kind!r}")


@dataclass(frozen=True)
class Sensor:
    """Phase-shifted measurement ``s = cos(phase) y - sin(phase) x``."""

    phase: float = 0.0

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return np.cos(self.phase) * x[..., 1] - np.sin(self.phase) * x[..., 0]


def step_rk4(env, x, u: float = 0.0) -> np.ndarray:
    """Advance one ``env.dt`` with classical RK4, input held constant."""
    x = np.asarray(x, dtype=float)
    h = env.dt
    with np.errstate(over="ignore", invalid="ignore"):  # reported below
        k1 = env.rhs(x, u)
        k2 = env.rhs(x + 0.5 * h * k1, u)
        k3 = env.rhs(x + 0.5 * h * k2, u)
        k4 = env.rhs(x + h * k3, u)
        out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite state after RK4 step from {x}")
    return out


def simulate(env, x0, inputs) -> SnapshotSequence:
    """Roll ``env`` forward from ``x0`` under the given input sequence."""
    u = np.asarray(inputs, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    x = np.asarray(x0, dtype=float)
    states = [x]
    for t in range(u.shape[0]):
        x = step_rk4(env, x, u[t, 0] if u.shape[1] else 0.0)
        states.append(x)
    if env.n_input == 0:
        u = u[:, :0]
    return SnapshotSequence(np.array(states), u, env.dt)


def simulate_batch(env, x0s, n_steps: int, inputs=None) -> np.ndarray:
    """Vectorised rollout of many initial conditions; returns ``(batch, T+1, n)``."""
    x = np.array(x0s, dtype=float)
    out = np.empty((x.shape[0], n_steps + 1, x.shape[1]))
    out[:, 0] = x
    for t in range(n_steps):
        u = 0.0 if inputs is None else inputs[:, t]
        x = step_rk4(env, x, u)
        out[:, t + 1] = x
    return out


def lift(x) -> np.ndarray:
    """Oracle observables ``(x1, x2, x1^2)`` on the last axis."""
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 0], x[..., 1], x[..., 0] ** 2], axis=-1)


@dataclass(frozen=True)
class ObservationLift:
    """Fixed smooth map from a 2-D state to ``dim`` observed channels.

    Channel ``k`` is ``sin(a_k . x + b_k) + c_k (a_k . x)^2`` with
    coefficients drawn once from ``PCG64(seed)``. Used to hand the encoder a
    higher-dimensional input than the raw state; not invertible in closed
    form, so decoders learn the lifted channels instead of ``x``.
    """

    dim: int = 16
    seed: int = 0
    n_state: int = 2

    def coefficients(self):
        rng = np.random.Generator(np.random.PCG64(self.seed))
        a = rng.normal(size=(self.dim, self.n_state))
        b = rng.uniform(-np.pi, np.pi, size=self.dim)
        c = rng.uniform(-0.5, 0.5, size=self.dim)
        return a, b, c

    def __call__(self, x) -> np.ndarray:
        a, b, c = self.coefficients()
        proj = np.asarray(x, dtype=float) @ a.T
        return np.sin(proj + b) + c * proj * proj

    def apply(self, dataset: "Dataset") -> "Dataset":
        return Dataset(self(dataset.states), dataset.inputs, dataset.dt)


def koopman_generator(env: OracleSystem) -> np.ndarray:
    mu, lam = env.mu, env.lam
    return np.array([[mu, 0.0, 0.0], [0.0, lam, -lam], [0.0, 0.0, 2.0 * mu]])


def exact_koopman_operator(env: OracleSystem, dt: float | None = None) -> np.ndarray:
    """Discrete Koopman matrix on ``(x1, x2, x1^2)`` for one time step."""
    if not isinstance(env, OracleSystem):
        raise TypeError("exact Koopman operator is only known for OracleSystem")
    return matrix_exp(koopman_generator(env), env.dt if dt is None else dt)


def residual(env, x) -> float:
    """Norm of the unforced vector field; zero exactly at steady states."""
    return float(np.linalg.norm(env.rhs(np.asarray(x, dtype=float), 0.0)))


@dataclass(frozen=True)
class ChirpSchedule:
    """Linear frequency sweeps separated by rest periods of zero input.

    Each repetition plays ``sweep_steps`` samples of
    ``amplitude * sin(2 pi (f0 t + (f1 - f0) t^2 / (2 t_sweep)) + phase)``
    followed by ``rest_steps`` zeros. The phase of every sweep is drawn from
    the seeded generator. ``repetitions=None`` repeats until the requested
    length is filled.
    """

    amplitude: float = 0.5
    f0: float = 0.02
    f1: float = 0.3
    sweep_steps: int = 1000
    rest_steps: int = 1000
    repetitions: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.f0 > self.f1:
            raise ValueError("chirp needs f0 <= f1")
        if self.amplitude < 0:
            raise ValueError("chirp amplitude must be nonnegative")

    def signal(self, n_steps: int, dt: float) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(self.seed))
        out = np.zeros(n_steps)
        period = self.sweep_steps + self.rest_steps
        if self.sweep_steps == 0 or self.amplitude == 0 or period == 0:
            return out
        t_sweep = self.sweep_steps * dt
        t = np.arange(self.sweep_steps) * dt
        phase_arg = 2 * np.pi * (self.f0 * t + 0.5 * (self.f1 - self.f0) * t * t / t_sweep)
        start, rep = 0, 0
        while start < n_steps and (self.repetitions is None or rep < self.repetitions):
            jitter = rng.uniform(0.0, 2 * np.pi)
            sweep = self.amplitude * np.sin(phase_arg + jitter)
            stop = min(start + self.sweep_steps, n_steps)
            out[start:stop] = sweep[: stop - start]
            start += period
            rep += 1
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    """A stack of equal-length sequences: states ``(N, T+1, n)``, inputs ``(N, T, p)``."""

    states: np.ndarray
    inputs: np.ndarray
    dt: float

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.inputs.ndim == 2:
            self.inputs = self.inputs[:, :, None]
        if self.states.ndim != 3 or self.inputs.ndim != 3:
            raise ValueError("dataset arrays must be 3-D")
        if self.inputs.shape[:2] != (self.states.shape[0], self.states.shape[1] - 1):
            raise ValueError(f"inconsistent shapes {self.states.shape} / {self.inputs.shape}")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.inputs.shape[1]

    def sequence(self, i: int) -> SnapshotSequence:
        return SnapshotSequence(self.states[i], self.inputs[i], self.dt)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.states[idx], self.inputs[idx], self.dt)

    @classmethod
    def from_sequences(cls, seqs) -> "Dataset":
        seqs = list(seqs)
        return cls(np.stack([s.states for s in seqs]), np.stack([s.inputs for s in seqs]), seqs[0].dt)


def staggered_windows(states: np.ndarray, inputs: np.ndarray, T: int):
    """All stride-1 windows of ``T+1`` states from one long trajectory."""
    n_windows = states.shape[0] - T
    if n_windows < 1:
        raise ValueError(f"need at least T+1 = {T + 1} snapshots, got {states.shape[0]}")
    idx = np.arange(n_windows)[:, None] + np.arange(T + 1)[None, :]
    return states[idx], inputs[idx[:, :-1]]


def generate_training_data(env, schedule: ChirpSchedule, total_snapshots: int, T: int,
                           n_sequences: int | None = None, x0=(0.01, 0.0),
                           rng: np.random.Generator | None = None) -> Dataset:
    """Simulate one long chirp-driven run and slice it into staggered sequences.

    ``n_sequences`` (if given and smaller than the number of windows) draws
    that many windows without replacement, kept in time order.
    """
    if total_snapshots < T + 1:
        raise ValueError(f"total_snapshots must be >= T + 1 = {T + 1}")
    u = schedule.signal(total_snapshots - 1, env.dt)
    seq = simulate(env, np.asarray(x0, dtype=float), u[:, None])
    states, ins = staggered_windows(seq.states, seq.inputs, T)
    if n_sequences is not None and n_sequences < len(states):
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(schedule.seed))
        pick = np.sort(rng.choice(len(states), size=n_sequences, replace=False))
        states, ins = states[pick], ins[pick]
    return Dataset(states, ins, env.dt)


def oracle_dataset(env: OracleSystem, n_sequences: int, T: int, rng: np.random.Generator,
                   x1_range=(0.5, 1.5), x2_range=(-1.0, 1.0)) -> Dataset:
    """Independent unforced oracle trajectories from random initial states.

    ``x1`` is drawn with a random sign and magnitude in ``x1_range``.
    """
    mag = rng.uniform(*x1_range, size=n_sequences)
    sign = rng.choice([-1.0, 1.0], size=n_sequences)
    x0 = np.column_stack([sign * mag, rng.uniform(*x2_range, size=n_sequences)])
    states = simulate_batch(env, x0, T)
    return Dataset(states, np.zeros((n_sequences, T, 0)), env.dt)
