"""Receding-horizon control on learned latent dynamics, plus proportional feedback.

At every control step the latent transition matrix is re-fitted from the most
recent window of encoded states (using the model's global ``B``), the
finite-horizon tracking cost

    J = sum_{t=1}^{T} |c_t - c_goal|_Q^2 + sum_{t=1}^{T-1} R u_t^2

is condensed into a box-constrained quadratic program in ``u_1 .. u_{T-1}``,
and the first optimal input is applied to the plant.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import envs
from .koopman import KoopmanModel, fit_latent_dynamics

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MpcConfig:
    """MPC settings.

    ``R=None`` selects the input penalty automatically as
    ``R_scale * mean |c - c_goal|^2 / u_max^2`` over the first warmup window.
    """

    horizon: int = 16
    Q: float = 1.0
    R: float | None = None
    R_scale: float = 10.0
    u_max: float = 1.0
    goal_state: tuple[float, ...] = (0.0, 0.0)
    warmup: int = 16
    max_iter: int = 10_000
    tol: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "goal_state", tuple(float(v) for v in self.goal_state))
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2 (one decision variable)")
        if self.R is not None and self.R < 0:
            raise ValueError("R must be nonnegative")
        if self.u_max < 0:
            raise ValueError("u_max must be nonnegative")
        if self.Q <= 0:
            raise ValueError("Q must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["goal_state"] = list(self.goal_state)
        return d


@dataclass(frozen=True)
class PControlConfig:
    gain: float = 0.4
    sensor: envs.Sensor = field(default_factory=envs.Sensor)

    def __post_init__(self):
        if not np.isfinite(self.gain):
            raise ValueError("gain must be finite")


@dataclass(frozen=True)
class QpProblem:
    """``min_u u^T H u + f^T u + const`` subject to ``|u_i| <= bound``."""

    H: np.ndarray
    f: np.ndarray
    bound: float
    const: float = 0.0

    def objective(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.einsum("...i,ij,...j->...", u, self.H, u) + u @ self.f + self.const


@dataclass
class QpResult:
    u: np.ndarray
    objective: float
    converged: bool
    iterations: int
    history: list[float] | None = None


def prediction_matrices(A, B, horizon: int):
    """Stacked ``c_2 .. c_T`` as ``Phi c_1 + G u`` for ``u = (u_1 .. u_{T-1})``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    m, p = B.shape
    n_u = horizon - 1
    Phi = np.zeros((n_u * m, m))
    G = np.zeros((n_u * m, n_u * p))
    powers = [np.eye(m)]
    for _ in range(n_u):
        powers.append(A @ powers[-1])
    for i in range(n_u):  # block row for c_{i+2}
        Phi[i * m:(i + 1) * m] = powers[i + 1]
        for k in range(i + 1):  # u_{k+1} reaches c_{i+2} through A^{i-k}
            G[i * m:(i + 1) * m, k * p:(k + 1) * p] = powers[i - k] @ B
    return Phi, G


def condense_qp(A, B, c1, c_goal, cfg: MpcConfig, R: float | None = None) -> QpProblem:
    """Eliminate the latent dynamics from the MPC cost.

    Returns ``H = G^T Q G + R I`` and ``f = 2 G^T Q (Phi c_1 - c_goal)`` so
    that ``J(u) = u^T H u + f^T u + const`` exactly (``const`` includes the
    fixed ``t = 1`` term).
    """
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    B = np.asarray(B, dtype=float)
    if A.shape != (m, m) or B.reshape(-1).size != m:
        raise ValueError(f"need A (m x m) and B (m x 1); got {A.shape} and {B.shape}")
    c1 = np.asarray(c1, dtype=float).reshape(m)
    c_goal = np.asarray(c_goal, dtype=float).reshape(m)
    R = cfg.R if R is None else R
    if R is None:
        raise ValueError("R must be given (config or argument)")
    Phi, G = prediction_matrices(A, B, cfg.horizon)
    goal = np.tile(c_goal, cfg.horizon - 1)
    free = Phi @ c1 - goal
    Q = cfg.Q
    H = Q * (G.T @ G) + R * np.eye(G.shape[1])
    H = 0.5 * (H + H.T)
    f = 2.0 * Q * (G.T @ free)
    d1 = c1 - c_goal
    const = Q * (free @ free + d1 @ d1)
    return QpProblem(H, f, float(cfg.u_max), float(const))


def _largest_eigenvalue(H: np.ndarray, iters: int = 500) -> float:
    v = np.ones(H.shape[0]) + np.linspace(0.0, 0.1, H.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = H @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new = v @ w / (v @ v)
        v = w / nw
        if abs(new - lam) <= 1e-12 * abs(new):
            lam = new
            break
        lam = new
    return float(lam)


def _polish(p: QpProblem, u, lo, hi):
    """Exact minimiser on the current free set, if it stays feasible and helps.

    Coordinates pinned at a bound are held fixed; the remaining ones solve
    ``H_FF u_F = -(f_F / 2 + H_FA u_A)``. Returns ``None`` when the candidate
    leaves the box or does not lower the objective, so accepting it keeps
    the iteration monotone.
    """
    free = (u > lo) & (u < hi)
    if not free.any():
        return None
    H_ff = p.H[np.ix_(free, free)]
    rhs = -(0.5 * p.f[free] + p.H[np.ix_(free, ~free)] @ u[~free])
    try:
        u_f = np.linalg.solve(H_ff, rhs)
    except np.linalg.LinAlgError:
        return None
    if np.any(u_f < lo) or np.any(u_f > hi):
        return None
    cand = u.copy()
    cand[free] = u_f
    if p.objective(cand) > p.objective(u):
        return None
    return cand


def solve_box_qp(p: QpProblem, max_iter: int = 10_000, tol: float = 1e-8,
                 u0=None, record: bool = False, polish_every: int = 25) -> QpResult:
    """Projected gradient descent with step ``1 / (2 lambda_max(H))``.

    Every ``polish_every`` iterations the free-set subproblem is solved
    exactly and accepted when it stays in the box without raising the
    objective. Stops when the projected-gradient norm drops below ``tol``;
    otherwise returns the last iterate with ``converged=False``. Every
    iterate lies in the box and the objective never increases.
    """
    n = p.f.size
    lo, hi = -p.bound, p.bound
    u = np.zeros(n) if u0 is None else np.clip(np.asarray(u0, dtype=float), lo, hi)
    lip = 2.0 * _largest_eigenvalue(p.H) * (1.0 + 1e-9)
    history = [float(p.objective(u))] if record else None
    if lip == 0.0:
        # H = 0: linear objective, minimised at a box corner
        u = np.where(p.f > 0, lo, np.where(p.f < 0, hi, 0.0))
        return QpResult(u, float(p.objective(u)), True, 0, history)
    step = 1.0 / lip
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = 2.0 * (p.H @ u) + p.f
        new = np.clip(u - step * grad, lo, hi)
        pg_norm = np.linalg.norm(new - u) / step
        u = new
        if record:
            history.append(float(p.objective(u)))
        if pg_norm < tol:
            converged = True
            break
        if it % polish_every == 0:
            cand = _polish(p, u, lo, hi)
            if cand is not None:
                u = cand
                if record:
                    history.append(float(p.objective(u)))
    if not converged:
        log.warning("box QP did not converge in %d iterations", max_iter)
    return QpResult(u, float(p.objective(u)), converged, it, history)


def auto_input_penalty(latents, c_goal, cfg: MpcConfig) -> float:
    """``R_scale * mean |c - c_goal|^2 / u_max^2``."""
    d = np.asarray(latents, dtype=float) - np.asarray(c_goal, dtype=float)
    typical = float(np.mean(np.sum(d * d, axis=-1)))
    return cfg.R_scale * typical / max(cfg.u_max, 1e-12) ** 2


@dataclass
class MpcStep:
    u: float
    u_seq: np.ndarray
    converged: bool
    A: np.ndarray
    latent_cost: float


def mpc_step(model: KoopmanModel, states, inputs, cfg: MpcConfig, R: float | None = None) -> MpcStep:
    """First optimal input given the last ``warmup + 1`` states and ``warmup`` inputs."""
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.n_input)
    if states.shape[0] != cfg.warmup + 1 or inputs.shape[0] != cfg.warmup:
        raise ValueError(f"history must hold {cfg.warmup + 1} states and {cfg.warmup} inputs")
    A = fit_latent_dynamics(model, states, inputs)
    Z = model.encode(states)
    c1 = Z[-1]
    c_goal = model.encode(np.asarray(cfg.goal_state, dtype=float))
    if R is None:
        R = cfg.R if cfg.R is not None else auto_input_penalty(Z, c_goal, cfg)
    latent_cost = float(np.linalg.norm(c1 - c_goal))
    if cfg.u_max == 0.0:
        n_u = cfg.horizon - 1
        return MpcStep(0.0, np.zeros(n_u), True, A, latent_cost)
    qp = condense_qp(A, model.B, c1, c_goal, cfg, R=R)
    res = solve_box_qp(qp, cfg.max_iter, cfg.tol)
    return MpcStep(float(res.u[0]), res.u, res.converged, A, latent_cost)


@dataclass
class ControlRun:
    """Closed-loop log; ``latent_cost`` is NaN for controllers without a model."""

    states: np.ndarray
    inputs: np.ndarray
    residuals: np.ndarray
    latent_cost: np.ndarray
    sensor: np.ndarray
    dt: float
    R: float | None = None
    unconverged_steps: int = 0

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]


def _residuals(env, states):
    return np.array([envs.residual(env, x) for x in states])


def run_mpc_loop(env, model: KoopmanModel, cfg: MpcConfig, steps: int, x0=None,
                 sensor: envs.Sensor | None = None) -> ControlRun:
    """Closed-loop MPC; the first ``cfg.warmup`` inputs are zero.

    ``x0`` defaults to the limit-cycle point ``(sqrt(sigma), 0)``. On a
    diverging plant the partial log is returned (and the error logged).
    """
    if steps <= cfg.warmup:
        raise ValueError("steps must exceed the warmup length")
    sensor = sensor or envs.Sensor(0.0)
    x = np.array([np.sqrt(env.sigma), 0.0] if x0 is None else x0, dtype=float)
    c_goal = model.encode(np.asarray(cfg.goal_state, dtype=float))
    states = [x]
    inputs: list[float] = []
    costs: list[float] = []
    R = cfg.R
    bad = 0
    for t in range(steps):
        c_t = model.encode(x)
        costs.append(float(np.linalg.norm(c_t - c_goal)))
        if t < cfg.warmup:
            u = 0.0
        else:
            hist_x = np.array(states[t - cfg.warmup:t + 1])
            hist_u = np.array(inputs[t - cfg.warmup:t])
            if R is None:
                R = auto_input_penalty(model.encode(hist_x), c_goal, cfg)
            res = mpc_step(model, hist_x, hist_u, cfg, R=R)
            bad += not res.converged
            u = res.u
        try:
            x = envs.step_rk4(env, x, u)
        except envs.DivergenceError:
            log.error("plant diverged at step %d", t)
            break
        inputs.append(u)
        states.append(x)
    states = np.array(states)
    costs.append(float(np.linalg.norm(model.encode(states[-1]) - c_goal)))
    return ControlRun(states, np.array(inputs), _residuals(env, states), np.array(costs[:len(states)]),
                      sensor(states), env.dt, R, bad)


def run_pcontrol_loop(env, pcfg: PControlConfig, steps: int, x0=None) -> ControlRun:
    """Proportional feedback ``u_t = -gain * sensor(x_t)``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array([np.sqrt(env.sigma), 0.0] if x0 is None else x0, dtype=float)
    states = [x]
    inputs = []
    for _ in range(steps):
        u = -pcfg.gain * float(pcfg.sensor(x))
        try:
            x = envs.step_rk4(env, x, u)
        except envs.DivergenceError:
            log.error("plant diverged under proportional control")
            break
        inputs.append(u)
        states.append(x)
    states = np.array(states)
    return ControlRun(states, np.array(inputs), _residuals(env, states),
                      np.full(len(states), np.nan), pcfg.sensor(states), env.dt)


def correlation(a, b) -> float:
    """Pearson correlation coefficient."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two series of equal length >= 2")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(da @ da), np.sqrt(db @ db)
    if sa == 0.0 or sb == 0.0:
        raise ValueError("zero-variance series")
    return float(np.clip(da @ db / (sa * sb), -1.0, 1.0))


def moving_average(x, window: int) -> np.ndarray:
    """Trailing-window mean (``valid`` part only)."""
    x = np.asarray(x, dtype=float)
    if window < 1 or window > x.size:
        raise ValueError("window must be in [1, len(x)]")
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window
