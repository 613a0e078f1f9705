"""Finite-horizon NMPC with a terminal ellipsoid, and its receding-horizon loop.

The prediction horizon ``T_p`` is split into ``N`` piecewise-constant moves of
length ``dt``.  Each problem is solved by single shooting: states come from a
fixed-step RK4 rollout, the input box is enforced as simple bounds, and the
terminal constraint ``z(T_p)'P z(T_p) <= alpha`` enters as an exterior
quadratic penalty whose weight grows between rounds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .model import DivergenceError, NonlinearModel, rk4_rollout
from .region import TerminalRegion
from .synthesis import Weights

log = logging.getLogger(__name__)

__all__ = [
    "OCPProblem",
    "OCPSolution",
    "SolverSettings",
    "ClosedLoopTrace",
    "HorizonScan",
    "solve_ocp",
    "linear_rollout_guess",
    "receding_horizon",
    "min_horizon",
]


@dataclass(frozen=True)
class SolverSettings:
    substeps: int = 10
    fd_step: float = 1e-6
    mu0: float = 1e3
    mu_factor: float = 10.0
    rounds: int = 8
    max_inner: int = 500
    ftol: float = 1e-10
    terminal_rtol: float = 1e-6
    box_tol: float = 1e-9


@dataclass(frozen=True, eq=False)
class OCPProblem:
    model: NonlinearModel
    weights: Weights
    region: TerminalRegion
    T_p: float
    x_t: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "x_t", np.asarray(self.x_t, dtype=float))
        if self.x_t.shape != (self.model.n_x,):
            raise ValueError(f"x_t must have shape ({self.model.n_x},)")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        N = self.T_p / self.dt
        if N < 1 - 1e-9 or abs(N - round(N)) > 1e-9:
            raise ValueError(f"T_p={self.T_p} is not a positive integer multiple of dt={self.dt}")

    @property
    def N(self):
        return int(round(self.T_p / self.dt))


@dataclass(eq=False)
class OCPSolution:
    u_seq: np.ndarray
    cost: float
    terminal_value: float
    feasible: bool
    iterations: int
    constraint_violation: float
    penalty_rounds: int = 0
    message: str = ""


def _penalized(problem, settings, mu):
    model, w, reg = problem.model, problem.weights, problem.region
    N, n_u = problem.N, model.n_u
    n = N * n_u
    h = settings.fd_step
    E = np.hstack([np.zeros((n, 1)), h * np.eye(n), -h * np.eye(n)])

    def fun(v):
        V = v[:, None] + E
        U = V.reshape(N, n_u, -1)
        xT, J = rk4_rollout(model.f, problem.x_t, U, problem.dt, settings.substeps, w.W_x, w.W_u)
        VT = np.einsum("im,ij,jm->m", xT, reg.P, xT)
        val = J + VT + mu * np.maximum(0.0, VT - reg.alpha) ** 2
        if not np.isfinite(val[0]):
            raise DivergenceError(float("nan"), "prediction diverged")
        grad = (val[1:n + 1] - val[n + 1:]) / (2 * h)
        # inputs at a bound can only be perturbed one-sidedly by the solver; a
        # non-finite difference there is treated as a flat direction
        grad[~np.isfinite(grad)] = 0.0
        return float(val[0]), grad

    return fun


def evaluate(problem, u_seq, substeps=10):
    """Running cost, terminal value and terminal state for one input sequence."""
    model, w, reg = problem.model, problem.weights, problem.region
    U = np.asarray(u_seq, float).reshape(problem.N, model.n_u, 1)
    xT, J = rk4_rollout(model.f, problem.x_t, U, problem.dt, substeps, w.W_x, w.W_u)
    xT = xT[:, 0]
    return float(J[0]), float(xT @ reg.P @ xT), xT


def linear_rollout_guess(problem, substeps=10):
    """Input sequence from the terminal controller ``u = -Kz``, sampled and clipped."""
    model, reg = problem.model, problem.region
    x = problem.x_t.copy()
    U = np.empty((problem.N, model.n_u))
    for k in range(problem.N):
        U[k] = model.clip(-reg.K @ x)
        x = rk4_rollout(model.f, x, U[k].reshape(1, -1, 1), problem.dt, substeps)[:, 0]
        if not np.all(np.isfinite(x)):
            U[k:] = 0.0
            break
    return U


def solve_ocp(problem: OCPProblem, warm_start=None, settings: SolverSettings | None = None) -> OCPSolution:
    """Solve one finite-horizon problem from ``problem.x_t``.

    Bounds are handled by L-BFGS-B (projected quasi-Newton); the terminal
    constraint by ``mu * max(0, V_T - alpha)**2`` with ``mu`` raised by
    ``mu_factor`` for up to ``rounds`` rounds.
    """
    settings = settings or SolverSettings()
    model, reg = problem.model, problem.region
    N, n_u = problem.N, model.n_u
    lo = np.tile(model.u_lower, N)
    hi = np.tile(model.u_upper, N)
    if warm_start is None:
        v = np.zeros(N * n_u)
    else:
        v = np.asarray(warm_start, float).reshape(-1)
        if v.size != N * n_u:
            raise ValueError(f"warm start has {v.size} entries, expected {N * n_u}")
        v = np.clip(v, lo, hi)

    bounds = list(zip(lo, hi))
    mu = settings.mu0
    iters = 0
    tol = settings.terminal_rtol * reg.alpha
    J, VT = math.inf, math.inf
    rounds_used = 0
    message = ""
    for rnd in range(settings.rounds):
        rounds_used = rnd + 1
        try:
            res = minimize(_penalized(problem, settings, mu), v, jac=True, method="L-BFGS-B",
                           bounds=bounds,
                           options={"maxiter": settings.max_inner, "ftol": settings.ftol, "gtol": 1e-10})
        except DivergenceError:
            message = "prediction diverged during optimization"
            break
        v = np.clip(res.x, lo, hi)
        iters += int(res.nit)
        J, VT, _ = evaluate(problem, v, settings.substeps)
        message = str(res.message)
        if VT - reg.alpha <= tol:
            break
        mu *= settings.mu_factor

    violation = max(0.0, VT - reg.alpha) if np.isfinite(VT) else math.inf
    box_ok = np.all(v >= lo - settings.box_tol) and np.all(v <= hi + settings.box_tol)
    feasible = bool(np.isfinite(VT) and violation <= tol and box_ok)
    return OCPSolution(
        u_seq=v.reshape(N, n_u),
        cost=J + VT if np.isfinite(VT) else math.inf,
        terminal_value=VT,
        feasible=feasible,
        iterations=iters,
        constraint_violation=violation,
        penalty_rounds=rounds_used,
        message=message,
    )


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ClosedLoopTrace:
    times: np.ndarray
    states: np.ndarray          # deviation, one row per controller instant
    inputs: np.ndarray          # move applied on [t_k, t_k + dt)
    X_s: np.ndarray
    U_s: np.ndarray
    V: np.ndarray               # x'Px
    terminal_value: np.ndarray  # z(t_k + T_p)'P z(t_k + T_p) of each solve
    feasible: np.ndarray
    cost: np.ndarray
    iterations: np.ndarray
    warm_start_terminal: np.ndarray  # terminal value of the shifted guess, NaN at k=0
    alpha: float
    T_p: float
    status: str = "ok"

    @property
    def abs_states(self):
        return self.states + self.X_s

    @property
    def abs_inputs(self):
        return self.inputs + self.U_s

    @property
    def xx(self):
        return np.sum(self.states ** 2, axis=1)

    def __len__(self):
        return len(self.times)


def _log10(v):
    with np.errstate(divide="ignore"):
        return np.log10(v)


def _solve_with_fallback(prob, warm, settings):
    sol = solve_ocp(prob, warm, settings)
    if sol.feasible:
        return sol
    if warm is not None:
        sol = solve_ocp(prob, None, settings)
        if sol.feasible:
            return sol
    guess = linear_rollout_guess(prob, settings.substeps)
    retry = solve_ocp(prob, guess, settings)
    return retry if retry.feasible else sol


def receding_horizon(model, weights, region, x0, T_p, t_end=60.0, dt=1.0,
                     settings: SolverSettings | None = None) -> ClosedLoopTrace:
    """Apply the first optimal move, integrate the plant over ``dt``, repeat.

    The next warm start drops the applied move and appends ``-K z(T_p)``
    (clipped).  If a solve from the warm start is infeasible it is retried
    from zero and from the ``-Kz`` rollout; only when all of these fail does
    the trace end early.
    """
    settings = settings or SolverSettings()
    x = np.asarray(x0, float).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    n_steps = int(round(t_end / dt))
    rows = {k: [] for k in ("t", "x", "u", "V", "tv", "feas", "J", "it", "ws")}
    warm = None
    ws_value = math.nan
    status = "ok"
    for k in range(n_steps + 1):
        prob = OCPProblem(model, weights, region, T_p, x, dt)
        sol = _solve_with_fallback(prob, warm, settings)
        rows["t"].append(k * dt)
        rows["x"].append(x.copy())
        rows["u"].append(sol.u_seq[0].copy())
        rows["V"].append(float(x @ region.P @ x))
        rows["tv"].append(sol.terminal_value)
        rows["feas"].append(sol.feasible)
        rows["J"].append(sol.cost)
        rows["it"].append(sol.iterations)
        rows["ws"].append(ws_value)
        if not sol.feasible:
            status = f"infeasible at t={k * dt:g}: {sol.message}"
            break
        if k == n_steps:
            break
        U = sol.u_seq
        x = rk4_rollout(model.f, x, U[:1].reshape(1, -1, 1), dt, settings.substeps)[:, 0]
        if not np.all(np.isfinite(x)):
            raise DivergenceError((k + 1) * dt)
        nxt = OCPProblem(model, weights, region, T_p, x, dt)
        if prob.N > 1:
            zT = rk4_rollout(model.f, x, U[1:].reshape(prob.N - 1, -1, 1), dt, settings.substeps)[:, 0]
        else:
            zT = x
        warm = np.vstack([U[1:], model.clip(-region.K @ zT)])
        ws_value = evaluate(nxt, warm, settings.substeps)[1]

    as_arr = {k: np.asarray(v) for k, v in rows.items()}
    return ClosedLoopTrace(
        times=as_arr["t"].astype(float),
        states=as_arr["x"].reshape(len(rows["t"]), -1),
        inputs=as_arr["u"].reshape(len(rows["t"]), -1),
        X_s=model.X_s,
        U_s=model.U_s,
        V=as_arr["V"].astype(float),
        terminal_value=as_arr["tv"].astype(float),
        feasible=as_arr["feas"].astype(bool),
        cost=as_arr["J"].astype(float),
        iterations=as_arr["it"].astype(int),
        warm_start_terminal=as_arr["ws"].astype(float),
        alpha=float(region.alpha),
        T_p=float(T_p),
        status=status,
    )


@dataclass
class HorizonScan:
    T_p_min: float | None
    T_max: float
    feasible: dict = field(default_factory=dict)  # T_p -> bool

    @property
    def found(self):
        return self.T_p_min is not None


def min_horizon(model, weights, region, x0, dt=1.0, T_max=40.0, stop_at_first=True,
                settings: SolverSettings | None = None) -> HorizonScan:
    """Smallest multiple of ``dt`` up to ``T_max`` with a feasible solve.

    Each horizon is tried from a zero input first and, failing that, from
    the clipped ``-Kz`` rollout.
    """
    if T_max < dt:
        raise ValueError("T_max must be at least dt")
    settings = settings or SolverSettings()
    scan = HorizonScan(None, float(T_max))
    n_max = int(math.floor(T_max / dt + 1e-9))
    for N in range(1, n_max + 1):
        T_p = N * dt
        prob = OCPProblem(model, weights, region, T_p, x0, dt)
        ok = _solve_with_fallback(prob, None, settings).feasible
        scan.feasible[T_p] = ok
        log.debug("min_horizon x0=%s T_p=%g feasible=%s", x0, T_p, ok)
        if ok and scan.T_p_min is None:
            scan.T_p_min = T_p
            if stop_at_first:
                break
    return scan
