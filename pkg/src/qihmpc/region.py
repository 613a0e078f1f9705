"""Ellipsoidal terminal regions ``{x : x'Px <= alpha}``.

The pipeline is: ``compute_gamma`` finds the largest level set on which the
linear law ``u = -Kx`` respects the input box, then either
``alpha_norm_based`` or ``alpha_inequality_based`` shrinks that level by a
factor ``beta`` until the nonlinearity can no longer spoil the Lyapunov
decrease.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import norm, qmc

from .model import NonlinearModel
from .synthesis import SynthesisError, SynthesisResult, Tuning, Weights, synthesize

log = logging.getLogger(__name__)

__all__ = [
    "RegionError",
    "TerminalRegion",
    "NonlinearityGap",
    "SearchSettings",
    "compute_gamma",
    "lipschitz_ratio",
    "alpha_norm_based",
    "alpha_inequality_based",
    "region_area",
    "characterize",
    "ellipse_points",
    "shell_points",
    "SweepRow",
    "SweepResult",
    "SCHEDULES",
    "sweep",
]


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class SearchSettings:
    beta: float = 0.98
    n_angles: int = 3600      # per shell, 2-state models
    n_shells: int = 8
    n_lipschitz: int = 3600   # boundary samples for the norm method
    n_samples: int = 10_000   # per shell, models with more than 2 states
    seed: int = 0
    floor: float = 1e-12      # relative to gamma

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise RegionError(f"beta must lie in (0, 1), got {self.beta}")


@dataclass(frozen=True, eq=False)
class TerminalRegion:
    P: np.ndarray
    alpha: float
    gamma: float
    K: np.ndarray
    method: str = "ineq"
    label: str = ""

    def __post_init__(self):
        if not 0 < self.alpha <= self.gamma * (1 + 1e-12):
            raise RegionError(f"need 0 < alpha <= gamma, got alpha={self.alpha}, gamma={self.gamma}")

    @property
    def area(self):
        return region_area(self.P, self.alpha) if self.P.shape[0] == 2 else None

    def value(self, x):
        x = np.asarray(x, float)
        if x.ndim == 1:
            return float(x @ self.P @ x)
        return np.einsum("im,ij,jm->m", x, self.P, x)

    def contains(self, x, rtol=0.0):
        return self.value(x) <= self.alpha * (1 + rtol)


class NonlinearityGap:
    """``phi(x) = f(x, -Kx) - A_K x`` and ``psi(x) = x'dQx - 2x'P phi(x)``.

    Both accept a single point ``(n,)`` or a column batch ``(n, m)``.
    """

    def __init__(self, model: NonlinearModel, synth: SynthesisResult):
        self.model = model
        self.K = synth.K
        self.A_K = synth.A_K
        self.P = synth.P
        self.dQ = synth.Delta_Q
        self.Q_star = synth.Q_star

    def phi(self, x):
        x = np.asarray(x, float)
        return self.model.f(x, -self.K @ x) - self.A_K @ x

    def psi(self, x):
        x = np.asarray(x, float)
        ph = self.phi(x)
        if x.ndim == 1:
            return float(x @ self.dQ @ x - 2.0 * x @ self.P @ ph)
        return np.einsum("im,ij,jm->m", x, self.dQ, x) - 2.0 * np.einsum("im,ij,jm->m", x, self.P, ph)

    def vdot(self, x):
        """Exact ``dV/dt = 2 x'P f(x, -Kx)`` under the linear law."""
        x = np.asarray(x, float)
        fx = self.model.f(x, -self.K @ x)
        if x.ndim == 1:
            return float(2.0 * x @ self.P @ fx)
        return 2.0 * np.einsum("im,ij,jm->m", x, self.P, fx)


def _check_spd(P):
    P = np.asarray(P, float)
    if np.abs(P - P.T).max() > 1e-9 * max(1.0, np.abs(P).max()):
        raise RegionError("P is not symmetric")
    try:
        return np.linalg.cholesky(0.5 * (P + P.T))
    except np.linalg.LinAlgError as exc:
        raise RegionError("P is not positive definite") from exc


def compute_gamma(P, K, input_box):
    """Largest ``gamma`` with ``-Kx`` inside the box on ``x'Px <= gamma``.

    Row ``k_i`` reaches ``sqrt(gamma k_i P^-1 k_i')`` on the ellipsoid, in
    both signs, so the tighter side of each bound decides.
    """
    L = _check_spd(P)
    lo, hi = (np.asarray(b, float) for b in input_box)
    K = np.atleast_2d(np.asarray(K, float))
    Y = np.linalg.solve(L, K.T)  # columns: L^-1 k_i'
    spread = np.sum(Y * Y, axis=0)
    gamma = np.inf
    for i, s in enumerate(spread):
        if s <= 1e-15:
            continue
        gamma = min(gamma, min(-lo[i], hi[i]) ** 2 / s)
    return float(gamma)


def region_area(P, alpha):
    P = np.asarray(P, float)
    if P.shape != (2, 2):
        raise RegionError("area is only defined for two-state regions")
    _check_spd(P)
    if not alpha > 0:
        raise RegionError("alpha must be positive")
    return float(np.pi * alpha / np.sqrt(np.linalg.det(P)))


def ellipse_points(P, level, directions):
    """Map unit vectors (columns) onto the level set ``x'Px = level``."""
    L = _check_spd(P)
    return np.sqrt(level) * np.linalg.solve(L.T, directions)


def _unit_circle(n):
    th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return th, np.vstack([np.cos(th), np.sin(th)])


def _sphere_directions(n_x, n, seed):
    with warnings.catch_warnings():
        # balance for non powers of two does not matter for a covering sample
        warnings.simplefilter("ignore", UserWarning)
        u = qmc.Sobol(d=n_x, scramble=True, seed=seed).random(n)
    v = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12)).T
    return v / np.linalg.norm(v, axis=0)


def shell_points(P, alpha, n_shells, n_per_shell, seed=0):
    """Sample points on ``n_shells`` level sets ``x'Px = alpha*s``, ``s`` in (0, 1]."""
    n_x = P.shape[0]
    if n_x == 2:
        _, V = _unit_circle(n_per_shell)
    else:
        V = _sphere_directions(n_x, n_per_shell, seed)
    levels = alpha * np.arange(1, n_shells + 1) / n_shells
    return np.hstack([ellipse_points(P, lv, V) for lv in levels])


def _refine_extreme(fun, P, level, theta0, width, maximize):
    """Bounded scalar search over the ellipse angle near ``theta0``."""
    L = _check_spd(P)
    scale = np.sqrt(level)

    def point(th):
        return scale * np.linalg.solve(L.T, np.array([np.cos(th), np.sin(th)]))

    sign = -1.0 if maximize else 1.0
    res = minimize_scalar(lambda th: sign * fun(point(th)), bounds=(theta0 - width, theta0 + width),
                          method="bounded", options={"xatol": 1e-10})
    return sign * res.fun


def _local_descent(fun, P, level, x0, maximize, iters=60):
    # pattern search on the level set for n_x > 2
    L = _check_spd(P)
    sign = -1.0 if maximize else 1.0
    v = L.T @ x0 / np.sqrt(level)
    best = sign * fun(x0)
    step = 0.1
    n = v.size
    for _ in range(iters):
        improved = False
        for j in range(n):
            for s in (step, -step):
                w = v.copy()
                w[j] += s
                w /= np.linalg.norm(w)
                val = sign * fun(np.sqrt(level) * np.linalg.solve(L.T, w))
                if val < best:
                    best, v, improved = val, w, True
        if not improved:
            step *= 0.5
            if step < 1e-8:
                break
    return sign * best


def _psi_min(gap, P, alpha, settings):
    """Smallest Psi over the multi-shell sample of the region, refined."""
    n_x = P.shape[0]
    n_per = settings.n_angles if n_x == 2 else settings.n_samples
    X = shell_points(P, alpha, settings.n_shells, n_per, settings.seed)
    vals = gap.psi(X)
    i = int(np.argmin(vals))  # first index on ties keeps the result reproducible
    best = float(vals[i])
    shell = i // n_per
    level = alpha * (shell + 1) / settings.n_shells
    if n_x == 2:
        theta0 = 2 * np.pi * (i % n_per) / n_per
        refined = _refine_extreme(gap.psi, P, level, theta0, 2 * np.pi / n_per, maximize=False)
    else:
        refined = _local_descent(gap.psi, P, level, X[:, i], maximize=False)
    return min(best, refined)


def lipschitz_ratio(model, synth, alpha, n_grid=3600, n_interior=5, seed=0):
    """Estimate ``max |phi(x)| / |x|`` over the region ``x'Px <= alpha``.

    Boundary samples plus ``n_interior`` inner shells, then a local
    refinement around the best sample.
    """
    if not alpha > 0:
        raise RegionError("alpha must be positive")
    gap = NonlinearityGap(model, synth)
    P = synth.P
    n_x = P.shape[0]

    def ratio(x):
        x = np.asarray(x, float)
        if x.ndim == 1:
            return float(np.linalg.norm(gap.phi(x)) / np.linalg.norm(x))
        return np.linalg.norm(gap.phi(x), axis=0) / np.linalg.norm(x, axis=0)

    n_levels = n_interior + 1
    X = shell_points(P, alpha, n_levels, n_grid, seed)
    vals = ratio(X)
    i = int(np.argmax(vals))
    best = float(vals[i])
    level = alpha * (i // n_grid + 1) / n_levels
    if n_x == 2:
        theta0 = 2 * np.pi * (i % n_grid) / n_grid
        refined = _refine_extreme(ratio, P, level, theta0, 2 * np.pi / n_grid, maximize=True)
    else:
        refined = _local_descent(ratio, P, level, X[:, i], maximize=True)
    return max(best, refined)


def _shrink(gamma, accept, settings, what):
    alpha = gamma
    floor = settings.floor * gamma
    steps = 0
    while not accept(alpha):
        alpha *= settings.beta
        steps += 1
        if alpha < floor:
            raise RegionError(f"{what} condition unsatisfiable at floor (alpha < {floor:.3e})")
    log.debug("%s: alpha=%.6g after %d shrink steps", what, alpha, steps)
    return alpha


def _check_dq(synth):
    if np.linalg.eigvalsh(synth.Delta_Q).min() <= 1e-14:
        raise RegionError("Delta_Q is not positive definite")


def lipschitz_bound(synth):
    """Admissible ``L_phi*``: ``lambda_min(dQ) / (2 ||P||_2)``."""
    return float(np.linalg.eigvalsh(synth.Delta_Q).min() / (2.0 * np.linalg.norm(synth.P, 2)))


def alpha_norm_based(model, synth, gamma, settings: SearchSettings | None = None):
    settings = settings or SearchSettings()
    _check_dq(synth)
    bound = lipschitz_bound(synth)
    n_grid = settings.n_lipschitz if synth.P.shape[0] == 2 else settings.n_samples

    def accept(alpha):
        return lipschitz_ratio(model, synth, alpha, n_grid=n_grid, seed=settings.seed) <= bound

    return _shrink(gamma, accept, settings, "norm")


def alpha_inequality_based(model, synth, gamma, settings: SearchSettings | None = None):
    settings = settings or SearchSettings()
    _check_dq(synth)
    gap = NonlinearityGap(model, synth)

    def accept(alpha):
        return _psi_min(gap, synth.P, alpha, settings) >= -1e-12

    return _shrink(gamma, accept, settings, "inequality")


def characterize(model, synth, method="ineq", settings: SearchSettings | None = None):
    """gamma, then alpha by the chosen method; returns a ``TerminalRegion``."""
    gamma = compute_gamma(synth.P, synth.K, model.input_box)
    if not np.isfinite(gamma):
        raise RegionError("input box imposes no bound on the region (K is zero)")
    if method == "ineq":
        alpha = alpha_inequality_based(model, synth, gamma, settings)
    elif method == "norm":
        alpha = alpha_norm_based(model, synth, gamma, settings)
    else:
        raise RegionError(f"unknown method {method!r} (choose 'norm' or 'ineq')")
    return TerminalRegion(synth.P, alpha, gamma, synth.K, method, synth.label())


# ---------------------------------------------------------------------------
# parameter sweeps
# ---------------------------------------------------------------------------

# name -> (approach, varied parameter, start value, fixed parameters)
SCHEDULES = {
    "ca": ("ca", None, None, {}),
    "ac1": ("ac", "rho_x", 0.1, {"rho_u": 0.0}),
    "ac2": ("ac", "rho_u", 0.1, {"rho_x": None}),
    "lqr1": ("lqr", "rho_x", 1.1, {"rho_u": 1.0}),
    "lqr2": ("lqr", "rho_u", 1.1, {"rho_x": None}),
}


@dataclass
class SweepRow:
    approach: str
    rho_x: float | None
    rho_u: float | None
    kappa: float | None
    gamma: float = float("nan")
    alpha: float = float("nan")
    area: float = float("nan")
    feasible: bool = True
    error: str = ""


@dataclass
class SweepResult:
    schedule: str
    rows: list = field(default_factory=list)
    best_index: int | None = None

    @property
    def best(self):
        return None if self.best_index is None else self.rows[self.best_index]


def geometric_grid(start, factor, cap):
    if not factor > 1:
        raise RegionError("sweep factor must exceed 1")
    grid = []
    v = start
    while v <= cap * (1 + 1e-12):
        grid.append(v)
        v *= factor
    return grid


def sweep(model, lin, weights: Weights, schedule, grid=None, factor=1.5, cap=1e4,
          rho_x_star=50.0, kappa=None, method="ineq", settings=None, lyapunov_form="standard"):
    """Run one row of the tuning schedule and flag the largest-area region.

    ``grid`` overrides the geometric ``start * factor**k`` sequence.  Rows
    whose synthesis or region search fails are kept and marked infeasible.
    """
    if schedule not in SCHEDULES:
        raise RegionError(f"unknown schedule {schedule!r}; choose from {', '.join(SCHEDULES)}")
    approach, varied, start, fixed = SCHEDULES[schedule]
    if approach == "ca":
        values = [kappa]
    else:
        values = list(grid) if grid is not None else geometric_grid(start, factor, cap)
        if not values:
            raise RegionError("empty sweep grid")

    result = SweepResult(schedule)
    for v in values:
        params = {"kappa": None, "rho_x": None, "rho_u": None}
        if approach == "ca":
            params["kappa"] = v
        else:
            params.update({k: (rho_x_star if val is None else val) for k, val in fixed.items()})
            params[varied] = float(v)
        row = SweepRow(approach, params["rho_x"], params["rho_u"], params["kappa"])
        try:
            synth = synthesize(lin, weights, Tuning(approach, **params), lyapunov_form=lyapunov_form)
            if approach == "ca":
                row.kappa = synth.params["kappa"]
            reg = characterize(model, synth, method, settings)
            row.gamma, row.alpha = reg.gamma, reg.alpha
            row.area = reg.area if reg.area is not None else float("nan")
        except (SynthesisError, RegionError) as exc:
            row.feasible = False
            row.error = str(exc)
        result.rows.append(row)

    areas = [r.area if r.feasible else -np.inf for r in result.rows]
    if np.isfinite(max(areas)):
        result.best_index = int(np.argmax(areas))
    return result
