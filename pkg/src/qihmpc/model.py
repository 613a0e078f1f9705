"""Continuous-time nonlinear models in deviation coordinates.

Every model exposes a vector field ``f(x, u)`` around its operating point
``(X_s, U_s)``.  Fields accept either single vectors of shape ``(n,)`` or
column batches of shape ``(n, m)``; the batched form is what the region
sampler and the shooting solver use.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

__all__ = [
    "ModelError",
    "DivergenceError",
    "NonlinearModel",
    "LinearizedModel",
    "CstrParams",
    "make_cstr",
    "make_linear_test",
    "get_model",
    "linearize",
    "integrate",
    "rk4_rollout",
]


class ModelError(ValueError):
    """Invalid model construction or parameters."""


class DivergenceError(ArithmeticError):
    """Non-finite state encountered during integration."""

    def __init__(self, t, message=None):
        self.t = t
        super().__init__(message or f"integration diverged at t={t:.6g}")


@dataclass(frozen=True, eq=False)
class NonlinearModel:
    name: str
    n_x: int
    n_u: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    u_lower: np.ndarray
    u_upper: np.ndarray
    X_s: np.ndarray
    U_s: np.ndarray
    # absolute-coordinate field consistent with f, if the model has one
    f_abs: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    equilibrium_tol: float = 1e-12

    def __post_init__(self):
        for name in ("u_lower", "u_upper", "X_s", "U_s"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.u_lower.shape != (self.n_u,) or self.u_upper.shape != (self.n_u,):
            raise ModelError("input bounds must have length n_u")
        if not (np.all(self.u_lower < 0) and np.all(self.u_upper > 0)):
            raise ModelError("origin must lie strictly inside the input box")
        r = self.f(np.zeros(self.n_x), np.zeros(self.n_u))
        if np.asarray(r).shape != (self.n_x,):
            raise ModelError(f"f returned shape {np.shape(r)}, expected ({self.n_x},)")
        if not np.all(np.isfinite(r)) or np.max(np.abs(r)) > self.equilibrium_tol:
            raise ModelError(f"origin is not an equilibrium: |f(0,0)| = {np.max(np.abs(r)):.3e}")

    def __call__(self, x, u):
        return self.f(x, u)

    @property
    def input_box(self):
        return self.u_lower, self.u_upper

    def clip(self, u):
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            return np.clip(u, self.u_lower, self.u_upper)
        if u.ndim == 2 and u.shape[0] == self.n_u:
            return np.clip(u, self.u_lower[:, None], self.u_upper[:, None])
        return np.clip(u, self.u_lower, self.u_upper)


@dataclass(frozen=True, eq=False)
class LinearizedModel:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))
        object.__setattr__(self, "B", np.atleast_2d(np.asarray(self.B, dtype=float)))
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n:
            raise ModelError(f"incompatible shapes A{self.A.shape}, B{self.B.shape}")

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    def eigenvalues(self):
        return np.linalg.eigvals(self.A)


# ---------------------------------------------------------------------------
# CSTR benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CstrParams:
    """Two-state exothermic CSTR, dimensionless form.

    States are concentration ``z_c`` and temperature ``z_T``; inputs are the
    coolant flow ``m1`` and the inverse dilution rate ``m2``, scaled as
    ``u1 = m1/600`` and ``u2 = m2/40``.
    """

    z_T_cw: float = 0.38
    z_T_f: float = 0.395
    E_a: float = 5.0
    alpha_0: float = 1.95e-4
    k_0: float = 300.0
    m1_scale: float = 600.0
    m2_scale: float = 40.0
    X_s: tuple = (0.6416, 0.5387)
    U_s: tuple = (0.5833, 0.5000)
    u_lower: tuple = (-0.4167, -0.4750)
    u_upper: tuple = (0.4167, 0.5)

    def validate(self):
        for f_ in fields(self):
            v = np.asarray(getattr(self, f_.name), dtype=float)
            if not np.all(np.isfinite(v)):
                raise ModelError(f"CSTR parameter {f_.name} is not finite")
        if self.k_0 <= 0:
            raise ModelError(f"k_0 must be positive, got {self.k_0}")
        if self.E_a <= 0:
            raise ModelError(f"E_a must be positive, got {self.E_a}")
        if self.m1_scale <= 0 or self.m2_scale <= 0:
            raise ModelError("input scale factors must be positive")
        if self.m2_scale * self.U_s[1] == 0:
            raise ModelError("steady dilution denominator m2 is zero")
        if self.X_s[1] <= 0:
            raise ModelError("steady temperature must be positive")


@dataclass(frozen=True)
class _CstrField:
    # a class rather than a closure so models pickle into worker processes
    p: CstrParams
    offset: np.ndarray

    def raw(self, X, U):
        p = self.p
        zc, zT = X[0], X[1]
        m1 = p.m1_scale * U[0]
        m2 = p.m2_scale * U[1]
        rate = p.k_0 * zc * np.exp(-p.E_a / zT)
        return np.stack([
            (1.0 - zc) / m2 - rate,
            (p.z_T_f - zT) / m2 + rate - p.alpha_0 * m1 * (zT - p.z_T_cw),
        ])

    def absolute(self, X, U):
        X = np.asarray(X, dtype=float)
        out = self.raw(X, np.asarray(U, dtype=float))
        return out - (self.offset if out.ndim == 1 else self.offset[:, None])

    def __call__(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        Xs = np.asarray(self.p.X_s)
        Us = np.asarray(self.p.U_s)
        if x.ndim == 2 or u.ndim == 2:
            Xs, Us = Xs[:, None], Us[:, None]
        return self.absolute(x + Xs, u + Us)


def make_cstr(params: CstrParams | None = None) -> NonlinearModel:
    """Build the two-state CSTR around its published operating point.

    The published steady state is rounded to four digits, which leaves a
    residual ``f_c(X_s, U_s)`` of order 1e-4.  That constant is subtracted
    from the field so the origin is an exact equilibrium while the Jacobian
    at the operating point is unchanged.
    """
    p = params or CstrParams()
    p.validate()
    probe = _CstrField(p, np.zeros(2))
    offset = probe.raw(np.asarray(p.X_s, float), np.asarray(p.U_s, float))
    fld = _CstrField(p, offset)
    return NonlinearModel(
        name="cstr2",
        n_x=2,
        n_u=2,
        f=fld,
        u_lower=np.asarray(p.u_lower),
        u_upper=np.asarray(p.u_upper),
        X_s=np.asarray(p.X_s),
        U_s=np.asarray(p.U_s),
        f_abs=fld.absolute,
    )


@dataclass(frozen=True, eq=False)
class _LinearField:
    A: np.ndarray
    B: np.ndarray

    def __call__(self, x, u):
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.asarray(u, dtype=float)


def make_linear_test(A0=None, B0=None, u_lower=None, u_upper=None) -> NonlinearModel:
    """Exactly linear model ``dx/dt = A0 x + B0 u``, used as a sanity case."""
    A0 = np.array([[0.1, 1.0], [0.0, -0.5]]) if A0 is None else np.atleast_2d(np.asarray(A0, float))
    B0 = np.eye(A0.shape[0]) if B0 is None else np.atleast_2d(np.asarray(B0, float))
    n_u = B0.shape[1]
    lo = -np.ones(n_u) if u_lower is None else np.asarray(u_lower, float)
    hi = np.ones(n_u) if u_upper is None else np.asarray(u_upper, float)
    fld = _LinearField(A0, B0)
    return NonlinearModel(
        name="linear-test",
        n_x=A0.shape[0],
        n_u=n_u,
        f=fld,
        u_lower=lo,
        u_upper=hi,
        X_s=np.zeros(A0.shape[0]),
        U_s=np.zeros(n_u),
        f_abs=fld,
    )


def get_model(name: str, overrides: dict | None = None) -> NonlinearModel:
    """Look up a built-in model by name, applying parameter overrides."""
    overrides = dict(overrides or {})
    if name == "cstr2":
        known = {f_.name for f_ in fields(CstrParams)}
        unknown = set(overrides) - known
        if unknown:
            raise ModelError(f"unknown CSTR parameter(s): {', '.join(sorted(unknown))}")
        conv = {}
        for k, v in overrides.items():
            conv[k] = tuple(float(a) for a in v) if isinstance(v, (list, tuple)) else float(v)
        return make_cstr(replace(CstrParams(), **conv))
    if name == "linear-test":
        allowed = {"A0", "B0", "u_lower", "u_upper"}
        unknown = set(overrides) - allowed
        if unknown:
            raise ModelError(f"unknown linear-test parameter(s): {', '.join(sorted(unknown))}")
        return make_linear_test(**overrides)
    raise ModelError(f"unknown model {name!r} (choose 'cstr2' or 'linear-test')")


def linearize(model: NonlinearModel, h: float = 1e-6) -> LinearizedModel:
    """Central-difference Jacobians of ``f`` at the origin."""
    if not h > 0:
        raise ValueError("step h must be positive")
    n_x, n_u = model.n_x, model.n_u
    x0, u0 = np.zeros(n_x), np.zeros(n_u)
    A = np.empty((n_x, n_x))
    B = np.empty((n_x, n_u))
    for j in range(n_x):
        e = np.zeros(n_x)
        e[j] = h
        fp, fm = model.f(x0 + e, u0), model.f(x0 - e, u0)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ModelError(f"non-finite f when perturbing state x{j + 1}")
        A[:, j] = (fp - fm) / (2 * h)
    for j in range(n_u):
        e = np.zeros(n_u)
        e[j] = h
        fp, fm = model.f(x0, u0 + e), model.f(x0, u0 - e)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ModelError(f"non-finite f when perturbing input u{j + 1}")
        B[:, j] = (fp - fm) / (2 * h)
    return LinearizedModel(A, B)


def _rk4_step(f, x, u, h):
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(model, x0, u_seq, t_span, substeps: int = 10):
    """Fixed-step RK4 under a piecewise-constant input.

    ``u_seq`` has one row per equal-length segment of ``t_span``; each
    segment is split into ``substeps`` RK4 steps.  ``model`` may also be a
    bare callable ``f(x, u)``.  Returns ``(t, X)`` with ``X[k]`` the state at
    ``t[k]``, endpoints included.
    """
    f = model.f if isinstance(model, NonlinearModel) else model
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.ndim == 1:
        u_seq = u_seq[None, :]
    n_seg = u_seq.shape[0]
    dt = (t1 - t0) / n_seg
    h = dt / substeps
    x = np.array(x0, dtype=float)
    X = np.empty((n_seg * substeps + 1, x.size))
    t = t0 + h * np.arange(n_seg * substeps + 1)
    t[-1] = t1
    X[0] = x
    i = 0
    for k in range(n_seg):
        for _ in range(substeps):
            x = _rk4_step(f, x, u_seq[k], h)
            i += 1
            if not np.all(np.isfinite(x)):
                raise DivergenceError(t[i])
            X[i] = x
    return t, X


def rk4_rollout(f, x0, U, dt, substeps=10, W_x=None, W_u=None):
    """Batched shooting rollout.

    ``U`` has shape ``(N, n_u, m)``: ``m`` candidate input sequences of ``N``
    moves each.  Returns the terminal states ``(n_x, m)`` and, if weights are
    given, the trapezoidal running cost of ``z'W_x z + u'W_u u`` on the RK4
    grid, shape ``(m,)``.  Non-finite entries are left for the caller.
    """
    N, _, m = U.shape
    x = np.repeat(np.asarray(x0, dtype=float)[:, None], m, axis=1)
    h = dt / substeps
    with_cost = W_x is not None
    J = np.zeros(m)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            u = U[k]
            if with_cost:
                uc = np.einsum("im,ij,jm->m", u, W_u, u)
                l0 = np.einsum("im,ij,jm->m", x, W_x, x) + uc
            for _ in range(substeps):
                x = _rk4_step(f, x, u, h)
                if with_cost:
                    l1 = np.einsum("im,ij,jm->m", x, W_x, x) + uc
                    J += 0.5 * h * (l0 + l1)
                    l0 = l1
    return (x, J) if with_cost else x
