"""Lyapunov/Riccati solvers and terminal-penalty synthesis.

Three ways to obtain a linear gain ``K`` and a terminal penalty ``P``:

* ``chen_allgower``: CARE gain, then a Lyapunov equation for the
  kappa-shifted closed loop.
* ``arbitrary``: any stabilizing gain (CARE gain by default) with an additive
  ``dQ = rho_x W_x + rho_u K' W_u K`` on the Lyapunov right-hand side.
* ``lqr``: CARE with inflated weights ``rho_x W_x`` and ``rho_u W_u``.

All three put the pair in the common form
``A_K' P + P A_K = -(Q* + dQ)`` with ``Q* = W_x + K' W_u K``, which is what
the terminal-region machinery consumes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import LinearizedModel

__all__ = [
    "SynthesisError",
    "Weights",
    "Tuning",
    "SynthesisResult",
    "solve_lyapunov",
    "solve_care",
    "stabilizing_gain",
    "synthesize_chen_allgower",
    "synthesize_arbitrary",
    "synthesize_lqr",
    "synthesize",
    "default_kappa",
    "CSTR_WEIGHTS",
]

LYAPUNOV_FORMS = ("standard", "transposed")


class SynthesisError(ValueError):
    pass


def _is_spd(M, tol=0.0):
    return np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())) and (
        np.linalg.eigvalsh(0.5 * (M + M.T)).min() > tol
    )


@dataclass(frozen=True, eq=False)
class Weights:
    W_x: np.ndarray
    W_u: np.ndarray

    def __post_init__(self):
        Wx = np.atleast_2d(np.asarray(self.W_x, dtype=float))
        Wu = np.atleast_2d(np.asarray(self.W_u, dtype=float))
        for name, W in (("W_x", Wx), ("W_u", Wu)):
            if W.shape[0] != W.shape[1]:
                raise SynthesisError(f"{name} must be square, got {W.shape}")
            if np.abs(W - W.T).max() > 1e-12:
                raise SynthesisError(f"{name} is not symmetric")
            if np.linalg.eigvalsh(W).min() <= 0:
                raise SynthesisError(f"{name} is not positive definite")
        object.__setattr__(self, "W_x", Wx)
        object.__setattr__(self, "W_u", Wu)


CSTR_WEIGHTS = Weights(np.diag([10.0, 2.0]), np.diag([1.0, 0.5]))


@dataclass(frozen=True)
class Tuning:
    """Approach selector plus its scalar tuning knobs."""

    approach: str  # "ca" | "ac" | "lqr"
    kappa: float | None = None
    rho_x: float | None = None
    rho_u: float | None = None

    def __post_init__(self):
        if self.approach not in ("ca", "ac", "lqr"):
            raise SynthesisError(f"unknown approach {self.approach!r}")


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    approach: str
    K: np.ndarray
    P: np.ndarray
    Q_star: np.ndarray
    Delta_Q: np.ndarray
    A_K: np.ndarray
    params: dict = field(default_factory=dict)
    lyapunov_form: str = "standard"

    def residual(self):
        """Relative Frobenius residual of the defining Lyapunov equation."""
        M = self.A_K
        if self.lyapunov_form == "transposed":
            M = M.T
        R = M.T @ self.P + self.P @ M + self.Q_star + self.Delta_Q
        return np.linalg.norm(R) / np.linalg.norm(self.P)

    def label(self):
        if self.approach == "ca":
            return f"ca(kappa={self.params['kappa']:g})"
        return f"{self.approach}(rho_x={self.params['rho_x']:g},rho_u={self.params['rho_u']:g})"


def _kron_lyap(A_cl, Q):
    n = A_cl.shape[0]
    I = np.eye(n)
    L = np.kron(I, A_cl.T) + np.kron(A_cl.T, I)
    try:
        vecP = np.linalg.solve(L, -Q.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise SynthesisError("singular Kronecker system in Lyapunov solve") from exc
    P = vecP.reshape(n, n, order="F")
    return 0.5 * (P + P.T)


def solve_lyapunov(A_cl, Q):
    """Solve ``A_cl' P + P A_cl = -Q`` for Hurwitz ``A_cl`` by vectorization.

    Uses ``(I kron A_cl' + A_cl' kron I) vec(P) = -vec(Q)``; meant for the
    handful of states this package deals with.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    ev = np.linalg.eigvals(A_cl)
    bad = ev[ev.real >= 0]
    if bad.size:
        raise SynthesisError(f"A_cl is not Hurwitz; offending eigenvalues: {np.array2string(bad, precision=6)}")
    if not _is_spd(Q):
        raise SynthesisError("Q must be symmetric positive definite")
    return _kron_lyap(A_cl, Q)


def stabilizing_gain(A, B):
    """Some K with ``A - B K`` Hurwitz (Bass's shifted-Lyapunov construction).

    With ``beta`` larger than every real part of eig(A), ``Z`` solving
    ``(A + beta I) Z + Z (A + beta I)' = 2 B B'`` is positive definite for a
    controllable pair and ``K = B' Z^-1`` gives
    ``(A - BK) Z + Z (A - BK)' = -2 beta Z``.
    """
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    n = A.shape[0]
    ev = np.linalg.eigvals(A)
    # K = 0 only with a real margin; a nearly marginal A would make the
    # first Kleinman step blow up
    if ev.real.max() < -1e-8 * (1.0 + np.linalg.norm(A)):
        return np.zeros((B.shape[1], n))
    beta = max(1.0, 1.1 * np.abs(ev).max())
    M = -(A + beta * np.eye(n))
    Z = _kron_lyap(M.T, 2.0 * B @ B.T)  # M Z + Z M' = -2 B B'
    try:
        K = np.linalg.solve(Z, B).T
    except np.linalg.LinAlgError as exc:
        raise SynthesisError("could not bootstrap a stabilizing gain; (A, B) not stabilizable?") from exc
    if np.linalg.eigvals(A - B @ K).real.max() >= 0:
        raise SynthesisError("could not bootstrap a stabilizing gain; (A, B) not stabilizable?")
    return K


def solve_care(A, B, Q, R, K0=None, tol=1e-12, max_iter=200, full_output=False):
    """Continuous algebraic Riccati equation by Kleinman-Newton iteration.

    Solves ``A'P + PA - P B R^-1 B' P + Q = 0`` and returns ``(P, K)`` with
    ``K = R^-1 B' P``.  With ``full_output`` a third item carries the iterate
    history ``P_0, P_1, ...`` and the iteration count.
    """
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    if not _is_spd(Q) or not _is_spd(R):
        raise SynthesisError("Q and R must be symmetric positive definite")
    K = stabilizing_gain(A, B) if K0 is None else np.atleast_2d(np.asarray(K0, float))
    if np.linalg.eigvals(A - B @ K).real.max() >= 0:
        raise SynthesisError("initial gain K0 is not stabilizing")
    Rinv_Bt = np.linalg.solve(R, B.T)
    history = []
    P_prev = None
    for it in range(1, max_iter + 1):
        P = solve_lyapunov(A - B @ K, Q + K.T @ R @ K)
        history.append(P)
        K = Rinv_Bt @ P
        if P_prev is not None and np.linalg.norm(P - P_prev) <= tol * np.linalg.norm(P_prev):
            break
        P_prev = P
    else:
        raise SynthesisError(f"Kleinman iteration did not converge in {max_iter} steps")
    if full_output:
        return P, K, {"iterations": it, "history": history}
    return P, K


def _lyap_for_form(A_K, Q, form):
    if form == "standard":
        return solve_lyapunov(A_K, Q)
    if form == "transposed":
        # A_K P + P A_K' = -Q
        return solve_lyapunov(A_K.T, Q)
    raise SynthesisError(f"lyapunov_form must be one of {LYAPUNOV_FORMS}")


def default_kappa(lin: LinearizedModel, w: Weights):
    """0.95 of the closed-loop stability margin under the nominal CARE gain."""
    _, K = solve_care(lin.A, lin.B, w.W_x, w.W_u)
    return 0.95 * -np.linalg.eigvals(lin.A - lin.B @ K).real.max()


def synthesize_chen_allgower(lin, w, kappa=None, lyapunov_form="standard"):
    _, K = solve_care(lin.A, lin.B, w.W_x, w.W_u)
    A_K = lin.A - lin.B @ K
    margin = -np.linalg.eigvals(A_K).real.max()
    if kappa is None:
        kappa = 0.95 * margin
    if not 0 < kappa < margin:
        raise SynthesisError(f"kappa={kappa:g} outside admissible interval (0, {margin:.6g})")
    Q_star = w.W_x + K.T @ w.W_u @ K
    n = A_K.shape[0]
    P = _lyap_for_form(A_K + kappa * np.eye(n), Q_star, lyapunov_form)
    # in the common form, the shift shows up as dQ = 2 kappa P
    return SynthesisResult("ca", K, P, Q_star, 2.0 * kappa * P, A_K,
                           {"kappa": float(kappa), "rho_x": None, "rho_u": None}, lyapunov_form)


def synthesize_arbitrary(lin, w, rho_x, rho_u=0.0, K_override=None, lyapunov_form="standard"):
    if not rho_x > 0:
        raise SynthesisError(f"rho_x must be positive, got {rho_x}")
    if rho_u < 0:
        raise SynthesisError(f"rho_u must be nonnegative, got {rho_u}")
    if K_override is None:
        _, K = solve_care(lin.A, lin.B, w.W_x, w.W_u)
    else:
        K = np.atleast_2d(np.asarray(K_override, float))
        if K.shape != (lin.n_u, lin.n_x):
            raise SynthesisError(f"K_override must have shape ({lin.n_u}, {lin.n_x})")
    A_K = lin.A - lin.B @ K
    ev = np.linalg.eigvals(A_K)
    if ev.real.max() >= 0:
        raise SynthesisError(f"gain is not stabilizing; eig(A-BK) = {np.array2string(ev, precision=6)}")
    Q_star = w.W_x + K.T @ w.W_u @ K
    dQ = rho_x * w.W_x + rho_u * K.T @ w.W_u @ K
    if np.linalg.eigvalsh(dQ).min() <= 1e-14:
        raise SynthesisError("Delta_Q is not positive definite")
    P = _lyap_for_form(A_K, Q_star + dQ, lyapunov_form)
    return SynthesisResult("ac", K, P, Q_star, dQ, A_K,
                           {"kappa": None, "rho_x": float(rho_x), "rho_u": float(rho_u)}, lyapunov_form)


def synthesize_lqr(lin, w, rho_x, rho_u):
    if not (rho_x > 0 and rho_u > 0):
        raise SynthesisError("rho_x and rho_u must be positive")
    if rho_x <= 1 or rho_u <= 1:
        warnings.warn("weight inflation is not strict for both W_x and W_u", stacklevel=2)
    P, K = solve_care(lin.A, lin.B, rho_x * w.W_x, rho_u * w.W_u)
    Q_star = w.W_x + K.T @ w.W_u @ K
    dQ = (rho_x - 1.0) * w.W_x + (rho_u - 1.0) * K.T @ w.W_u @ K
    if np.linalg.eigvalsh(dQ).min() <= 1e-14:
        raise SynthesisError(
            f"Delta_Q is not positive definite for rho_x={rho_x:g}, rho_u={rho_u:g}")
    return SynthesisResult("lqr", K, P, Q_star, dQ, lin.A - lin.B @ K,
                           {"kappa": None, "rho_x": float(rho_x), "rho_u": float(rho_u)})


def synthesize(lin, w, tuning: Tuning, lyapunov_form="standard"):
    if tuning.approach == "ca":
        return synthesize_chen_allgower(lin, w, tuning.kappa, lyapunov_form)
    if tuning.approach == "ac":
        return synthesize_arbitrary(lin, w, tuning.rho_x, tuning.rho_u or 0.0,
                                    lyapunov_form=lyapunov_form)
    return synthesize_lqr(lin, w, tuning.rho_x, tuning.rho_u)
