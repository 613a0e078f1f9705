"""Independent reference computations used by the tests.

None of these call into ``qihmpc``; they are deliberately built from
different formulas than the library uses.
"""

import numpy as np
from scipy.linalg import expm


def lyapunov_integral(A, Q):
    """``P = int_0^inf exp(A't) Q exp(At) dt`` in closed form.

    With ``A = V diag(l) V^-1``: ``P = V^-T M V^-1``,
    ``M_ij = -(V'QV)_ij / (l_i + l_j)``.
    """
    lam, V = np.linalg.eig(A)
    Vi = np.linalg.inv(V)
    S = V.T @ Q @ V
    M = -S / (lam[:, None] + lam[None, :])
    P = Vi.T @ M @ Vi
    return np.real(P)


def lyapunov_quadrature(A, Q, t_end=60.0, n=6001):
    """Brute-force trapezoidal quadrature of the same integral (slow, loose)."""
    t = np.linspace(0.0, t_end, n)
    dt = t[1] - t[0]
    E = expm(A * dt)
    Et = np.eye(A.shape[0])
    vals = []
    for _ in t:
        vals.append(Et.T @ Q @ Et)
        Et = Et @ E
    vals = np.array(vals)
    return dt * (vals.sum(axis=0) - 0.5 * (vals[0] + vals[-1]))


def scalar_care(a, b, q, r):
    """Stabilizing root of ``2ap - p^2 b^2 / r + q = 0`` and its gain."""
    p = r * (a + np.sqrt(a * a + b * b * q / r)) / (b * b)
    return p, b * p / r


def gamma_sampling(P, K, lo, hi, n=100_000):
    """Largest level on which ``-Kx`` stays in ``[lo, hi]``, from boundary samples."""
    th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    D = np.vstack([np.cos(th), np.sin(th)])
    # points with x'Px = 1: x = P^{-1/2} d
    w, U = np.linalg.eigh(P)
    X = U @ np.diag(w ** -0.5) @ U.T @ D
    u = -K @ X
    usage = np.maximum(u / hi[:, None], u / lo[:, None])
    return 1.0 / usage.max() ** 2


def area_monte_carlo(P, alpha, n=1_000_000, seed=1):
    """Hit-or-miss estimate of the area of ``x'Px <= alpha``."""
    rng = np.random.default_rng(seed)
    half = np.sqrt(alpha * np.diag(np.linalg.inv(P)))
    X = rng.uniform(-1.0, 1.0, size=(n, 2)) * half
    inside = np.einsum("mi,ij,mj->m", X, P, X) <= alpha
    return inside.mean() * 4.0 * half[0] * half[1]


def rk4_decay_error(n_steps, t_end=1.0):
    """Global error of classic RK4 on ``x' = -x`` from ``x(0) = 1``."""
    h = t_end / n_steps
    x = 1.0
    for _ in range(n_steps):
        k1 = -x
        k2 = -(x + 0.5 * h * k1)
        k3 = -(x + 0.5 * h * k2)
        k4 = -(x + h * k3)
        x += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return abs(x - np.exp(-t_end))


def cstr_rhs_hand(X, U, k0=300.0, Ea=5.0, a0=1.95e-4, zTcw=0.38, zTf=0.395):
    """CSTR right-hand side written out directly in absolute units."""
    zc, zT = X
    m1, m2 = 600.0 * U[0], 40.0 * U[1]
    r = k0 * zc * np.exp(-Ea / zT)
    return np.array([(1 - zc) / m2 - r, (zTf - zT) / m2 + r - a0 * m1 * (zT - zTcw)])


def random_hurwitz(rng, n, margin=0.1):
    M = rng.normal(size=(n, n))
    shift = np.linalg.eigvals(M).real.max() + margin + rng.uniform(0, 1)
    return M - shift * np.eye(n)


def random_spd(rng, n, floor=0.1):
    M = rng.normal(size=(n, n))
    return M @ M.T + floor * np.eye(n)
