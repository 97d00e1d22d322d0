"""Adaptation laws: matched-uncertainty, leaky (sigma-modified), projected,
metric-derivative (parameter-dependent metric), mirror-descent with a convex
potential, and the classic Lagrangian tracking adaptation.

Sign conventions follow the error dynamics e_dot = A_cl e - Y (theta_hat -
theta): the mirror-descent law d theta_hat/dt = hess(psi)^-1 Y' M e then makes
V = e'Me + 2 d_psi(theta || theta_hat) decay at the tracking rate, and the
quadratic potential psi = theta' Gamma^-1 theta / 2 reproduces the plain
gain-matrix law exactly.
"""

import numpy as np

from .numkernel import chol_upper, spd_solve, symmetrize


class HessianNotSPD(Exception):
    pass


class ZeroGradient(Exception):
    pass


def _as_matrix(g, c):
    return np.eye(c) * g if np.isscalar(g) else np.asarray(g, dtype=float)


def matched_adaptation(gamma, phi, b, m, e):
    """d theta_hat/dt = -Gamma phi B' M e for span-of-B uncertainty."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    gamma = _as_matrix(gamma, phi.shape[0])
    rate = phi @ (np.atleast_2d(b).T @ (np.atleast_2d(m) @ np.atleast_1d(e)))
    return -(gamma @ rate)


def sigma_mod_adaptation(gamma, phi, b, m, e, sigma, theta_hat):
    """Leaky variant: d theta_hat/dt = -Gamma (phi B' M e + sigma theta_hat).

    sigma = 0 reduces exactly to the matched law; sigma > 0 trades asymptotic
    convergence for an exponential ISS-type bound and pulls the estimate
    toward zero in steady state.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    gamma = _as_matrix(gamma, phi.shape[0])
    rate = phi @ (np.atleast_2d(b).T @ (np.atleast_2d(m) @ np.atleast_1d(e)))
    return -(gamma @ (rate + sigma * np.atleast_1d(theta_hat)))


def project(theta_hat, xi, p_fn, grad_p_fn, theta_true=None):
    """Convex-boundary modification of a raw update xi.

    Outside the unit sublevel set of p and with xi pushing outward, the
    radial component is scaled away proportionally to p(theta_hat); the
    estimate then never leaves {p <= 1} once initialized inside.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    xi = np.asarray(xi, dtype=float)
    p_val = float(p_fn(theta_hat))
    grad = np.asarray(grad_p_fn(theta_hat), dtype=float)
    if p_val > 0.0 and float(grad @ xi) > 0.0:
        gg = float(grad @ grad)
        if gg <= 1e-24:
            raise ZeroGradient("boundary gradient vanished on the active branch")
        out = xi - (grad * (grad @ xi) / gg) * p_val
    else:
        out = xi.copy()
    if theta_true is not None:
        tilde = theta_hat - np.asarray(theta_true, dtype=float)
        if float(tilde @ (out - xi)) > 1e-12:
            raise AssertionError("projection convexity property violated")
    return out


def ancm_adaptation(ms, e, x, x_d, u_d, t, theta_hat, y, y_d, gamma,
                    sigma=0.0, fd_scale=1e-4):
    """Adaptation for a parameter-dependent metric source.

    d theta_hat/dt = Gamma ((Y' dM_x + Y_d' dM_xd + Ytilde' M) e
                            - sigma theta_hat)
    where dM_q has columns (dM/dq_i) e / 2, computed by central finite
    differences on the metric source with per-coordinate step
    fd_scale * (1 + |q_i|), and Ytilde = Y - Y_d.
    """
    e = np.asarray(e, dtype=float)
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    y_d = np.atleast_2d(np.asarray(y_d, dtype=float))
    gamma = _as_matrix(gamma, theta_hat.size)
    m = ms.query(x, x_d, u_d, t, theta_hat)
    n = x.size

    def dm_cols(center, which):
        cols = np.zeros((n, n))
        for i in range(n):
            h = fd_scale * (1.0 + abs(center[i]))
            qp = center.copy()
            qm = center.copy()
            qp[i] += h
            qm[i] -= h
            if which == "x":
                dm = ms.query(qp, x_d, u_d, t, theta_hat) \
                    - ms.query(qm, x_d, u_d, t, theta_hat)
            else:
                dm = ms.query(x, qp, u_d, t, theta_hat) \
                    - ms.query(x, qm, u_d, t, theta_hat)
            cols[:, i] = (dm / (2.0 * h)) @ e / 2.0
        return cols

    dm_x = dm_cols(x, "x")
    dm_xd = dm_cols(x_d, "xd")
    y_tilde = y - y_d
    total = (y.T @ dm_x + y_d.T @ dm_xd + y_tilde.T @ m) @ e
    return gamma @ (total - sigma * theta_hat)


class QuadraticPotential:
    """psi(theta) = theta' Gamma^-1 theta / 2; reproduces the gain-matrix law."""

    def __init__(self, gamma):
        self.gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
        self.gamma_inv = None

    def _inv(self):
        if self.gamma_inv is None:
            from .numkernel import spd_inverse
            self.gamma_inv = spd_inverse(self.gamma)
        return self.gamma_inv

    def psi(self, theta):
        theta = np.atleast_1d(theta)
        return 0.5 * float(theta @ self._inv() @ theta)

    def grad(self, theta):
        return self._inv() @ np.atleast_1d(theta)

    def grad_inverse(self, eta):
        return self.gamma @ np.atleast_1d(eta)

    def hess(self, theta):
        return self._inv()


class SmoothedL1Potential:
    """psi(theta) = scale * sum sqrt(theta_i^2 + eps^2): a twice-
    differentiable stand-in for the 1-norm that keeps the sparsity-seeking
    minimizer to O(eps).

    `scale` trades adaptation speed for dual-variable headroom without moving
    the minimizer (argmin of scale*psi equals argmin of psi on any set)."""

    def __init__(self, eps=1e-3, scale=1.0):
        self.eps = float(eps)
        self.scale = float(scale)

    def psi(self, theta):
        theta = np.atleast_1d(theta)
        return self.scale * float(np.sum(np.sqrt(theta ** 2 + self.eps ** 2)))

    def grad(self, theta):
        theta = np.atleast_1d(theta)
        return self.scale * theta / np.sqrt(theta ** 2 + self.eps ** 2)

    def grad_inverse(self, eta):
        # grad maps componentwise onto (-scale, scale); clamp against roundoff
        r = np.clip(np.atleast_1d(eta) / self.scale, -1.0 + 1e-12,
                    1.0 - 1e-12)
        return self.eps * r / np.sqrt(1.0 - r ** 2)

    def hess(self, theta):
        theta = np.atleast_1d(theta)
        return np.diag(self.scale * self.eps ** 2
                       / (theta ** 2 + self.eps ** 2) ** 1.5)


def bregman_divergence(potential, a, b):
    """d_psi(a || b) = psi(a) - psi(b) - (a - b).grad psi(b)."""
    a = np.atleast_1d(a)
    b = np.atleast_1d(b)
    return potential.psi(a) - potential.psi(b) \
        - float((a - b) @ potential.grad(b))


def bregman_adaptation(potential, y_comb, m, e, theta_hat):
    """Mirror-descent update d theta_hat/dt = hess(psi)^-1 Y' M e.

    y_comb is the combined regressor entering the error dynamics as
    -y_comb (theta_hat - theta). With the quadratic potential this equals the
    matched law for y_comb = -B phi'.
    """
    theta_hat = np.atleast_1d(theta_hat)
    hess = symmetrize(potential.hess(theta_hat))
    diag = np.diag(hess)
    if np.any(diag <= 0.0) or not np.all(np.isfinite(hess)):
        raise HessianNotSPD(f"diagonal {diag}")
    # equilibrate: curvatures of strongly bent potentials span many decades
    d = np.sqrt(diag)
    hs = hess / np.outer(d, d)
    try:
        u = chol_upper(hs)
    except Exception as exc:
        raise HessianNotSPD(str(exc)) from exc
    rhs = mirror_rate(y_comb, m, e) / d
    from .numkernel import _backward_sub, _forward_sub
    return _backward_sub(u, _forward_sub(u.T, rhs)) / d


def mirror_rate(y_comb, m, e):
    """Dual-coordinate form of the same law: d(grad psi(theta_hat))/dt
    = Y' M e. Integrating (x, eta) with theta_hat = grad_inverse(eta) is
    numerically equivalent to bregman_adaptation but avoids the stiff
    Hessian inverse of strongly curved potentials."""
    y_comb = np.atleast_2d(np.asarray(y_comb, dtype=float))
    return y_comb.T @ (np.atleast_2d(m) @ np.atleast_1d(e))


def slotine_li(model, gains, x, target, theta_hat):
    """Tracking control and adaptation for the two-link arm.

    gains = (K, Lam, Gamma); target = (q_d, qd_d, qdd_d). Builds the
    reference velocity qd_r = qd_d - Lam (q - q_d), the composite variable
    s = qdot - qd_r, the linear-in-parameters regressor Y with
    Y theta = H qdd_r + C qd_r + G, and returns
    (u, d theta_hat/dt) = (-K s + Y theta_hat, -Gamma Y' s).
    """
    kmat, lam, gamma = gains
    q, qdot = x[:2], x[2:]
    q_d, qd_d, qdd_d = target
    kmat = _as_matrix(kmat, 2)
    lam = _as_matrix(lam, 2)
    gamma = _as_matrix(gamma, np.atleast_1d(theta_hat).size)
    qd_r = qd_d - lam @ (q - q_d)
    qdd_r = qdd_d - lam @ (qdot - qd_d)
    s = qdot - qd_r
    reg = model.extras["regressor"](q, qdot, qd_r, qdd_r)
    u = -(kmat @ s) + reg @ np.atleast_1d(theta_hat)
    dtheta = -(gamma @ (reg.T @ s))
    return u, dtheta
