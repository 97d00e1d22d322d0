"""Feedback and estimation laws built from a metric source.

A MetricSource wraps a synthesized field, a trained net, or an analytic
callback behind one query contract: (x, x_d, u_d, t, theta_hat) -> SPD metric.
Field queries interpolate in time and re-project onto the SPD cone with a
small eigenvalue floor if roundoff ever dips below it.
"""

import numpy as np

from .numkernel import chol_upper, spd_solve, sym_eig, symmetrize


class NoMeasurementModel(Exception):
    pass


class DegenerateConstraint(Exception):
    """The stability constraint has no input authority yet is violated."""


class NotContracting(Exception):
    """Observed fixed-point iteration ratio exceeded one."""


class MetricSource:
    """Uniform query interface over field/net/analytic metric providers."""

    def __init__(self, kind, obj, eig_floor=1e-6):
        if kind not in ("field", "net", "analytic"):
            raise ValueError(f"unknown metric source kind {kind!r}")
        self.kind = kind
        self.obj = obj
        self.eig_floor = eig_floor
        self._cache = {}

    @classmethod
    def from_field(cls, fld):
        return cls("field", fld)

    @classmethod
    def from_net(cls, net):
        return cls("net", net)

    @classmethod
    def from_callback(cls, fn):
        return cls("analytic", fn)

    def query(self, x, x_d=None, u_d=None, t=0.0, theta=None):
        if self.kind == "field":
            # a stationary field is one metric for every query time; other
            # fields memoize by query time (interpolation + projection are
            # the per-step hot path of closed-loop rollouts)
            key = "const" if self.obj.meta.get("stationary") else float(t)
            m = self._cache.get(key)
            if m is None:
                m = self._clamp(self.obj.metric_at_time(t))
                if len(self._cache) < 65536:
                    self._cache[key] = m
            return m
        if self.kind == "net":
            return self.obj.predict_metric(self.obj.pack_input(
                x=x, x_d=x_d, u_d=u_d, t=t, theta=theta))
        return self._clamp(self.obj(x, x_d, u_d, t, theta))

    def _clamp(self, m):
        m = symmetrize(m)
        w, v = sym_eig(m)
        if w[0] >= self.eig_floor ** 2:
            return m
        w = np.maximum(w, self.eig_floor ** 2)
        return symmetrize(v @ np.diag(w) @ v.T)


def cvstem_feedback(ms, model, x, x_d, u_d, t, R):
    """Tracking law u = u_d - R^-1 B(x,t)' M (x - x_d)."""
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    u_d = np.asarray(u_d, dtype=float)
    e = x - x_d
    if not np.any(e):
        return u_d.copy()
    m = ms.query(x, x_d, u_d, t)
    b = model.B(x, t)
    rmat = np.eye(model.m) * R if np.isscalar(R) else np.asarray(R, dtype=float)
    return u_d - spd_solve(rmat, b.T @ (m @ e))


def estimator_gain(ms, model, xhat, t, R):
    """Output-injection gain L = M(xhat, t) Cbar' R^-1."""
    if model.h is None:
        raise NoMeasurementModel(model.name)
    from .dynamics import jacobian_h
    from .numkernel import spd_inverse
    m = ms.query(xhat, t=t)
    cbar = jacobian_h(model, xhat, t)
    rmat = np.eye(model.p) * R if np.isscalar(R) else np.asarray(R, dtype=float)
    return m @ cbar.T @ spd_inverse(rmat)


def estimator_step(ms, model, xhat, t, R, y, u=None):
    """dxhat/dt = f(xhat,t) [+ B u] + L (y - h(xhat,t))."""
    gain = estimator_gain(ms, model, xhat, t, R)
    rate = model.f(xhat, t)
    if u is not None and model.m:
        rate = rate + model.B(xhat, t) @ u
    return rate + gain @ (np.asarray(y, dtype=float) - model.h(xhat, t))


def _gauss01(order):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def clfqp_control(model, ms, x, x_d, u_d, t, alpha, beta=0.0, order=5,
                  c_offset=None, a_matrix=None, mdot_fn=None):
    """Min-norm stability-filtered control.

    The contraction inequality integrated along the straight path from x_d to
    x gives one scalar constraint phi0 + phi1.v <= 0 on the input correction
    v = u - u_d. The minimizer of 1/2 v'v + c.v subject to it is analytic:
    v* = -c - ((phi0 - phi1.c)/phi1.phi1) phi1 when the constraint is active
    at -c, else v* = -c. The recorded relaxation p = max(0, phi0 - phi1.c)
    measures how far the unmodified candidate violates the constraint.

    By default c is minus the metric feedback correction, so the law follows
    the tracking controller and bends it only when the certificate fails.
    Returns (u, p).
    """
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    u_d = np.asarray(u_d, dtype=float)
    e = x - x_d
    from .sdc import SdcConfig, sdc_matrix
    a = a_matrix if a_matrix is not None else sdc_matrix(
        model, x, x_d, u_d, t, SdcConfig())
    nodes, weights = _gauss01(order)
    phi0 = 0.0
    phi1 = np.zeros(model.m)
    for mu, w in zip(nodes, weights):
        q = mu * x + (1.0 - mu) * x_d
        m = ms.query(q, x_d, u_d, t)
        mdot = mdot_fn(q, t) if mdot_fn is not None else np.zeros_like(m)
        quad = mdot + m @ a + a.T @ m + 2.0 * alpha * (m + beta * np.eye(m.shape[0]))
        phi0 += w * float(e @ quad @ e)
        phi1 += w * (2.0 * model.B(q, t).T @ (m @ e))
    if c_offset is None:
        m_x = ms.query(x, x_d, u_d, t)
        c_offset = model.B(x, t).T @ (m_x @ e)
    c_offset = np.asarray(c_offset, dtype=float)
    slack = phi0 - float(phi1 @ c_offset)
    p = max(0.0, slack)
    phi_sq = float(phi1 @ phi1)
    if slack > 0.0:
        if phi_sq <= 1e-12:
            raise DegenerateConstraint(
                f"phi1 ~ 0 with positive violation {slack:.3e}")
        v = -c_offset - (slack / phi_sq) * phi1
    else:
        v = -c_offset
    return u_d + v, p


def nonaffine_fixed_point(u_star, r_learned, x, t, l_u, max_iters=50,
                          tol=1e-10):
    """Iterate u_k = u*(x,t) - r(x, u_{k-1}, t) to the fixed point of the
    implicit input equation.

    The caller declares the Lipschitz constant l_u < 1 of r in u; every
    observed step ratio is checked against it and NotContracting is raised
    if a ratio exceeds one.

    Returns (u, iterates).
    """
    base = np.atleast_1d(np.asarray(u_star(x, t), dtype=float))
    u = base.copy()
    iterates = [u.copy()]
    prev_delta = None
    for _ in range(max_iters):
        u_next = base - np.atleast_1d(r_learned(x, u, t))
        delta = float(np.linalg.norm(u_next - u))
        iterates.append(u_next.copy())
        if prev_delta is not None and prev_delta > 1e-14:
            ratio = delta / prev_delta
            if ratio > 1.0 + 1e-9:
                raise NotContracting(
                    f"observed ratio {ratio:.4f} contradicts declared "
                    f"l_u = {l_u}")
            if ratio > l_u + 1e-6:
                raise NotContracting(
                    f"observed ratio {ratio:.4f} exceeds declared l_u = {l_u}")
        u = u_next
        if delta <= tol:
            return u, iterates
        prev_delta = delta
    return u, iterates
