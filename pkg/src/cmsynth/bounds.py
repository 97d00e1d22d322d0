"""Analytic error-tube curves and containment verification.

Every constructor returns a TubeBound whose `curve(t)` evaluates the
exponential envelope; `verify_containment` checks simulated traces against a
curve pointwise. Initial path energies are computed over the straight-line
path, which upper-bounds the geodesic value, so containment claims stay
valid (conservative).
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numkernel import chol_upper, symmetrize


class RateDestroyed(Exception):
    """The learning error is too large for any exponential guarantee."""


class ClockMismatch(Exception):
    pass


class AdaptiveInfeasible(Exception):
    """No positive combined rate satisfies the 2x2 coupling condition."""


@dataclass
class TubeBound:
    kind: str
    params: dict
    curve: Callable

    def __call__(self, t):
        return self.curve(np.asarray(t, dtype=float))

    def markov_tail(self, t, eps):
        """P[error >= eps] bound for mean-square tubes."""
        if self.kind not in ("stochastic_ms",):
            raise ValueError("Markov tail applies to mean-square tubes")
        return self.curve(np.asarray(t, dtype=float)) / eps ** 2


def _gauss_legendre(order):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def path_energy(metric_fn, x0, x1, t=0.0, order=7):
    """Path integral of ||Theta(q) (x1 - x0)|| over the straight segment,
    with Theta the upper Cholesky factor of the metric at q."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    delta = x1 - x0
    if not np.any(delta):
        return 0.0
    nodes, weights = _gauss_legendre(order)
    total = 0.0
    for mu, w in zip(nodes, weights):
        q = mu * x1 + (1.0 - mu) * x0
        theta = chol_upper(symmetrize(metric_fn(q, t)))
        total += w * np.linalg.norm(theta @ delta)
    return float(total)


def det_tube(v0, alpha, m_lower, m_upper, d_bar):
    """Deterministic tube: v0/sqrt(m_lower) e^{-alpha t}
    + (d_bar/alpha) sqrt(m_upper/m_lower) (1 - e^{-alpha t})."""
    if alpha <= 0.0 or m_lower <= 0.0 or m_upper < m_lower:
        raise ValueError("need alpha > 0 and m_upper >= m_lower > 0")
    chi = m_upper / m_lower
    steady = (d_bar / alpha) * np.sqrt(chi)
    init = v0 / np.sqrt(m_lower)

    def curve(t):
        e = np.exp(-alpha * t)
        return init * e + steady * (1.0 - e)

    return TubeBound("deterministic",
                     dict(v0=v0, alpha=alpha, m_lower=m_lower,
                          m_upper=m_upper, d_bar=d_bar, steady=steady),
                     curve)


def sto_ms_bound(ev0, alpha, m_lower, m_upper, g_bar, alpha_g):
    """Mean-square tube: E[V0]/m_lower e^{-2 alpha t} + C/(2 alpha) chi with
    C = g_bar^2 (2/alpha_g + 1)."""
    if alpha <= 0.0 or alpha_g <= 0.0:
        raise ValueError("need alpha > 0 and alpha_g > 0")
    chi = m_upper / m_lower
    c_const = g_bar ** 2 * (2.0 / alpha_g + 1.0)
    steady = c_const * chi / (2.0 * alpha)
    init = ev0 / m_lower

    def curve(t):
        return init * np.exp(-2.0 * alpha * t) + steady

    return TubeBound("stochastic_ms",
                     dict(ev0=ev0, alpha=alpha, m_lower=m_lower,
                          m_upper=m_upper, g_bar=g_bar, alpha_g=alpha_g,
                          c_const=c_const, steady=steady),
                     curve)


def learn_tube(v0, alpha, m_lower, m_upper, eps0, eps1, d_bar):
    """Tube under learning error: the rate degrades to
    alpha_l = alpha - eps1 sqrt(chi) and eps0 adds to the disturbance."""
    chi = m_upper / m_lower
    alpha_l = alpha - eps1 * np.sqrt(chi)
    if alpha_l <= 0.0:
        raise RateDestroyed(
            f"residual rate {alpha_l:.3e} <= 0 (eps1 {eps1:.3e} too large)")
    steady = ((eps0 + d_bar) / alpha_l) * np.sqrt(chi)
    init = v0 / np.sqrt(m_lower)

    def curve(t):
        e = np.exp(-alpha_l * t)
        return init * e + steady * (1.0 - e)

    return TubeBound("learning",
                     dict(v0=v0, alpha=alpha, alpha_l=alpha_l,
                          m_lower=m_lower, m_upper=m_upper, eps0=eps0,
                          eps1=eps1, d_bar=d_bar, steady=steady),
                     curve)


def naive_bound(e0, l_g, eps0, eps1, d_bar):
    """Gronwall-type envelope without a contracting closed loop: grows as
    e^{(l_g + eps1) t}."""
    rate = l_g + eps1
    if rate <= 0.0:
        raise ValueError("need l_g + eps1 > 0")

    def curve(t):
        growth = np.exp(rate * t)
        return e0 * growth + ((eps0 + d_bar) / rate) * (growth - 1.0)

    return TubeBound("naive", dict(e0=e0, l_g=l_g, eps0=eps0, eps1=eps1,
                                   d_bar=d_bar, rate=rate), curve)


def hier_bound(v1_0, v0_0, alpha0, alpha1, f10_bar, m0_upper, m1_upper,
               d0_bar, d1_bar):
    """Cascade tube: the layer-0 envelope sup feeds layer 1 through the
    coupling gain f10_bar."""
    if alpha0 <= 0.0 or alpha1 <= 0.0:
        raise ValueError("rates must be positive")
    v0_sup = v0_0 + np.sqrt(m0_upper) * d0_bar / alpha0
    steady = (np.sqrt(m1_upper) * d1_bar + f10_bar * v0_sup) / alpha1

    def curve(t):
        e = np.exp(-alpha1 * t)
        return v1_0 * e + steady * (1.0 - e)

    return TubeBound("hierarchical",
                     dict(v1_0=v1_0, v0_0=v0_0, alpha0=alpha0, alpha1=alpha1,
                          f10_bar=f10_bar, m0_upper=m0_upper,
                          m1_upper=m1_upper, d0_bar=d0_bar, d1_bar=d1_bar,
                          v0_sup=v0_sup, steady=steady),
                     curve)


def adaptive_rate(alpha_l, m_lower, m_upper, gamma_lower, phi_bar, b_bar,
                  eps_l, sigma):
    """Largest combined rate alpha_a > 0 satisfying the 2x2 coupling
    condition between the tracking block and the adaptation block.

    The condition in matrix form is
        [[2 a m_upper - 2 alpha_l m_lower, c], [c, 2 a / gamma_lower
          - 2 sigma]] <= 0   with c = phi_bar b_bar eps_l,
    whose diagonal entries cap a at alpha_l m_lower / m_upper and
    sigma gamma_lower, and whose determinant condition is quadratic in a.
    """
    cap = min(alpha_l * m_lower / m_upper, sigma * gamma_lower)
    if cap <= 0.0:
        raise AdaptiveInfeasible("a diagonal entry forces alpha_a <= 0")
    c_off = phi_bar * b_bar * eps_l
    if c_off == 0.0:
        return cap
    # 4 (alpha_l m_lower - a m_upper)(sigma - a/gamma_lower) >= c^2
    a_q = 4.0 * m_upper / gamma_lower
    b_q = -4.0 * (alpha_l * m_lower / gamma_lower + m_upper * sigma)
    c_q = 4.0 * alpha_l * m_lower * sigma - c_off ** 2
    disc = b_q ** 2 - 4.0 * a_q * c_q
    if c_q < 0.0:
        raise AdaptiveInfeasible("coupling exceeds the available damping")
    root_low = (-b_q - np.sqrt(max(disc, 0.0))) / (2.0 * a_q)
    if root_low <= 0.0:
        raise AdaptiveInfeasible("no positive rate satisfies the condition")
    return float(min(cap, root_low))


def adaptive_bound(v0, alpha_a, m_lower, sigma, gamma_upper, theta_bar):
    """Tube for leaky adaptation: the leakage injects a steady term
    sigma sqrt(gamma_upper) theta_bar / alpha_a."""
    if alpha_a <= 0.0 or m_lower <= 0.0:
        raise ValueError("need alpha_a > 0 and m_lower > 0")
    steady = sigma * np.sqrt(gamma_upper) * theta_bar / alpha_a

    def curve(t):
        e = np.exp(-alpha_a * t)
        return (v0 * e + steady * (1.0 - e)) / np.sqrt(m_lower)

    return TubeBound("adaptive",
                     dict(v0=v0, alpha_a=alpha_a, m_lower=m_lower,
                          sigma=sigma, gamma_upper=gamma_upper,
                          theta_bar=theta_bar, steady=steady),
                     curve)


def estim_tube(v0, alpha, m_lower, m_upper, d0_bar, d1_bar, rho_bar, c_bar):
    """Estimation tube: sqrt(m_upper) v0 e^{-alpha t}
    + ((d0_bar sqrt(chi) + rho_bar c_bar d1_bar nu)/alpha)(1 - e^{-alpha t})
    with nu = m_upper and chi = m_upper/m_lower. v0 is the initial path
    energy in the INVERSE metric W = M^-1."""
    if alpha <= 0.0:
        raise ValueError("need alpha > 0")
    chi = m_upper / m_lower
    nu = m_upper
    steady = (d0_bar * np.sqrt(chi) + rho_bar * c_bar * d1_bar * nu) / alpha
    init = np.sqrt(m_upper) * v0

    def curve(t):
        e = np.exp(-alpha * t)
        return init * e + steady * (1.0 - e)

    return TubeBound("estimation",
                     dict(v0=v0, alpha=alpha, m_lower=m_lower,
                          m_upper=m_upper, d0_bar=d0_bar, d1_bar=d1_bar,
                          rho_bar=rho_bar, c_bar=c_bar, steady=steady),
                     curve)


@dataclass
class ContainmentReport:
    passed: bool
    max_margin: float
    worst_time: float
    per_seed: list = field(default_factory=list)

    def to_dict(self):
        return {"passed": bool(self.passed), "max_margin": self.max_margin,
                "worst_time": self.worst_time,
                "per_seed": [dict(p) for p in self.per_seed]}


def verify_containment(trace, bound, grace=0.0):
    """Check ||e(t)|| <= curve(t) for all t beyond the grace fraction.

    PASS tolerance is 1e-9 + 1e-6 * curve(t) pointwise. Accepts a single
    Trace or a list of traces (per-seed reporting)."""
    traces = trace if isinstance(trace, (list, tuple)) else [trace]
    t_ref = traces[0].t
    per_seed = []
    worst = -np.inf
    worst_t = 0.0
    ok_all = True
    for tr in traces:
        if len(tr.t) != len(t_ref) or not np.allclose(tr.t, t_ref):
            raise ClockMismatch("traces disagree on the time grid")
        mask = tr.t >= grace * tr.t[-1]
        curve = bound.curve(tr.t[mask])
        margin = tr.err[mask] - curve
        tol = 1e-9 + 1e-6 * curve
        idx = int(np.argmax(margin - tol))
        seed_margin = float(margin[idx])
        seed_ok = bool(np.all(margin <= tol))
        per_seed.append({"seed": tr.meta.get("seed"),
                         "max_margin": seed_margin,
                         "passed": seed_ok})
        if seed_margin > worst:
            worst = seed_margin
            worst_t = float(tr.t[mask][idx])
        ok_all = ok_all and seed_ok
    return ContainmentReport(ok_all, float(worst), worst_t, per_seed)
