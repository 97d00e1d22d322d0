"""State-dependent coefficient factorization by line integration of the Jacobian.

For a control-affine system the extended drift fbar(s) = f(s,t) + B(s,t) ubar
admits a matrix A(s, sbar, ubar, t) with A (s - sbar) = fbar(s) - fbar(sbar),
obtained by integrating d fbar/d s along the straight segment from sbar to s.
Composite Simpson quadrature evaluates the segment endpoints exactly, so the
degenerate case s = sbar returns the plain Jacobian.
"""

from dataclasses import dataclass, field

import numpy as np

from .dynamics import jacobian_fbar


class QuadratureNotConverged(Exception):
    pass


class NotSimplex(Exception):
    pass


@dataclass
class SdcConfig:
    """Quadrature and mode options for the factorization.

    mode 'pairwise' integrates between the two supplied states; 'fixed_point'
    pins the lower end of the segment (and the input) to the stored constants.
    `weights` is a simplex vector used when combining several candidate
    factorizations.
    """

    quadrature_points: int = 9
    mode: str = "pairwise"
    fixed_state: np.ndarray | None = None
    fixed_input: np.ndarray | None = None
    weights: np.ndarray | None = None
    max_doublings: int = 3

    def __post_init__(self):
        if self.quadrature_points < 3 or self.quadrature_points % 2 == 0:
            raise ValueError("quadrature_points must be an odd integer >= 3")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-12:
                raise NotSimplex(f"weights {w} are not a simplex vector")


def _simpson_weights(npts):
    w = np.ones(npts)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / (3.0 * (npts - 1))


def _fbar(model, s, u, t):
    val = model.f(s, t)
    if model.m and u is not None and np.any(u):
        val = val + model.B(s, t) @ u
    return val


def _integrate(model, s, sbar, u, t, npts, cache=None):
    """Composite Simpson over the segment; `cache` maps node fractions to
    Jacobians so a refinement only evaluates the new midpoints."""
    cs = np.linspace(0.0, 1.0, npts)
    w = _simpson_weights(npts)
    a = np.zeros((model.n, model.n))
    for i, (ci, wi) in enumerate(zip(cs, w)):
        key = (i, npts - 1)
        if cache is not None:
            # node i/(npts-1) reduces to i'/(n') in lowest terms
            g = np.gcd(i, npts - 1) if i else npts - 1
            key = (i // g, (npts - 1) // g)
            jac = cache.get(key)
            if jac is None:
                jac = jacobian_fbar(model, ci * s + (1.0 - ci) * sbar, u, t)
                cache[key] = jac
        else:
            jac = jacobian_fbar(model, ci * s + (1.0 - ci) * sbar, u, t)
        a += wi * jac
    return a


def sdc_residual(model, a, s, sbar, u, t):
    """Relative residual ||A (s-sbar) - (fbar(s) - fbar(sbar))|| / (1 + ||fbar(s)||)."""
    s = np.asarray(s, dtype=float)
    sbar = np.asarray(sbar, dtype=float)
    fs = _fbar(model, s, u, t)
    fsbar = _fbar(model, sbar, u, t)
    num = np.linalg.norm(a @ (s - sbar) - (fs - fsbar))
    return num / (1.0 + np.linalg.norm(fs))


def sdc_matrix(model, s, sbar=None, u=None, t=0.0, cfg=None):
    """Factorization matrix A with A (s - sbar) = fbar(s) - fbar(sbar).

    Parameters
    ----------
    model : SystemModel
    s : evaluation state
    sbar : segment anchor; taken from cfg in fixed_point mode
    u : frozen input entering fbar; taken from cfg in fixed_point mode
    t : time
    cfg : SdcConfig

    Raises
    ------
    QuadratureNotConverged
        If the quadrature has not settled after cfg.max_doublings refinements.
    """
    cfg = cfg or SdcConfig()
    s = np.asarray(s, dtype=float)
    if cfg.mode == "fixed_point":
        sbar = np.zeros(model.n) if cfg.fixed_state is None else np.asarray(cfg.fixed_state, dtype=float)
        u = cfg.fixed_input
    elif sbar is None:
        raise ValueError("pairwise mode requires sbar")
    else:
        sbar = np.asarray(sbar, dtype=float)

    npts = cfg.quadrature_points
    cache = {}
    a = _integrate(model, s, sbar, u, t, npts, cache)
    if sdc_residual(model, a, s, sbar, u, t) <= 1e-7:
        return a
    change = 0.0
    for _ in range(cfg.max_doublings):
        npts = 2 * npts - 1
        a_next = _integrate(model, s, sbar, u, t, npts, cache)
        change = np.linalg.norm(a_next - a, "fro")
        a = a_next
        if sdc_residual(model, a, s, sbar, u, t) <= 1e-7:
            return a
    if cfg.max_doublings and change > 1e-6:
        raise QuadratureNotConverged(
            f"quadrature still moving by {change:.2e} after {cfg.max_doublings} doublings")
    return a


def sdc_combination(candidates, weights, model=None, check_at=None):
    """Convex combination of candidate factorizations.

    When `model` and `check_at = (s, sbar, u, t)` are supplied, the combined
    matrix is verified to satisfy the segment identity.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or len(candidates) != w.size or np.any(w < -1e-12) \
            or abs(w.sum() - 1.0) > 1e-12:
        raise NotSimplex(f"weights {w} are not a simplex over {len(candidates)} candidates")
    combo = sum(wi * np.asarray(ai, dtype=float) for wi, ai in zip(w, candidates))
    if model is not None and check_at is not None:
        s, sbar, u, t = check_at
        res = sdc_residual(model, combo, s, sbar, u, t)
        if res > 1e-6:
            raise NotSimplex(f"combined matrix violates the segment identity ({res:.2e})")
    return combo


def sinc(z):
    """sin(z)/z with the removable singularity filled in."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    nz = np.abs(z) > 1e-12
    out = np.where(nz, np.divide(np.sin(z), np.where(nz, z, 1.0)), 1.0 - z * z / 6.0)
    return out if out.ndim else float(out)
