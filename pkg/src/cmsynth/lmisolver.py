"""Small dense semidefinite-program solver for linear objectives under affine
LMI constraints.

Problem form: minimize c.z subject to F0_b + sum_i z_i Fi_b >= 0 for each
block b, with optional per-variable box bounds. Solved by a log-det barrier
with Newton centering; mu shrinks by a factor of 5 per outer step and the line
search keeps iterates strictly inside the cone with a 0.99 fraction to the
boundary. Deliberately small-scale: blocks are capped at 24-by-24.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .numkernel import NotPositiveDefinite, chol_upper, sym_eig, symmetrize

MAX_BLOCK_DIM = 24
MU_SHRINK = 0.2
BOUNDARY_FRAC = 0.99
MAX_NEWTON = 200


class DimensionLimit(Exception):
    pass


class NumericalBreakdown(Exception):
    pass


@dataclass
class LmiBlock:
    """One affine constraint F0 + sum_i z_i F[i] >= 0 (all matrices symmetric)."""

    f0: np.ndarray
    fs: list

    def __post_init__(self):
        self.f0 = symmetrize(self.f0)
        self.fs = [symmetrize(f) for f in self.fs]
        self.dim = self.f0.shape[0]

    def value(self, z):
        a = self.f0.copy()
        for zi, fi in zip(z, self.fs):
            if zi != 0.0:
                a = a + zi * fi
        return a


@dataclass
class SdpProblem:
    """Minimize c.z over affine LMI blocks with optional box bounds."""

    c: np.ndarray
    blocks: list
    box: list | None = None  # per-variable (lo, hi); entries may be None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.d = self.c.size
        for b in self.blocks:
            if b.dim > MAX_BLOCK_DIM:
                raise DimensionLimit(f"block dim {b.dim} exceeds {MAX_BLOCK_DIM}")
            if len(b.fs) != self.d:
                raise ValueError("block coefficient count does not match decision dim")

    def all_blocks(self):
        """Constraint blocks plus 1-by-1 blocks for the box bounds."""
        blocks = list(self.blocks)
        if self.box is not None:
            for i, bound in enumerate(self.box):
                if bound is None:
                    continue
                lo, hi = bound
                e = np.zeros(self.d)
                e[i] = 1.0
                if lo is not None and np.isfinite(lo):
                    blocks.append(LmiBlock(np.array([[-lo]]), [np.array([[v]]) for v in e]))
                if hi is not None and np.isfinite(hi):
                    blocks.append(LmiBlock(np.array([[hi]]), [np.array([[-v]]) for v in e]))
        return blocks

    def to_json_dict(self):
        return {
            "c": self.c.tolist(),
            "blocks": [
                {"f0": b.f0.tolist(), "fs": [f.tolist() for f in b.fs]}
                for b in self.blocks
            ],
            "box": None if self.box is None else [
                None if bd is None else [bd[0], bd[1]] for bd in self.box],
        }


@dataclass
class SdpSolution:
    z: np.ndarray
    objective: float
    min_slack: float
    gap: float
    status: str
    iterations: int = 0
    meta: dict = field(default_factory=dict)


def check_feasible(problem, z):
    """Smallest eigenvalue over all blocks at z, plus a per-block report."""
    z = np.asarray(z, dtype=float)
    report = []
    min_slack = np.inf
    for b in problem.all_blocks():
        w, _ = sym_eig(b.value(z))
        report.append(float(w[0]))
        min_slack = min(min_slack, float(w[0]))
    return min_slack, report


def _chol_strict(a):
    """Upper Cholesky with a strict positivity pivot test (no scale-relative
    tolerance): the barrier domain boundary is exactly where a pivot hits
    zero, and blocks can mix eigenvalue scales across many decades."""
    n = a.shape[0]
    u = np.zeros_like(a)
    for i in range(n):
        s = a[i, i] - u[:i, i] @ u[:i, i]
        if s <= 0.0:
            return None
        u[i, i] = np.sqrt(s)
        if i + 1 < n:
            u[i, i + 1:] = (a[i, i + 1:] - u[:i, i] @ u[:i, i + 1:]) / u[i, i]
    return u


def _blocks_chol(blocks, z):
    """Upper Cholesky factors of every block at z, or None if not interior."""
    factors = []
    for b in blocks:
        u = _chol_strict(b.value(z))
        if u is None:
            return None
        factors.append(u)
    return factors


def _solve_triangular_upper_t(u, rhs):
    """Solve U^T X = rhs for X (U upper triangular)."""
    n = u.shape[0]
    x = np.array(rhs, dtype=float, copy=True)
    for i in range(n):
        if i:
            x[i] -= u[:i, i] @ x[:i]
        x[i] /= u[i, i]
    return x


def _barrier_grad_hess(blocks, factors, z, d):
    """Gradient and Hessian of -sum_b logdet F_b(z)."""
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    for b, u in zip(blocks, factors):
        # G_i = U^-T F_i U^-1 (symmetric); grad_i = -tr(G_i), hess_ij = tr(G_i G_j)
        gs = []
        for fi in b.fs:
            y = _solve_triangular_upper_t(u, fi)
            g = _solve_triangular_upper_t(u, y.T)
            gs.append(g)
        for i, gi in enumerate(gs):
            grad[i] -= np.trace(gi)
            for j in range(i, d):
                hij = float(np.sum(gi * gs[j].T))
                hess[i, j] += hij
                if j != i:
                    hess[j, i] += hij
    return grad, hess


def _newton_step(hess, rhs):
    # Jacobi equilibration: barrier Hessians mix curvature scales across many
    # orders of magnitude, which a plain factorization tolerance would reject
    dscale = np.sqrt(np.maximum(np.diag(hess), 1e-300))
    hs = hess / np.outer(dscale, dscale)
    rs = rhs / dscale
    try:
        u = chol_upper(hs)
    except NotPositiveDefinite:
        try:
            u = chol_upper(hs + 1e-10 * np.eye(hs.shape[0]))
        except NotPositiveDefinite as exc:
            raise NumericalBreakdown("Newton system singular after regularization") from exc
    y = _solve_triangular_upper_t(u, rs)
    from .numkernel import _backward_sub
    return _backward_sub(u, y) / dscale


def _max_feasible_step(blocks, z, dz):
    """Largest s in (0, 1] with all blocks PD at z + s*dz, times the boundary fraction."""
    s = 1.0
    for _ in range(60):
        if _blocks_chol(blocks, z + s * dz) is not None:
            return min(1.0, BOUNDARY_FRAC * s) if s < 1.0 else 1.0
        s *= 0.7
    return 0.0


def _center(blocks, z, t_weight, c, d, budget, stop_fn=None, lam2_tol=1e-8):
    """Newton centering of t*c.z - sum logdet F(z).

    Returns (z, iterations, final squared Newton decrement). The decrement is
    affine-invariant, so one absolute threshold serves every barrier weight.
    `stop_fn` lets a caller cut the descent short (phase-1 early exit).
    """
    iters = 0
    lam2 = np.inf
    while iters < budget:
        if stop_fn is not None and stop_fn(z):
            break
        factors = _blocks_chol(blocks, z)
        if factors is None:
            raise NumericalBreakdown("iterate left the interior")
        grad_b, hess = _barrier_grad_hess(blocks, factors, z, d)
        grad = t_weight * c + grad_b
        dz = _newton_step(hess, -grad)
        iters += 1
        lam2 = float(grad @ -dz)
        if lam2 <= lam2_tol:
            break
        step = _max_feasible_step(blocks, z, dz)
        if step <= 0.0:
            break
        # backtracking on the barrier merit; the decrease is evaluated
        # incrementally (linear term times alpha plus log-det ratios) to avoid
        # cancellation when t*c.z dwarfs the required decrease
        logdet0 = [2.0 * np.log(np.diag(u)).sum() for u in factors]
        cdz = float(c @ dz)
        alpha = step
        moved = False
        while alpha >= 1e-13:
            z_try = z + alpha * dz
            f_try = _blocks_chol(blocks, z_try)
            if f_try is not None:
                delta = t_weight * alpha * cdz
                for u_try, ld0 in zip(f_try, logdet0):
                    delta -= 2.0 * np.log(np.diag(u_try)).sum() - ld0
                if delta <= -1e-4 * alpha * lam2:
                    z = z_try
                    moved = True
                    break
            alpha *= 0.5
        if not moved:
            break
    return z, iters, lam2


def _interior_start(blocks, d, z0=None):
    """A strictly feasible point, via a phase-1 slack minimization if needed."""
    z = np.zeros(d) if z0 is None else np.asarray(z0, dtype=float).copy()
    if _blocks_chol(blocks, z) is not None:
        return z, 0, True
    # phase 1: minimize s subject to F_b(z) + s I >= 0
    s0 = 0.0
    for b in blocks:
        w, _ = sym_eig(b.value(z))
        s0 = max(s0, -w[0])
    s0 += 1.0
    aug_blocks = [LmiBlock(b.f0, b.fs + [np.eye(b.dim)]) for b in blocks]
    za = np.concatenate([z, [s0]])
    ca = np.zeros(d + 1)
    ca[-1] = 1.0
    iters = 0
    t_weight = 1.0
    m_total = sum(b.dim for b in blocks)
    stop = lambda zz: zz[-1] < -1e-6  # noqa: E731 - strictly feasible reached
    for _ in range(40):
        za, it, _ = _center(aug_blocks, za, t_weight, ca, d + 1,
                            MAX_NEWTON - iters, stop_fn=stop)
        iters += it
        if za[-1] < -1e-6:
            return za[:d], iters, True  # strictly feasible already
        if m_total / t_weight < 1e-9 or iters >= MAX_NEWTON:
            break
        t_weight /= MU_SHRINK
    feasible = za[-1] <= 1e-7
    return za[:d], iters, feasible


def solve_sdp(problem, z0=None, gap_tol=1e-7):
    """Solve the SDP by the barrier method.

    Parameters
    ----------
    problem : SdpProblem
    z0 : optional warm-start point
    gap_tol : target duality-gap fraction (relative to 1 + |objective|)

    Returns
    -------
    SdpSolution with status 'optimal', 'infeasible', or 'max_iters'.
    """
    blocks = problem.all_blocks()
    d = problem.d
    c = problem.c
    m_total = sum(b.dim for b in blocks)

    z, used, feasible = _interior_start(blocks, d, z0)
    if not feasible:
        return SdpSolution(z=z, objective=np.inf, min_slack=np.nan, gap=np.inf,
                           status="infeasible", iterations=used)
    if _blocks_chol(blocks, z) is None:
        return SdpSolution(z=z, objective=np.inf, min_slack=np.nan, gap=np.inf,
                           status="infeasible", iterations=used)

    t_weight = max(1.0, m_total / (1.0 + abs(float(c @ z))))
    status = "max_iters"
    gap = np.inf
    while True:
        # loose centering on intermediate stages (lambda ~ 0.05 suffices to
        # track the path); tighten once m/t reaches the target neighborhood
        near_end = m_total / t_weight <= 30.0 * gap_tol * (1.0 + abs(float(c @ z)))
        z_prev = z.copy()
        z, it, lam2 = _center(blocks, z, t_weight, c, d, MAX_NEWTON - used,
                              lam2_tol=1e-8 if near_end else 2.5e-3)
        used += it
        # m/t is the exact gap at the central point; the decrement term covers
        # the residual off-centrality
        gap = (m_total / t_weight) * (1.0 + np.sqrt(max(lam2, 0.0)))
        if gap <= gap_tol * (1.0 + abs(float(c @ z))):
            status = "optimal"
            break
        if used >= MAX_NEWTON:
            break
        if lam2 > 1.0 and np.array_equal(z, z_prev):
            break  # centering stalled; escalating t further cannot help
        t_weight /= MU_SHRINK
    obj = float(c @ z)
    min_slack, _ = check_feasible(problem, z)
    return SdpSolution(z=z, objective=obj, min_slack=min_slack,
                       gap=gap, status=status, iterations=used)
