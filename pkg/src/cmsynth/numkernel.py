"""Dense symmetric linear algebra kernel: Cholesky, Jacobi eigensolver, SPD solves.

All routines operate on small dense matrices (n up to a few dozen). Robustness
is preferred over speed: the eigensolver is a cyclic Jacobi iteration and the
Cholesky factorization uses a scale-invariant pivot tolerance.
"""

import numpy as np


class NotPositiveDefinite(Exception):
    """Raised when a factorization pivot falls below the positivity tolerance."""


class NoConvergence(Exception):
    """Raised when Jacobi sweeps fail to drive the off-diagonal to zero."""


def symmetrize(a):
    """Return (A + A^T)/2 as a float ndarray; cancels 1-ulp asymmetries."""
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


class SymMatrix:
    """Square symmetric matrix; symmetrized on construction."""

    def __init__(self, entries):
        self.a = symmetrize(entries)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise ValueError("SymMatrix requires a square array")
        self.n = self.a.shape[0]

    def __array__(self, dtype=None):
        return self.a if dtype is None else self.a.astype(dtype)


def _as_sym(m):
    if isinstance(m, SymMatrix):
        return m.a
    return symmetrize(m)


def chol_upper(m):
    """Upper-triangular Cholesky factor U with U^T U = M and positive diagonal.

    Parameters
    ----------
    m : (n, n) array_like or SymMatrix
        Symmetric positive definite matrix.

    Returns
    -------
    u : (n, n) ndarray
        Upper triangular with strictly positive diagonal.

    Raises
    ------
    NotPositiveDefinite
        If any pivot is <= 1e-12 * trace(M)/n.
    """
    a = _as_sym(m)
    n = a.shape[0]
    pivot_tol = 1e-12 * np.trace(a) / n
    u = np.zeros_like(a)
    for i in range(n):
        s = a[i, i] - u[:i, i] @ u[:i, i]
        if s <= pivot_tol:
            raise NotPositiveDefinite(f"pivot {s:.3e} at row {i} (tol {pivot_tol:.3e})")
        u[i, i] = np.sqrt(s)
        if i + 1 < n:
            u[i, i + 1:] = (a[i, i + 1:] - u[:i, i] @ u[:i, i + 1:]) / u[i, i]
    return u


def sym_eig(s, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Parameters
    ----------
    s : (n, n) array_like or SymMatrix
    max_sweeps : int
        Sweep budget; exceeded only on pathological input.

    Returns
    -------
    w : (n,) ndarray
        Eigenvalues in ascending order.
    v : (n, n) ndarray
        Orthonormal eigenvectors as columns, S v[:, i] = w[i] v[:, i].
    """
    a = _as_sym(s).copy()
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a[0, :1].copy(), v
    scale = np.linalg.norm(a, "fro") + 1.0
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            row = a[p, p + 1:]
            off = max(off, np.max(np.abs(row)))
        if off <= 1e-14 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-14 * scale:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                # rotate rows/columns p and q
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - sn * aq
                a[q, :] = sn * ap + c * aq
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    else:
        raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def spd_solve(s, b):
    """Solve S x = b for SPD S via Cholesky; b may be a vector or matrix."""
    u = chol_upper(s)
    b = np.asarray(b, dtype=float)
    y = _forward_sub(u.T, b)
    return _backward_sub(u, y)


def _forward_sub(lower, b):
    n = lower.shape[0]
    x = np.array(b, dtype=float, copy=True)
    for i in range(n):
        if i:
            x[i] = x[i] - lower[i, :i] @ x[:i]
        x[i] = x[i] / lower[i, i]
    return x


def _backward_sub(upper, b):
    n = upper.shape[0]
    x = np.array(b, dtype=float, copy=True)
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            x[i] = x[i] - upper[i, i + 1:] @ x[i + 1:]
        x[i] = x[i] / upper[i, i]
    return x


def spd_inverse(s):
    """Inverse of an SPD matrix (symmetrized output)."""
    n = _as_sym(s).shape[0]
    return symmetrize(spd_solve(s, np.eye(n)))


def eig_range(s):
    """(lambda_min, lambda_max) of a symmetric matrix."""
    w, _ = sym_eig(s)
    return w[0], w[-1]


def sym_sqrt(s):
    """Symmetric positive semidefinite square root via the eigendecomposition."""
    w, v = sym_eig(s)
    w = np.maximum(w, 0.0)
    return symmetrize(v @ np.diag(np.sqrt(w)) @ v.T)
