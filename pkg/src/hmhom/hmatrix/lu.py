"""Approximate LU factorisation in H-matrix format.

The factorisation follows the block tree: for a 2x2 subdivided diagonal
block

    A00 = L00 U00
    A01 = L00 U01           (block forward substitution)
    A10 = L10 U00           (block backward substitution from the right)
    A11 - L10 U01 = L11 U11 (truncated H-product, then recursion)

Every low-rank result is truncated by SVD at relative tolerance ``eps``,
which makes the factorisation inexact ("incomplete") unless eps -> 0.
L (unit lower) and U are stored together in one H-matrix with the shape
of the input.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.linalg import solve_triangular

from .aca import LowRankBlock, svd_recompress
from .hmat import HMatrix, HNode


class HLUError(ArithmeticError):
    """Near-zero pivot while factorising (matrix likely indefinite or singular)."""


def _factors(node: HNode):
    """(U, V) with node == U @ V.T for a dense or low-rank node."""
    if node.kind == "lowrank":
        return node.data.left, node.data.right
    D = node.data
    m, p = D.shape
    if m <= p:
        return np.eye(m), D.T
    return D, np.eye(p)


def _product_lowrank(A: HNode, B: HNode, eps: float):
    """Truncated low-rank factors of A @ B."""
    if A.kind != "sub":
        ua, va = _factors(A)
        return ua, B.rmatmat(va)
    if B.kind != "sub":
        ub, vb = _factors(B)
        return A.matmat(ub), vb
    m, n = A.shape[0], B.shape[1]
    us, vs = [], []
    for i in range(2):
        for j in range(2):
            for k in range(2):
                a, b = A.children[i][k], B.children[k][j]
                u, v = _product_lowrank(a, b, eps)
                U = np.zeros((m, u.shape[1]))
                V = np.zeros((n, v.shape[1]))
                U[a.r0 - A.r0:a.r1 - A.r0] = u
                V[b.c0 - B.c0:b.c1 - B.c0] = v
                us.append(U)
                vs.append(V)
    U, V = np.hstack(us), np.hstack(vs)
    if U.shape[1] <= 16:
        return U, V
    lr = svd_recompress(LowRankBlock(U, V), eps)
    return lr.left, lr.right


def _add_lowrank(T: HNode, U, V, eps: float):
    """T += U @ V.T with truncation."""
    if U.shape[1] == 0:
        return
    if T.kind == "dense":
        T.data += U @ V.T
    elif T.kind == "lowrank":
        # truncation is deferred until the block is consumed (see _settle)
        lr = LowRankBlock(np.hstack([T.data.left, U]), np.hstack([T.data.right, V]))
        T.data = svd_recompress(lr, eps) if lr.rank > 2 * min(lr.shape) else lr
    else:
        if T.pending is None:
            T.pending = []
        T.pending.append((U, V))


def _push(T: HNode, eps: float):
    """Distribute the deferred updates of a subdivided node to its sons."""
    if not T.pending:
        return
    U = np.hstack([u for u, _ in T.pending])
    V = np.hstack([v for _, v in T.pending])
    T.pending = None
    if U.shape[1] > 8:
        lr = svd_recompress(LowRankBlock(U, V), eps)
        U, V = lr.left, lr.right
    for row in T.children:
        for ch in row:
            _add_lowrank(ch, U[ch.r0 - T.r0:ch.r1 - T.r0], V[ch.c0 - T.c0:ch.c1 - T.c0], eps)


def _add_product(T: HNode, A: HNode, B: HNode, eps: float, alpha: float = -1.0):
    """T += alpha * A @ B."""
    if T.kind == "sub" and A.kind == "sub" and B.kind == "sub":
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    _add_product(T.children[i][j], A.children[i][k], B.children[k][j], eps, alpha)
        return
    if T.kind == "dense" and A.kind == "sub" and B.kind == "sub":
        T.data += alpha * A.matmat(B.to_dense())
        return
    u, v = _product_lowrank(A, B, eps)
    _add_lowrank(T, alpha * u, v, eps)


def _lower_solve(L: HNode, B):
    """Solve L X = B for unit lower triangular L, dense right-hand side."""
    if L.kind == "dense":
        return solve_triangular(L.data, B, lower=True, unit_diagonal=True, check_finite=False)
    L00, L10, L11 = L.children[0][0], L.children[1][0], L.children[1][1]
    n0 = L00.shape[0]
    x0 = _lower_solve(L00, B[:n0])
    x1 = _lower_solve(L11, B[n0:] - L10.matmat(x0))
    return np.concatenate([x0, x1])


def _upper_solve(U: HNode, B):
    """Solve U X = B for upper triangular U, dense right-hand side."""
    if U.kind == "dense":
        return solve_triangular(U.data, B, lower=False, check_finite=False)
    U00, U01, U11 = U.children[0][0], U.children[0][1], U.children[1][1]
    n0 = U00.shape[0]
    x1 = _upper_solve(U11, B[n0:])
    x0 = _upper_solve(U00, B[:n0] - U01.matmat(x1))
    return np.concatenate([x0, x1])


def _upper_t_solve(U: HNode, B):
    """Solve U^T X = B."""
    if U.kind == "dense":
        return solve_triangular(U.data, B, lower=False, trans="T", check_finite=False)
    U00, U01, U11 = U.children[0][0], U.children[0][1], U.children[1][1]
    n0 = U00.shape[0]
    x0 = _upper_t_solve(U00, B[:n0])
    x1 = _upper_t_solve(U11, B[n0:] - U01.rmatmat(x0))
    return np.concatenate([x0, x1])


def _settle(X: HNode, eps: float):
    X.data = svd_recompress(X.data, eps)


def _solve_lower_h(L: HNode, X: HNode, eps: float):
    """X <- L^{-1} X in place (L unit lower, diagonal block of the factor)."""
    if X.kind == "lowrank":
        _settle(X, eps)
        X.data = LowRankBlock(_lower_solve(L, X.data.left), X.data.right)
    elif X.kind == "dense":
        X.data = _lower_solve(L, X.data)
    elif L.kind == "sub":
        _push(X, eps)
        for j in range(2):
            _solve_lower_h(L.children[0][0], X.children[0][j], eps)
            _add_product(X.children[1][j], L.children[1][0], X.children[0][j], eps)
            _solve_lower_h(L.children[1][1], X.children[1][j], eps)
    else:
        raise HLUError("subdivided block facing a dense diagonal leaf")


def _solve_upper_right_h(U: HNode, X: HNode, eps: float):
    """X <- X U^{-1} in place (U upper, diagonal block of the factor)."""
    if X.kind == "lowrank":
        _settle(X, eps)
        X.data = LowRankBlock(X.data.left, _upper_t_solve(U, X.data.right))
    elif X.kind == "dense":
        X.data = _upper_t_solve(U, X.data.T).T
    elif U.kind == "sub":
        _push(X, eps)
        for i in range(2):
            _solve_upper_right_h(U.children[0][0], X.children[i][0], eps)
            _add_product(X.children[i][1], X.children[i][0], U.children[0][1], eps)
            _solve_upper_right_h(U.children[1][1], X.children[i][1], eps)
    else:
        raise HLUError("subdivided block facing a dense diagonal leaf")


def _dense_lu_inplace(a: np.ndarray, pivot_tol: float):
    n = a.shape[0]
    for k in range(n):
        piv = a[k, k]
        if not abs(piv) > pivot_tol:
            raise HLUError(f"near-zero pivot {piv:.3e}")
        a[k + 1:, k] /= piv
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])


def _lu(node: HNode, eps: float, pivot_tol: float):
    if node.kind == "dense":
        _dense_lu_inplace(node.data, pivot_tol)
        return
    if node.kind != "sub":
        raise HLUError("diagonal block stored in low-rank form")
    _push(node, eps)
    (A00, A01), (A10, A11) = node.children
    _lu(A00, eps, pivot_tol)
    _solve_lower_h(A00, A01, eps)
    _solve_upper_right_h(A00, A10, eps)
    _add_product(A11, A10, A01, eps)
    _lu(A11, eps, pivot_tol)


class HLU:
    """Factorisation ``A ~ P^T L U P``; :meth:`solve` applies its inverse."""

    def __init__(self, root: HNode, perm, eps: float):
        self.root = root
        self.perm = np.asarray(perm)
        self.eps = eps
        self.time = 0.0

    @property
    def n(self):
        return len(self.perm)

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        y = _lower_solve(self.root, b[self.perm])
        x = _upper_solve(self.root, y)
        out = np.empty_like(x)
        out[self.perm] = x
        return out

    __call__ = solve

    def factors(self):
        """Dense (L, U) in permuted coordinates (small problems only)."""
        M = self.root.to_dense()
        return np.tril(M, -1) + np.eye(len(M)), np.triu(M)

    def reconstruct(self):
        """Dense L U mapped back to the original ordering."""
        L, U = self.factors()
        out = np.empty((self.n, self.n))
        out[np.ix_(self.perm, self.perm)] = L @ U
        return out

    @property
    def storage(self) -> int:
        return self.root.storage


def h_lu(H: HMatrix, epsilon_lu: float = 1e-2, pivot_tol: float | None = None) -> HLU:
    """Truncated H-LU of a square H-matrix with identical row/column trees.

    Raises :class:`HLUError` on a near-zero pivot.
    """
    if H.shape[0] != H.shape[1] or not np.array_equal(H.row_perm, H.col_perm):
        raise ValueError("h_lu needs a square H-matrix with a symmetric block structure")
    t0 = time.perf_counter()
    root = H.copy().root
    if pivot_tol is None:
        scale = max((np.abs(lf.data).max() for lf in root.leaves() if lf.kind == "dense"), default=1.0)
        pivot_tol = 1e-13 * scale
    _lu(root, epsilon_lu, pivot_tol)
    out = HLU(root, H.row_perm, epsilon_lu)
    out.time = time.perf_counter() - t0
    return out
