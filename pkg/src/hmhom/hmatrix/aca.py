"""Low-rank blocks: adaptive cross approximation and SVD recompression."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, svd

from .generator import DenseGenerator, EntryGenerator

log = logging.getLogger(__name__)


class ACAConvergenceError(RuntimeError):
    pass


@dataclass
class LowRankBlock:
    """``left @ right.T`` with ``left`` (m, k) and ``right`` (n, k)."""

    left: np.ndarray
    right: np.ndarray
    converged: bool = True
    info: dict = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    @property
    def shape(self):
        return (self.left.shape[0], self.right.shape[0])

    @property
    def storage(self) -> int:
        return self.rank * (self.left.shape[0] + self.right.shape[0])

    def dense(self) -> np.ndarray:
        return self.left @ self.right.T

    def matvec(self, x):
        return self.left @ (self.right.T @ x)

    def rmatvec(self, x):
        return self.right @ (self.left.T @ x)


def _empty(m, n) -> LowRankBlock:
    return LowRankBlock(np.zeros((m, 0)), np.zeros((n, 0)))


def aca_full(block, epsilon: float, k_max: int | None = None) -> LowRankBlock:
    """Cross approximation with full pivoting on an explicit block.

    Stops as soon as ``||M - M_k||_F <= epsilon ||M||_F``, the residual being
    computed exactly.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    R = np.array(block, dtype=float, copy=True)
    m, n = R.shape
    k_max = min(m, n) if k_max is None else min(k_max, m, n)
    norm = np.linalg.norm(R)
    us, vs = [], []
    res = norm
    while res > epsilon * norm and len(us) < k_max:
        i, j = np.unravel_index(np.argmax(np.abs(R)), R.shape)
        piv = R[i, j]
        if piv == 0.0:
            break
        a = R[:, j] / piv
        b = R[i, :].copy()
        R -= np.outer(a, b)
        us.append(a)
        vs.append(b)
        res = np.linalg.norm(R)
    if not us:
        out = _empty(m, n)
    else:
        out = LowRankBlock(np.array(us).T, np.array(vs).T)
    out.converged = res <= epsilon * norm
    out.info = {"error": float(res / norm) if norm > 0 else 0.0}
    if not out.converged:
        log.warning("aca_full reached k_max=%d with relative error %.3g", k_max, out.info["error"])
    return out


def aca_partial(gen: EntryGenerator, epsilon: float, k_max: int | None = None,
                max_zero_rows: int = 8) -> LowRankBlock:
    """Cross approximation with partial pivoting.

    Only the pivot rows and columns of ``gen`` are generated. Stopping rule:
    ``||a_k|| ||b_k|| <= epsilon ||M_k||_F`` (stagnation estimate). The first
    pivot row is row 0; a row whose residual vanishes is skipped in favour of
    the next untried row, at most ``max_zero_rows`` times in a row.
    """
    m, n = gen.shape
    full = min(m, n)
    k_max = full if k_max is None else min(k_max, m, n)
    U = np.zeros((m, k_max))
    V = np.zeros((n, k_max))
    used = np.zeros(m, dtype=bool)
    allcols = np.arange(n)
    allrows = np.arange(m)
    norm2 = 0.0
    k = 0
    i = 0
    zero_rows = 0
    converged = False
    while k < k_max:
        used[i] = True
        row = gen.row(i, allcols) - U[i, :k] @ V[:, :k].T
        j = int(np.argmax(np.abs(row)))
        piv = row[j]
        scale = np.sqrt(norm2 / (m * n)) if norm2 > 0 else 0.0
        if abs(piv) <= 1e-14 * scale or piv == 0.0:
            zero_rows += 1
            free = np.nonzero(~used)[0]
            if zero_rows > max_zero_rows or free.size == 0:
                # every probed row is reproduced: accept the current approximant
                converged = True
                break
            # next untried row after i
            after = free[free > i]
            i = int(after[0] if after.size else free[0])
            continue
        zero_rows = 0
        b = row
        a = (gen.col(allrows, j) - U[:, :k] @ V[j, :k]) / piv
        U[:, k] = a
        V[:, k] = b
        aa, bb = a @ a, b @ b
        cross = 2.0 * np.dot(U[:, :k].T @ a, V[:, :k].T @ b) if k else 0.0
        norm2 = max(norm2 + aa * bb + cross, 0.0)
        k += 1
        if aa * bb <= epsilon**2 * norm2:
            converged = True
            break
        mask = np.abs(a)
        mask[used] = -1.0
        i = int(np.argmax(mask))
        if mask[i] < 0:
            converged = True
            break
    if k == full:
        # every row (or column) has been eliminated: the cross approximation is exact
        converged = True
    out = LowRankBlock(U[:, :k].copy(), V[:, :k].copy(), converged,
                       {"queries": gen.queries})
    if not converged:
        log.warning("aca_partial reached k_max=%d on a %dx%d block", k_max, m, n)
    return out


def svd_recompress(lr: LowRankBlock, epsilon: float) -> LowRankBlock:
    """Truncate ``left @ right.T`` to the smallest rank with relative
    Frobenius error <= epsilon (QR of both factors, SVD of the k x k core)."""
    k = lr.rank
    if k == 0:
        return lr
    m, n = lr.shape
    if k >= min(m, n) and epsilon > 0:
        # the explicit block is no larger than the factors
        out = compress_dense(lr.dense(), epsilon)
        return LowRankBlock(out.left, out.right, lr.converged, dict(lr.info))
    qa, ra = qr(lr.left, mode="economic", check_finite=False)
    qb, rb = qr(lr.right, mode="economic", check_finite=False)
    u, s, vt = svd(ra @ rb.T, check_finite=False)
    total = s @ s
    if total == 0.0:
        return LowRankBlock(lr.left[:, :0], lr.right[:, :0], lr.converged, dict(lr.info))
    # tail[r] = sum_{i >= r} s_i^2
    tail = np.concatenate([np.cumsum((s * s)[::-1])[::-1], [0.0]])
    if epsilon <= 0:
        keep = int(np.sum(s > s[0] * max(qa.shape[0], qb.shape[0]) * np.finfo(float).eps))
    else:
        keep = int(np.nonzero(tail <= epsilon**2 * total)[0][0])
    left = qa @ (u[:, :keep] * s[:keep])
    right = qb @ vt[:keep].T
    return LowRankBlock(left, right, lr.converged, dict(lr.info))


def compress_dense(block: np.ndarray, epsilon: float) -> LowRankBlock:
    """Truncated SVD of an explicit block (used by the H-LU arithmetic)."""
    m, n = block.shape
    if m == 0 or n == 0:
        return _empty(m, n)
    u, s, vt = np.linalg.svd(block, full_matrices=False)
    total = s @ s
    if total == 0.0:
        return _empty(m, n)
    tail = np.concatenate([np.cumsum((s * s)[::-1])[::-1], [0.0]])
    keep = int(np.nonzero(tail <= epsilon**2 * total)[0][0])
    return LowRankBlock(u[:, :keep] * s[:keep], vt[:keep].T)


def aca_on_block(block: np.ndarray, epsilon: float, k_max=None) -> LowRankBlock:
    """Partial-pivoting ACA driven from an explicit array (testing helper)."""
    return aca_partial(DenseGenerator(block), epsilon, k_max)
