"""Krylov solvers driven by matrix-vector products."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    breakdown: bool = False
    history: list = field(default_factory=list)
    time: float = 0.0
    method: str = ""

    def to_dict(self):
        return {
            "method": self.method,
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "converged": bool(self.converged),
            "breakdown": bool(self.breakdown),
            "time": float(self.time),
        }


def _as_op(A):
    if callable(A) and not hasattr(A, "matvec"):
        return A
    if hasattr(A, "matvec"):
        return A.matvec
    M = np.asarray(A)
    return lambda x: M @ x


def _as_prec(M):
    if M is None:
        return lambda r: r
    if hasattr(M, "solve"):
        return M.solve
    if callable(M):
        return M
    Mi = np.asarray(M)
    return lambda r: Mi @ r


def pcg(A, precond, b, tol: float = 1e-10, max_iter: int = 1000, x0=None):
    """Preconditioned conjugate gradients.

    Stops when ``||b - A x|| <= tol ||b||`` (recursively updated residual).
    A non-positive curvature ``p.Ap <= 0`` or ``r.z <= 0`` stops the
    iteration with ``breakdown=True``.
    """
    t0 = time.perf_counter()
    op, prec = _as_op(A), _as_prec(precond)
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, True, method="pcg")
    r = b - op(x) if x0 is not None else b.copy()
    hist = [np.linalg.norm(r) / bnorm]
    if hist[-1] <= tol:
        return x, SolveReport(0, hist[-1], True, history=hist, method="pcg")
    z = prec(r)
    rz = r @ z
    p = z.copy()
    breakdown = False
    it = 0
    while it < max_iter:
        if not rz > 0:
            breakdown = True
            break
        Ap = op(p)
        curv = p @ Ap
        if not curv > 0:
            breakdown = True
            break
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Ap
        it += 1
        hist.append(np.linalg.norm(r) / bnorm)
        if hist[-1] <= tol:
            break
        z = prec(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    rep = SolveReport(it, hist[-1], hist[-1] <= tol, breakdown, hist, time.perf_counter() - t0, "pcg")
    return x, rep


def gmres(A, precond, b, tol: float = 1e-8, restart: int = 50, max_iter: int = 1000, x0=None):
    """Restarted GMRES with right preconditioning.

    The stopping test is on the true (unpreconditioned) relative residual.
    ``max_iter`` counts inner iterations over all cycles.
    """
    t0 = time.perf_counter()
    op, prec = _as_op(A), _as_prec(precond)
    b = np.asarray(b, dtype=float)
    n = b.size
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, True, method="gmres")
    hist = []
    total = 0
    m = min(restart, n)
    while True:
        r = b - op(x)
        beta = np.linalg.norm(r)
        hist.append(beta / bnorm)
        if beta / bnorm <= tol or total >= max_iter:
            break
        Q = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        Q[0] = r / beta
        Z = np.zeros((m, n))
        k_done = 0
        for k in range(m):
            Z[k] = prec(Q[k])
            w = op(Z[k])
            for i in range(k + 1):  # modified Gram-Schmidt
                H[i, k] = w @ Q[i]
                w = w - H[i, k] * Q[i]
            H[k + 1, k] = np.linalg.norm(w)
            if H[k + 1, k] > 0:
                Q[k + 1] = w / H[k + 1, k]
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            cs[k], sn[k] = (1.0, 0.0) if denom == 0 else (H[k, k] / denom, H[k + 1, k] / denom)
            H[k, k] = cs[k] * H[k, k] + sn[k] * H[k + 1, k]
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            total += 1
            k_done = k + 1
            hist.append(abs(g[k + 1]) / bnorm)
            if abs(g[k + 1]) / bnorm <= tol or total >= max_iter or H[k, k] == 0:
                break
        y = np.linalg.solve(np.triu(H[:k_done, :k_done]), g[:k_done]) if k_done else np.zeros(0)
        x = x + Z[:k_done].T @ y
        if abs(g[k_done]) / bnorm <= tol:
            # confirm with the true residual on the next pass
            r = b - op(x)
            res = np.linalg.norm(r) / bnorm
            hist.append(res)
            if res <= tol:
                break
        if total >= max_iter:
            r = b - op(x)
            hist.append(np.linalg.norm(r) / bnorm)
            break
    res = hist[-1]
    rep = SolveReport(total, float(res), res <= tol, False, hist, time.perf_counter() - t0, "gmres")
    return x, rep
