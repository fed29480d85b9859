"""Periodic Laplace Green's function of the unit cell (-1/2, 1/2)^3.

``G_per`` solves ``-Lap G = delta - 1`` with periodic boundary conditions.
Near the cell it is represented as

    G_per(x) = sum_images G_inf(x + m) + |x|^2 / 6 + sum_{l,m} beta_l^m Phi_l^m(x) + c

where ``G_inf = 1 / (4 pi |x|)``, the image sum runs over the 27 cells
``m in {-1, 0, 1}^3`` ("image" variant) or over ``m = 0`` only ("plain"
variant), and ``Phi_l^m`` are real regular solid harmonics of degree
``l <= L``. The coefficients minimise, in the least-squares sense, the jump
of the value and of the normal derivative across opposite faces sampled at
Gauss points. ``c`` fixes the additive gauge.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

FOUR_PI = 4.0 * np.pi
IMAGE_SHIFTS = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=3)))
GAUGE_POINT = np.array([0.25, 0.25, 0.25])
VARIANTS = ("plain", "image")


class GreenFitError(RuntimeError):
    """Rank-deficient least-squares system (too few boundary samples)."""


# ---------------------------------------------------------------------------
# real solid harmonics as polynomials


def harmonic_index(l: int, m: int) -> int:
    return l * l + l + m


@lru_cache(maxsize=None)
def _monomials(L: int) -> np.ndarray:
    """Exponent triples (a, b, c) with a + b + c <= L."""
    return np.array([(a, b, d - a - b) for d in range(L + 1) for a in range(d, -1, -1)
                     for b in range(d - a, -1, -1)], dtype=int)


@lru_cache(maxsize=None)
def _harmonic_coefficients(L: int) -> np.ndarray:
    """Coefficients (n_monomials, (L+1)^2) of the real solid harmonics.

    The complex harmonics ``M_l^m = r^l P_l^m(cos t) e^{i m p} / (l+m)!``
    follow the two-term recurrences of multipole codes; scaling by
    ``sqrt((l-m)! (l+m)!)`` gives ``r^l sqrt(4 pi / (2l+1)) Y_l^m``. Real
    harmonics are ``Re`` (m > 0) and ``Im`` (m < 0) times sqrt(2).
    """
    n = L + 1
    shape = (n + 1, n + 1, n + 1)

    def mul_x(P):
        Q = np.zeros(shape, complex)
        Q[1:] = P[:-1]
        return Q

    def mul_y(P):
        Q = np.zeros(shape, complex)
        Q[:, 1:] = P[:, :-1]
        return Q

    def mul_z(P):
        Q = np.zeros(shape, complex)
        Q[:, :, 1:] = P[:, :, :-1]
        return Q

    def mul_r2(P):
        Q = np.zeros(shape, complex)
        Q[2:] += P[:-2]
        Q[:, 2:] += P[:, :-2]
        Q[:, :, 2:] += P[:, :, :-2]
        return Q

    one = np.zeros(shape, complex)
    one[0, 0, 0] = 1.0
    M = {(0, 0): one}
    for l in range(1, n):
        M[l, l] = -(mul_x(M[l - 1, l - 1]) + 1j * mul_y(M[l - 1, l - 1])) / (2 * l)
        for m in range(l):
            prev2 = M.get((l - 2, m))
            t = (2 * l - 1) * mul_z(M[l - 1, m])
            if prev2 is not None:
                t = t - mul_r2(prev2)
            M[l, m] = t / (l * l - m * m)
    mons = _monomials(L)
    C = np.zeros((len(mons), n * n))
    for l in range(n):
        for m in range(l + 1):
            P = M[l, m] * math.sqrt(math.factorial(l - m) * math.factorial(l + m))
            vals = P[mons[:, 0], mons[:, 1], mons[:, 2]]
            if m == 0:
                C[:, harmonic_index(l, 0)] = vals.real
            else:
                C[:, harmonic_index(l, m)] = math.sqrt(2.0) * vals.real
                C[:, harmonic_index(l, -m)] = math.sqrt(2.0) * vals.imag
    return C


@lru_cache(maxsize=None)
def _derivative_maps(L: int):
    """Matrices D_k with coeffs(d/dx_k p) = D_k @ coeffs(p) in the monomial basis."""
    mons = _monomials(L)
    pos = {tuple(e): i for i, e in enumerate(mons)}
    out = []
    for k in range(3):
        D = np.zeros((len(mons), len(mons)))
        for i, e in enumerate(mons):
            if e[k] > 0:
                f = list(e)
                f[k] -= 1
                D[pos[tuple(f)], i] = e[k]
        out.append(D)
    return out


def _monomial_matrix(x: np.ndarray, L: int) -> np.ndarray:
    mons = _monomials(L)
    p = np.empty((3, len(x), L + 1))
    p[:, :, 0] = 1.0
    for k in range(1, L + 1):
        p[:, :, k] = p[:, :, k - 1] * x.T
    return p[0][:, mons[:, 0]] * p[1][:, mons[:, 1]] * p[2][:, mons[:, 2]]


def _check_lm(l, m):
    if l < 0 or abs(m) > l:
        raise ValueError(f"invalid harmonic indices (l={l}, m={m})")


def solid_harmonic(l: int, m: int, x) -> np.ndarray:
    """Real regular solid harmonic ``Phi_l^m`` at points x (..., 3)."""
    _check_lm(l, m)
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, 3)
    v = _monomial_matrix(pts, l) @ _harmonic_coefficients(l)[:, harmonic_index(l, m)]
    return v.reshape(x.shape[:-1])


def solid_harmonic_grad(l: int, m: int, x) -> np.ndarray:
    """Gradient of ``Phi_l^m``, shape (..., 3)."""
    _check_lm(l, m)
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, 3)
    c = _harmonic_coefficients(l)[:, harmonic_index(l, m)]
    mono = _monomial_matrix(pts, l)
    g = np.stack([mono @ (D @ c) for D in _derivative_maps(l)], axis=-1)
    return g.reshape(x.shape)


# ---------------------------------------------------------------------------
# explicit (singular) part and spectral reference


OUTER_SHIFTS = IMAGE_SHIFTS[np.any(IMAGE_SHIFTS != 0.0, axis=1)]


def _outer_shifts(variant: str) -> np.ndarray:
    return OUTER_SHIFTS if variant == "image" else np.zeros((0, 3))


def _images_value(x: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """sum_s 1 / (4 pi |x + s|)."""
    if len(shifts) == 0:
        return np.zeros(len(x))
    d = x[:, None, :] + shifts[None, :, :]
    return (1.0 / np.sqrt(np.einsum("nsk,nsk->ns", d, d))).sum(axis=1) / FOUR_PI


def _images_grad(x: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Gradient of :func:`_images_value`."""
    if len(shifts) == 0:
        return np.zeros_like(x)
    d = x[:, None, :] + shifts[None, :, :]
    r2 = np.einsum("nsk,nsk->ns", d, d)
    return -np.einsum("nsk,ns->nk", d, 1.0 / (r2 * np.sqrt(r2))) / FOUR_PI


def _explicit(x: np.ndarray, variant: str) -> np.ndarray:
    shifts = IMAGE_SHIFTS if variant == "image" else np.zeros((1, 3))
    return np.einsum("ij,ij->i", x, x) / 6.0 + _images_value(x, shifts)


def _explicit_grad(x: np.ndarray, variant: str) -> np.ndarray:
    shifts = IMAGE_SHIFTS if variant == "image" else np.zeros((1, 3))
    return x / 3.0 + _images_grad(x, shifts)


@lru_cache(maxsize=4)
def _spectral_weights(K: int):
    k = np.arange(-K, K + 1)
    s = K / 6.0
    k2 = k[:, None, None] ** 2 + k[None, :, None] ** 2 + k[None, None, :] ** 2
    with np.errstate(divide="ignore"):
        W = np.exp(-k2 / (2.0 * s * s)) / (4.0 * np.pi**2 * k2)
    W[K, K, K] = 0.0
    return k, W, s


def fourier_reference(x, K_max: int = 64) -> np.ndarray:
    """Zero-mean periodic Green's function from its Fourier series.

    ``sum_{k != 0} w(k) cos(2 pi k.x) / (4 pi^2 |k|^2)`` over
    ``|k_i| <= K_max`` with the Gaussian damping ``w = exp(-|k|^2 / 2s^2)``,
    ``s = K_max / 6``. The damped sum is G_per convolved with a Gaussian of
    standard deviation ``h = 1 / (2 pi s)``; since ``Lap G_per = 1`` away
    from the lattice points, this equals ``G_per + h^2 / 2`` there, and the
    shift is removed. Valid for points several ``h`` away from the origin.
    Intended as a test oracle only.
    """
    if K_max < 8:
        raise ValueError("K_max must be at least 8")
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, 3)
    k, W, s = _spectral_weights(int(K_max))
    h = 1.0 / (2.0 * np.pi * s)
    out = np.empty(len(pts))
    for n, p in enumerate(pts):
        e = [np.exp(2j * np.pi * k * p[j]) for j in range(3)]
        out[n] = np.real(np.einsum("a,b,c,abc->", e[0], e[1], e[2], W)) - 0.5 * h * h
    return out.reshape(x.shape[:-1])


# ---------------------------------------------------------------------------
# least-squares fit


def _face_points(nodes: np.ndarray):
    """Points on the faces x_k = -1/2 for k = 0, 1, 2 (tangential grid ``nodes``)."""
    u, v = np.meshgrid(nodes, nodes, indexing="ij")
    u, v = u.ravel(), v.ravel()
    out = []
    for k in range(3):
        p = np.empty((len(u), 3))
        t = [j for j in range(3) if j != k]
        p[:, k] = -0.5
        p[:, t[0]] = u
        p[:, t[1]] = v
        out.append(p)
    return out


def default_quadrature_order(L: int) -> int:
    """Smallest Gauss order with at least 4x more rows than coefficients."""
    q = 1
    while 6 * q * q < 4 * (L + 1) ** 2:
        q += 1
    return q


@dataclass
class PeriodicGreenExpansion:
    L: int
    variant: str
    beta: np.ndarray
    gauge_constant: float = 0.0
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.shape != ((self.L + 1) ** 2,):
            raise ValueError("coefficient count must be (L+1)^2")
        C = _harmonic_coefficients(self.L)
        self._c = C @ self.beta
        # derivatives have degree L-1, whose monomials come first in the ordering
        nlow = len(_monomials(self.L - 1)) if self.L else 0
        self._dc = np.stack([D @ self._c for D in _derivative_maps(self.L)], axis=1)[:nlow]

    def regular(self, x):
        pts = np.asarray(x, dtype=float).reshape(-1, 3)
        return _monomial_matrix(pts, self.L) @ self._c

    def regular_grad(self, x):
        pts = np.asarray(x, dtype=float).reshape(-1, 3)
        if self.L == 0:
            return np.zeros((len(pts), 3))
        return _monomial_matrix(pts, self.L - 1) @ self._dc

    def smooth_value(self, x):
        """Representation minus the central ``1 / (4 pi |x|)`` term (finite at 0)."""
        pts = np.asarray(x, dtype=float).reshape(-1, 3)
        return (np.einsum("ij,ij->i", pts, pts) / 6.0 + self.regular(pts) + self.gauge_constant
                + _images_value(pts, _outer_shifts(self.variant)))

    def smooth_grad(self, x):
        """Gradient of :meth:`smooth_value`."""
        pts = np.asarray(x, dtype=float).reshape(-1, 3)
        return pts / 3.0 + self.regular_grad(pts) + _images_grad(pts, _outer_shifts(self.variant))

    def value(self, x):
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, 3)
        v = _explicit(pts, self.variant) + self.regular(pts) + self.gauge_constant
        return v.reshape(x.shape[:-1])

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, 3)
        g = _explicit_grad(pts, self.variant) + self.regular_grad(pts)
        return g.reshape(x.shape)

    def to_dict(self):
        return {"L": self.L, "variant": self.variant, "beta": self.beta.tolist(),
                "gauge_constant": self.gauge_constant}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["L"]), d["variant"], np.asarray(d["beta"]), float(d.get("gauge_constant", 0.0)))

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))


def _singular(x):
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    return np.any(np.all(np.abs(x - np.round(x)) == 0.0, axis=1))


def eval_gper(exp: PeriodicGreenExpansion, x):
    """Represented ``G_per`` at points inside the cell."""
    if _singular(x):
        raise ValueError("evaluation at a lattice point")
    return exp.value(x)


def grad_gper(exp: PeriodicGreenExpansion, x):
    """Analytic gradient of the representation, shape (..., 3)."""
    if _singular(x):
        raise ValueError("evaluation at a lattice point")
    return exp.grad(x)


def periodicity_defect(exp: PeriodicGreenExpansion, n: int = 24) -> dict:
    """Jump of value and normal derivative across the three face pairs.

    Sampled on an ``n x n`` midpoint grid per face (independent of the
    fitting nodes). Returns the maximum jumps and ``defect`` = their max.
    """
    nodes = (np.arange(n) + 0.5) / n - 0.5
    dv = dd = 0.0
    for k, p in enumerate(_face_points(nodes)):
        q = p.copy()
        q[:, k] = 0.5
        dv = max(dv, float(np.abs(exp.value(q) - exp.value(p)).max()))
        dd = max(dd, float(np.abs(exp.grad(q)[:, k] - exp.grad(p)[:, k]).max()))
    return {"value": dv, "derivative": dd, "defect": max(dv, dd)}


def fit_expansion(L: int = 9, q: int | None = None, variant: str = "image",
                  gauge: str = "fourier", K_max: int = 64) -> PeriodicGreenExpansion:
    """Least-squares fit of the regular part on the cell faces.

    Rows: value jump and normal-derivative jump at the ``q x q`` Gauss-Legendre
    points of each face pair, weighted by the square roots of the product
    Gauss weights (a discrete L2 norm) with equal weight on both kinds. The
    constant harmonic is left out (it does not affect periodicity) and set
    afterwards by the gauge: ``"fourier"`` matches :func:`fourier_reference`
    at (1/4, 1/4, 1/4), ``"none"`` leaves it at zero.
    """
    if L < 0:
        raise ValueError("L must be non-negative")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    q = default_quadrature_order(L) if q is None else int(q)
    ncoef = (L + 1) ** 2
    if 6 * q * q < 2 * ncoef:
        raise GreenFitError(f"q={q} gives {6 * q * q} rows for {ncoef} coefficients")
    nodes, weights = np.polynomial.legendre.leggauss(q)
    nodes = 0.5 * nodes
    w = np.sqrt(np.outer(weights, weights).ravel() * 0.25)
    C = _harmonic_coefficients(L)
    Ds = _derivative_maps(L)
    rows, rhs = [], []
    for k, p in enumerate(_face_points(nodes)):
        qp = p.copy()
        qp[:, k] = 0.5
        mp, mq = _monomial_matrix(p, L), _monomial_matrix(qp, L)
        rows.append(w[:, None] * ((mq - mp) @ C))
        rhs.append(-w * (_explicit(qp, variant) - _explicit(p, variant)))
        Dk = Ds[k] @ C
        rows.append(w[:, None] * ((mq - mp) @ Dk))
        rhs.append(-w * (_explicit_grad(qp, variant)[:, k] - _explicit_grad(p, variant)[:, k]))
    A = np.vstack(rows)[:, 1:]
    b = np.concatenate(rhs)
    if A.shape[1]:
        sol, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    else:
        sol, rank, cond = np.zeros(0), 0, 1.0
    if rank < A.shape[1]:
        raise GreenFitError(f"rank {rank} < {A.shape[1]}: increase the quadrature order")
    beta = np.concatenate([[0.0], sol])
    exp = PeriodicGreenExpansion(L, variant, beta)
    if gauge == "fourier":
        exp.gauge_constant = float(fourier_reference(GAUGE_POINT, K_max) - exp.value(GAUGE_POINT))
    elif gauge != "none":
        raise ValueError("gauge must be 'fourier' or 'none'")
    exp.report = {"q": q, "rows": int(A.shape[0]), "rank": int(rank),
                  "condition": cond,
                  "residual": float(np.linalg.norm(A @ sol - b)),
                  **periodicity_defect(exp)}
    return exp


def fit_report_csv(expansions) -> str:
    """CSV with one row per fitted expansion."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["L", "variant", "q", "defect", "value_defect", "derivative_defect"])
    for e in expansions:
        r = e.report
        wr.writerow([e.L, e.variant, r.get("q"), r.get("defect"), r.get("value"), r.get("derivative")])
    return buf.getvalue()
