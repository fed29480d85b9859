"""Equivalent inclusion method for spherical inclusions in a spherical cell.

The polarization is taken constant in each inclusion, giving a 3n x 3n
Galerkin system ``A tau = b`` whose 3x3 blocks are known in closed form:

    A_ba = delta_ba f_b / (k_b - k0) I
           + int_b int_a Gamma(x, y)          (pairwise term)
           - f_b f_a / (3 k0) I               (cell correction)
    b_b  = f_b E

with ``Gamma(x, y) = k0^-1 grad_y grad_x G(x, y)`` for the free-space
Laplace Green's function ``G = 1 / (4 pi |x - y|)``. For disjoint balls the
pairwise term is ``f_a f_b Gamma(c_a, c_b)`` (mean-value property); for a
ball with itself it is ``f / (3 k0) I``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .hmatrix import (EntryGenerator, HLUError, assemble, build_block_tree, build_cluster_tree,
                      gmres, h_lu, pcg, stats)
from .microstructure import Microstructure, Sphere

log = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi


class EimError(RuntimeError):
    """Solver failure (non-convergence after the GMRES fallback)."""


def gamma_inf(x, y, kappa0: float = 1.0) -> np.ndarray:
    """Free-space fundamental operator, (..., 3, 3) for broadcastable x, y.

    ``(I - 3 rr^T/|r|^2) / (4 pi k0 |r|^3)`` with ``r = x - y``.
    """
    r = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d2 = np.einsum("...i,...i->...", r, r)
    if np.any(d2 == 0.0):
        raise ValueError("gamma_inf is singular at coincident points")
    d = np.sqrt(d2)
    out = -3.0 * r[..., :, None] * r[..., None, :] / d2[..., None, None]
    out = out + np.eye(3)
    return out / (FOUR_PI * kappa0 * (d2 * d)[..., None, None])


def pairwise_interaction(alpha: Sphere, beta: Sphere, kappa0: float = 1.0) -> np.ndarray:
    """``int_alpha int_beta Gamma(x, y) dx dy`` for two balls."""
    if alpha == beta:
        return alpha.volume / (3.0 * kappa0) * np.eye(3)
    d = np.linalg.norm(np.subtract(alpha.center, beta.center))
    if d <= alpha.radius + beta.radius:
        raise ValueError("distinct inclusions overlap")
    return alpha.volume * beta.volume * gamma_inf(alpha.center, beta.center, kappa0)


def domain_correction(alpha: Sphere, beta: Sphere, domain_radius: float, kappa0: float = 1.0,
                      domain_center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """``-f_beta int_alpha dx int_Omega Gamma(x, y) dy`` for a ball Omega.

    The inner integral over a ball that contains x equals ``I / (3 k0)``.
    """
    for s in (alpha, beta):
        if np.linalg.norm(np.subtract(s.center, domain_center)) + s.radius > domain_radius:
            raise ValueError("inclusion is not inside the domain ball")
    return -alpha.volume * beta.volume / (3.0 * kappa0) * np.eye(3)


@dataclass
class EimProblem:
    """Inclusions in a ball cell, reference medium ``kappa0`` (matrix by default).

    ``volume_normalized`` divides the cell-correction term by the cell
    volume (subtracting the mean polarization instead of its integral); the
    two agree on a unit-volume cell.
    """

    microstructure: Microstructure
    kappa0: float | None = None
    E: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    volume_normalized: bool = False

    def __post_init__(self):
        ms = self.microstructure
        if ms.domain.kind != "ball":
            raise ValueError("the equivalent inclusion method needs a ball domain")
        if self.kappa0 is None:
            self.kappa0 = ms.kappa_matrix
        if not self.kappa0 > 0:
            raise ValueError("kappa0 must be positive")
        self.E = np.asarray(self.E, dtype=float).reshape(3)
        if len(ms) and np.any(ms.kappas == self.kappa0):
            raise ValueError("every inclusion needs kappa != kappa0")

    @property
    def n(self) -> int:
        return len(self.microstructure)

    @property
    def correction_scale(self) -> float:
        return 1.0 / self.microstructure.domain.volume if self.volume_normalized else 1.0

    def rhs(self, E=None) -> np.ndarray:
        E = self.E if E is None else np.asarray(E, dtype=float)
        return (self.microstructure.volumes[:, None] * E[None, :]).ravel()


class EimGenerator(EntryGenerator):
    """Scalar entries of A over indices ``3 * inclusion + component``."""

    def __init__(self, problem: EimProblem):
        ms = problem.microstructure
        self.centers = ms.centers
        self.f = ms.volumes
        self.k0 = float(problem.kappa0)
        self.diag = self.f / (ms.kappas - self.k0) + self.f / (3.0 * self.k0)
        self.corr = problem.correction_scale / (3.0 * self.k0)
        # per-dof copies used by the single-row path
        self._x = np.repeat(self.centers, 3, axis=0)
        self._f = np.repeat(self.f, 3)
        self._comp = np.tile(np.arange(3), len(ms))
        self._inc = np.repeat(np.arange(len(ms)), 3)
        super().__init__((3 * len(ms), 3 * len(ms)))

    def _row(self, p: int, cols):
        a, i = divmod(int(p), 3)
        r = self.centers[a] - self._x[cols]
        d2 = np.einsum("qk,qk->q", r, r)
        j = self._comp[cols]
        kron = (j == i).astype(float)
        same = self._inc[cols] == a
        d2[same] = 1.0
        gam = (kron - 3.0 * r[:, i] * r[np.arange(len(cols)), j] / d2) / (FOUR_PI * self.k0 * d2 * np.sqrt(d2))
        ff = self.f[a] * self._f[cols]
        out = ff * (gam - self.corr * kron)
        if same.any():
            out[same] = (self.diag[a] - self.corr * ff[same]) * kron[same]
        return out

    def _block(self, rows, cols):
        # A is symmetric, so a single column is computed as a row
        if len(rows) == 1:
            return self._row(rows[0], cols)[None, :]
        if len(cols) == 1:
            return self._row(cols[0], rows)[:, None]
        a, i = np.divmod(rows, 3)
        b, j = np.divmod(cols, 3)
        fa, fb = self.f[a][:, None], self.f[b][None, :]
        c = self.centers
        d2 = np.zeros((len(a), len(b)))
        for k in range(3):
            d2 += (c[a, k][:, None] - c[b, k][None, :]) ** 2
        same = a[:, None] == b[None, :]
        d2s = np.where(same, 1.0, d2)
        ri = c[a, i][:, None] - c[b[None, :], i[:, None]]
        rj = c[a[:, None], j[None, :]] - c[b, j][None, :]
        kron = (i[:, None] == j[None, :]).astype(float)
        gam = (kron - 3.0 * ri * rj / d2s) / (FOUR_PI * self.k0 * d2s * np.sqrt(d2s))
        out = np.where(same, 0.0, fa * fb * gam)
        out += np.where(same, self.diag[a][:, None], 0.0) * kron
        out -= self.corr * fa * fb * kron
        return out


def eim_generator(problem: EimProblem) -> EimGenerator:
    return EimGenerator(problem)


def assemble_dense(problem: EimProblem) -> np.ndarray:
    """Direct 3x3-block assembly from the per-pair formulas (reference path)."""
    ms = problem.microstructure
    spheres = ms.spheres
    n = len(spheres)
    k0 = problem.kappa0
    A = np.zeros((3 * n, 3 * n))
    R = ms.domain.radius
    for b, sb in enumerate(spheres):
        for a, sa in enumerate(spheres):
            blk = pairwise_interaction(sa, sb, k0)
            blk = blk + problem.correction_scale * domain_correction(sa, sb, R, k0)
            if a == b:
                blk = blk + sb.volume / (sb.kappa - k0) * np.eye(3)
            A[3 * b:3 * b + 3, 3 * a:3 * a + 3] = blk
    return A


@dataclass
class SolverConfig:
    epsilon: float = 1e-3
    eta: float = 1.7
    leaf_size: int = 15
    epsilon_lu: float | None = None
    tol: float = 1e-10
    max_iter: int = 1000
    mode: str = "partial"
    precondition: bool = True


@dataclass
class PolarizationField:
    tau: np.ndarray  # (n, 3)
    report: dict = field(default_factory=dict)

    def to_dict(self):
        return {"tau": self.tau.tolist(), "report": self.report}


@dataclass
class EffectiveEstimate:
    tensor: np.ndarray
    volume_fraction: float

    @property
    def scalar(self) -> float:
        return float(np.trace(self.tensor) / 3.0)

    def to_dict(self):
        return {"keff": self.tensor.tolist(), "scalar": self.scalar,
                "volume_fraction": self.volume_fraction}


class EimSystem:
    """Compressed operator plus preconditioner, reusable across right-hand sides."""

    def __init__(self, problem: EimProblem, config: SolverConfig | None = None):
        self.problem = problem
        self.config = cfg = config or SolverConfig()
        t0 = time.perf_counter()
        ct = build_cluster_tree(problem.microstructure.centers, cfg.leaf_size)
        self.tree = build_block_tree(ct.expand(3), cfg.eta)
        self.H = assemble(EimGenerator(problem), self.tree, cfg.epsilon, mode=cfg.mode)
        self.lu = None
        if cfg.precondition:
            eps_lu = cfg.epsilon_lu if cfg.epsilon_lu is not None else max(cfg.epsilon, 1e-2)
            try:
                self.lu = h_lu(self.H, eps_lu)
                self.H.times["h_lu"] = self.lu.time
            except HLUError as exc:
                log.warning("H-LU failed (%s); solving without preconditioner", exc)
        self.setup_time = time.perf_counter() - t0

    def stats(self):
        return stats(self.H)

    def solve(self, E=None) -> PolarizationField:
        cfg = self.config
        b = self.problem.rhs(E)
        x, rep = pcg(self.H, self.lu, b, tol=cfg.tol, max_iter=cfg.max_iter)
        reports = [rep.to_dict()]
        if not rep.converged:
            log.info("CG stopped (breakdown=%s); switching to GMRES", rep.breakdown)
            x, rep = gmres(self.H, self.lu, b, tol=cfg.tol, max_iter=cfg.max_iter)
            reports.append(rep.to_dict())
        if not rep.converged:
            raise EimError(f"no convergence: {reports}")
        return PolarizationField(x.reshape(-1, 3), {"solves": reports})


def solve_eim(problem: EimProblem, epsilon: float = 1e-3, eta: float = 1.7,
              config: SolverConfig | None = None):
    """Polarization via H-matrix assembly, H-LU preconditioning and CG.

    Returns ``(PolarizationField, CompressionStats)``.
    """
    cfg = config or SolverConfig()
    cfg = SolverConfig(**{**cfg.__dict__, "epsilon": epsilon, "eta": eta})
    system = EimSystem(problem, cfg)
    out = system.solve()
    return out, system.stats()


def solve_dense(problem: EimProblem, E=None) -> PolarizationField:
    """Direct solve of the densely assembled system (reference)."""
    A = EimGenerator(problem).dense()
    return PolarizationField(np.linalg.solve(A, problem.rhs(E)).reshape(-1, 3))


def single_inclusion_tau(f: float, kappa1: float, kappa0: float, E=(1.0, 0.0, 0.0)):
    """Closed-form polarization for one inclusion of volume ``f`` in a unit cell."""
    return np.asarray(E, dtype=float) / (1.0 / (kappa1 - kappa0) + (1.0 - f) / (3.0 * kappa0))


def maxwell_garnett(phi: float, kappa1: float, kappa0: float) -> float:
    """Dilute (first-order) estimate ``k0 + 3 phi k0 (k1 - k0) / (k1 + 2 k0)``."""
    return kappa0 + 3.0 * phi * kappa0 * (kappa1 - kappa0) / (kappa1 + 2.0 * kappa0)


def effective_estimate(problem: EimProblem, taus) -> EffectiveEstimate:
    """``k_eff e_j = k0 e_j + |Omega|^-1 sum_a f_a tau_a(e_j)`` from three solves.

    ``taus`` holds the polarization fields for E = e1, e2, e3 in order.
    """
    taus = list(taus)
    if len(taus) != 3:
        raise ValueError("effective_estimate needs the three directional solves")
    ms = problem.microstructure
    K = problem.kappa0 * np.eye(3)
    for j, t in enumerate(taus):
        tau = t.tau if isinstance(t, PolarizationField) else np.asarray(t).reshape(-1, 3)
        K[:, j] += (ms.volumes[:, None] * tau).sum(0) / ms.domain.volume
    K = 0.5 * (K + K.T)
    return EffectiveEstimate(K, float(ms.volumes.sum() / ms.domain.volume))


def directional_solves(problem: EimProblem, config: SolverConfig | None = None, dense=False):
    """The three polarizations for E = e1, e2, e3 (one assembly)."""
    if dense:
        return [solve_dense(problem, e) for e in np.eye(3)], None
    system = EimSystem(problem, config)
    return [system.solve(e) for e in np.eye(3)], system


def results_json(problem: EimProblem, tau: PolarizationField, estimate=None, comp=None) -> str:
    d = {"tau": tau.tau.tolist()}
    if estimate is not None:
        d["keff"] = estimate.tensor.tolist()
        d["keff_scalar"] = estimate.scalar
    if comp is not None:
        d["stats"] = comp.to_dict()
    d["report"] = tau.report
    return json.dumps(d, indent=2)
