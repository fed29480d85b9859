"""Boundary element solver for the periodic corrector transmission problem.

The corrector ``u`` is written as a single-layer potential ``u = S sigma`` of
a piecewise constant density on the inclusion surfaces. The flux continuity
across the surfaces gives the second-kind equation

    (lam Id - K') sigma = E . n,     lam = (k_ext + k_int) / (2 (k_ext - k_int))

with ``K'`` the adjoint double-layer operator
``(K' s)(x) = int_Gamma grad G(x - y) . n(x) s(y) ds(y)``. Densities are
constant per flat panel (see :class:`KPrimeGenerator` for the quadrature);
``K'`` is compressed as an H-matrix while ``lam Id`` is
applied exactly.

Two literal alternatives are available for comparison: ``normal_at="y"``
takes the normal at the source point and ``contrast="printed"`` drops the
factor 2 in ``lam``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .eim import EffectiveEstimate
from .hmatrix import (EntryGenerator, HMatrix, assemble, build_block_tree, build_cluster_tree,
                      gmres, stats)
from .microstructure import TriangleMesh
from .pergreen import PeriodicGreenExpansion, fit_expansion

log = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
KERNELS = ("free", "periodic")


class BemError(RuntimeError):
    """GMRES did not converge."""


def _wrap(d):
    return d - np.rint(d)


# ---------------------------------------------------------------------------
# kernels


class _FreeKernel:
    period = None
    self_value = 0.0
    self_grad = np.zeros(3)

    def value(self, d):
        return 1.0 / (FOUR_PI * np.sqrt(np.einsum("...i,...i->...", d, d)))

    def grad(self, d):
        r = np.sqrt(np.einsum("...i,...i->...", d, d))
        return -d / (FOUR_PI * r**3)[..., None]

    def smooth_grad(self, d):
        return np.zeros(np.shape(d))

    def wrap(self, d):
        return d


class _PeriodicKernel:
    """``G_per`` on minimum-image differences.

    ``smooth_*`` drop the central free-space term; ``self_value`` and
    ``self_grad`` are their values at 0 (what survives on a flat self panel).
    """

    period = 1.0

    def __init__(self, expansion: PeriodicGreenExpansion):
        self.exp = expansion
        zero = np.zeros((1, 3))
        self.self_value = float(expansion.smooth_value(zero)[0])
        self.self_grad = expansion.smooth_grad(zero)[0]

    chunk = 16384  # points per evaluation pass (bounds temporary memory)

    def _flat(self, d, fn):
        d = np.asarray(d, dtype=float)
        pts = _wrap(d).reshape(-1, 3)
        if len(pts) <= self.chunk:
            out = fn(pts)
        else:
            out = np.concatenate([fn(pts[k:k + self.chunk]) for k in range(0, len(pts), self.chunk)])
        return out.reshape(d.shape[:-1] + out.shape[1:])

    def value(self, d):
        return self._flat(d, self.exp.value)

    def grad(self, d):
        return self._flat(d, self.exp.grad)

    def smooth_grad(self, d):
        return self._flat(d, self.exp.smooth_grad)

    def wrap(self, d):
        return _wrap(d)


def solid_angle(R: np.ndarray) -> np.ndarray:
    """Signed solid angle of triangles with vertices ``R[..., k, :]`` seen from 0.

    Positive when the triangle normal (right-hand rule) points away from the
    origin, i.e. ``int_T (y . n) / |y|^3 ds``.
    """
    r = np.linalg.norm(R, axis=-1)
    a, b, c = R[..., 0, :], R[..., 1, :], R[..., 2, :]
    num = np.einsum("...i,...i->...", a, np.cross(b, c))
    den = (r[..., 0] * r[..., 1] * r[..., 2] + np.einsum("...i,...i->...", a, b) * r[..., 2]
           + np.einsum("...i,...i->...", a, c) * r[..., 1] + np.einsum("...i,...i->...", b, c) * r[..., 0])
    return 2.0 * np.arctan2(num, den)


# ---------------------------------------------------------------------------
# problem


@dataclass
class BieProblem:
    """Transmission problem on the surfaces of ``mesh``.

    ``kernel`` is "free" (free-space Green's function) or "periodic" (unit
    cell (-1/2, 1/2)^3, fitted expansion; a default L=9 fit is made when
    ``expansion`` is None).
    """

    mesh: TriangleMesh
    kappa_int: float
    kappa_ext: float
    E: tuple = (1.0, 0.0, 0.0)
    kernel: str = "free"
    expansion: PeriodicGreenExpansion | None = None
    normal_at: str = "x"
    contrast: str = "jump"

    def __post_init__(self):
        if not (self.kappa_int > 0 and self.kappa_ext > 0):
            raise ValueError("diffusion coefficients must be positive")
        if self.kappa_int == self.kappa_ext:
            raise ValueError("kappa_int == kappa_ext: the contrast factor is undefined")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")
        if self.normal_at not in ("x", "y"):
            raise ValueError("normal_at must be 'x' or 'y'")
        if self.contrast not in ("jump", "printed"):
            raise ValueError("contrast must be 'jump' or 'printed'")
        if len(self.mesh) == 0:
            raise ValueError("empty mesh")
        self.E = np.asarray(self.E, dtype=float)
        if self.kernel == "periodic":
            if np.abs(self.mesh.vertices).max() >= 0.5:
                raise ValueError("periodic kernel: the mesh must lie strictly inside the cell")
            if self.expansion is None:
                self.expansion = fit_expansion(9)
            self._kernel = _PeriodicKernel(self.expansion)
        else:
            self._kernel = _FreeKernel()

    @property
    def contrast_factor(self) -> float:
        ke, ki = self.kappa_ext, self.kappa_int
        lam = (ke + ki) / (ke - ki)
        return 0.5 * lam if self.contrast == "jump" else lam

    @property
    def green(self):
        return self._kernel

    def rhs(self, E=None) -> np.ndarray:
        E = self.E if E is None else np.asarray(E, dtype=float)
        return self.mesh.normals @ E


class KPrimeGenerator(EntryGenerator):
    """Matrix of K' for piecewise constant densities.

    ``quadrature="galerkin"`` (default): entry (i, j) is the Galerkin entry
    ``(1/a_i) int_{P_i} int_{P_j} grad G(x - y) . n(x)`` with the outer
    integral by the one-point rule at the centroid of ``P_j`` after
    swapping the roles of the panels, so that the singular part reduces to
    the solid angle of the flat panel ``P_i`` seen from ``y_j``:

        K_ij = -(a_j / a_i) Omega_i(y_j) / (4 pi) + a_j grad G_s(x_i - y_j) . n_i

    where ``G_s`` is the smooth part of the kernel (zero in free space).
    ``quadrature="centroid"``: plain collocation ``a_j grad G(x_i - y_j) . n_i``.
    In both cases a flat self panel contributes only its smooth part.
    """

    def __init__(self, problem: BieProblem, quadrature: str = "galerkin"):
        if quadrature not in ("galerkin", "centroid"):
            raise ValueError("quadrature must be 'galerkin' or 'centroid'")
        m = problem.mesh
        self.c = m.centroids
        self.n = m.normals
        self.a = m.areas
        # vertex offsets from the centroid, (n, 3, 3)
        self.rel = m.vertices[m.triangles] - m.centroids[:, None, :]
        self.k = problem.green
        self.at_x = problem.normal_at == "x"
        self.quadrature = quadrature
        super().__init__((len(m), len(m)))
        self._self = self.a * (self.n @ self.k.self_grad)

    def _centroid(self, rows, cols, d):
        g = self.k.grad(d)
        nrm = self.n[rows][:, None, :] if self.at_x else self.n[cols][None, :, :]
        return np.einsum("ijk,ijk->ij", g, nrm) * self.a[cols][None, :]

    def _galerkin(self, rows, cols, d):
        w = self.k.wrap(d)
        if self.at_x:
            # panel i seen from y_j, scaled to the collocation form
            R = self.rel[rows][:, None] + w[:, :, None, :]
            out = -solid_angle(R) / FOUR_PI * (self.a[cols][None, :] / self.a[rows][:, None])
            nrm = self.n[rows][:, None, :]
        else:
            # literal form grad_x G(x_i - y) . n(y): panel j seen from x_i
            R = self.rel[cols][None, :] - w[:, :, None, :]
            out = solid_angle(R) / FOUR_PI
            nrm = self.n[cols][None, :, :]
        if self.k.period is not None:
            g = self.k.smooth_grad(d)
            out = out + np.einsum("ijk,ijk->ij", g, nrm) * self.a[cols][None, :]
        return out

    def _block(self, rows, cols):
        d = self.c[rows][:, None, :] - self.c[cols][None, :, :]
        same = rows[:, None] == cols[None, :]
        if same.any():
            d[same] = 0.25  # placeholder away from the singularity
        if self.quadrature == "galerkin":
            out = self._galerkin(rows, cols, d)
        else:
            out = self._centroid(rows, cols, d)
        if same.any():
            ii, jj = np.nonzero(same)
            out[ii, jj] = self._self[rows[ii]]
        return out


class SingleLayerGenerator(EntryGenerator):
    """Collocation matrix of S: ``int_{panel j} G(x_i - y) ds(y)``.

    Off-diagonal entries use the one-point rule; the self entry is the
    exact integral of ``1/(4 pi r)`` over the flat panel plus the regular
    periodic part times the area.
    """

    def __init__(self, problem: BieProblem):
        m = problem.mesh
        self.c = m.centroids
        self.a = m.areas
        self.k = problem.green
        super().__init__((len(m), len(m)))
        p = m.vertices[m.triangles]
        self._self = flat_panel_potential(p, self.c) / FOUR_PI + self.k.self_value * self.a

    def _block(self, rows, cols):
        d = self.c[rows][:, None, :] - self.c[cols][None, :, :]
        same = rows[:, None] == cols[None, :]
        if same.any():
            d[same] = 0.25
        out = self.k.value(d) * self.a[cols][None, :]
        if same.any():
            ii, jj = np.nonzero(same)
            out[ii, jj] = self._self[rows[ii]]
        return out


def flat_panel_potential(tri: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``int_T 1/|x - y| ds(y)`` for points ``x`` inside the plane of ``T``.

    Sum over the edges of ``h [asinh(t2/h) - asinh(t1/h)]`` with ``h`` the
    distance from x to the edge line and ``t1, t2`` the edge end points in a
    tangential coordinate. ``tri`` has shape (n, 3, 3), ``x`` (n, 3).
    """
    tri = np.asarray(tri, dtype=float)
    x = np.asarray(x, dtype=float)
    total = np.zeros(len(tri))
    for k in range(3):
        a, b = tri[:, k], tri[:, (k + 1) % 3]
        e = b - a
        L = np.linalg.norm(e, axis=1)
        t = e / L[:, None]
        t1 = np.einsum("ij,ij->i", a - x, t)
        t2 = t1 + L
        perp = (a - x) - t1[:, None] * t
        h = np.linalg.norm(perp, axis=1)
        ok = h > 1e-14 * L
        hh = np.where(ok, h, 1.0)
        total += np.where(ok, h * (np.arcsinh(t2 / hh) - np.arcsinh(t1 / hh)), 0.0)
    return total


def kprime_generator(problem: BieProblem, quadrature: str = "galerkin") -> KPrimeGenerator:
    return KPrimeGenerator(problem, quadrature)


# ---------------------------------------------------------------------------
# solution


@dataclass
class BemConfig:
    epsilon: float = 1e-3
    eta: float = 1.7
    leaf_size: int = 32
    tol: float = 1e-8
    restart: int = 50
    max_iter: int = 1000
    dense: bool = False  # bypass compression (small validation problems)
    quadrature: str = "galerkin"

    def __post_init__(self):
        if self.epsilon <= 0 or self.tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.quadrature not in ("galerkin", "centroid"):
            raise ValueError("quadrature must be 'galerkin' or 'centroid'")


@dataclass
class DensityField:
    sigma: np.ndarray
    E: np.ndarray
    report: dict = field(default_factory=dict)


class _DenseOp:
    def __init__(self, M):
        self.M = M

    def matvec(self, x):
        return self.M @ x

    def storage(self):
        return self.M.size


class BemSystem:
    """Assembled K' (H-matrix or dense) shared by several solves."""

    def __init__(self, problem: BieProblem, config: BemConfig | None = None):
        self.problem = problem
        self.config = config or BemConfig()
        cfg = self.config
        gen = KPrimeGenerator(problem, cfg.quadrature)
        t0 = time.perf_counter()
        if cfg.dense:
            self.K = _DenseOp(gen.dense())
            self.stats = {"n": gen.shape[0], "stored": int(gen.shape[0] ** 2),
                          "dense": int(gen.shape[0] ** 2), "ratio": 1.0}
        else:
            tree = build_cluster_tree(problem.mesh.centroids, cfg.leaf_size)
            bt = build_block_tree(tree, cfg.eta, period=problem.green.period)
            self.K: HMatrix = assemble(gen, bt, cfg.epsilon)
            self.stats = stats(self.K).to_dict()
        self.stats["kernel"] = problem.kernel
        self.stats.setdefault("times", {})["assembly"] = time.perf_counter() - t0
        self.lam = problem.contrast_factor

    def apply(self, x):
        return self.lam * x - self.K.matvec(x)

    def solve(self, E=None) -> DensityField:
        cfg = self.config
        E = self.problem.E if E is None else np.asarray(E, dtype=float)
        b = self.problem.rhs(E)
        sigma, rep = gmres(self.apply, None, b, tol=cfg.tol, restart=cfg.restart,
                           max_iter=cfg.max_iter)
        if not rep.converged:
            raise BemError(f"GMRES stopped at residual {rep.residual:.3e} after {rep.iterations} iterations")
        return DensityField(sigma, E, rep.to_dict())


def solve_bie(problem: BieProblem, epsilon: float = 1e-3, eta: float = 1.7, tol: float = 1e-8,
              config: BemConfig | None = None) -> DensityField:
    """Solve ``(lam Id - K') sigma = E . n`` with GMRES on the compressed K'."""
    cfg = config or BemConfig(epsilon=epsilon, eta=eta, tol=tol)
    system = BemSystem(problem, cfg)
    out = system.solve()
    out.report["stats"] = system.stats
    return out


# ---------------------------------------------------------------------------
# post-processing


@dataclass
class CorrectorValues:
    values: np.ndarray
    near: np.ndarray  # True where a panel centroid is closer than its diameter


def eval_corrector(problem: BieProblem, sigma, points, chunk: int = 256) -> CorrectorValues:
    """Single-layer potential ``sum_j sigma_j area_j G(x - y_j)`` at ``points``."""
    s = sigma.sigma if isinstance(sigma, DensityField) else np.asarray(sigma, dtype=float)
    m = problem.mesh
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    q = s * m.areas
    vals = np.empty(len(pts))
    near = np.zeros(len(pts), dtype=bool)
    k = problem.green
    for lo in range(0, len(pts), chunk):
        p = pts[lo:lo + chunk]
        d = p[:, None, :] - m.centroids[None, :, :]
        if k.period is not None:
            d = _wrap(d)
        r = np.linalg.norm(d, axis=2)
        near[lo:lo + chunk] = np.any(r < m.diameters[None, :], axis=1)
        r0 = r == 0.0
        if r0.any():
            d[r0] = 0.25
        g = k.value(d)
        g[r0] = 0.0
        vals[lo:lo + chunk] = g @ q
    if near.any():
        log.info("%d evaluation points lie within a panel diameter of the surface", int(near.sum()))
    return CorrectorValues(vals, near)


def surface_corrector(problem: BieProblem, sigma, config: BemConfig | None = None) -> np.ndarray:
    """Values of ``u = S sigma`` at the panel centroids (self panels integrated exactly)."""
    cfg = config or BemConfig()
    s = sigma.sigma if isinstance(sigma, DensityField) else np.asarray(sigma, dtype=float)
    gen = SingleLayerGenerator(problem)
    if cfg.dense:
        return gen.dense() @ s
    tree = build_cluster_tree(problem.mesh.centroids, cfg.leaf_size)
    bt = build_block_tree(tree, cfg.eta, period=problem.green.period)
    return assemble(gen, bt, cfg.epsilon).matvec(s)


def mesh_volume(mesh: TriangleMesh) -> float:
    """Volume enclosed by the (closed, outward oriented) mesh."""
    return float(np.sum(mesh.areas * np.einsum("ij,ij->i", mesh.centroids, mesh.normals)) / 3.0)


def effective_estimate_bem(problem: BieProblem, sigmas, config: BemConfig | None = None,
                           cell_volume: float = 1.0, method: str = "surface") -> EffectiveEstimate:
    """Effective tensor from three directional densities.

    ``method="surface"``:
    ``k_eff E = k_ext E + (k_int - k_ext) / |cell| [V E + int_Gamma u n ds]``
    with V the inclusion volume enclosed by the mesh and the surface
    integral by the centroid rule on ``u = S sigma``. At high contrast the
    bracket is a small difference of large terms.

    ``method="dipole"``: ``k_eff E = k_ext (E - int_Gamma sigma y ds / |cell|)``,
    which follows from the transmission conditions and needs no potential
    evaluation.
    """
    if len(sigmas) != 3:
        raise ValueError("three directional solves are required")
    if method not in ("surface", "dipole"):
        raise ValueError("method must be 'surface' or 'dipole'")
    m = problem.mesh
    V = mesh_volume(m)
    K = np.empty((3, 3))
    for j, s in enumerate(sigmas):
        E = s.E if isinstance(s, DensityField) else np.eye(3)[j]
        sig = s.sigma if isinstance(s, DensityField) else np.asarray(s, dtype=float)
        if method == "dipole":
            moment = ((sig * m.areas)[:, None] * m.centroids).sum(axis=0)
            K[:, j] = problem.kappa_ext * (E - moment / cell_volume)
        else:
            u = surface_corrector(problem, sig, config)
            flux = (m.normals * (u * m.areas)[:, None]).sum(axis=0)
            K[:, j] = problem.kappa_ext * E + (problem.kappa_int - problem.kappa_ext) * (V * E + flux) / cell_volume
    K = 0.5 * (K + K.T)
    return EffectiveEstimate(K, V / cell_volume)


def directional_solves(problem: BieProblem, config: BemConfig | None = None):
    """Densities for E = e1, e2, e3 sharing one assembly; returns (sigmas, system)."""
    system = BemSystem(problem, config)
    return [system.solve(e) for e in np.eye(3)], system


def sphere_density_constant(kappa_int: float, kappa_ext: float) -> float:
    """c in ``sigma = c E.n`` for an isolated sphere (exact transmission solution)."""
    return 3.0 * (kappa_ext - kappa_int) / (kappa_int + 2.0 * kappa_ext)


def slice_grid(axis: int = 2, offset: float = 0.0, n: int = 50, half: float = 0.5):
    """Points of an ``n x n`` grid on the plane ``x[axis] = offset``."""
    t = np.linspace(-half, half, n)
    u, v = np.meshgrid(t, t, indexing="ij")
    pts = np.zeros((n * n, 3))
    other = [k for k in range(3) if k != axis]
    pts[:, other[0]] = u.ravel()
    pts[:, other[1]] = v.ravel()
    pts[:, axis] = offset
    return pts


def field_csv(points, values: CorrectorValues) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["x", "y", "z", "u", "near_surface"])
    for p, u, nr in zip(points, values.values, values.near):
        wr.writerow([f"{p[0]:.8g}", f"{p[1]:.8g}", f"{p[2]:.8g}", f"{u:.10g}", int(nr)])
    return buf.getvalue()


def results_json(estimate: EffectiveEstimate, stats: dict, extra: dict | None = None) -> str:
    d = {"effective_tensor": estimate.tensor.tolist(), "scalar": estimate.scalar,
         "volume_fraction": estimate.volume_fraction, "stats": stats}
    if extra:
        d.update(extra)
    return json.dumps(d, indent=2)
