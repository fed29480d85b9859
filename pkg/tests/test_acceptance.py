"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records a PASS/FAIL line (printed in the terminal summary under
"acceptance criteria") before asserting.
"""

import time

import numpy as np
import pytest

from hmhom.bem import BemConfig, BemSystem, BieProblem, kprime_generator, solve_bie, sphere_density_constant
from hmhom.eim import (EimGenerator, EimProblem, EimSystem, SolverConfig, domain_correction,
                       directional_solves, effective_estimate, maxwell_garnett, pairwise_interaction,
                       single_inclusion_tau, solve_dense, solve_eim)
from hmhom.hmatrix import (SubGenerator, aca_full, aca_partial, assemble, build_block_tree,
                           build_cluster_tree, compress_dense, h_lu, pcg, stats)
from hmhom.microstructure import (Domain, Microstructure, Sphere, icosphere_mesh,
                                  mesh_microstructure, unit_volume_ball_radius)
from hmhom.pergreen import default_quadrature_order, eval_gper, fit_expansion, fourier_reference

from conftest import ball_microstructure, periodic_microstructure
from quadrature import domain_interaction, pair_interaction, self_interaction

EPSILONS = (1e-2, 1e-3, 1e-4)


def slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def eim_storage(ms, epsilon=1e-3, eta=1.7):
    cfg = SolverConfig(epsilon=epsilon, eta=eta, precondition=False)
    return EimSystem(EimProblem(ms), cfg).stats()


@pytest.fixture(scope="module")
def fixture200(ms200):
    problem = EimProblem(ms200)
    gen = EimGenerator(problem)
    tree = build_block_tree(build_cluster_tree(ms200.centers, 15).expand(3), 1.7)
    return problem, gen, gen.dense(), tree


def test_c01_operator_error(fixture200, criterion):
    _, gen, A, tree = fixture200
    errs = [np.linalg.norm(assemble(gen, tree, eps).to_dense() - A) / np.linalg.norm(A)
            for eps in EPSILONS]
    ok = all(e <= 3 * eps for e, eps in zip(errs, EPSILONS))
    criterion(1, ok, "relative Frobenius errors " + ", ".join(
        f"{e:.2e} (eps {eps:g})" for e, eps in zip(errs, EPSILONS)) + "; bound 3 eps")
    assert ok


def test_c02_solution_error_slope(fixture200, criterion):
    problem, gen, A, tree = fixture200
    b = problem.rhs()
    U = np.linalg.solve(A, b)
    errs = []
    for eps in EPSILONS:
        H = assemble(gen, tree, eps)
        x, rep = pcg(H, h_lu(H, max(eps, 1e-2)), b, tol=1e-13)
        assert rep.converged
        errs.append(np.linalg.norm(x - U) / np.linalg.norm(U))
    s = slope(EPSILONS, errs)
    ok = abs(s - 1.0) <= 0.3
    criterion(2, ok, f"solution errors {', '.join(f'{e:.2e}' for e in errs)}; slope {s:.3f} (1.0 +- 0.3)")
    assert ok


def test_c03_memory_scaling(criterion):
    sizes = (200, 500, 1000, 2000)
    st = [eim_storage(ball_microstructure(n)) for n in sizes]
    s = slope(sizes, [x.stored for x in st])
    ratio = st[-1].ratio
    ok = 1.2 <= s <= 1.8 and ratio < 0.5
    criterion(3, ok, f"storage slope {s:.3f} in [1.2, 1.8]; ratio at N=2000 {ratio:.4f} (< 0.5); "
              f"ratios {', '.join(f'{x.ratio:.3f}' for x in st)}")
    assert ok


def test_c04_eta_interior_minimum(criterion):
    ms = ball_microstructure(1000)
    mem = {eta: eim_storage(ms, eta=eta).stored for eta in (0.5, 1.7, 2.6)}
    ok = mem[1.7] <= mem[0.5] and mem[1.7] <= mem[2.6]
    criterion(4, ok, "stored " + ", ".join(f"eta={k}: {v}" for k, v in mem.items()))
    assert ok


def test_c05_aca_quality(criterion):
    # the 200-inclusion tree has only a dozen admissible blocks, so use N=1000
    problem = EimProblem(ball_microstructure(1000))
    gen = EimGenerator(problem)
    tree = build_block_tree(build_cluster_tree(problem.microstructure.centers, 15).expand(3), 1.7)
    perm = tree.rows.perm
    adm = sorted((b for b in tree.leaves() if b.kind == "admissible"),
                 key=lambda b: -b.shape[0] * b.shape[1])[:50]
    assert len(adm) == 50
    eps = 1e-6
    rank_ok = err_ok = True
    worst_rank = worst_err = 0.0
    for b in adm:
        rows, cols = perm[b.row.lo:b.row.hi], perm[b.col.lo:b.col.hi]
        M = gen.block(rows, cols)
        norm = np.linalg.norm(M)
        full = aca_full(M, eps)
        part = aca_partial(SubGenerator(gen, rows, cols), eps)
        svd_rank = compress_dense(M, eps).rank
        e_full = np.linalg.norm(full.dense() - M) / norm
        e_part = np.linalg.norm(part.dense() - M) / norm
        rank_ok &= full.rank <= 2 * svd_rank
        err_ok &= e_part <= 10 * e_full
        worst_rank = max(worst_rank, full.rank / max(svd_rank, 1))
        worst_err = max(worst_err, e_part / e_full if e_full > 0 else np.inf)
    ok = rank_ok and err_ok
    criterion(5, ok, f"max ACA-full/SVD rank {worst_rank:.2f} (<= 2); "
              f"max partial/full error {worst_err:.2f} (<= 10) over 50 blocks")
    assert ok


def test_c06_closed_form_integrals(criterion):
    rows = []
    for radius, k0 in ((0.3, 1.0), (0.1, 2.5)):
        s = Sphere((0.1, 0.0, 0.2), radius)
        closed = pairwise_interaction(s, s, k0)
        rows.append(np.abs(self_interaction(radius, k0) - closed).max() / np.abs(closed).max())
    a, b = Sphere((0.1, 0.2, -0.1), 0.15), Sphere((-0.2, 0.0, 0.1), 0.1)
    R = unit_volume_ball_radius()
    closed = domain_correction(a, b, R, 1.5)
    quad = -b.volume * domain_interaction(a.center, a.radius, R, 1.5)
    rows.append(np.abs(quad - closed).max() / np.abs(closed).max())
    rng = np.random.default_rng(2024)
    pair = []
    for _ in range(10):
        ra, rb = rng.uniform(0.05, 0.2, 2)
        v = rng.standard_normal(3)
        cb = (ra + rb) * rng.uniform(1.1, 3.0) * v / np.linalg.norm(v)
        closed = pairwise_interaction(Sphere((0, 0, 0), ra), Sphere(tuple(cb), rb))
        pair.append(np.linalg.norm(pair_interaction((0, 0, 0), ra, cb, rb) - closed)
                    / np.linalg.norm(closed))
    ok = max(rows) <= 1e-4 and max(pair) <= 1e-3
    criterion(6, ok, f"self/domain max relative error {max(rows):.1e} (<= 1e-4); "
              f"pairwise max {max(pair):.1e} (<= 1e-3, 10 pairs)")
    assert ok


def test_c07_single_inclusion_and_dilute_limit(criterion):
    R = unit_volume_ball_radius()

    def single(f, kappa=10.0):
        r = (3 * f / (4 * np.pi)) ** (1 / 3)
        return Microstructure(Domain("ball", R), (Sphere((0.05, -0.1, 0.0), r, kappa),))

    E = np.array([0.2, 1.0, -0.4])
    tau, _ = solve_eim(EimProblem(single(0.05), E=E), config=SolverConfig(tol=1e-14))
    exact = single_inclusion_tau(0.05, 10.0, 1.0, E)
    tau_err = np.abs(tau.tau[0] - exact).max() / np.abs(exact).max()
    errs = []
    for f in (0.01, 0.02, 0.04):
        p = EimProblem(single(f, 50.0))
        taus, _ = directional_solves(p, SolverConfig(tol=1e-14))
        errs.append(abs(effective_estimate(p, taus).scalar - maxwell_garnett(f, 50.0, 1.0)))
    order = [np.log2(errs[k + 1] / errs[k]) for k in range(2)]
    ok = tau_err <= 1e-10 and all(abs(o - 2.0) <= 0.2 for o in order)
    criterion(7, ok, f"tau relative error {tau_err:.1e} (<= 1e-10); Maxwell-Garnett gaps "
              f"{', '.join(f'{e:.2e}' for e in errs)}, observed orders "
              f"{', '.join(f'{o:.2f}' for o in order)} (2 expected)")
    assert ok


def test_c08_periodic_green_convergence(criterion):
    degrees = (2, 4, 6, 8, 9)
    q = default_quadrature_order(max(degrees))
    fits = {L: fit_expansion(L, q=q) for L in degrees}
    d = [fits[L].report["defect"] for L in degrees]
    decreasing = all(b < a for a, b in zip(d, d[1:]))
    pts = np.random.default_rng(8).uniform(-0.45, 0.45, (20, 3))
    agree = float(np.abs(eval_gper(fits[9], pts) - fourier_reference(pts)).max())
    plain = fit_expansion(9, q=q, variant="plain").report["defect"]
    ok = decreasing and agree <= 1e-5 and d[-1] <= plain
    criterion(8, ok, f"defects (q={q}) " + ", ".join(f"L={L}: {x:.4g}" for L, x in zip(degrees, d))
              + f"; strictly decreasing {decreasing}; oracle gap {agree:.1e} (<= 1e-5); "
              f"plain L=9 defect {plain:.3g}")
    assert ok


def test_c09_bem_sphere_validation(criterion):
    mesh = icosphere_mesh(Sphere((0.0, 0.0, 0.0), 1.0), 3)
    p = BieProblem(mesh, 100.0, 1.0, E=(0.0, 0.0, 1.0))
    K = kprime_generator(p).dense()
    rows = K.sum(axis=1)
    orient = np.sign(rows.mean())
    row_err = np.abs(rows - orient * 0.5).max() / 0.5
    v = mesh.normals[:, 2]
    w = mesh.areas * v
    eig = w @ (K @ v) / (w @ v)
    eig_err = abs(eig - orient / 6) / (1 / 6)
    c = sphere_density_constant(100.0, 1.0)
    s = solve_bie(p, config=BemConfig(dense=True, tol=1e-12)).sigma
    dens_err = abs((w @ s) / (w @ v) / c - 1.0)
    ok = eig_err <= 0.03 and dens_err <= 0.03 and row_err <= 0.02
    criterion(9, ok, f"l=1 eigenvalue {eig:+.5f} vs {orient / 6:+.5f} ({eig_err:.2%}); density "
              f"constant error {dens_err:.2%}; row-sum error {row_err:.2%} (level 3, 1280 panels)")
    assert ok


def test_c10_bem_scaling(criterion):
    ms = periodic_microstructure(16, phi=0.2, seed=1, min_gap=0.02)
    green = fit_expansion(9)
    cfg = BemConfig()
    stored, panels, times = [], [], []
    for level in (1, 2, 3):
        mesh = mesh_microstructure(ms, level)
        t0 = time.perf_counter()
        system = BemSystem(BieProblem(mesh, 100.0, 1.0, kernel="periodic", expansion=green), cfg)
        times.append(time.perf_counter() - t0)
        stored.append(system.stats["stored"])
        panels.append(len(mesh))
        if level == 2:
            free = BemSystem(BieProblem(mesh, 100.0, 1.0, kernel="free"), cfg).stats["stored"]
            ratio = stored[-1] / free
    assert panels == [1280, 5120, 20480]
    s = slope(panels, stored)
    ok = 1.1 <= s <= 1.7 and ratio <= 2.5
    criterion(10, ok, f"periodic storage {stored} on {panels} panels, slope {s:.3f} in [1.1, 1.7]; "
              f"periodic/free storage {ratio:.2f} (<= 2.5) at 5120 panels; "
              f"assembly {', '.join(f'{t:.0f}s' for t in times)}")
    assert ok


def test_c11_property_audits(ms200, criterion):
    checks = {}
    # block-tree tiling, exhaustively on the 200- and 1000-inclusion trees
    ok = True
    for ms in (ms200, ball_microstructure(1000)):
        tree = build_cluster_tree(ms.centers, 15).expand(3)
        for eta in (0.5, 1.7, 2.6):
            bt = build_block_tree(tree, eta)
            n = tree.n
            cover = np.zeros((n, n), dtype=np.int8)
            for b in bt.leaves():
                cover[b.row.lo:b.row.hi, b.col.lo:b.col.hi] += 1
            ok &= bool(np.all(cover == 1))
    checks["tiling"] = ok
    # generator symmetry, every entry
    A = EimGenerator(EimProblem(ms200)).dense()
    checks["symmetry"] = bool(np.abs(A - A.T).max() <= 1e-14 * np.abs(A).max())
    # rotational equivariance of the polarization
    Q, _ = np.linalg.qr(np.random.default_rng(42).standard_normal((3, 3)))
    E = np.array([0.3, -0.7, 0.6])
    tau = solve_dense(EimProblem(ms200, E=E)).tau
    rtau = solve_dense(EimProblem(ms200.transformed(rotation=Q), E=Q @ E)).tau
    checks["equivariance"] = bool(np.allclose(rtau, tau @ Q.T, rtol=1e-9, atol=1e-12))
    # mesh watertightness and orientation
    ms16 = periodic_microstructure(16, phi=0.2, seed=1)
    ok = True
    for level in range(4):
        m = mesh_microstructure(ms16, level)
        ok &= m.is_watertight() and bool(np.all(m.outward_dots() > 0))
    checks["watertight"] = ok
    # RSA overlap audit over all pairs (27 images in the cube)
    ok = True
    shifts = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], float)
    for ms in (ms200, ms16, periodic_microstructure(100, phi=0.25, seed=7, min_gap=0.0)):
        c, r = ms.centers, ms.radii
        d = c[:, None] - c[None]
        if ms.domain.periodic:
            dist = np.linalg.norm(d[None] + shifts[:, None, None], axis=-1).min(axis=0)
        else:
            dist = np.linalg.norm(d, axis=-1)
        np.fill_diagonal(dist, np.inf)
        ok &= bool(np.all(dist > r[:, None] + r[None]))
    checks["rsa"] = ok
    passed = all(checks.values())
    criterion(11, passed, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert passed
