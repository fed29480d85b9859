"""Property suites over randomized (but reproducible) fixtures."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from hmhom.bem import solid_angle
from hmhom.eim import EimGenerator, EimProblem, solve_dense
from hmhom.hmatrix import (DenseGenerator, aca_full, aca_partial, assemble, build_block_tree,
                           build_cluster_tree, is_admissible)
from hmhom.microstructure import Domain, Sphere, generate_rsa, icosphere_mesh, radius_for_fraction

from conftest import ball_microstructure

seeds = st.integers(min_value=0, max_value=2**31 - 1)


def rotation(seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


@given(seed=seeds, n=st.integers(2, 400), leaf=st.integers(1, 40),
       eta=st.floats(0.1, 4.0), anisotropy=st.floats(0.01, 1.0))
def test_block_tree_tiles_matrix_exactly(seed, n, leaf, eta, anisotropy):
    pts = np.random.default_rng(seed).uniform(-1, 1, (n, 3)) * [1.0, anisotropy, 1.0]
    tree = build_cluster_tree(pts, leaf)
    bt = build_block_tree(tree, eta)
    cover = np.zeros((n, n), dtype=int)
    for b in bt.leaves():
        cover[b.row.lo:b.row.hi, b.col.lo:b.col.hi] += 1
        if b.kind == "admissible":
            assert is_admissible(b.row, b.col, eta)
    assert np.all(cover == 1)
    assert bt.tiling_defect() == 0


@given(seed=seeds, n=st.integers(2, 300), eta=st.floats(0.3, 3.0))
def test_periodic_block_tree_tiles_matrix(seed, n, eta):
    pts = np.random.default_rng(seed).uniform(-0.5, 0.5, (n, 3))
    bt = build_block_tree(build_cluster_tree(pts, 8), eta, period=1.0)
    assert bt.tiling_defect() == 0
    for b in bt.leaves():
        if b.kind == "admissible":
            # every periodic copy of the column box is far enough
            assert is_admissible(b.row, b.col, eta, period=1.0)


@settings(max_examples=10)
@given(seed=st.integers(0, 50), n=st.integers(2, 40), phi=st.floats(0.01, 0.15),
       kappa=st.sampled_from([0.01, 0.5, 3.0, 1000.0]))
def test_eim_generator_symmetry(seed, n, phi, kappa):
    ms = ball_microstructure(n, phi=phi, seed=seed, kappa=kappa)
    gen = EimGenerator(EimProblem(ms))
    A = gen.dense()
    assert np.allclose(A, A.T, rtol=0, atol=1e-14 * np.abs(A).max())
    rows = np.random.default_rng(seed).permutation(3 * n)[: min(7, 3 * n)]
    assert np.allclose(gen.block(rows, rows), A[np.ix_(rows, rows)], rtol=1e-13, atol=0)


@settings(max_examples=10)
@given(seed=st.integers(0, 50), n=st.integers(1, 30), rot=seeds,
       E=st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda e: np.linalg.norm(e) > 0.1))
def test_polarization_rotates_with_the_microstructure(seed, n, rot, E):
    ms = ball_microstructure(n, phi=0.2, seed=seed)
    Q = rotation(rot)
    E = np.asarray(E)
    tau = solve_dense(EimProblem(ms, E=E)).tau
    rtau = solve_dense(EimProblem(ms.transformed(rotation=Q), E=Q @ E)).tau
    assert np.allclose(rtau, tau @ Q.T, rtol=1e-9, atol=1e-12 * np.abs(tau).max())


@given(level=st.integers(0, 3), radius=st.floats(1e-3, 10.0),
       center=st.tuples(*[st.floats(-5, 5)] * 3))
def test_icospheres_are_watertight_and_outward(level, radius, center):
    m = icosphere_mesh(Sphere(center, radius), level)
    assert m.is_watertight()
    assert np.all(m.outward_dots() > 0)
    tri = m.vertices[m.triangles]
    assert abs(solid_angle(tri - np.asarray(center)).sum() - 4 * np.pi) < 1e-9


@settings(max_examples=12)
@given(seed=seeds, n=st.integers(1, 120), phi=st.floats(0.01, 0.25),
       periodic=st.booleans(), gap=st.sampled_from([0.0, 0.01]))
def test_rsa_overlap_audit(seed, n, phi, periodic, gap):
    dom = Domain("periodic-cube") if periodic else Domain("ball", 1.0)
    ms = generate_rsa(dom, n, radius_for_fraction(dom, n, phi), seed=seed, min_gap=gap)
    c, r = ms.centers, ms.radii
    d = c[:, None] - c[None]
    if periodic:
        d -= np.round(d)
    dist = np.linalg.norm(d, axis=-1) + np.eye(n) * 10
    assert np.all(dist > r[:, None] + r[None] + gap)
    if periodic:
        assert np.all(np.abs(c) + r[:, None] < 0.5)
    else:
        assert np.all(np.linalg.norm(c, axis=1) + r < 1.0)


@settings(max_examples=15)
@given(seed=seeds, sep=st.floats(2.0, 8.0), eps=st.sampled_from([1e-2, 1e-4, 1e-6]))
def test_aca_error_control(seed, sep, eps):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (60, 3))
    y = rng.uniform(0, 1, (50, 3)) + [sep, 0, 0]
    M = 1.0 / np.linalg.norm(x[:, None] - y[None], axis=-1)
    full = aca_full(M, eps)
    assert np.linalg.norm(full.dense() - M) <= eps * np.linalg.norm(M) * (1 + 1e-12)
    part = aca_partial(DenseGenerator(M), eps)
    assert np.linalg.norm(part.dense() - M) <= 10 * eps * np.linalg.norm(M)


@settings(max_examples=10)
@given(seed=seeds, eps=st.sampled_from([1e-2, 1e-3, 1e-5]))
def test_assembly_matvec_consistency(seed, eps):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (200, 3))
    r = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    A = np.where(r > 0, 1.0 / np.where(r > 0, r, 1), 10.0)
    H = assemble(DenseGenerator(A), build_block_tree(build_cluster_tree(pts, 10), 1.5), eps)
    x = rng.standard_normal(200)
    assert np.allclose(H.matvec(x), H.to_dense() @ x)
    assert np.linalg.norm(H.to_dense() - A) <= 3 * eps * np.linalg.norm(A)
