import json

import numpy as np
import pytest

from hmhom import eim
from hmhom.eim import (EimGenerator, EimProblem, SolverConfig, assemble_dense, domain_correction,
                       effective_estimate, gamma_inf, maxwell_garnett, pairwise_interaction,
                       single_inclusion_tau, solve_dense, solve_eim)
from hmhom.microstructure import Domain, Microstructure, Sphere, unit_volume_ball_radius

from conftest import ball_microstructure
from quadrature import domain_interaction, pair_interaction, self_interaction

R1 = unit_volume_ball_radius()


def one_inclusion(f, kappa=10.0, center=(0.0, 0.0, 0.0)):
    r = (3 * f / (4 * np.pi)) ** (1 / 3)
    return Microstructure(Domain("ball", R1), (Sphere(center, r, kappa),))


@pytest.fixture(scope="module")
def small_problem():
    return EimProblem(ball_microstructure(60, phi=0.3, seed=4))


# --- kernel and closed-form integrals


def test_gamma_inf_is_minus_hessian_of_green():
    x, y = np.array([0.3, -0.2, 0.5]), np.array([-0.1, 0.2, 0.1])
    G = lambda p: 1.0 / (4 * np.pi * np.linalg.norm(p - y))
    h = 1e-4
    H = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            ei, ej = h * np.eye(3)[i], h * np.eye(3)[j]
            H[i, j] = (G(x + ei + ej) - G(x + ei - ej) - G(x - ei + ej) + G(x - ei - ej)) / (4 * h * h)
    g = gamma_inf(x, y, 2.0)
    assert np.allclose(g, -H / 2.0, rtol=1e-6)
    assert abs(np.trace(g)) < 1e-12 and np.allclose(g, g.T)
    with pytest.raises(ValueError):
        gamma_inf(x, x)


@pytest.mark.parametrize("radius,kappa0", [(0.3, 1.0), (0.1, 2.5)])
def test_self_integral_matches_surface_quadrature(radius, kappa0):
    s = Sphere((0.2, 0.0, -0.1), radius)
    quad = self_interaction(radius, kappa0)
    closed = pairwise_interaction(s, s, kappa0)
    assert np.allclose(closed, s.volume / (3 * kappa0) * np.eye(3))
    assert np.abs(quad - closed).max() <= 1e-4 * np.abs(closed).max()


def test_domain_correction_matches_quadrature():
    a = Sphere((0.1, 0.2, -0.1), 0.15)
    b = Sphere((-0.2, 0.0, 0.1), 0.1)
    k0 = 1.5
    quad = -b.volume * domain_interaction(a.center, a.radius, R1, k0)
    closed = domain_correction(a, b, R1, k0)
    assert np.abs(quad - closed).max() <= 1e-4 * np.abs(closed).max()
    with pytest.raises(ValueError):
        domain_correction(Sphere((0.55, 0, 0), 0.1), b, R1)


def test_pairwise_mean_value_matches_6d_quadrature():
    rng = np.random.default_rng(2024)
    for _ in range(10):
        ra, rb = rng.uniform(0.05, 0.2, 2)
        v = rng.standard_normal(3)
        cb = (ra + rb) * rng.uniform(1.1, 3.0) * v / np.linalg.norm(v)
        closed = pairwise_interaction(Sphere((0, 0, 0), ra), Sphere(tuple(cb), rb))
        quad = pair_interaction((0, 0, 0), ra, cb, rb)
        assert np.linalg.norm(quad - closed) <= 1e-3 * np.linalg.norm(closed)


def test_pairwise_rejects_overlap():
    with pytest.raises(ValueError):
        pairwise_interaction(Sphere((0, 0, 0), 0.2), Sphere((0.3, 0, 0), 0.2))


# --- system matrix


def test_generator_matches_blockwise_assembly(small_problem):
    A = EimGenerator(small_problem).dense()
    B = assemble_dense(small_problem)
    assert np.abs(A - B).max() <= 1e-12 * np.abs(B).max()


def test_generator_symmetry_and_paths(small_problem):
    gen = EimGenerator(small_problem)
    A = gen.dense()
    assert np.array_equal(A, A.T) or np.abs(A - A.T).max() <= 1e-15 * np.abs(A).max()
    cols = np.arange(0, gen.shape[1], 7)
    for i in (0, 5, 100):
        assert np.allclose(gen.row(i, cols), A[i, cols], rtol=1e-13, atol=0)
        assert np.allclose(gen.col(cols, i), A[cols, i], rtol=1e-13, atol=0)
    # positive definite for stiffer inclusions
    assert np.linalg.eigvalsh(A).min() > 0


def test_problem_validation():
    ms = ball_microstructure(10)
    with pytest.raises(ValueError):
        EimProblem(ms, kappa0=100.0)
    with pytest.raises(ValueError):
        EimProblem(Microstructure(Domain("periodic-cube"), ()))
    with pytest.raises(ValueError):
        EimProblem(ms, kappa0=-1.0)


def test_volume_normalized_equal_on_unit_cell(small_problem):
    other = EimProblem(small_problem.microstructure, volume_normalized=True)
    assert np.allclose(EimGenerator(other).dense(), EimGenerator(small_problem).dense(), rtol=1e-13)


# --- solutions


@pytest.mark.parametrize("kappa", [0.1, 10.0, 100.0])
def test_single_inclusion_closed_form(kappa):
    f = 0.05
    ms = one_inclusion(f, kappa, center=(0.1, -0.05, 0.2))
    E = np.array([0.3, -1.0, 0.5])
    tau, _ = solve_eim(EimProblem(ms, E=E), config=SolverConfig(tol=1e-14))
    exact = single_inclusion_tau(f, kappa, 1.0, E)
    assert np.abs(tau.tau[0] - exact).max() <= 1e-10 * np.abs(exact).max()


def test_dilute_limit_is_second_order():
    errs = []
    for f in (0.01, 0.02, 0.04):
        p = EimProblem(one_inclusion(f, 50.0))
        taus = [solve_dense(p, e) for e in np.eye(3)]
        k = effective_estimate(p, taus).scalar
        errs.append(abs(k - maxwell_garnett(f, 50.0, 1.0)))
    assert 3.5 < errs[1] / errs[0] < 4.5 and 3.5 < errs[2] / errs[1] < 4.5


def test_hmatrix_solution_close_to_dense(small_problem):
    ref = solve_dense(small_problem).tau
    tau, st = solve_eim(small_problem, epsilon=1e-6, config=SolverConfig(tol=1e-12))
    assert np.linalg.norm(tau.tau - ref) <= 1e-5 * np.linalg.norm(ref)
    assert tau.report["solves"][0]["converged"]
    assert st.n == 3 * small_problem.n


def test_rotation_equivariance(small_problem):
    q, _ = np.linalg.qr(np.random.default_rng(11).standard_normal((3, 3)))
    E = np.array([1.0, 0.5, -0.2])
    ms = small_problem.microstructure
    tau = solve_dense(EimProblem(ms, E=E)).tau
    rot = solve_dense(EimProblem(ms.transformed(rotation=q), E=q @ E)).tau
    assert np.allclose(rot, tau @ q.T, rtol=1e-10, atol=1e-12)


def test_effective_tensor_and_json(small_problem):
    taus, system = eim.directional_solves(small_problem, SolverConfig(epsilon=1e-5, tol=1e-12))
    est = effective_estimate(small_problem, taus)
    assert np.allclose(est.tensor, est.tensor.T)
    assert est.scalar > 1.0
    assert est.volume_fraction == pytest.approx(0.3)
    d = json.loads(eim.results_json(small_problem, taus[0], est, system.stats()))
    assert {"tau", "keff", "keff_scalar", "stats", "report"} <= set(d)
    with pytest.raises(ValueError):
        effective_estimate(small_problem, taus[:2])


def test_soft_inclusions_keff_below_matrix():
    ms = ball_microstructure(40, phi=0.2, seed=5, kappa=0.1)
    p = EimProblem(ms)
    k = effective_estimate(p, [solve_dense(p, e) for e in np.eye(3)]).scalar
    assert 0.1 < k < 1.0
