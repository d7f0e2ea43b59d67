"""Interior-point solver on analytic problems and a brute-force QP oracle."""

import itertools

import numpy as np
import pytest

from drivelab import nlp
from drivelab.nlp import KktPoint, ParametricNlp, Residuals


def unconstrained_quadratic():
    # min (z - p)^2
    return ParametricNlp(
        n_z=1,
        n_p=1,
        m_eq=0,
        m_ineq=0,
        cost=lambda z, p: float((z[0] - p[0]) ** 2),
        cost_grad=lambda z, p: np.array([2.0 * (z[0] - p[0])]),
        cost_hess=lambda z, p: np.array([[2.0]]),
        cost_grad_p=lambda z, p: np.array([[-2.0]]),
    )


def bound_scalar_qp():
    # min z^2  s.t.  z >= 1   (h = 1 - z <= 0)
    return ParametricNlp(
        n_z=1,
        n_p=0,
        m_eq=0,
        m_ineq=1,
        cost=lambda z, p: float(z[0] ** 2),
        cost_grad=lambda z, p: np.array([2.0 * z[0]]),
        cost_hess=lambda z, p: np.array([[2.0]]),
        ineq=lambda z: np.array([1.0 - z[0]]),
        ineq_jac=lambda z: np.array([[-1.0]]),
        ineq_hess=lambda z, mu: np.zeros((1, 1)),
    )


def box_qp(Q, c, lb, ub):
    n = len(c)
    return ParametricNlp(
        n_z=n,
        n_p=0,
        m_eq=0,
        m_ineq=0,
        cost=lambda z, p: float(0.5 * z @ Q @ z + c @ z),
        cost_grad=lambda z, p: Q @ z + c,
        cost_hess=lambda z, p: Q.copy(),
        lb=lb,
        ub=ub,
    )


def solve_box_qp_by_enumeration(Q, c, lb, ub):
    """Brute-force oracle: enumerate active bound sets of a strictly convex QP."""
    n = len(c)
    best = None
    for mask in itertools.product((None, "lo", "hi"), repeat=n):
        free = [i for i in range(n) if mask[i] is None]
        z = np.array([lb[i] if mask[i] == "lo" else ub[i] if mask[i] == "hi" else 0.0 for i in range(n)])
        if free:
            F = np.ix_(free, free)
            rhs = -(c[free] + Q[np.ix_(free, [i for i in range(n) if mask[i] is not None])] @ z[[i for i in range(n) if mask[i] is not None]])
            z[free] = np.linalg.solve(Q[F], rhs)
        if np.any(z < lb - 1e-9) or np.any(z > ub + 1e-9):
            continue
        grad = Q @ z + c
        ok = True
        for i in range(n):
            if mask[i] == "lo" and grad[i] < -1e-9:
                ok = False
            if mask[i] == "hi" and grad[i] > 1e-9:
                ok = False
            if mask[i] is None and abs(grad[i]) > 1e-7:
                ok = False
        if not ok:
            continue
        val = 0.5 * z @ Q @ z + c @ z
        if best is None or val < best[0]:
            best = (val, z)
    assert best is not None
    return best[1]


def test_unconstrained_parametric():
    prob = unconstrained_quadratic()
    point = nlp.solve(prob, np.array([3.0]), np.array([0.0]))
    assert point.converged
    assert point.z[0] == pytest.approx(3.0, abs=1e-9)
    assert point.lam.size == 0 and point.mu.size == 0
    assert point.residuals.max() <= 1e-10


def test_scalar_bound_qp():
    prob = bound_scalar_qp()
    point = nlp.solve(prob, np.zeros(0), np.array([3.0]))
    assert point.converged
    assert point.z[0] == pytest.approx(1.0, abs=1e-7)
    assert point.mu[0] == pytest.approx(2.0, abs=1e-6)
    assert point.residuals.complementarity <= 1e-8


def test_random_box_qp_matches_enumeration():
    rng = np.random.default_rng(42)
    n = 10
    A = rng.normal(size=(n, n))
    Q = A @ A.T + n * np.eye(n)
    c = rng.normal(scale=8.0, size=n)
    lb = np.full(n, -0.3)
    ub = np.full(n, 0.3)
    prob = box_qp(Q, c, lb, ub)
    point = nlp.solve(prob, np.zeros(0), np.zeros(n))
    zstar = solve_box_qp_by_enumeration(Q, c, lb, ub)
    assert point.converged
    assert np.max(np.abs(point.z - zstar)) <= 1e-7
    act, weak = nlp.active_set(point)
    assert len(act) >= 3  # the instance is built to pin several variables
    assert not np.any(weak)


def test_residuals_on_exact_point():
    prob = bound_scalar_qp()
    exact = KktPoint(
        z=np.array([1.0]),
        lam=np.zeros(0),
        mu=np.array([2.0]),
        residuals=Residuals(0, 0, 0),
        status="converged",
        ineq_values=np.array([0.0]),
    )
    res = nlp.kkt_residuals(prob, np.zeros(0), exact)
    assert res.max() <= 1e-12


def test_residuals_detect_perturbation():
    prob = bound_scalar_qp()
    perturbed = KktPoint(
        z=np.array([1.0 + 1e-3]),
        lam=np.zeros(0),
        mu=np.array([2.0]),
        residuals=Residuals(0, 0, 0),
        status="converged",
        ineq_values=np.array([-1e-3]),
    )
    res = nlp.kkt_residuals(prob, np.zeros(0), perturbed)
    assert res.stationarity > 1e-6


def test_residuals_dropped_multiplier():
    prob = bound_scalar_qp()
    dropped = KktPoint(
        z=np.array([1.0]),
        lam=np.zeros(0),
        mu=np.array([0.0]),
        residuals=Residuals(0, 0, 0),
        status="converged",
        ineq_values=np.array([0.0]),
    )
    res = nlp.kkt_residuals(prob, np.zeros(0), dropped)
    # stationarity now equals the dropped gradient term |2 z*| = 2
    assert res.stationarity == pytest.approx(2.0, abs=1e-12)


def test_active_set_interior():
    prob = bound_scalar_qp()
    point = nlp.solve(prob, np.zeros(0), np.array([3.0]))
    interior = KktPoint(
        z=point.z,
        lam=point.lam,
        mu=point.mu,
        residuals=point.residuals,
        status="converged",
        ineq_values=np.array([-0.1]),
    )
    act, weak = nlp.active_set(interior)
    assert act.size == 0 and weak.size == 0


def test_active_set_weak_flag():
    degenerate = KktPoint(
        z=np.array([0.0]),
        lam=np.zeros(0),
        mu=np.array([0.0]),
        residuals=Residuals(0, 0, 0),
        status="converged",
        ineq_values=np.array([0.0]),
    )
    act, weak = nlp.active_set(degenerate)
    assert list(act) == [0]
    assert weak[0]


def test_equality_constrained():
    # min (z0-1)^2 + (z1-2)^2  s.t. z0 + z1 = 1  ->  z = (0, 1)
    prob = ParametricNlp(
        n_z=2,
        n_p=0,
        m_eq=1,
        m_ineq=0,
        cost=lambda z, p: float((z[0] - 1) ** 2 + (z[1] - 2) ** 2),
        cost_grad=lambda z, p: np.array([2 * (z[0] - 1), 2 * (z[1] - 2)]),
        cost_hess=lambda z, p: 2 * np.eye(2),
        eq=lambda z: np.array([z[0] + z[1] - 1.0]),
        eq_jac=lambda z: np.array([[1.0, 1.0]]),
        eq_hess=lambda z, lam: np.zeros((2, 2)),
    )
    point = nlp.solve(prob, np.zeros(0), np.array([5.0, -7.0]))
    assert point.converged
    assert np.allclose(point.z, [0.0, 1.0], atol=1e-8)


def test_nonconvex_needs_regularization():
    # objective with an indefinite Hessian away from the solution
    prob = ParametricNlp(
        n_z=2,
        n_p=0,
        m_eq=0,
        m_ineq=1,
        cost=lambda z, p: float(np.cos(z[0]) + (z[0] - 0.5) ** 2 + (z[1] + 0.2) ** 2),
        cost_grad=lambda z, p: np.array([-np.sin(z[0]) + 2 * (z[0] - 0.5), 2 * (z[1] + 0.2)]),
        cost_hess=lambda z, p: np.array([[-np.cos(z[0]) + 2.0, 0.0], [0.0, 2.0]]),
        ineq=lambda z: np.array([-1.0 - z[1]]),
        ineq_jac=lambda z: np.array([[0.0, -1.0]]),
        ineq_hess=lambda z, mu: np.zeros((2, 2)),
    )
    point = nlp.solve(prob, np.zeros(0), np.array([3.0, 0.0]))
    assert point.converged
    assert point.residuals.max() <= 1e-8


def test_infeasible_reported():
    # h: z <= -1 and z >= 1 simultaneously
    prob = ParametricNlp(
        n_z=1,
        n_p=0,
        m_eq=0,
        m_ineq=2,
        cost=lambda z, p: float(z[0] ** 2),
        cost_grad=lambda z, p: np.array([2 * z[0]]),
        cost_hess=lambda z, p: np.array([[2.0]]),
        ineq=lambda z: np.array([z[0] + 1.0, 1.0 - z[0]]),
        ineq_jac=lambda z: np.array([[1.0], [-1.0]]),
        ineq_hess=lambda z, mu: np.zeros((1, 1)),
    )
    point = nlp.solve(prob, np.zeros(0), np.array([0.0]), max_iter=60)
    assert not point.converged
    assert point.status in ("infeasible", "max-iter")


def test_solver_never_lies_about_convergence():
    prob = bound_scalar_qp()
    point = nlp.solve(prob, np.zeros(0), np.array([2.0]), max_iter=2)
    if point.status == "converged":
        assert point.residuals.max() <= nlp.TOL_KKT
    else:
        assert point.residuals.max() == nlp.kkt_residuals(prob, np.zeros(0), point).max()


def test_check_derivatives_passes_and_fails():
    prob = unconstrained_quadratic()
    report = nlp.check_derivatives(prob, np.array([1.5]), np.array([0.3]))
    assert report["cost_grad"] <= 1e-5

    broken = unconstrained_quadratic()
    broken.cost_grad = lambda z, p: np.array([2.0 * (z[0] - p[0]) + 0.5])
    with pytest.raises(nlp.NlpError, match="derivative check failed"):
        nlp.check_derivatives(broken, np.array([1.5]), np.array([0.3]))


def test_symindef_factor_roundtrip():
    rng = np.random.default_rng(1)
    for n in (3, 8, 17):
        A = rng.normal(size=(n, n))
        K = 0.5 * (A + A.T)
        b = rng.normal(size=n)
        fac = nlp.SymIndefFactor(K)
        x = fac.solve(b)
        assert np.allclose(K @ x, b, atol=1e-8)
        w = np.linalg.eigvalsh(K)
        assert fac.inertia[0] == int(np.sum(w > 1e-12))
        assert fac.inertia[1] == int(np.sum(w < -1e-12))
