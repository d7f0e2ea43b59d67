"""Derivatives of converged KKT points with respect to NLP parameters.

The converged point's active inequalities are treated as equalities and the
implicit function theorem is applied to the reduced KKT residual

    F(z, lam, mu_A; p) = [ grad_z L ; g(z) ; h_A(z) ]

whose Jacobian (the exact-Hessian KKT matrix) must be nonsingular.  Only the
cost depends on p here, so dF/dp has nonzero rows only in the stationarity
block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .nlp import KktPoint, ParametricNlp, TOL_ACTIVE, active_set, fold_bounds


class DegeneracyError(RuntimeError):
    """Strict complementarity or regularity assumptions failed at the point."""


@dataclass
class SensitivitySystem:
    kkt_matrix: np.ndarray  # dF/d(z, lam, mu_A), symmetric
    param_jacobian: np.ndarray  # dF/dp
    active: np.ndarray  # indices of active inequalities
    factor: object  # LU factorisation handle
    n_z: int
    m_eq: int


def build_sensitivity(
    nlp: ParametricNlp,
    p,
    point: KktPoint,
    tol_act: float = TOL_ACTIVE,
) -> SensitivitySystem:
    """Assemble and factor the reduced KKT Jacobian at a converged point."""
    if not point.converged:
        raise DegeneracyError("sensitivity requires a converged KKT point")
    nlp = fold_bounds(nlp)
    if nlp.cost_grad_p is None and nlp.n_p:
        raise ValueError("nlp.cost_grad_p is required to differentiate w.r.t. p")

    act, weak = active_set(point, tol_act)
    if np.any(weak):
        raise DegeneracyError(
            f"weakly active inequalities {list(act[weak])}: strict complementarity does not hold"
        )

    z = point.z
    p = np.asarray(p, float) if nlp.n_p else np.zeros(0)
    n, me, na = nlp.n_z, nlp.m_eq, len(act)

    W = np.asarray(nlp.cost_hess(z, p), float).copy()
    if me and nlp.eq_hess is not None:
        W += nlp.eq_hess(z, point.lam)
    if nlp.m_ineq and nlp.ineq_hess is not None:
        mu_active = np.zeros(nlp.m_ineq)
        mu_active[act] = point.mu[act]
        W += nlp.ineq_hess(z, mu_active)

    Jg = np.asarray(nlp.eq_jac(z), float) if me else np.zeros((0, n))
    Ja = np.asarray(nlp.ineq_jac(z), float)[act] if na else np.zeros((0, n))

    dim = n + me + na
    K = np.zeros((dim, dim))
    K[:n, :n] = W
    K[:n, n : n + me] = Jg.T
    K[n : n + me, :n] = Jg
    K[:n, n + me :] = Ja.T
    K[n + me :, :n] = Ja

    dFdp = np.zeros((dim, nlp.n_p))
    if nlp.n_p:
        dFdp[:n, :] = np.asarray(nlp.cost_grad_p(z, p), float)

    factor = scipy.linalg.lu_factor(K)
    diag_u = np.abs(np.diag(factor[0]))
    if diag_u.min() <= 1e-12 * max(diag_u.max(), 1.0):
        raise DegeneracyError(
            "singular KKT matrix: LICQ or second-order sufficiency is violated at this point"
        )
    return SensitivitySystem(kkt_matrix=K, param_jacobian=dFdp, active=act, factor=factor, n_z=n, m_eq=me)


def adjoint(system: SensitivitySystem, zbar: np.ndarray) -> np.ndarray:
    """Gradient over p of <zbar, z*(p)> -- one transposed solve plus a product."""
    zbar = np.asarray(zbar, float)
    if zbar.shape != (system.n_z,):
        raise ValueError(f"cotangent must have primal dimension {system.n_z}")
    rhs = np.zeros(system.kkt_matrix.shape[0])
    rhs[: system.n_z] = zbar
    y = scipy.linalg.lu_solve(system.factor, rhs, trans=1)
    return -system.param_jacobian.T @ y


def forward_jacobian(system: SensitivitySystem, p_direction: np.ndarray) -> np.ndarray:
    """Directional derivative of the primal solution along p_direction."""
    p_direction = np.asarray(p_direction, float)
    step = scipy.linalg.lu_solve(system.factor, system.param_jacobian @ p_direction)
    return -step[: system.n_z]
