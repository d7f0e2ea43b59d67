"""Smooth parametric NLPs and a dense primal-dual interior-point solver.

Problems have the form

    min_z  l(z, p)
    s.t.   g(z) = 0
           h(z) <= 0
           lb <= z <= ub   (optional, folded into h internally)

with twice-differentiable l, g, h.  The solver runs Newton steps on the
perturbed KKT system with slack variables, a fraction-to-boundary rule,
inertia-corrected symmetric-indefinite factorisations and an l1 merit line
search.  Residuals reported on the returned point are always recomputed
from scratch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

TOL_KKT = 1e-8
TOL_ACTIVE = 1e-6
MAX_ITER = 200


class NlpError(RuntimeError):
    pass


@dataclass
class ParametricNlp:
    n_z: int
    n_p: int
    m_eq: int
    m_ineq: int
    cost: Callable  # (z, p) -> float
    cost_grad: Callable  # (z, p) -> (n_z,)
    cost_hess: Callable  # (z, p) -> (n_z, n_z)
    cost_grad_p: Optional[Callable] = None  # (z, p) -> (n_z, n_p), d(grad_z l)/dp
    eq: Optional[Callable] = None  # z -> (m_eq,)
    eq_jac: Optional[Callable] = None  # z -> (m_eq, n_z)
    eq_hess: Optional[Callable] = None  # (z, lam) -> (n_z, n_z), sum_i lam_i g_i''
    ineq: Optional[Callable] = None  # z -> (m_ineq,)
    ineq_jac: Optional[Callable] = None  # z -> (m_ineq, n_z)
    ineq_hess: Optional[Callable] = None  # (z, mu) -> (n_z, n_z)
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def validate(self, z_probe: np.ndarray, p_probe: np.ndarray) -> None:
        if np.shape(z_probe) != (self.n_z,):
            raise NlpError("probe point has wrong dimension")
        if np.shape(self.cost_grad(z_probe, p_probe)) != (self.n_z,):
            raise NlpError("cost_grad dimension mismatch")
        if np.shape(self.cost_hess(z_probe, p_probe)) != (self.n_z, self.n_z):
            raise NlpError("cost_hess dimension mismatch")
        if self.m_eq:
            if np.shape(self.eq(z_probe)) != (self.m_eq,):
                raise NlpError("eq dimension mismatch")
            if np.shape(self.eq_jac(z_probe)) != (self.m_eq, self.n_z):
                raise NlpError("eq_jac dimension mismatch")
        if self.m_ineq:
            if np.shape(self.ineq(z_probe)) != (self.m_ineq,):
                raise NlpError("ineq dimension mismatch")
            if np.shape(self.ineq_jac(z_probe)) != (self.m_ineq, self.n_z):
                raise NlpError("ineq_jac dimension mismatch")


@dataclass
class Residuals:
    stationarity: float
    feasibility: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.feasibility, self.complementarity)


@dataclass
class KktPoint:
    z: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    residuals: Residuals
    status: str  # converged | max-iter | infeasible
    iterations: int = 0
    ineq_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def fold_bounds(nlp: ParametricNlp) -> ParametricNlp:
    """Rewrite finite variable bounds as extra inequality rows (z-ub, lb-z)."""
    if nlp.lb is None and nlp.ub is None:
        return nlp
    rows = []
    rhs = []
    n = nlp.n_z
    ub = np.full(n, np.inf) if nlp.ub is None else np.asarray(nlp.ub, float)
    lb = np.full(n, -np.inf) if nlp.lb is None else np.asarray(nlp.lb, float)
    for i in range(n):
        if np.isfinite(ub[i]):
            e = np.zeros(n)
            e[i] = 1.0
            rows.append(e)
            rhs.append(ub[i])
        if np.isfinite(lb[i]):
            e = np.zeros(n)
            e[i] = -1.0
            rows.append(e)
            rhs.append(-lb[i])
    A = np.asarray(rows)
    b = np.asarray(rhs)
    base_ineq, base_jac, base_hess, m_base = nlp.ineq, nlp.ineq_jac, nlp.ineq_hess, nlp.m_ineq

    def ineq(z):
        box = A @ z - b
        return np.concatenate([base_ineq(z), box]) if m_base else box

    def ineq_jac(z):
        return np.vstack([base_jac(z), A]) if m_base else A

    def ineq_hess(z, mu):
        if m_base and base_hess is not None:
            return base_hess(z, mu[:m_base])
        return np.zeros((n, n))

    return replace(
        nlp,
        m_ineq=m_base + A.shape[0],
        ineq=ineq,
        ineq_jac=ineq_jac,
        ineq_hess=ineq_hess,
        lb=None,
        ub=None,
    )


class SymIndefFactor:
    """LDL^T factorisation of a dense symmetric matrix with inertia report."""

    def __init__(self, K: np.ndarray):
        self.lu, self.d, self.perm = scipy.linalg.ldl(K, lower=True)
        self.Lp = self.lu[self.perm]
        self.inertia = self._inertia()

    def _inertia(self) -> tuple[int, int, int]:
        d = self.d
        n = d.shape[0]
        scale = max(np.max(np.abs(d)), 1e-300)
        pos = neg = zero = 0
        i = 0
        while i < n:
            if i + 1 < n and d[i, i + 1] != 0.0:
                a, b, c = d[i, i], d[i, i + 1], d[i + 1, i + 1]
                det = a * c - b * b
                if det < 0:
                    pos += 1
                    neg += 1
                elif det > 0:
                    if a + c > 0:
                        pos += 2
                    else:
                        neg += 2
                else:
                    zero += 1
                    if a + c > 0:
                        pos += 1
                    elif a + c < 0:
                        neg += 1
                    else:
                        zero += 1
                i += 2
            else:
                v = d[i, i]
                if abs(v) <= 1e-14 * scale:
                    zero += 1
                elif v > 0:
                    pos += 1
                else:
                    neg += 1
                i += 1
        return pos, neg, zero

    def solve(self, b: np.ndarray) -> np.ndarray:
        y = scipy.linalg.solve_triangular(self.Lp, b[self.perm], lower=True, unit_diagonal=True)
        w = self._block_solve(y)
        v = scipy.linalg.solve_triangular(self.Lp.T, w, lower=False, unit_diagonal=True)
        x = np.empty_like(v)
        x[self.perm] = v
        return x

    def _block_solve(self, y: np.ndarray) -> np.ndarray:
        d = self.d
        n = d.shape[0]
        out = np.empty_like(y)
        i = 0
        while i < n:
            if i + 1 < n and d[i, i + 1] != 0.0:
                a, b, c = d[i, i], d[i, i + 1], d[i + 1, i + 1]
                det = a * c - b * b
                out[i] = (c * y[i] - b * y[i + 1]) / det
                out[i + 1] = (-b * y[i] + a * y[i + 1]) / det
                i += 2
            else:
                out[i] = y[i] / d[i, i]
                i += 1
        return out


def _evaluate(nlp: ParametricNlp, p, z):
    f = float(nlp.cost(z, p))
    grad = np.asarray(nlp.cost_grad(z, p), float)
    g = np.asarray(nlp.eq(z), float) if nlp.m_eq else np.zeros(0)
    h = np.asarray(nlp.ineq(z), float) if nlp.m_ineq else np.zeros(0)
    return f, grad, g, h


def kkt_residuals(nlp: ParametricNlp, p, point: KktPoint) -> Residuals:
    """Recomputed stationarity / feasibility / complementarity infinity norms."""
    nlp = fold_bounds(nlp)
    z, lam, mu = point.z, point.lam, point.mu
    _, grad, g, h = _evaluate(nlp, p, z)
    stat = grad.copy()
    if nlp.m_eq:
        stat += nlp.eq_jac(z).T @ lam
    if nlp.m_ineq:
        stat += nlp.ineq_jac(z).T @ mu
    feas = 0.0
    if g.size:
        feas = max(feas, float(np.max(np.abs(g))))
    if h.size:
        feas = max(feas, float(np.max(np.maximum(h, 0.0))))
    comp = float(np.max(np.abs(mu * h))) if h.size else 0.0
    return Residuals(float(np.max(np.abs(stat))) if stat.size else 0.0, feas, comp)


def active_set(point: KktPoint, tol_act: float = TOL_ACTIVE) -> tuple[np.ndarray, np.ndarray]:
    """Indices of active inequalities and a weak-activity flag per active index.

    A constraint is active when h_i >= -tol_act; it is weakly active when, in
    addition, its multiplier is itself below tol_act (strict complementarity
    cannot be assumed there).
    """
    h = point.ineq_values
    if h.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=bool)
    act = np.flatnonzero(h >= -tol_act)
    weak = (np.abs(h[act]) <= tol_act) & (point.mu[act] <= tol_act)
    return act, weak


def solve(
    nlp: ParametricNlp,
    p,
    z0,
    *,
    tol: float = TOL_KKT,
    max_iter: int = MAX_ITER,
    mu_barrier0: float = 1e-1,
    s_min: float = 1e-3,
    lam0: Optional[np.ndarray] = None,
    mu0: Optional[np.ndarray] = None,
    trace: Optional[list] = None,
    debug: bool = False,
) -> KktPoint:
    """Solve to a KKT point; warm start honoured through z0 (and lam0/mu0)."""

    nlp = fold_bounds(nlp)
    p = np.asarray(p, float) if nlp.n_p else np.zeros(0)
    z = np.asarray(z0, float).copy()
    if z.shape != (nlp.n_z,):
        raise NlpError(f"initial guess has shape {z.shape}, expected ({nlp.n_z},)")
    if not np.all(np.isfinite(z)):
        raise NlpError("initial guess must be finite")

    n, me, mi = nlp.n_z, nlp.m_eq, nlp.m_ineq
    mu_b = mu_barrier0
    mu_floor = min(1e-9, tol / 10.0)

    try:
        f, grad, g, h = _evaluate(nlp, p, z)
    except Exception as exc:  # dynamics guards may reject the start point
        raise NlpError(f"initial point not evaluable: {exc}") from exc

    # |h| rather than -h: a slightly violated constraint still gets a usable
    # slack so the first steps are not strangled by fraction-to-boundary
    s = np.maximum(s_min, np.abs(h)) if mi else np.zeros(0)
    mu = np.clip(mu_b / s, 1e-8, 10.0) if mi else np.zeros(0)
    if mu0 is not None and mi:
        mu = np.clip(np.asarray(mu0, float), 1e-10, 1e10)
    if me:
        Jg = np.asarray(nlp.eq_jac(z), float)
        rhs = grad + (np.asarray(nlp.ineq_jac(z), float).T @ mu if mi else 0.0)
        lam = np.linalg.lstsq(Jg.T, -rhs, rcond=None)[0]
    else:
        lam = np.zeros(0)
    if lam0 is not None and me:
        lam = np.asarray(lam0, float).copy()

    nu = 10.0  # merit penalty
    rho_last = 0.0
    best = None
    best_err = np.inf
    status = "max-iter"
    it = 0
    stall_count = 0
    restarts_left = 3

    def barrier_merit(zv, sv):
        fv, _, gv, hv = _evaluate(nlp, p, zv)
        if not (np.isfinite(fv) and np.all(np.isfinite(gv)) and np.all(np.isfinite(hv))):
            return np.inf, None
        theta = np.sum(np.abs(gv)) + np.sum(np.abs(hv + sv))
        phi = fv - mu_b * np.sum(np.log(sv)) if sv.size else fv
        return phi + nu * theta, (fv, gv, hv, theta)

    for it in range(1, max_iter + 1):
        # Lagrangian Hessian first: with cached evaluators one second-order
        # pass also provides the constraint Jacobian requested just after.
        W = np.asarray(nlp.cost_hess(z, p), float).copy()
        if me and nlp.eq_hess is not None:
            W += nlp.eq_hess(z, lam)
        if mi and nlp.ineq_hess is not None:
            W += nlp.ineq_hess(z, mu)
        Jg = np.asarray(nlp.eq_jac(z), float) if me else np.zeros((0, n))
        Jh = np.asarray(nlp.ineq_jac(z), float) if mi else np.zeros((0, n))

        r_d = grad + Jg.T @ lam + Jh.T @ mu
        r_g = g
        r_h = h + s
        r_c = s * mu - mu_b

        err_0 = max(
            float(np.max(np.abs(r_d))),
            float(np.max(np.abs(r_g))) if me else 0.0,
            float(np.max(np.abs(r_h))) if mi else 0.0,
            float(np.max(np.abs(s * mu))) if mi else 0.0,
        )
        if trace is not None:
            trace.append((it, err_0, mu_b))
        if err_0 < 0.999 * best_err:
            stall_count = 0
        else:
            stall_count += 1
        if err_0 < best_err:
            best_err = err_0
            best = (z.copy(), lam.copy(), mu.copy(), h.copy())
        if err_0 <= tol:
            status = "converged"
            break
        if mi and stall_count >= 8 and restarts_left > 0:
            # stalled endgame: re-centre by raising the barrier and resetting
            # slacks/duals, then drive it back down
            restarts_left -= 1
            stall_count = 0
            mu_b = max(100.0 * mu_b, 1e-4)
            s = np.maximum(s, np.maximum(1e-8, np.abs(h)))
            mu = np.clip(mu_b / s, 1e-8, 10.0)
            nu = 10.0
            if debug:
                log.info("it=%d stall detected: recentering with mu_b=%.1e", it, mu_b)
            continue

        err_mu = max(
            float(np.max(np.abs(r_d))),
            float(np.max(np.abs(r_g))) if me else 0.0,
            float(np.max(np.abs(r_h))) if mi else 0.0,
            float(np.max(np.abs(r_c))) if mi else 0.0,
        )
        if mi and err_mu <= 2.0 * mu_b and mu_b > mu_floor:
            mu_b = max(mu_floor, min(0.2 * mu_b, mu_b**1.5))
            continue

        # barrier condensation
        if mi:
            sigma = np.clip(mu / s, 1e-12, 1e12)
            W_bar = W + (Jh.T * sigma) @ Jh
        else:
            W_bar = W

        dim = n + me
        rhs = np.empty(dim)
        rhs1 = -r_d
        if mi:
            rhs1 = rhs1 + Jh.T @ (r_c / s - sigma * r_h)
        rhs[:n] = rhs1
        rhs[n:] = -r_g

        def compute_step(rho_start):
            rho = rho_start
            delta = 0.0
            for attempt in range(60):
                K = np.zeros((dim, dim))
                K[:n, :n] = W_bar
                if rho:
                    K[:n, :n] += rho * np.eye(n)
                if me:
                    K[:n, n:] = Jg.T
                    K[n:, :n] = Jg
                    if delta:
                        K[n:, n:] = -delta * np.eye(me)
                factor = SymIndefFactor(K)
                npos, nneg, nzero = factor.inertia
                if npos == n and nneg == me and nzero == 0:
                    return factor.solve(rhs), rho, factor
                # too few negative eigenvalues or exact singularity points at
                # a rank-deficient equality Jacobian: dual regularisation;
                # excess negative curvature is handled by the primal shift
                if me and (nzero > 0 or nneg < me):
                    delta = max(delta * 10.0, 1e-10)
                if debug and attempt > 50:
                    log.info("   attempt=%d rho=%.2e delta=%.2e inertia=(%d,%d,%d) want=(%d,%d,0)", attempt, rho, delta, npos, nneg, nzero, n, me)
                # doubled primal regularisation; the restart level decays so
                # one early spike cannot damp every later Newton step
                rho = max(2.0 * rho, max(1e-8, rho_last / 8.0))
            return None, rho, None

        phi0, aux0 = barrier_merit(z, s)
        theta0 = aux0[3]

        # regularise further until the step is a merit descent direction
        rho_try = 0.0
        step = None
        for _ in range(12):
            step, rho_used, fac = compute_step(rho_try)
            if step is None:
                break
            dz = step[:n]
            dlam = step[n:]
            if mi:
                ds = -r_h - Jh @ dz
                dmu = -(r_c + mu * ds) / s
            else:
                ds = np.zeros(0)
                dmu = np.zeros(0)
            dphi = float(grad @ dz) - (mu_b * np.sum(ds / s) if mi else 0.0) - nu * theta0
            if dphi < 1e-9 * max(1.0, abs(phi0)):
                break
            rho_try = max(4.0 * rho_used, 1e-6)
        if step is None:
            if debug:
                log.info("it=%d step computation failed (inertia never corrected)", it)
            status = "max-iter"
            break
        rho_last = rho_used

        # cap keeps slacks from collapsing many orders of magnitude in one
        # step, which would wreck the conditioning of the condensed system
        tau = min(max(0.99, 1.0 - mu_b), 0.9999)
        alpha_max = 1.0
        if mi:
            neg = ds < 0
            if np.any(neg):
                alpha_max = min(alpha_max, float(np.min(-tau * s[neg] / ds[neg])))
            negmu = dmu < 0
            alpha_mu = 1.0
            if np.any(negmu):
                alpha_mu = min(1.0, float(np.min(-tau * mu[negmu] / dmu[negmu])))
        else:
            alpha_mu = 1.0

        # merit penalty tracks the multiplier scale
        lam_trial = lam + dlam
        mu_trial = mu + alpha_mu * dmu
        needed = 2.0 * max(
            float(np.max(np.abs(lam_trial))) if me else 0.0,
            float(np.max(np.abs(mu_trial))) if mi else 0.0,
            1.0,
        )
        if needed > nu:
            nu = needed
            phi0, aux0 = barrier_merit(z, s)
            theta0 = aux0[3]
            dphi = float(grad @ dz) - (mu_b * np.sum(ds / s) if mi else 0.0) - nu * theta0

        def kkt_error_at(z_t, s_t, lam_t, mu_t, aux_t):
            grad_t = np.asarray(nlp.cost_grad(z_t, p), float)
            r_d_t = grad_t.copy()
            if me:
                r_d_t += np.asarray(nlp.eq_jac(z_t), float).T @ lam_t
            if mi:
                r_d_t += np.asarray(nlp.ineq_jac(z_t), float).T @ mu_t
            return max(
                float(np.max(np.abs(r_d_t))),
                float(np.max(np.abs(aux_t[1]))) if me else 0.0,
                float(np.max(np.abs(aux_t[2] + s_t))) if mi else 0.0,
                float(np.max(np.abs(s_t * mu_t - mu_b))) if mi else 0.0,
            )

        alpha = alpha_max
        accepted = False
        soc_tried = False
        for trial in range(40):
            z_t = z + alpha * dz
            s_t = s + alpha * ds if mi else s
            try:
                phi_t, aux = barrier_merit(z_t, s_t)
            except Exception:
                phi_t, aux = np.inf, None
            if np.isfinite(phi_t) and phi_t <= phi0 + 1e-4 * alpha * min(dphi, 0.0) + 1e-12 * abs(phi0):
                accepted = True
                break
            if trial == 0 and not soc_tried and np.isfinite(phi_t):
                # iterated second-order corrections: restore feasibility along
                # the (possibly long) Newton step before judging it, curing
                # the Maratos effect and soft-direction creep
                soc_tried = True
                zc, sc, phic, auxc = z_t, s_t, phi_t, aux
                theta_prev = auxc[3]
                for _ in range(4):
                    rhs_c = np.zeros(dim)
                    if mi:
                        r_h_c = auxc[2] + sc
                        rhs_c[:n] = -Jh.T @ (sigma * r_h_c)
                    rhs_c[n:] = -auxc[1]
                    corr = fac.solve(rhs_c)
                    dz_c = corr[:n]
                    ds_c = (-r_h_c - Jh @ dz_c) if mi else np.zeros(0)
                    beta = 1.0
                    if mi:
                        negc = ds_c < 0
                        if np.any(negc):
                            beta = min(1.0, float(np.min(-tau * sc[negc] / ds_c[negc])))
                    zc = zc + beta * dz_c
                    sc = sc + beta * ds_c if mi else sc
                    try:
                        phic, auxc = barrier_merit(zc, sc)
                    except Exception:
                        break
                    if not np.isfinite(phic):
                        break
                    if phic <= phi0 + 1e-4 * alpha * min(dphi, 0.0) + 1e-12 * abs(phi0):
                        z_t, s_t, phi_t, aux = zc, sc, phic, auxc
                        accepted = True
                        break
                    if auxc[3] > 0.99 * theta_prev:
                        break
                    theta_prev = auxc[3]
                if accepted:
                    break
                # merit is blind to dual progress; accept a (corrected) full
                # step that clearly shrinks the KKT residual near feasibility
                if np.isfinite(phic) and auxc is not None:
                    err_t = kkt_error_at(zc, sc, lam + alpha * dlam, mu + alpha_mu * dmu, auxc)
                    if err_t <= 0.9 * err_mu and auxc[3] <= theta0 + err_mu:
                        z_t, s_t, phi_t, aux = zc, sc, phic, auxc
                        accepted = True
                        break
            alpha *= 0.5
            if alpha < 1e-12:
                break
        if debug:
            log.info(
                "it=%d err0=%.2e err_mu=%.2e mu_b=%.0e alpha=%.2e amax=%.2e dphi=%.2e nu=%.1e rho=%.1e accepted=%s",
                it, err_0, err_mu, mu_b, alpha, alpha_max, dphi, nu, rho_used, accepted,
            )
            if not accepted:
                for a_probe in (1.0, 0.25, 1e-2, 1e-4, 1e-6):
                    a_eff = min(a_probe, alpha_max)
                    try:
                        phi_probe, aux_probe = barrier_merit(z + a_eff * dz, s + a_eff * ds if mi else s)
                        log.info("   probe alpha=%.1e dphi_obs=%+.3e theta=%.2e", a_eff, phi_probe - phi0, aux_probe[3])
                    except Exception as exc:
                        log.info("   probe alpha=%.1e raised %s", a_eff, exc)
        if not accepted:
            status = "max-iter" if max(np.sum(np.abs(g)), np.sum(np.abs(np.maximum(h, 0)))) < 1e-6 else "infeasible"
            break

        z = z_t
        if mi:
            s = s_t
            mu = mu + alpha_mu * dmu
            mu = np.clip(mu, mu_b / (1e10 * s), 1e10 * mu_b / s)
        lam = lam + alpha * dlam
        f, g, h = aux[0], aux[1], aux[2]
        grad = np.asarray(nlp.cost_grad(z, p), float)

    if status != "converged" and best is not None:
        z, lam, mu, h = best

    point = KktPoint(
        z=z,
        lam=lam,
        mu=mu,
        residuals=Residuals(np.inf, np.inf, np.inf),
        status=status,
        iterations=it,
        ineq_values=np.asarray(nlp.ineq(z), float) if mi else np.zeros(0),
    )
    point.residuals = kkt_residuals(nlp, p, point)
    if status == "converged" and point.residuals.max() > tol:
        point.status = "max-iter"
    return point


def check_derivatives(nlp: ParametricNlp, p, z, h_fd: float = 1e-6, rtol: float = 1e-5) -> dict:
    """Validate user gradients/Jacobians against central finite differences.

    Returns worst relative errors per block; raises NlpError beyond rtol.
    """
    nlp = fold_bounds(nlp)
    p = np.asarray(p, float) if nlp.n_p else np.zeros(0)
    z = np.asarray(z, float)
    n = nlp.n_z
    report = {}

    def central(fun, i, h):
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        return (np.asarray(fun(zp)) - np.asarray(fun(zm))) / (2 * h)

    grad = nlp.cost_grad(z, p)
    fd = np.array([central(lambda q: nlp.cost(q, p), i, h_fd) for i in range(n)])
    report["cost_grad"] = float(np.max(np.abs(grad - fd) / np.maximum(1.0, np.abs(fd))))

    hess = nlp.cost_hess(z, p)
    fdh = np.stack([central(lambda q: nlp.cost_grad(q, p), i, h_fd) for i in range(n)], axis=1)
    report["cost_hess"] = float(np.max(np.abs(hess - fdh) / np.maximum(1.0, np.abs(fdh))))

    if nlp.m_eq:
        J = nlp.eq_jac(z)
        fdj = np.stack([central(nlp.eq, i, h_fd) for i in range(n)], axis=1)
        report["eq_jac"] = float(np.max(np.abs(J - fdj) / np.maximum(1.0, np.abs(fdj))))
        if nlp.eq_hess is not None:
            rng = np.random.default_rng(0)
            lam = rng.normal(size=nlp.m_eq)
            Hc = nlp.eq_hess(z, lam)
            fdc = np.stack([central(lambda q: nlp.eq_jac(q).T @ lam, i, 1e-5) for i in range(n)], axis=1)
            report["eq_hess"] = float(np.max(np.abs(Hc - fdc) / np.maximum(1.0, np.abs(fdc))))

    if nlp.m_ineq:
        J = nlp.ineq_jac(z)
        fdj = np.stack([central(nlp.ineq, i, h_fd) for i in range(n)], axis=1)
        report["ineq_jac"] = float(np.max(np.abs(J - fdj) / np.maximum(1.0, np.abs(fdj))))

    if nlp.cost_grad_p is not None and nlp.n_p:
        Jp = nlp.cost_grad_p(z, p)
        fdp = []
        for j in range(nlp.n_p):
            pp = p.copy()
            pm = p.copy()
            hj = h_fd * max(1.0, abs(p[j]))
            pp[j] += hj
            pm[j] -= hj
            fdp.append((np.asarray(nlp.cost_grad(z, pp)) - np.asarray(nlp.cost_grad(z, pm))) / (2 * hj))
        fdp = np.stack(fdp, axis=1)
        report["cost_grad_p"] = float(np.max(np.abs(Jp - fdp) / np.maximum(1.0, np.abs(fdp))))

    bad = {k: v for k, v in report.items() if v > rtol}
    if bad:
        raise NlpError(f"derivative check failed: {bad}")
    return report
