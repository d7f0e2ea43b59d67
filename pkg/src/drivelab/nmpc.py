"""Receding-horizon driving controller as a parametric NLP.

Multiple-shooting transcription over N steps: decision variables are all
knot states and controls, linked by RK4 defect equalities, with lane, speed
and actuator inequalities at every knot.  The stage cost is the weighted
quadratic form whose six entries [W_d, d_bar, W_v, vx_bar, W_ddelta, W_tr]
are the learnable parameters; every squared term is scaled by its channel's
half-range so all contributions live in [-1, 1] units.

Two baseline variants share the transcription: a setpoint tracker with unit
weights, and a minimal-intervention safety filter with an aligned-with-road
terminal equality.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dual
from . import nlp as nlp_mod
from . import vehicle as veh
from .nlp import KktPoint, ParametricNlp
from .sensitivity import adjoint, build_sensitivity
from .vehicle import NX, NU, VX, D, THETA, DELTA, VehicleParams, VehicleState, ControlInput

N_PARAMS = 6
PW_D, PD_BAR, PW_V, PVX_BAR, PW_DD, PW_TR = range(N_PARAMS)
PARAM_NAMES = ("Wd", "dbar", "Wv", "vxbar", "Wddelta", "Wtr")


class InfeasibleStateError(ValueError):
    """Initial state outside the recoverable envelope of the controller."""


class NmpcSolveError(RuntimeError):
    """Solve failed; carries the best iterate so the caller can decide."""

    def __init__(self, message: str, best: "NmpcSolution"):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class NmpcParams:
    w_d: float
    d_bar: float
    w_v: float
    vx_bar: float
    w_ddelta: float
    w_tr: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w_d, self.d_bar, self.w_v, self.vx_bar, self.w_ddelta, self.w_tr])

    @staticmethod
    def from_array(arr) -> "NmpcParams":
        return NmpcParams(*(float(v) for v in arr))

    def validate(self, cfg: "NmpcConfig") -> None:
        for name in ("w_d", "w_v", "w_ddelta", "w_tr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if abs(self.d_bar) > cfg.d_offset_limit + 1e-9:
            raise ValueError(f"d_bar {self.d_bar} outside +-{cfg.d_offset_limit}")
        if not (cfg.vehicle.vmin - 1e-9 <= self.vx_bar <= cfg.vehicle.vmax + 1e-9):
            raise ValueError(f"vx_bar {self.vx_bar} outside [{cfg.vehicle.vmin}, {cfg.vehicle.vmax}]")


@dataclass(frozen=True, eq=False)
class NmpcConfig:
    vehicle: VehicleParams
    lane_width: float
    n_steps: int = 15
    dt: float = 0.1
    gamma: float = 1e-3  # regularisation weight, ensures a well-posed problem
    gamma_sf: float = 5e-6  # lighter regularisation for the safety filter
    sf_lane_margin: float = 0.05  # m of internal tightening in the filter
    sf_tol: float = 1e-6  # filter solves converge here; boundary-riding
    # instances routinely stall between 1e-7 and 1e-8 without affecting the
    # filtered action at any meaningful precision
    theta_scale: float = 0.2  # rad, heading-error normalisation
    d_offset_margin: float = 0.25  # m kept clear of the lane bound by d_bar
    state_tol: float = 0.1  # admissible initial-state violation of lane bound

    def __post_init__(self):
        if abs(self.n_steps * self.dt - 1.5) > 1e-9:
            raise ValueError("horizon must span 1.5 s (n_steps * dt)")
        if self.gamma <= 0 or self.gamma_sf <= 0:
            raise ValueError("regularisation weights must be positive")
        if self.lane_width <= 0:
            raise ValueError("lane_width must be positive")

    # channel half-ranges used for the [-1, 1] scaling of cost terms
    @property
    def scale_d(self) -> float:
        return self.lane_width / 2.0

    @property
    def scale_v(self) -> float:
        return (self.vehicle.vmax - self.vehicle.vmin) / 2.0

    @property
    def scale_delta(self) -> float:
        return self.vehicle.delta_max

    @property
    def scale_ddelta(self) -> float:
        return self.vehicle.delta_rate_max

    @property
    def scale_tr(self) -> float:
        return 1.0

    @property
    def d_offset_limit(self) -> float:
        return self.lane_width / 2.0 - self.d_offset_margin

    @property
    def n_z(self) -> int:
        return (self.n_steps + 1) * NX + self.n_steps * NU

    @property
    def n_states_flat(self) -> int:
        return (self.n_steps + 1) * NX

    def state_slice(self, k: int) -> slice:
        return slice(k * NX, (k + 1) * NX)

    def control_slice(self, k: int) -> slice:
        return slice(self.n_states_flat + k * NU, self.n_states_flat + (k + 1) * NU)

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xs = z[: self.n_states_flat].reshape(self.n_steps + 1, NX)
        us = z[self.n_states_flat :].reshape(self.n_steps, NU)
        return xs, us


@dataclass
class NmpcSolution:
    action: ControlInput
    kkt: KktPoint
    states: np.ndarray  # (N+1, 7)
    controls: np.ndarray  # (N, 2)
    solve_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.kkt.converged


# -- constraint matrix (constant per config) --------------------------------

_ineq_cache: dict[tuple[int, float], tuple[np.ndarray, np.ndarray]] = {}


def _ineq_matrix(cfg: NmpcConfig, d_margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    cached = _ineq_cache.get((id(cfg), d_margin))
    if cached is not None:
        return cached
    rows = []
    rhs = []
    half = cfg.lane_width / 2.0 - d_margin
    p = cfg.vehicle

    def add(index: int, coef: float, bound: float):
        r = np.zeros(cfg.n_z)
        r[index] = coef
        rows.append(r)
        rhs.append(bound)

    # path constraints at knots 1..N (x0 is pinned by the initial equality)
    for k in range(1, cfg.n_steps + 1):
        s = cfg.state_slice(k).start
        add(s + D, 1.0, half)
        add(s + D, -1.0, half)
        add(s + VX, 1.0, p.vmax)
        add(s + VX, -1.0, -p.vmin)
        add(s + DELTA, 1.0, p.delta_max)
        add(s + DELTA, -1.0, p.delta_max)
    for k in range(cfg.n_steps):
        s = cfg.control_slice(k).start
        add(s + 0, 1.0, p.delta_rate_max)
        add(s + 0, -1.0, p.delta_rate_max)
        add(s + 1, 1.0, 1.0)
        add(s + 1, -1.0, 0.0)
    A = np.asarray(rows)
    b = np.asarray(rhs)
    _ineq_cache[(id(cfg), d_margin)] = (A, b)
    return A, b


def _check_initial_state(s_t: VehicleState, cfg: NmpcConfig) -> None:
    p = cfg.vehicle
    half = cfg.lane_width / 2.0
    problems = []
    if abs(s_t.d) > half + cfg.state_tol:
        problems.append(f"|d|={abs(s_t.d):.3f} > {half + cfg.state_tol:.3f}")
    if not (p.vmin - 1.0 <= s_t.vx <= p.vmax + 1.0):
        problems.append(f"vx={s_t.vx:.2f} outside [{p.vmin - 1.0}, {p.vmax + 1.0}]")
    if abs(s_t.delta) > p.delta_max + 0.01:
        problems.append(f"|delta|={abs(s_t.delta):.3f} > {p.delta_max:.3f}")
    if problems:
        raise InfeasibleStateError("initial state rejected: " + "; ".join(problems))


def _dynamics_evaluators(s_t: VehicleState, cfg: NmpcConfig, kappa_fn, extra_terminal: bool = False):
    """Equality callbacks: initial pin, RK4 defects, optional d_N = theta_N = 0.

    A per-z cache shares one jet evaluation between values, Jacobian and the
    second-derivative tensor, which is what makes the solver loop cheap.
    """
    N = cfg.n_steps
    m_eq = (N + 1) * NX + (2 if extra_terminal else 0)
    s0 = s_t.as_array()
    par = cfg.vehicle
    cache: dict = {"key": None, "order": -1, "pred": None, "jac": None, "tensor": None}

    def _ensure(z, order):
        key = z.tobytes()
        if cache["key"] != key:
            cache.update(key=key, order=-1, pred=None, jac=None, tensor=None)
        if cache["order"] >= order:
            return
        xs, us = cfg.split(z)
        if order == 0:
            cache["pred"] = veh.rk4_batch(xs[:-1], us, cfg.dt, kappa_fn, par)
            cache["order"] = 0
            return
        comps, ucomps = veh.seed_batch(xs[:-1], us, order=2 if order >= 2 else 1)
        out = veh.rk4_jets(comps, ucomps, cfg.dt, kappa_fn, par)
        cache["pred"] = np.stack([o.val for o in out], axis=1)
        cache["jac"] = np.stack([o.g for o in out], axis=1)
        if order >= 2:
            cache["tensor"] = np.stack([o.h for o in out], axis=1)  # (N,7,9,9)
        cache["order"] = order

    def eq(z):
        _ensure(z, 0)
        xs, _ = cfg.split(z)
        out = np.empty(m_eq)
        out[:NX] = xs[0] - s0
        out[NX : (N + 1) * NX] = (xs[1:] - cache["pred"]).ravel()
        if extra_terminal:
            out[-2] = xs[N, D]
            out[-1] = xs[N, THETA]
        return out

    def eq_jac(z):
        _ensure(z, 1)
        jac = cache["jac"]
        J = np.zeros((m_eq, cfg.n_z))
        J[:NX, :NX] = np.eye(NX)
        for k in range(N):
            r = slice((k + 1) * NX, (k + 2) * NX)
            J[r, cfg.state_slice(k + 1)] = np.eye(NX)
            J[r, cfg.state_slice(k)] = -jac[k, :, :NX]
            J[r, cfg.control_slice(k)] = -jac[k, :, NX:]
        if extra_terminal:
            J[-2, cfg.state_slice(N).start + D] = 1.0
            J[-1, cfg.state_slice(N).start + THETA] = 1.0
        return J

    def eq_hess(z, lam):
        _ensure(z, 2)
        w = -lam[NX : (N + 1) * NX].reshape(N, NX)
        hess = np.einsum("ki,kipq->kpq", w, cache["tensor"])
        hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
        H = np.zeros((cfg.n_z, cfg.n_z))
        for k in range(N):
            xsl = cfg.state_slice(k)
            usl = cfg.control_slice(k)
            H[xsl, xsl] += hess[k, :NX, :NX]
            H[xsl, usl] += hess[k, :NX, NX:]
            H[usl, xsl] += hess[k, NX:, :NX]
            H[usl, usl] += hess[k, NX:, NX:]
        return H

    return m_eq, eq, eq_jac, eq_hess


def _stage_indices(cfg: NmpcConfig):
    """Flat indices of each penalised channel over stages 0..N-1."""
    N = cfg.n_steps
    idx_d = np.array([cfg.state_slice(k).start + D for k in range(N)])
    idx_vx = np.array([cfg.state_slice(k).start + VX for k in range(N)])
    idx_th = np.array([cfg.state_slice(k).start + THETA for k in range(N)])
    idx_de = np.array([cfg.state_slice(k).start + DELTA for k in range(N)])
    idx_dd = np.array([cfg.control_slice(k).start + 0 for k in range(N)])
    idx_tr = np.array([cfg.control_slice(k).start + 1 for k in range(N)])
    return idx_d, idx_vx, idx_th, idx_de, idx_dd, idx_tr


def transcribe(s_t: VehicleState, cfg: NmpcConfig, kappa_fn) -> ParametricNlp:
    """Driving NMPC with the six-parameter learnable stage cost."""
    _check_initial_state(s_t, cfg)
    m_eq, eq, eq_jac, eq_hess = _dynamics_evaluators(s_t, cfg, kappa_fn)
    A, b = _ineq_matrix(cfg)
    idx_d, idx_vx, idx_th, idx_de, idx_dd, idx_tr = _stage_indices(cfg)
    inv_d2 = 1.0 / cfg.scale_d**2
    inv_v2 = 1.0 / cfg.scale_v**2
    inv_th2 = 1.0 / cfg.theta_scale**2
    inv_de2 = 1.0 / cfg.scale_delta**2
    inv_dd2 = 1.0 / cfg.scale_ddelta**2
    inv_tr2 = 1.0 / cfg.scale_tr**2
    gam = cfg.gamma

    def cost(z, p):
        wd, dbar, wv, vbar, wdd, wtr = p
        return float(
            wd * np.sum((z[idx_d] - dbar) ** 2) * inv_d2
            + wv * np.sum((z[idx_vx] - vbar) ** 2) * inv_v2
            + wdd * np.sum(z[idx_dd] ** 2) * inv_dd2
            + wtr * np.sum(z[idx_tr] ** 2) * inv_tr2
            + gam
            * (
                np.sum(z[idx_d] ** 2) * inv_d2
                + np.sum(z[idx_th] ** 2) * inv_th2
                + np.sum(z[idx_de] ** 2) * inv_de2
                + np.sum(z[idx_dd] ** 2) * inv_dd2
                + np.sum(z[idx_tr] ** 2) * inv_tr2
            )
        )

    def cost_grad(z, p):
        wd, dbar, wv, vbar, wdd, wtr = p
        g = np.zeros(cfg.n_z)
        g[idx_d] = 2.0 * (wd * (z[idx_d] - dbar) + gam * z[idx_d]) * inv_d2
        g[idx_vx] = 2.0 * wv * (z[idx_vx] - vbar) * inv_v2
        g[idx_th] = 2.0 * gam * z[idx_th] * inv_th2
        g[idx_de] = 2.0 * gam * z[idx_de] * inv_de2
        g[idx_dd] = 2.0 * (wdd + gam) * z[idx_dd] * inv_dd2
        g[idx_tr] = 2.0 * (wtr + gam) * z[idx_tr] * inv_tr2
        return g

    def cost_hess(z, p):
        wd, dbar, wv, vbar, wdd, wtr = p
        diag = np.zeros(cfg.n_z)
        diag[idx_d] = 2.0 * (wd + gam) * inv_d2
        diag[idx_vx] = 2.0 * wv * inv_v2
        diag[idx_th] = 2.0 * gam * inv_th2
        diag[idx_de] = 2.0 * gam * inv_de2
        diag[idx_dd] = 2.0 * (wdd + gam) * inv_dd2
        diag[idx_tr] = 2.0 * (wtr + gam) * inv_tr2
        return np.diag(diag)

    def cost_grad_p(z, p):
        wd, dbar, wv, vbar, wdd, wtr = p
        out = np.zeros((cfg.n_z, N_PARAMS))
        out[idx_d, PW_D] = 2.0 * (z[idx_d] - dbar) * inv_d2
        out[idx_d, PD_BAR] = -2.0 * wd * inv_d2
        out[idx_vx, PW_V] = 2.0 * (z[idx_vx] - vbar) * inv_v2
        out[idx_vx, PVX_BAR] = -2.0 * wv * inv_v2
        out[idx_dd, PW_DD] = 2.0 * z[idx_dd] * inv_dd2
        out[idx_tr, PW_TR] = 2.0 * z[idx_tr] * inv_tr2
        return out

    return ParametricNlp(
        n_z=cfg.n_z,
        n_p=N_PARAMS,
        m_eq=m_eq,
        m_ineq=A.shape[0],
        cost=cost,
        cost_grad=cost_grad,
        cost_hess=cost_hess,
        cost_grad_p=cost_grad_p,
        eq=eq,
        eq_jac=eq_jac,
        eq_hess=eq_hess,
        ineq=lambda z: A @ z - b,
        ineq_jac=lambda z: A,
        ineq_hess=lambda z, mu: np.zeros((cfg.n_z, cfg.n_z)),
    )


def transcribe_track_variant(s_t: VehicleState, d_bar: float, vx_bar: float, cfg: NmpcConfig, kappa_fn) -> ParametricNlp:
    """Setpoint-tracking baseline: unit weights on (d, vx) offsets."""
    if abs(d_bar) > cfg.d_offset_limit + 1e-9:
        raise ValueError(f"d_bar {d_bar} outside +-{cfg.d_offset_limit}")
    if not (cfg.vehicle.vmin <= vx_bar <= cfg.vehicle.vmax):
        raise ValueError(f"vx_bar {vx_bar} outside the speed window")
    _check_initial_state(s_t, cfg)
    m_eq, eq, eq_jac, eq_hess = _dynamics_evaluators(s_t, cfg, kappa_fn)
    A, b = _ineq_matrix(cfg)
    idx_d, idx_vx, idx_th, _, idx_dd, idx_tr = _stage_indices(cfg)
    inv_d2 = 1.0 / cfg.scale_d**2
    inv_v2 = 1.0 / cfg.scale_v**2
    inv_th2 = 1.0 / cfg.theta_scale**2
    inv_dd2 = 1.0 / cfg.scale_ddelta**2
    inv_tr2 = 1.0 / cfg.scale_tr**2
    gam = cfg.gamma

    def cost(z, p):
        return float(
            np.sum((z[idx_d] - d_bar) ** 2) * inv_d2
            + np.sum((z[idx_vx] - vx_bar) ** 2) * inv_v2
            + gam
            * (
                np.sum(z[idx_dd] ** 2) * inv_dd2
                + np.sum(z[idx_th] ** 2) * inv_th2
                + np.sum(z[idx_d] ** 2) * inv_d2
                + np.sum(z[idx_tr] ** 2) * inv_tr2
            )
        )

    def cost_grad(z, p):
        g = np.zeros(cfg.n_z)
        g[idx_d] = 2.0 * ((z[idx_d] - d_bar) + gam * z[idx_d]) * inv_d2
        g[idx_vx] = 2.0 * (z[idx_vx] - vx_bar) * inv_v2
        g[idx_th] = 2.0 * gam * z[idx_th] * inv_th2
        g[idx_dd] = 2.0 * gam * z[idx_dd] * inv_dd2
        g[idx_tr] = 2.0 * gam * z[idx_tr] * inv_tr2
        return g

    def cost_hess(z, p):
        diag = np.zeros(cfg.n_z)
        diag[idx_d] = 2.0 * (1.0 + gam) * inv_d2
        diag[idx_vx] = 2.0 * inv_v2
        diag[idx_th] = 2.0 * gam * inv_th2
        diag[idx_dd] = 2.0 * gam * inv_dd2
        diag[idx_tr] = 2.0 * gam * inv_tr2
        return np.diag(diag)

    return ParametricNlp(
        n_z=cfg.n_z,
        n_p=0,
        m_eq=m_eq,
        m_ineq=A.shape[0],
        cost=cost,
        cost_grad=cost_grad,
        cost_hess=cost_hess,
        eq=eq,
        eq_jac=eq_jac,
        eq_hess=eq_hess,
        ineq=lambda z: A @ z - b,
        ineq_jac=lambda z: A,
        ineq_hess=lambda z, mu: np.zeros((cfg.n_z, cfg.n_z)),
    )


def transcribe_safety_filter(s_t: VehicleState, a_net: ControlInput, cfg: NmpcConfig, kappa_fn) -> ParametricNlp:
    """Minimal-intervention filter toward the aligned-with-road terminal set."""
    p = cfg.vehicle
    if abs(a_net.delta_rate) > p.delta_rate_max + 1e-9 or not (-1e-9 <= a_net.throttle <= 1.0 + 1e-9):
        raise ValueError("network action outside actuator bounds")
    _check_initial_state(s_t, cfg)
    m_eq, eq, eq_jac, eq_hess = _dynamics_evaluators(s_t, cfg, kappa_fn, extra_terminal=True)
    # internal lane tightening keeps the filter recursively feasible under
    # the controller-vs-plant integration mismatch when riding the boundary
    A, b = _ineq_matrix(cfg, d_margin=cfg.sf_lane_margin)
    idx_d, _, idx_th, idx_de, idx_dd, idx_tr = _stage_indices(cfg)
    i_dd0 = idx_dd[0]
    i_tr0 = idx_tr[0]
    inv_d2 = 1.0 / cfg.scale_d**2
    inv_th2 = 1.0 / cfg.theta_scale**2
    inv_de2 = 1.0 / cfg.scale_delta**2
    inv_dd2 = 1.0 / cfg.scale_ddelta**2
    inv_tr2 = 1.0 / cfg.scale_tr**2
    gam = cfg.gamma_sf
    a0, a1 = a_net.delta_rate, a_net.throttle

    # steering rates after the first knot are not in the published filter
    # objective but carry a flat direction without a penalty; regularising
    # them (same role the main controller's regulariser plays) keeps the
    # reduced problem strictly convex while leaving the u0 tradeoff intact
    idx_dd_rest = idx_dd[1:]

    def cost(z, p_):
        return float(
            (z[i_dd0] - a0) ** 2 * inv_dd2
            + (z[i_tr0] - a1) ** 2 * inv_tr2
            + gam
            * (
                np.sum(z[idx_de] ** 2) * inv_de2
                + np.sum(z[idx_th] ** 2) * inv_th2
                + np.sum(z[idx_d] ** 2) * inv_d2
                + np.sum(z[idx_tr] ** 2) * inv_tr2
                + np.sum(z[idx_dd_rest] ** 2) * inv_dd2
            )
        )

    def cost_grad(z, p_):
        g = np.zeros(cfg.n_z)
        g[idx_dd_rest] = 2.0 * gam * z[idx_dd_rest] * inv_dd2
        g[i_dd0] = 2.0 * (z[i_dd0] - a0) * inv_dd2
        g[idx_tr] = 2.0 * gam * z[idx_tr] * inv_tr2
        g[i_tr0] += 2.0 * (z[i_tr0] - a1) * inv_tr2
        g[idx_de] += 2.0 * gam * z[idx_de] * inv_de2
        g[idx_th] += 2.0 * gam * z[idx_th] * inv_th2
        g[idx_d] += 2.0 * gam * z[idx_d] * inv_d2
        return g

    def cost_hess(z, p_):
        diag = np.zeros(cfg.n_z)
        diag[idx_de] = 2.0 * gam * inv_de2
        diag[idx_th] = 2.0 * gam * inv_th2
        diag[idx_d] = 2.0 * gam * inv_d2
        diag[idx_tr] = 2.0 * gam * inv_tr2
        diag[idx_dd_rest] = 2.0 * gam * inv_dd2
        diag[i_dd0] = 2.0 * inv_dd2
        diag[i_tr0] += 2.0 * inv_tr2
        return np.diag(diag)

    return ParametricNlp(
        n_z=cfg.n_z,
        n_p=0,
        m_eq=m_eq,
        m_ineq=A.shape[0],
        cost=cost,
        cost_grad=cost_grad,
        cost_hess=cost_hess,
        eq=eq,
        eq_jac=eq_jac,
        eq_hess=eq_hess,
        ineq=lambda z: A @ z - b,
        ineq_jac=lambda z: A,
        ineq_hess=lambda z, mu: np.zeros((cfg.n_z, cfg.n_z)),
    )


# -- solve wrappers ----------------------------------------------------------


def default_initial_guess(s_t: VehicleState, cfg: NmpcConfig, kappa_fn) -> np.ndarray:
    """Rollout under a crude lane-centering feedback with trimmed throttle.

    The feedback keeps the guess inside the lane even from boundary states,
    and knots are clipped into the inequality bounds afterwards: defect
    violations are much easier on the interior-point method than violated
    bounds.
    """
    p = cfg.vehicle
    wheelbase = p.lf + p.lr
    xs = [s_t.as_array()]
    us = []
    state = s_t
    for _ in range(cfg.n_steps):
        kap = float(dual.value_of(kappa_fn(state.sigma)))
        delta_des = p.steering_ratio * (wheelbase * kap - 0.04 * state.d - 0.6 * state.theta)
        delta_des = float(np.clip(delta_des, -p.delta_max, p.delta_max))
        rate = float(np.clip((delta_des - state.delta) / (3.0 * cfg.dt), -0.9 * p.delta_rate_max, 0.9 * p.delta_rate_max))
        u = ControlInput(rate, veh.throttle_trim(state.vx, p))
        state = veh.rk4_step(state, u, cfg.dt, kappa_fn, p)
        xs.append(state.as_array())
        us.append(u.as_array())
    xs = np.asarray(xs)
    us = np.asarray(us)
    p = cfg.vehicle
    margin = 0.01
    half = cfg.lane_width / 2.0
    xs[1:, D] = np.clip(xs[1:, D], -half + margin, half - margin)
    xs[1:, VX] = np.clip(xs[1:, VX], p.vmin + margin, p.vmax - margin)
    xs[1:, DELTA] = np.clip(xs[1:, DELTA], -p.delta_max + margin, p.delta_max - margin)
    us[:, 0] = np.clip(us[:, 0], -p.delta_rate_max + margin, p.delta_rate_max - margin)
    us[:, 1] = np.clip(us[:, 1], margin, 1.0 - margin)
    return np.concatenate([xs.ravel(), us.ravel()])


def shifted_guess(s_t: VehicleState, previous: NmpcSolution, cfg: NmpcConfig) -> np.ndarray:
    """Shift the previous trajectory one knot and repeat the last knot."""
    xs = np.vstack([s_t.as_array(), previous.states[2:], previous.states[-1]])
    us = np.vstack([previous.controls[1:], previous.controls[-1]])
    return np.concatenate([xs.ravel(), us.ravel()])


def _extract_solution(point: KktPoint, cfg: NmpcConfig, elapsed: float) -> NmpcSolution:
    xs, us = cfg.split(point.z)
    return NmpcSolution(
        action=ControlInput(float(us[0, 0]), float(us[0, 1])),
        kkt=point,
        states=xs.copy(),
        controls=us.copy(),
        solve_time=elapsed,
    )


def solve_nlp_step(
    problem: ParametricNlp,
    p_vec: np.ndarray,
    z0: np.ndarray,
    cfg: NmpcConfig,
    warm: bool,
    lam0: Optional[np.ndarray] = None,
    mu0: Optional[np.ndarray] = None,
    tol: float = nlp_mod.TOL_KKT,
) -> NmpcSolution:
    start = time.perf_counter()
    point = nlp_mod.solve(
        problem,
        p_vec,
        z0,
        tol=tol,
        mu_barrier0=1e-8 if warm else 1e-1,
        s_min=1e-8 if warm else 1e-3,
        lam0=lam0,
        mu0=mu0,
    )
    if warm and not point.converged:
        # cold restart before giving up
        point2 = nlp_mod.solve(problem, p_vec, z0, tol=tol, mu_barrier0=1e-1, s_min=1e-3)
        if point2.residuals.max() < point.residuals.max():
            point = point2
    sol = _extract_solution(point, cfg, time.perf_counter() - start)
    if not point.converged:
        raise NmpcSolveError(
            f"NMPC solve failed ({point.status}, residual {point.residuals.max():.2e})", sol
        )
    return sol


def solve_step(
    s_t: VehicleState,
    p: NmpcParams,
    warm: Optional[NmpcSolution],
    cfg: NmpcConfig,
    kappa_fn,
) -> NmpcSolution:
    """One receding-horizon solve of the driving NMPC."""
    p.validate(cfg)
    problem = transcribe(s_t, cfg, kappa_fn)
    if warm is not None:
        z0 = shifted_guess(s_t, warm, cfg)
        return solve_nlp_step(problem, p.as_array(), z0, cfg, True, lam0=warm.kkt.lam, mu0=warm.kkt.mu)
    z0 = default_initial_guess(s_t, cfg, kappa_fn)
    return solve_nlp_step(problem, p.as_array(), z0, cfg, False)


def action_cotangent(sol: NmpcSolution, problem: ParametricNlp, p: NmpcParams, abar: np.ndarray) -> np.ndarray:
    """Pull a cotangent on the first control back to the six cost parameters."""
    abar = np.asarray(abar, float)
    if abar.shape != (NU,):
        raise ValueError("abar must be a 2-vector on the first control")
    # layout: (N+1)*NX knot states followed by N*NU controls
    n_horizon = (problem.n_z - NX) // (NX + NU)
    first_u = (n_horizon + 1) * NX
    zbar = np.zeros(problem.n_z)
    zbar[first_u : first_u + NU] = abar
    system = build_sensitivity(problem, p.as_array(), sol.kkt)
    return adjoint(system, zbar)
