"""Dynamic single-track vehicle model in Frenet road coordinates.

States: [vx, vy, psidot, sigma, d, theta, delta]
  vx, vy   body-frame linear velocities, m/s
  psidot   yaw rate, rad/s
  sigma    arc-length progress along the centerline, m
  d        lateral offset (positive left), m
  theta    heading error w.r.t. road tangent, rad
  delta    steering-wheel angle, rad
Controls: [delta_rate (rad/s at the wheel), throttle in [0, 1]]

Tyre forces are linear in slip angle, drive force is throttle-proportional
minus rolling/aero drag; there is no brake actuator.  All functions are
generic over floats, numpy arrays and dual.Jet, which is how the exact
discrete-time Jacobians and Hessian contractions are obtained.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import dual
from .dual import value_of

NX = 7
NU = 2
VX, VY, PSIDOT, SIGMA, D, THETA, DELTA = range(NX)
DDELTA, TR = range(NU)

STATE_NAMES = ("vx", "vy", "psidot", "sigma", "d", "theta", "delta")
CONTROL_NAMES = ("ddelta", "tr")

MIN_SPEED_GUARD = 0.1  # m/s, model singular at standstill
MIN_PROJECTION_GUARD = 0.05  # lower bound on 1 - d*kappa


class SingularityError(ValueError):
    """Raised when a dynamics evaluation leaves the model's valid region."""


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1200.0  # kg
    inertia_z: float = 1500.0  # kg m^2
    lf: float = 1.2  # m, CoG to front axle
    lr: float = 1.4  # m, CoG to rear axle
    cornering_front: float = 70000.0  # N/rad
    cornering_rear: float = 70000.0  # N/rad
    steering_ratio: float = 15.0  # wheel angle per steering-wheel angle
    max_drive_force: float = 4000.0  # N at full throttle
    drag_constant: float = 180.0  # N, rolling resistance
    drag_quadratic: float = 0.75  # N s^2/m^2, aero
    delta_max: float = 2.0 * np.pi  # rad, steering wheel
    delta_rate_max: float = 4.0  # rad/s
    vmin: float = 14.0  # m/s
    vmax: float = 23.0  # m/s

    def validate(self) -> None:
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ValueError(f"vehicle parameter {name} must be positive, got {value}")
        if self.vmin >= self.vmax:
            raise ValueError("vmin must be below vmax")


@dataclass(frozen=True)
class VehicleState:
    vx: float
    vy: float = 0.0
    psidot: float = 0.0
    sigma: float = 0.0
    d: float = 0.0
    theta: float = 0.0
    delta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.psidot, self.sigma, self.d, self.theta, self.delta])

    @staticmethod
    def from_array(arr) -> "VehicleState":
        return VehicleState(*(float(v) for v in arr))


@dataclass(frozen=True)
class ControlInput:
    delta_rate: float
    throttle: float

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_rate, self.throttle])

    @staticmethod
    def from_array(arr) -> "ControlInput":
        return ControlInput(float(arr[0]), float(arr[1]))


def _check_guards(vx, d, kappa) -> None:
    vxv = np.asarray(value_of(vx))
    proj = 1.0 - np.asarray(value_of(d)) * np.asarray(value_of(kappa))
    if np.any(vxv <= MIN_SPEED_GUARD):
        raise SingularityError(f"longitudinal speed guard violated: min vx = {vxv.min():.4f} <= {MIN_SPEED_GUARD}")
    if np.any(proj <= MIN_PROJECTION_GUARD):
        raise SingularityError(f"Frenet projection guard violated: min 1-d*kappa = {proj.min():.4f} <= {MIN_PROJECTION_GUARD}")


def _derivatives(comps, u, kappa, p: VehicleParams):
    """Time derivatives of the 7 state components; generic numerics."""
    vx, vy, psidot, sigma, d, theta, delta = comps
    ddelta, tr = u
    _check_guards(vx, d, kappa)

    delta_f = delta * (1.0 / p.steering_ratio)
    alpha_f = (vy + p.lf * psidot) / vx - delta_f
    alpha_r = (vy - p.lr * psidot) / vx
    f_front = -p.cornering_front * alpha_f
    f_rear = -p.cornering_rear * alpha_r
    f_drive = tr * p.max_drive_force - (p.drag_constant + p.drag_quadratic * vx * vx)

    cos_df = dual.cos(delta_f)
    sin_df = dual.sin(delta_f)
    vx_dot = psidot * vy + (f_drive - f_front * sin_df) / p.mass
    vy_dot = -psidot * vx + (f_front * cos_df + f_rear) / p.mass
    psidot_dot = (p.lf * f_front * cos_df - p.lr * f_rear) / p.inertia_z

    cos_t = dual.cos(theta)
    sin_t = dual.sin(theta)
    sigma_dot = (vx * cos_t - vy * sin_t) / (1.0 - d * kappa)
    d_dot = vx * sin_t + vy * cos_t
    theta_dot = psidot - kappa * sigma_dot
    return vx_dot, vy_dot, psidot_dot, sigma_dot, d_dot, theta_dot, ddelta


def continuous_dynamics(x: VehicleState, u: ControlInput, kappa: float, params: VehicleParams) -> np.ndarray:
    """State derivative at a single point; kappa is the local curvature."""
    out = _derivatives(tuple(x.as_array()), (u.delta_rate, u.throttle), kappa, params)
    return np.array([float(v) for v in out])


def _rk4_components(comps, u, dt, kappa_fn, params):
    def f(c):
        return _derivatives(c, u, kappa_fn(c[SIGMA]), params)

    k1 = f(comps)
    k2 = f(tuple(c + 0.5 * dt * k for c, k in zip(comps, k1)))
    k3 = f(tuple(c + 0.5 * dt * k for c, k in zip(comps, k2)))
    k4 = f(tuple(c + dt * k for c, k in zip(comps, k3)))
    return tuple(
        c + (dt / 6.0) * (a + 2.0 * b + 2.0 * cc + dd)
        for c, a, b, cc, dd in zip(comps, k1, k2, k3, k4)
    )


def rk4_step(x: VehicleState, u: ControlInput, dt: float, kappa_fn, params: VehicleParams) -> VehicleState:
    """One classical Runge-Kutta step; curvature re-evaluated at stage sigmas."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = _rk4_components(tuple(x.as_array()), (u.delta_rate, u.throttle), dt, kappa_fn, params)
    return VehicleState.from_array([float(v) for v in out])


def rk4_batch(xs: np.ndarray, us: np.ndarray, dt: float, kappa_fn, params: VehicleParams) -> np.ndarray:
    """Vectorised rk4_step over K points: xs (K,7), us (K,2) -> (K,7)."""
    comps = tuple(xs[:, i] for i in range(NX))
    out = _rk4_components(comps, (us[:, 0], us[:, 1]), dt, kappa_fn, params)
    return np.stack(out, axis=1)


def seed_batch(xs, us, order):
    """Seed jets for a batch of (state, control) points; xs (K,7), us (K,2)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    us = np.atleast_2d(np.asarray(us, dtype=float))
    n = NX + NU
    comps = tuple(dual.variable(xs[:, i], i, n, order) for i in range(NX))
    ucomps = tuple(dual.variable(us[:, j], NX + j, n, order) for j in range(NU))
    return comps, ucomps


def rk4_jets(comps, ucomps, dt, kappa_fn, params):
    """Discrete step on jet components; exposes value/grad/hess in one pass."""
    return _rk4_components(comps, ucomps, dt, kappa_fn, params)


def rk4_batch_jacobians(xs, us, dt, kappa_fn, params):
    """Exact (K,7,9) Jacobians of the discrete step w.r.t. (x, u)."""
    squeeze = np.asarray(xs).ndim == 1
    comps, ucomps = seed_batch(xs, us, order=1)
    out = _rk4_components(comps, ucomps, dt, kappa_fn, params)
    jac = np.stack([o.g for o in out], axis=1)  # (K, 7, 9)
    return jac[0] if squeeze else jac


def rk4_batch_hessians(xs, us, dt, kappa_fn, params, w):
    """Exact (K,9,9) Hessians of sum_i w_i * step_i; w has shape (K,7)."""
    squeeze = np.asarray(xs).ndim == 1
    comps, ucomps = seed_batch(xs, us, order=2)
    out = _rk4_components(comps, ucomps, dt, kappa_fn, params)
    w = np.atleast_2d(w)
    hess = sum(w[:, i, None, None] * out[i].h for i in range(NX))
    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    return hess[0] if squeeze else hess


def discrete_jacobians(x: VehicleState, u: ControlInput, dt, kappa_fn, params):
    """Jacobians (d step/d x (7,7), d step/d u (7,2)) via first-order jets."""
    jac = rk4_batch_jacobians(x.as_array(), u.as_array(), dt, kappa_fn, params)
    return jac[:, :NX], jac[:, NX:]


def discrete_hessian_contraction(x: VehicleState, u: ControlInput, dt, kappa_fn, params, w):
    """Exact 9x9 Hessian of w . rk4_step over (x, u), via second-order jets."""
    w = np.asarray(w, dtype=float)
    if w.shape != (NX,):
        raise ValueError("w must be a 7-vector")
    return rk4_batch_hessians(x.as_array(), u.as_array(), dt, kappa_fn, params, w)


def accelerations(x: VehicleState, u: ControlInput, kappa: float, params: VehicleParams) -> tuple[float, float]:
    """Inertial body accelerations (ax, ay) from the model's force balance."""
    xdot = continuous_dynamics(x, u, kappa, params)
    ax = xdot[VX] - x.psidot * x.vy
    ay = xdot[VY] + x.psidot * x.vx
    return float(ax), float(ay)


def throttle_trim(vx: float, params: VehicleParams) -> float:
    """Throttle that balances drag at speed vx."""
    drag = params.drag_constant + params.drag_quadratic * vx * vx
    return float(np.clip(drag / params.max_drive_force, 0.0, 1.0))


def perturbed_params(params: VehicleParams, fraction: float, seed: int) -> VehicleParams:
    """Randomly scale the physical parameters by up to +-fraction (plant mismatch)."""
    rng = np.random.default_rng(seed)
    fields = ("mass", "inertia_z", "cornering_front", "cornering_rear", "max_drive_force", "drag_constant", "drag_quadratic")
    changes = {f: getattr(params, f) * (1.0 + rng.uniform(-fraction, fraction)) for f in fields}
    out = replace(params, **changes)
    out.validate()
    return out


# -- parameter file --------------------------------------------------------

_PARAM_KEYS = (
    "mass",
    "inertia_z",
    "lf",
    "lr",
    "cornering_front",
    "cornering_rear",
    "steering_ratio",
    "max_drive_force",
    "drag_constant",
    "drag_quadratic",
    "delta_max",
    "delta_rate_max",
    "vmin",
    "vmax",
)


def save_vehicle_params(params: VehicleParams, path) -> None:
    with open(path, "w") as fh:
        for key in _PARAM_KEYS:
            fh.write(f"{key}={getattr(params, key):.17g}\n")


def load_vehicle_params(path) -> VehicleParams:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val)
    missing = [k for k in _PARAM_KEYS if k not in values]
    if missing:
        raise ValueError(f"vehicle parameter file missing keys: {missing}")
    params = VehicleParams(**{k: values[k] for k in _PARAM_KEYS})
    params.validate()
    return params
