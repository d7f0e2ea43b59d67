"""Closed test-track geometry as a piecewise-linear curvature profile.

The track is defined purely by its curvature over arc length; transitions
between straights and circular arcs are clothoids, i.e. linear curvature
ramps.  Cartesian coordinates are reconstructed by integrating the heading,
and are only needed for figures and consistency checks.
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import dual

log = logging.getLogger(__name__)

HEADING_CLOSURE_TOL = 1e-6
POSITION_CLOSURE_TOL = 0.1  # m, one full lap

# preview distances for feature extraction, metres ahead of the vehicle
PREVIEW_OFFSETS = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)


class TrackError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CurvatureProfile:
    """Piecewise-linear curvature kappa(sigma) of a closed circuit."""

    breakpoints: np.ndarray  # arc length, m, strictly increasing, [0, L]
    kappa_values: np.ndarray  # 1/m at each breakpoint
    total_length: float  # m
    lane_width: float  # m

    def validate(self) -> None:
        bp = self.breakpoints
        kv = self.kappa_values
        if bp.ndim != 1 or bp.shape != kv.shape or bp.size < 2:
            raise TrackError("breakpoints/kappa_values must be matching 1-d arrays")
        if not np.all(np.diff(bp) > 0):
            raise TrackError("breakpoints must be strictly increasing")
        if bp[0] != 0.0 or abs(bp[-1] - self.total_length) > 1e-9:
            raise TrackError("breakpoints must start at 0 and end at total_length")
        if abs(kv[0] - kv[-1]) > 1e-12:
            raise TrackError("kappa(0) must equal kappa(L) for a closed loop")
        if self.lane_width <= 0:
            raise TrackError("lane_width must be positive")
        turn = float(np.trapezoid(kv, bp))
        if abs(turn - 2.0 * math.pi) > HEADING_CLOSURE_TOL:
            raise TrackError(f"heading closure violated: integral kappa = {turn:.9f}, expected 2*pi")


def curvature(profile: CurvatureProfile, sigma):
    """Curvature at arc length sigma (wraps modulo track length)."""
    s = np.mod(sigma, profile.total_length)
    return np.interp(s, profile.breakpoints, profile.kappa_values)


def curvature_and_slope(profile: CurvatureProfile, sigma: float) -> tuple[float, float]:
    """Curvature value and local d(kappa)/d(sigma) at sigma."""
    s = float(np.mod(sigma, profile.total_length))
    bp = profile.breakpoints
    kv = profile.kappa_values
    i = int(np.searchsorted(bp, s, side="right")) - 1
    i = min(max(i, 0), bp.size - 2)
    slope = (kv[i + 1] - kv[i]) / (bp[i + 1] - bp[i])
    return float(kv[i] + slope * (s - bp[i])), float(slope)


def kappa_function(profile: CurvatureProfile):
    """Curvature lookup usable with floats, arrays and Jet arguments.

    Jets are handled via the local linearisation of the profile; the second
    derivative of a piecewise-linear profile is zero between breakpoints.
    """

    bp = profile.breakpoints
    kv = profile.kappa_values
    L = profile.total_length
    seg_slope = np.diff(kv) / np.diff(bp)

    def kappa(sigma):
        if isinstance(sigma, dual.Jet):
            s = np.mod(sigma.val, L)
            idx = np.clip(np.searchsorted(bp, s, side="right") - 1, 0, bp.size - 2)
            slope = seg_slope[idx]
            val = kv[idx] + slope * (s - bp[idx])
            g = np.expand_dims(slope, -1) * sigma.g
            h = None
            if sigma.h is not None:
                h = np.expand_dims(np.expand_dims(slope, -1), -1) * sigma.h
            return dual.Jet(val, g, h)
        return np.interp(np.mod(sigma, L), bp, kv)

    return kappa


def curvature_preview(profile: CurvatureProfile, sigma: float, offsets) -> np.ndarray:
    """Curvature sampled at sigma + offsets (offsets must be >= 0)."""
    offs = np.asarray(offsets, dtype=float)
    if np.any(offs < 0):
        raise TrackError("preview offsets must be non-negative")
    return curvature(profile, sigma + offs)


# -- construction ---------------------------------------------------------

RAMP_LENGTH = 30.0  # m, clothoid transition per spec'd layout
CHICANE_RADII = ((90.0, -90.0), (100.0, -100.0), (110.0, -110.0), (120.0, -120.0))
CONNECTOR_RADIUS = 80.0  # m, four 90-degree left corners closing the loop
ARC_SWEEP = math.pi / 4.0  # heading change of each listed arc


def _curve_pieces(radius: float, sweep: float) -> list[tuple[float, float, float]]:
    """(length, kappa_start, kappa_end) pieces of ramp-arc-ramp at a radius."""
    k = 1.0 / radius
    arc_len = sweep / abs(k) - RAMP_LENGTH  # ramps contribute RAMP_LENGTH*|k| of heading
    if arc_len <= 0:
        raise TrackError(f"radius {radius} too tight for {RAMP_LENGTH} m ramps")
    return [(RAMP_LENGTH, 0.0, k), (arc_len, k, k), (RAMP_LENGTH, k, 0.0)]


def _piece_displacement(length: float, k0: float, k1: float, psi0: float, n=400):
    """Endpoint displacement and heading change of one constant/linear-kappa piece."""
    s = np.linspace(0.0, length, n)
    kap = k0 + (k1 - k0) * s / length
    psi = psi0 + np.concatenate(([0.0], np.cumsum((kap[1:] + kap[:-1]) * 0.5 * np.diff(s))))
    dx = float(np.trapezoid(np.cos(psi), s))
    dy = float(np.trapezoid(np.sin(psi), s))
    return dx, dy, psi[-1]


def build_test_track(lane_width: float = 4.5) -> CurvatureProfile:
    """Closed circuit with the eight listed arc radii as alternating chicanes.

    The signed 45-degree arcs cancel in heading, so four 90-degree connector
    corners close the loop; straight lengths on two opposite sides are then
    adjusted so the centerline returns to its starting point.
    """

    base_straight = 60.0
    gap_straight = 25.0

    def side_pieces(pair):
        pieces = [(base_straight, 0.0, 0.0)]
        pieces += _curve_pieces(pair[0], ARC_SWEEP)
        pieces.append((gap_straight, 0.0, 0.0))
        pieces += _curve_pieces(pair[1], ARC_SWEEP)
        # adjustable straight sits here, before the corner
        pieces.append((base_straight, 0.0, 0.0))
        pieces += _curve_pieces(CONNECTOR_RADIUS, math.pi / 2.0)
        return pieces

    sides = [side_pieces(pair) for pair in CHICANE_RADII]
    adj_index = len(sides[0]) - 4  # the straight before each corner

    # endpoint displacement with zero adjustment, tracking exact headings
    psi = 0.0
    disp = np.zeros(2)
    side_dirs = []
    for side in sides:
        side_dirs.append(np.array([math.cos(psi), math.sin(psi)]))
        for length, k0, k1 in side:
            dx, dy, psi = _piece_displacement(length, k0, k1, psi)
            disp += (dx, dy)

    # solve adjustments on opposite side pairs: d0*u0 + d2*u2 = -disp etc.
    adjust = [0.0] * 4
    for a, b, comp in ((0, 2, 0), (1, 3, 1)):
        need = -disp[comp] * side_dirs[a][comp]  # project onto side a direction
        if need >= 0:
            adjust[a] = need
        else:
            adjust[b] = -need

    pieces = []
    for i, side in enumerate(sides):
        for j, (length, k0, k1) in enumerate(side):
            if j == adj_index:
                length += adjust[i]
            pieces.append((length, k0, k1))

    bp = [0.0]
    kv = [0.0]
    for length, k0, k1 in pieces:
        if abs(k0 - kv[-1]) > 1e-12:
            raise TrackError("curvature discontinuity while assembling track")
        bp.append(bp[-1] + length)
        kv.append(k1)
    profile = CurvatureProfile(
        breakpoints=np.asarray(bp),
        kappa_values=np.asarray(kv),
        total_length=bp[-1],
        lane_width=lane_width,
    )
    profile.validate()
    return profile


def make_circle_track(radius: float = 200.0, lane_width: float = 4.5) -> CurvatureProfile:
    """Constant-curvature circle, handy for controlled experiments."""
    L = 2.0 * math.pi * radius
    profile = CurvatureProfile(
        breakpoints=np.array([0.0, L]),
        kappa_values=np.array([1.0 / radius, 1.0 / radius]),
        total_length=L,
        lane_width=lane_width,
    )
    profile.validate()
    return profile


# -- cartesian reconstruction ---------------------------------------------

_CENTERLINE_STEP = 0.05  # m


class CenterlineTable:
    """Cached dense integration of the centerline pose."""

    def __init__(self, profile: CurvatureProfile, step: float = _CENTERLINE_STEP):
        n = max(2, int(math.ceil(profile.total_length / step)) + 1)
        s = np.linspace(0.0, profile.total_length, n)
        kap = curvature(profile, s)
        dpsi = np.diff(s) * 0.5 * (kap[1:] + kap[:-1])
        psi = np.concatenate(([0.0], np.cumsum(dpsi)))
        dx = np.diff(s) * 0.5 * (np.cos(psi[1:]) + np.cos(psi[:-1]))
        dy = np.diff(s) * 0.5 * (np.sin(psi[1:]) + np.sin(psi[:-1]))
        self.s = s
        self.psi = psi
        self.x = np.concatenate(([0.0], np.cumsum(dx)))
        self.y = np.concatenate(([0.0], np.cumsum(dy)))

    def pose(self, sigma):
        x = np.interp(sigma, self.s, self.x)
        y = np.interp(sigma, self.s, self.y)
        psi = np.interp(sigma, self.s, self.psi)
        return x, y, psi


_table_cache: dict[int, CenterlineTable] = {}


def centerline_table(profile: CurvatureProfile) -> CenterlineTable:
    key = id(profile)
    table = _table_cache.get(key)
    if table is None:
        table = CenterlineTable(profile)
        _table_cache[key] = table
    return table


def frenet_to_cartesian(profile: CurvatureProfile, sigma, d):
    """Map (sigma, d) to (x, y, heading); d is the left offset off centerline."""
    table = centerline_table(profile)
    sigma = np.asarray(sigma, dtype=float)
    L = profile.total_length
    s = np.mod(sigma, L)
    # keep sigma == L (and exact multiples) at the integrated endpoint so the
    # lap-closure error is observable rather than trivially zero
    s = np.where((s == 0.0) & (sigma > 0.0), L, s)
    x, y, psi = table.pose(s)
    return x - d * np.sin(psi), y + d * np.cos(psi), psi


# -- persistence -----------------------------------------------------------


def serialize_track(profile: CurvatureProfile) -> str:
    buf = io.StringIO()
    buf.write(f"#lane_width={profile.lane_width:.17g}\n")
    buf.write(f"#length={profile.total_length:.17g}\n")
    buf.write("sigma,kappa\n")
    for s, k in zip(profile.breakpoints, profile.kappa_values):
        buf.write(f"{s:.17g},{k:.17g}\n")
    return buf.getvalue()


def save_track(profile: CurvatureProfile, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_track(profile))


def load_track(path) -> CurvatureProfile:
    meta = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                meta[key.strip()] = value.strip()
            elif line.lower() == "sigma,kappa":
                continue
            else:
                a, b = line.split(",")
                rows.append((float(a), float(b)))
    if "lane_width" not in meta or "length" not in meta:
        raise TrackError("track file missing #lane_width or #length metadata")
    if not rows:
        raise TrackError("track file has no curvature rows")
    arr = np.asarray(rows)
    profile = CurvatureProfile(
        breakpoints=arr[:, 0],
        kappa_values=arr[:, 1],
        total_length=float(meta["length"]),
        lane_width=float(meta["lane_width"]),
    )
    profile.validate()
    return profile


def track_hash(profile: CurvatureProfile) -> str:
    return hashlib.sha256(serialize_track(profile).encode()).hexdigest()
