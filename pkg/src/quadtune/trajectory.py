"""Reference trajectory generation and import.

A reference is a uniformly sampled sequence of (position, attitude,
velocity) states plus an ordered waypoint list with the times at which the
reference passes each waypoint. Built-in parametric tracks (circle, drop)
are generated with a curvature- and acceleration-limited speed profile so
that they start and end at hover; arbitrary tracks can be imported from CSV.

Reference attitude carries yaw only (aligned with the horizontal velocity);
roll and pitch references are zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline


class TrajectoryError(ValueError):
    pass


class ReferenceParseError(TrajectoryError):
    """CSV import failure; message names the offending file row."""


@dataclass
class ReferenceTrajectory:
    dt: float
    positions: np.ndarray    # (n, 3)
    quaternions: np.ndarray  # (n, 4) scalar-first, world<-body
    velocities: np.ndarray   # (n, 3)
    waypoints: np.ndarray    # (m, 3)
    waypoint_times: np.ndarray  # (m,)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.quaternions = np.asarray(self.quaternions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 3)
        self.waypoint_times = np.asarray(self.waypoint_times, dtype=np.float64)
        n = len(self.positions)
        if n == 0:
            raise TrajectoryError("reference must contain at least one sample")
        if self.quaternions.shape != (n, 4) or self.velocities.shape != (n, 3):
            raise TrajectoryError("sample arrays have inconsistent lengths")
        if len(self.waypoint_times) != len(self.waypoints):
            raise TrajectoryError("waypoints and waypoint_times length mismatch")
        if len(self.waypoint_times) > 1 and not np.all(np.diff(self.waypoint_times) > 0):
            raise TrajectoryError("waypoint_times must be strictly increasing")
        if len(self.waypoint_times) > 0:
            if self.waypoint_times[0] < 0 or self.waypoint_times[-1] > self.duration + 1e-9:
                raise TrajectoryError("waypoint_times must lie within [0, duration]")

    @property
    def n_ticks(self) -> int:
        return len(self.positions)

    @property
    def duration(self) -> float:
        return (len(self.positions) - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.positions)) * self.dt

    @property
    def n_waypoints(self) -> int:
        return len(self.waypoints)

    def tick_of_time(self, t: float) -> int:
        """Index of the sample nearest to time t, clamped to range."""
        return int(min(max(round(t / self.dt), 0), self.n_ticks - 1))

    def speeds(self) -> np.ndarray:
        return np.linalg.norm(self.velocities, axis=1)

    def accelerations(self) -> np.ndarray:
        """Central finite-difference acceleration of the reference velocity."""
        return np.gradient(self.velocities, self.dt, axis=0)

    def state_at(self, tick: int):
        from .dynamics import QuadState

        return QuadState(
            p=self.positions[tick].copy(),
            q=self.quaternions[tick].copy(),
            v=self.velocities[tick].copy(),
            w_body=np.zeros(3),
        )


@dataclass
class TrackSpec:
    kind: str = "circle"          # circle | drop | custom
    radius: float = 16.0          # m
    n_waypoints: int = 12
    speed: float = 10.0           # m/s cruise
    altitude: float = 5.0         # m, start altitude
    ascent_height: float = 21.0   # m (drop)
    ascent_length: float = 50.0   # m horizontal (drop)
    descent_height: float = 16.0  # m (drop)
    descent_length: float = 8.0   # m horizontal (drop)
    dt: float = 0.005             # s, reference sampling
    accel_max: float = 10.0       # m/s^2 tangential limit
    lat_accel_max: float = 10.0   # m/s^2 curvature limit

    def __post_init__(self):
        if self.kind not in ("circle", "drop", "custom"):
            raise TrajectoryError(f"unknown track kind {self.kind!r}")
        for name in ("radius", "speed", "altitude", "dt", "accel_max", "lat_accel_max"):
            if getattr(self, name) <= 0:
                raise TrajectoryError(f"{name} must be positive")
        if self.n_waypoints < 2:
            raise TrajectoryError("n_waypoints must be >= 2")


def _yaw_quats(velocities: np.ndarray) -> np.ndarray:
    """Yaw-only attitude aligned with the horizontal velocity.

    Zero-speed samples (hover at the ends) inherit the yaw of the nearest
    moving sample so the attitude reference stays continuous.
    """
    n = len(velocities)
    yaw = np.zeros(n)
    speed_xy = np.hypot(velocities[:, 0], velocities[:, 1])
    moving = speed_xy > 1e-6
    if np.any(moving):
        yaw[moving] = np.arctan2(velocities[moving, 1], velocities[moving, 0])
        idx = np.where(moving)[0]
        # forward/backward fill over hover samples
        filled = np.interp(np.arange(n), idx, yaw[idx])
        yaw = np.where(moving, yaw, filled)
    q = np.zeros((n, 4))
    q[:, 0] = np.cos(yaw / 2)
    q[:, 3] = np.sin(yaw / 2)
    return q


def _speed_profile(arc: np.ndarray, v_limit: np.ndarray, accel: float) -> np.ndarray:
    """Forward/backward pass limiting speed by accel, starting/ending at rest.

    The corners where the binding constraint switches are lightly smoothed
    (staying under the original limit curve) so the reference acceleration
    has no large jumps.
    """
    v_limit = np.asarray(v_limit, dtype=np.float64)
    v = v_limit.copy()
    v[0] = 0.0
    for i in range(len(arc) - 1):
        ds = arc[i + 1] - arc[i]
        v[i + 1] = min(v[i + 1], math.sqrt(v[i] ** 2 + 2.0 * accel * ds))
    v[-1] = 0.0
    for i in range(len(arc) - 2, -1, -1):
        ds = arc[i + 1] - arc[i]
        v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + 2.0 * accel * ds))
    kernel = np.ones(5) / 5.0
    for _ in range(2):
        padded = np.concatenate([v[:1].repeat(2), v, v[-1:].repeat(2)])
        v = np.minimum(np.convolve(padded, kernel, mode="valid"), v_limit)
    v[0] = 0.0
    v[-1] = 0.0
    return v


def _profile_times(arc: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Time at each profile node; cells have constant acceleration (the
    forward/backward passes make v^2 linear in s), so the cell time is
    exactly 2*ds/(v_i + v_{i+1})."""
    t = np.zeros(len(arc))
    for i in range(len(arc) - 1):
        ds = arc[i + 1] - arc[i]
        vm = 0.5 * (v[i] + v[i + 1])
        t[i + 1] = t[i] + ds / max(vm, 1e-9)
    return t


def _resample_path(eval_pos, eval_tangent, arc, prof_t, prof_v, dt, wp_arc):
    """Sample a parameterized path on a uniform time grid.

    ``eval_pos(s)``/``eval_tangent(s)`` evaluate the geometry at arc length s;
    (arc, prof_t, prof_v) tabulate the speed profile. Each profile cell is
    inverted with constant-acceleration kinematics so sampled positions and
    velocities stay mutually consistent through the speed ramps. Returns
    sample arrays and the pass time of each waypoint arc position; the final
    partial control period holds the terminal hover state.
    """
    duration = prof_t[-1]
    n = int(math.ceil(duration / dt - 1e-9)) + 1
    times = np.arange(n) * dt
    cells = np.clip(np.searchsorted(prof_t, times, side="right") - 1, 0, len(prof_t) - 2)
    positions = np.empty((n, 3))
    velocities = np.empty((n, 3))
    for i in range(n):
        c = cells[i]
        cell_dt = prof_t[c + 1] - prof_t[c]
        tau = min(max(times[i] - prof_t[c], 0.0), cell_dt)
        a_cell = (prof_v[c + 1] - prof_v[c]) / cell_dt if cell_dt > 0 else 0.0
        v = prof_v[c] + a_cell * tau
        s = min(arc[c] + prof_v[c] * tau + 0.5 * a_cell * tau * tau, arc[-1])
        positions[i] = eval_pos(s)
        velocities[i] = eval_tangent(s) * v
    wp_times = np.interp(wp_arc, arc, prof_t)
    return positions, velocities, wp_times


def make_circle_track(
    radius: float = 16.0,
    n_waypoints: int = 12,
    speed: float = 10.0,
    dt: float = 0.005,
    altitude: float = 5.0,
    accel_max: float = 10.0,
    lat_accel_max: float = 10.0,
) -> ReferenceTrajectory:
    """Planar circular lap, starting and ending at hover.

    The lap starts at angle 0 (point ``(radius, 0, altitude)``) and runs one
    full counter-clockwise revolution with a trapezoidal speed ramp; the
    cruise speed is additionally capped by the lateral-acceleration limit.
    Waypoints are equally spaced on the circle, the last one closing the lap.
    """
    if radius <= 0 or speed <= 0:
        raise TrajectoryError("radius and speed must be positive")
    total = 2.0 * math.pi * radius
    v_cruise = min(speed, math.sqrt(lat_accel_max * radius))

    # dense arc-length grid for the profile
    arc = np.linspace(0.0, total, max(int(total / 0.05), 64))
    v_lim = np.full(len(arc), v_cruise)
    prof_v = _speed_profile(arc, v_lim, accel_max)
    prof_t = _profile_times(arc, prof_v)

    def eval_pos(s):
        th = s / radius
        return np.array([radius * math.cos(th), radius * math.sin(th), altitude])

    def eval_tangent(s):
        th = s / radius
        return np.array([-math.sin(th), math.cos(th), 0.0])

    wp_arc = np.array([(k + 1) * total / n_waypoints for k in range(n_waypoints)])
    positions, velocities, wp_times = _resample_path(
        eval_pos, eval_tangent, arc, prof_t, prof_v, dt, wp_arc
    )
    waypoints = np.array([eval_pos(s) for s in wp_arc])
    return ReferenceTrajectory(
        dt=dt,
        positions=positions,
        quaternions=_yaw_quats(velocities),
        velocities=velocities,
        waypoints=waypoints,
        waypoint_times=wp_times,
    )


class _SplinePath:
    """Chord-length-parameterized C^2 spatial spline through points."""

    def __init__(self, points: np.ndarray, samples_per_leg: int = 256):
        points = np.asarray(points, dtype=np.float64)
        chord = np.linalg.norm(np.diff(points, axis=0), axis=1)
        if np.any(chord < 1e-9):
            raise TrajectoryError("duplicate consecutive waypoints")
        u = np.concatenate([[0.0], np.cumsum(chord)])
        self.spline = CubicSpline(u, points, axis=0, bc_type="natural")
        self.u_knots = u
        # arc-length table on a dense parameter grid
        n_dense = samples_per_leg * (len(points) - 1) + 1
        self.u_dense = np.linspace(0.0, u[-1], n_dense)
        p_dense = self.spline(self.u_dense)
        seg = np.linalg.norm(np.diff(p_dense, axis=0), axis=1)
        self.s_dense = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def total_length(self) -> float:
        return float(self.s_dense[-1])

    def u_of_s(self, s: float) -> float:
        s = min(max(s, 0.0), self.total_length)
        u = float(np.interp(s, self.s_dense, self.u_dense))
        # Newton refinement on ds/du = |p'(u)|
        for _ in range(3):
            du = self.spline(u, 1)
            nd = float(np.linalg.norm(du))
            if nd < 1e-12:
                break
            s_here = float(np.interp(u, self.u_dense, self.s_dense))
            u = min(max(u - (s_here - s) / nd, 0.0), float(self.u_knots[-1]))
        return u

    def pos(self, s: float) -> np.ndarray:
        return np.asarray(self.spline(self.u_of_s(s)))

    def tangent(self, s: float) -> np.ndarray:
        d = np.asarray(self.spline(self.u_of_s(s), 1))
        n = np.linalg.norm(d)
        return d / n if n > 1e-12 else np.array([1.0, 0.0, 0.0])

    def curvature_table(self):
        d1 = self.spline(self.u_dense, 1)
        d2 = self.spline(self.u_dense, 2)
        cross = np.cross(d1, d2)
        num = np.linalg.norm(cross, axis=1)
        den = np.linalg.norm(d1, axis=1) ** 3
        return num / np.maximum(den, 1e-12)

    def knot_arcs(self) -> np.ndarray:
        return np.interp(self.u_knots, self.u_dense, self.s_dense)


def _profiled_spline_track(
    points: np.ndarray,
    leg_speeds: np.ndarray,
    dt: float,
    accel_max: float,
    lat_accel_max: float,
    waypoint_idx: np.ndarray,
) -> ReferenceTrajectory:
    """Hover-to-hover track along a spatial spline with a limited speed profile.

    ``points`` are the spline knots; ``waypoint_idx`` selects which knots are
    scored waypoints. ``leg_speeds`` gives the target speed per knot leg.
    """
    path = _SplinePath(points)
    knot_arc = path.knot_arcs()
    arc = path.s_dense
    # per-sample target speed from the containing leg
    leg_of_s = np.clip(np.searchsorted(knot_arc, arc, side="right") - 1, 0, len(leg_speeds) - 1)
    v_target = leg_speeds[leg_of_s]
    kappa = path.curvature_table()
    v_curv = np.sqrt(lat_accel_max / np.maximum(kappa, 1e-9))
    v_lim = np.minimum(v_target, v_curv)
    prof_v = _speed_profile(arc, v_lim, accel_max)
    prof_t = _profile_times(arc, prof_v)

    wp_arc = knot_arc[waypoint_idx]
    positions, velocities, wp_times = _resample_path(
        path.pos, path.tangent, arc, prof_t, prof_v, dt, wp_arc
    )
    return ReferenceTrajectory(
        dt=dt,
        positions=positions,
        quaternions=_yaw_quats(velocities),
        velocities=velocities,
        waypoints=points[waypoint_idx],
        waypoint_times=wp_times,
    )


def drop_track_points(spec: TrackSpec) -> np.ndarray:
    """Knot layout for the drop track: climb, steep dive, closing semicircle.

    Twelve waypoints follow the start point: three on the climb, one at the
    bottom of the dive, eight on the semicircle.
    """
    z0 = spec.altitude
    top = z0 + spec.ascent_height
    bottom = top - spec.descent_height
    if bottom <= 0:
        raise TrajectoryError("descent exceeds available height above ground")
    pts = [np.array([0.0, 0.0, z0])]
    for k in (1, 2, 3):
        pts.append(
            np.array([spec.ascent_length * k / 3.0, 0.0, z0 + spec.ascent_height * k / 3.0])
        )
    dive_x = spec.ascent_length + spec.descent_length
    pts.append(np.array([dive_x, 0.0, bottom]))
    r = spec.radius
    center = np.array([dive_x, r, bottom])
    for k in range(1, 9):
        th = -math.pi / 2 + k * math.pi / 8
        pts.append(center + np.array([r * math.cos(th), r * math.sin(th), 0.0]))
    return np.array(pts)


def make_drop_track(spec: TrackSpec, dt: float | None = None) -> ReferenceTrajectory:
    """Climb-dive-semicircle track (12 waypoints), hover to hover.

    Defaults: 21 m ascent over 50 m, 16 m descent over a short horizontal
    run (steeper than 45 degrees), terminal semicircle of 16 m radius.
    """
    if spec.kind != "drop":
        raise TrajectoryError("spec.kind must be 'drop'")
    if spec.descent_height > spec.ascent_height + spec.altitude:
        raise TrajectoryError("descent exceeds total height")
    dt = spec.dt if dt is None else dt
    pts = drop_track_points(spec)
    if spec.ascent_height == 0 and spec.descent_height == 0:
        # degenerate flat variant: same x-y layout at constant altitude
        pts[:, 2] = spec.altitude
    wp_idx = np.arange(1, len(pts))
    leg_speeds = np.full(len(pts) - 1, spec.speed)
    return _profiled_spline_track(
        pts, leg_speeds, dt, spec.accel_max, spec.lat_accel_max, wp_idx
    )


def spline_reference(
    waypoints: np.ndarray,
    speeds: np.ndarray | float,
    dt: float = 0.005,
) -> ReferenceTrajectory:
    """Cubic-spline reference through waypoints with per-leg time allocation.

    Each leg's duration is its straight-line length divided by its speed;
    the reference is a C^2 cubic spline (not-a-knot) through the waypoints
    at those knot times, and the reference velocity is the analytic spline
    derivative. No hover ramps are added, so boundary speeds follow the
    spline. If ``dt`` does not divide the total duration, the grid is padded
    with one sample holding the final state.
    """
    waypoints = np.asarray(waypoints, dtype=np.float64).reshape(-1, 3)
    if len(waypoints) < 2:
        raise TrajectoryError("need at least 2 waypoints")
    legs = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    if np.any(legs < 1e-9):
        raise TrajectoryError("duplicate consecutive waypoints")
    speeds = np.broadcast_to(np.asarray(speeds, dtype=np.float64), (len(legs),))
    if np.any(speeds <= 0):
        raise TrajectoryError("leg speeds must be positive")
    knot_t = np.concatenate([[0.0], np.cumsum(legs / speeds)])
    duration = float(knot_t[-1])
    if len(waypoints) == 2:
        spline = CubicSpline(knot_t, waypoints, axis=0, bc_type=((1, (waypoints[1] - waypoints[0]) / duration), (1, (waypoints[1] - waypoints[0]) / duration)))
    else:
        spline = CubicSpline(knot_t, waypoints, axis=0, bc_type="not-a-knot")
    n = int(math.ceil(duration / dt - 1e-9)) + 1
    # the final grid point is clamped to the end time when dt does not
    # divide the duration (trailing partial tick holds the end state)
    times = np.minimum(np.arange(n) * dt, duration)
    positions = spline(times)
    velocities = spline(times, 1)
    return ReferenceTrajectory(
        dt=dt,
        positions=positions,
        quaternions=_yaw_quats(velocities),
        velocities=velocities,
        waypoints=waypoints,
        waypoint_times=knot_t,
    )


def make_track(spec: TrackSpec) -> ReferenceTrajectory:
    if spec.kind == "circle":
        return make_circle_track(
            radius=spec.radius,
            n_waypoints=spec.n_waypoints,
            speed=spec.speed,
            dt=spec.dt,
            altitude=spec.altitude,
            accel_max=spec.accel_max,
            lat_accel_max=spec.lat_accel_max,
        )
    if spec.kind == "drop":
        return make_drop_track(spec)
    raise TrajectoryError(f"no parametric builder for kind {spec.kind!r}")


# --- CSV import/export -------------------------------------------------------

_REF_COLUMNS = ["t", "x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz"]
_WP_COLUMNS = ["x", "y", "z", "t_ref"]


def _waypoint_path(path: str) -> str:
    if path.endswith(".csv"):
        return path[:-4] + "_waypoints.csv"
    return path + "_waypoints.csv"


def save_reference_csv(ref: ReferenceTrajectory, path: str, waypoint_path: str | None = None,
                       header_comment: str | None = None) -> None:
    """Write the reference (and its waypoints to a sibling file) losslessly."""
    wp_path = waypoint_path or _waypoint_path(path)
    with open(path, "w") as f:
        if header_comment:
            for line in header_comment.splitlines():
                f.write(f"# {line}\n")
        f.write(",".join(_REF_COLUMNS) + "\n")
        times = ref.times
        for i in range(ref.n_ticks):
            row = [times[i], *ref.positions[i], *ref.quaternions[i], *ref.velocities[i]]
            f.write(",".join("%.17g" % v for v in row) + "\n")
    if ref.n_waypoints > 0:
        with open(wp_path, "w") as f:
            if header_comment:
                for line in header_comment.splitlines():
                    f.write(f"# {line}\n")
            f.write(",".join(_WP_COLUMNS) + "\n")
            for i in range(ref.n_waypoints):
                row = [*ref.waypoints[i], ref.waypoint_times[i]]
                f.write(",".join("%.17g" % v for v in row) + "\n")


def _read_csv_rows(path: str, columns: list[str]):
    """Parse a comma-separated file with the given named columns.

    Comment lines starting with '#' are skipped. Yields (file_line_number,
    values-in-column-order). Raises ReferenceParseError naming the row on
    malformed or non-finite data.
    """
    with open(path) as f:
        lines = f.readlines()
    header_idx = None
    for i, line in enumerate(lines):
        if line.strip() and not line.lstrip().startswith("#"):
            header_idx = i
            break
    if header_idx is None:
        raise ReferenceParseError(f"{path}: no header row found")
    names = [c.strip() for c in lines[header_idx].strip().split(",")]
    missing = [c for c in columns if c not in names]
    if missing:
        raise ReferenceParseError(f"{path}: missing columns {missing}")
    order = [names.index(c) for c in columns]
    rows = []
    for lineno, line in enumerate(lines[header_idx + 1:], start=header_idx + 2):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split(",")
        if len(parts) != len(names):
            raise ReferenceParseError(f"{path}: row {lineno}: expected {len(names)} fields")
        try:
            vals = [float(parts[j]) for j in order]
        except ValueError as e:
            raise ReferenceParseError(f"{path}: row {lineno}: {e}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ReferenceParseError(f"{path}: row {lineno}: non-finite value")
        rows.append((lineno, vals))
    if not rows:
        raise ReferenceParseError(f"{path}: no data rows")
    return rows


def load_reference_csv(path: str, waypoint_path: str | None = None, ned: bool = False) -> ReferenceTrajectory:
    """Load a reference CSV (plus sibling waypoint CSV when present).

    With ``ned=True`` the import negates z (position, velocity, waypoints)
    and conjugates the attitude by the corresponding frame mirror
    (qw, qx, qy, qz) -> (qw, -qx, -qy, qz).
    """
    import os

    rows = _read_csv_rows(path, _REF_COLUMNS)
    data = np.array([vals for _, vals in rows])
    t = data[:, 0]
    for i in range(1, len(t)):
        if t[i] <= t[i - 1]:
            raise ReferenceParseError(f"{path}: row {rows[i][0]}: non-increasing time")
    dt = t[1] - t[0] if len(t) > 1 else 1.0
    if len(t) > 2 and not np.allclose(np.diff(t), dt, rtol=0, atol=1e-6):
        raise ReferenceParseError(f"{path}: non-uniform sampling interval")
    positions = data[:, 1:4].copy()
    quaternions = data[:, 4:8].copy()
    velocities = data[:, 8:11].copy()
    wp_path = waypoint_path or _waypoint_path(path)
    if os.path.exists(wp_path):
        wp_rows = _read_csv_rows(wp_path, _WP_COLUMNS)
        wp_data = np.array([vals for _, vals in wp_rows])
        waypoints = wp_data[:, 0:3].copy()
        waypoint_times = wp_data[:, 3].copy()
    else:
        waypoints = np.zeros((0, 3))
        waypoint_times = np.zeros(0)
    if ned:
        positions[:, 2] *= -1
        velocities[:, 2] *= -1
        quaternions[:, 1] *= -1
        quaternions[:, 2] *= -1
        if len(waypoints):
            waypoints[:, 2] *= -1
    return ReferenceTrajectory(
        dt=float(dt),
        positions=positions,
        quaternions=quaternions,
        velocities=velocities,
        waypoints=waypoints,
        waypoint_times=waypoint_times,
    )
