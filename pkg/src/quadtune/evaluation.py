"""Closed-loop rollouts and scoring.

A rollout simulates the vehicle from a hover start on the reference,
running the controller at the control rate with RK4 substeps, and tests
each waypoint at the tick nearest its reference pass time. The run stops at
the first missed waypoint, at a crash, or once the last waypoint is
decided. Scoring converts the (penalized) lap time t to exp(-2*sqrt(t)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dynamics import CrashConfig, VehicleParams, rk4_step
from .mpc import (
    FixedMpcConfig,
    ParamVector,
    build_cost,
    controller_tick,
    input_bounds,
    resize_useq,
    trim_input,
)
from .segmentation import SegmentPlan
from .trajectory import ReferenceTrajectory

STATUS_FINISHED = 0
STATUS_MISS = 1
STATUS_CRASH = 2
STATUS_FAULT = 3
STATUS_NAMES = {0: "finished", 1: "miss", 2: "crash", 3: "controller_fault"}


@dataclass(frozen=True)
class EvalConfig:
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    mpc: FixedMpcConfig = field(default_factory=FixedMpcConfig)
    crash: CrashConfig = field(default_factory=CrashConfig)
    pass_radius: float = 1.3   # m, strict inequality
    pass_window: float = 0.0   # s, half-width around the reference pass time
    v_pen: float = 1.0         # m/s converting penalty distance to seconds
    sim_substeps: int = 2


@dataclass
class RolloutTrace:
    times: np.ndarray       # (k,)
    states: np.ndarray      # (k, 13) p, q, v, w
    inputs: np.ndarray      # (k, 4) commanded thrust + rates


@dataclass
class EvaluationOutcome:
    passed: np.ndarray          # (m,) bool
    stop_tick: int
    status: str
    raw_time: float
    penalized_time: float
    completion: float           # percent
    seed: int
    stop_position: np.ndarray
    trace: RolloutTrace | None = None

    @property
    def score(self) -> float:
        return score(self.penalized_time)


def score(t: float) -> float:
    """Optimizer score of a (penalized) lap time: exp(-2*sqrt(t)), in (0, 1]."""
    if t < 0:
        raise ValueError("time must be >= 0")
    return math.exp(-2.0 * math.sqrt(t))


def trajectory_completion(passed: np.ndarray) -> float:
    passed = np.asarray(passed, dtype=bool)
    if passed.size == 0:
        raise ValueError("need at least one waypoint")
    return 100.0 * float(np.count_nonzero(passed)) / passed.size


def penalized_time(
    raw_time: float,
    stop_position: np.ndarray,
    waypoints: np.ndarray,
    passed: np.ndarray,
    v_pen: float = 1.0,
) -> float:
    """Raw time plus the in-order polyline length through the unpassed
    waypoints, converted to seconds at ``v_pen``."""
    passed = np.asarray(passed, dtype=bool)
    if bool(np.all(passed)):
        return raw_time
    remaining = np.asarray(waypoints, dtype=np.float64)[~passed]
    length = 0.0
    prev = np.asarray(stop_position, dtype=np.float64)
    for wp in remaining:
        length += float(np.linalg.norm(wp - prev))
        prev = wp
    return raw_time + length / v_pen


def waypoint_passed(
    trace_positions: np.ndarray,
    dt: float,
    waypoint: np.ndarray,
    t_ref: float,
    radius: float = 1.3,
    window: float = 0.0,
) -> bool:
    """Distance test at the tick nearest the reference pass time (strict
    inequality); an optional window widens the test to nearby ticks."""
    n = len(trace_positions)
    tick = int(round(t_ref / dt))
    if tick < 0 or tick >= n:
        raise ValueError("reference pass time outside the trace")
    w = int(round(window / dt))
    lo = max(tick - w, 0)
    hi = min(tick + w, n - 1)
    d = np.linalg.norm(trace_positions[lo:hi + 1] - np.asarray(waypoint), axis=1)
    return bool(np.min(d) < radius)


# --- rollout kernel -----------------------------------------------------------

@njit(cache=True)
def _rollout_core(
    ref_p, ref_q, ref_v,
    seg_ids, seg_q, horizons,
    r_diag, u_lo, u_hi, u_ref,
    wp_pos, wp_ticks, wp_window,
    noise,
    mass, gravity, rate_tau,
    horizon_step, control_dt, sim_substeps, window_stride,
    pass_radius, crash_dist, floor_z,
):
    n = ref_p.shape[0]
    m = wp_pos.shape[0]
    h_max = 0
    for i in range(horizons.shape[0]):
        if horizons[i] > h_max:
            h_max = horizons[i]
    win_p = np.empty((h_max + 1, 3))
    win_q = np.empty((h_max + 1, 4))
    win_v = np.empty((h_max + 1, 3))
    win_qd = np.empty((h_max + 1, 9))

    states = np.zeros((n, 13))
    inputs = np.zeros((n, 4))
    # hover start on the reference
    states[0, 0:3] = ref_p[0]
    states[0, 3:7] = ref_q[0]

    passed = np.zeros(m, dtype=np.bool_)
    cur_seg = seg_ids[0]
    H = horizons[cur_seg]
    useq = np.empty((H, 4))
    for i in range(H):
        useq[i] = u_ref
    sim_dt = control_dt / sim_substeps

    status = STATUS_FINISHED
    stop_tick = n - 1
    wi = 0
    t = 0
    while t < n - 1:
        seg = seg_ids[t]
        if seg != cur_seg:
            cur_seg = seg
            H = horizons[cur_seg]
            useq = resize_useq(useq, H)
        for k in range(H + 1):
            idx = t + k * window_stride
            if idx > n - 1:
                idx = n - 1
            win_p[k] = ref_p[idx]
            win_q[k] = ref_q[idx]
            win_v[k] = ref_v[idx]
            win_qd[k] = seg_q[seg_ids[idx]]  # stage weights follow the plan
        u0, useq, fault = controller_tick(
            states[t, 0:10], useq,
            win_p[:H + 1], win_q[:H + 1], win_v[:H + 1],
            win_qd[:H + 1], r_diag, horizon_step, mass, gravity,
            u_lo, u_hi, u_ref,
        )
        inputs[t] = u0
        if fault:
            status = STATUS_FAULT
            stop_tick = t
            break
        # actuation noise on the command, re-clamped to the box
        thrust = u0[0] + noise[t, 0]
        if thrust < u_lo[0]:
            thrust = u_lo[0]
        elif thrust > u_hi[0]:
            thrust = u_hi[0]
        wcmd = np.empty(3)
        for j in range(3):
            wj = u0[1 + j] + noise[t, 1 + j]
            if wj < u_lo[1 + j]:
                wj = u_lo[1 + j]
            elif wj > u_hi[1 + j]:
                wj = u_hi[1 + j]
            wcmd[j] = wj
        x = states[t].copy()
        for _ in range(sim_substeps):
            x = rk4_step(x, thrust, wcmd, sim_dt, mass, gravity, rate_tau)
        states[t + 1] = x
        t += 1

        # crash test against the current reference point
        finite = True
        for j in range(13):
            if not math.isfinite(x[j]):
                finite = False
        perr = math.sqrt(
            (x[0] - ref_p[t, 0]) ** 2
            + (x[1] - ref_p[t, 1]) ** 2
            + (x[2] - ref_p[t, 2]) ** 2
        )
        if (not finite) or x[2] < floor_z or perr > crash_dist:
            status = STATUS_CRASH
            stop_tick = t
            break

        # waypoint decisions fall at the end of each pass window
        stopped = False
        while wi < m and t >= min(wp_ticks[wi] + wp_window, n - 1):
            lo = wp_ticks[wi] - wp_window
            if lo < 0:
                lo = 0
            best = 1e30
            for k in range(lo, t + 1):
                d = math.sqrt(
                    (states[k, 0] - wp_pos[wi, 0]) ** 2
                    + (states[k, 1] - wp_pos[wi, 1]) ** 2
                    + (states[k, 2] - wp_pos[wi, 2]) ** 2
                )
                if d < best:
                    best = d
            if best < pass_radius:
                passed[wi] = True
                wi += 1
                if wi == m:
                    status = STATUS_FINISHED
                    stop_tick = t
                    stopped = True
                    break
            else:
                status = STATUS_MISS
                stop_tick = t
                stopped = True
                break
        if stopped:
            break
    return states, inputs, passed, stop_tick, status


def rollout(
    ref: ReferenceTrajectory,
    plan: SegmentPlan,
    w: ParamVector,
    seed: int,
    cfg: EvalConfig = EvalConfig(),
    record_trace: bool = True,
) -> EvaluationOutcome:
    """Closed-loop evaluation of a parameter vector; pure in (inputs, seed)."""
    if w.n_segments != plan.n_segments:
        raise ValueError("ParamVector does not match plan segment count")
    if ref.n_waypoints == 0:
        raise ValueError("reference carries no waypoints to score")
    vp = cfg.vehicle
    n = ref.n_ticks
    control_dt = cfg.mpc.control_dt
    if abs(ref.dt - control_dt) > 1e-12:
        raise ValueError("reference sampling must match the control period")

    seg_ids = plan.tick_segment_ids()
    if len(seg_ids) != n:
        raise ValueError("plan does not cover the reference tick range")
    seg_q = np.empty((plan.n_segments, 9))
    horizons = np.empty(plan.n_segments, dtype=np.int64)
    for i, sp in enumerate(w.per_segment):
        q_diag, r_diag = build_cost(sp, cfg.mpc)
        seg_q[i] = q_diag
        horizons[i] = sp.horizon_len
    u_lo, u_hi = input_bounds(vp)

    rng = np.random.default_rng(seed)
    scale = np.array([vp.noise.thrust_std, vp.noise.rate_std, vp.noise.rate_std,
                      vp.noise.rate_std])
    noise = rng.normal(0.0, 1.0, size=(n, 4)) * scale

    wp_ticks = np.array([ref.tick_of_time(t) for t in ref.waypoint_times], dtype=np.int64)
    wp_window = int(round(cfg.pass_window / control_dt))
    window_stride = max(1, int(round(cfg.mpc.horizon_step / control_dt)))

    states, inputs, passed, stop_tick, status = _rollout_core(
        np.ascontiguousarray(ref.positions), np.ascontiguousarray(ref.quaternions),
        np.ascontiguousarray(ref.velocities),
        seg_ids, seg_q, horizons,
        r_diag, u_lo, u_hi, trim_input(vp),
        np.ascontiguousarray(ref.waypoints), wp_ticks, wp_window,
        noise,
        vp.mass, vp.gravity, vp.rate_tau,
        cfg.mpc.horizon_step, control_dt, cfg.sim_substeps, window_stride,
        cfg.pass_radius, cfg.crash.max_pos_error, cfg.crash.floor_z,
    )

    raw_time = stop_tick * control_dt
    stop_position = states[stop_tick, 0:3].copy()
    pen = penalized_time(raw_time, stop_position, ref.waypoints, passed, cfg.v_pen)
    if stop_tick > 0:
        inputs[stop_tick] = inputs[stop_tick - 1]  # hold over the final tick
    trace = None
    if record_trace:
        k = stop_tick + 1
        trace = RolloutTrace(
            times=np.arange(k) * control_dt,
            states=states[:k].copy(),
            inputs=inputs[:k].copy(),
        )
    return EvaluationOutcome(
        passed=passed,
        stop_tick=int(stop_tick),
        status=STATUS_NAMES[int(status)],
        raw_time=float(raw_time),
        penalized_time=float(pen),
        completion=trajectory_completion(passed),
        seed=int(seed),
        stop_position=stop_position,
        trace=trace,
    )


@dataclass(frozen=True)
class EvalRecord:
    score: float
    completion: float
    time_pen: float
    seed: int


class SimObjective:
    """Rollout-backed objective shared by the tuner and the baselines.

    Each evaluation index maps to a deterministic noise seed derived from
    the base seed, so optimizers see noisy but reproducible evaluations.
    """

    def __init__(
        self,
        ref: ReferenceTrajectory,
        plan: SegmentPlan,
        cfg: EvalConfig = EvalConfig(),
        base_seed: int = 0,
    ):
        self.ref = ref
        self.plan = plan
        self.cfg = cfg
        self.base_seed = base_seed
        self.n_segments = plan.n_segments

    def seed_for(self, eval_index: int) -> int:
        ss = np.random.SeedSequence([self.base_seed & 0xFFFFFFFF, eval_index])
        return int(ss.generate_state(1)[0])

    def evaluate(self, w: ParamVector, seed: int, record_trace: bool = False) -> EvaluationOutcome:
        return rollout(self.ref, self.plan, w, seed, self.cfg, record_trace=record_trace)

    def __call__(self, w: ParamVector, eval_index: int) -> EvalRecord:
        seed = self.seed_for(eval_index)
        out = self.evaluate(w, seed)
        return EvalRecord(
            score=out.score,
            completion=out.completion,
            time_pen=out.penalized_time,
            seed=seed,
        )


def input_step_ratio(
    trace: RolloutTrace,
    plan: SegmentPlan,
    u_scale: np.ndarray,
    local_window: float = 1.0,
) -> float:
    """Largest switch-tick input step over the median step near the switch.

    Steps are scale-normalized input changes between consecutive control
    ticks. Each switch step is compared against the median step of the
    surrounding ``local_window`` seconds (switch ticks excluded), so the
    ratio measures the discontinuity introduced by the parameter change
    rather than how aggressive that part of the reference is. Returns the
    worst ratio over the plan's interior switches; runs without one return 0.
    """
    du = np.diff(trace.inputs, axis=0) / u_scale
    step = np.linalg.norm(du, axis=1)
    n = len(step)
    switch_ticks = [seg.start_tick - 1 for seg in plan.segments[1:]
                    if 0 < seg.start_tick <= n]
    if not switch_ticks:
        return 0.0
    is_switch = np.zeros(n, dtype=bool)
    for t in switch_ticks:
        is_switch[t] = True
    w = max(1, int(round(local_window / plan.dt)))
    worst = 0.0
    for t in switch_ticks:
        lo = max(t - w, 0)
        hi = min(t + w + 1, n)
        local = step[lo:hi][~is_switch[lo:hi]]
        local = local[local > 0]
        if local.size == 0:
            return float("inf")
        med = float(np.median(local))
        worst = max(worst, step[t] / med)
    return float(worst)
