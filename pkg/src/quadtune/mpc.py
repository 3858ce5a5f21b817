"""Receding-horizon tracking controller.

One Gauss-Newton iteration per control tick: the internal prediction model
is rolled out along the warm-start input sequence from the measured state,
linearized in a 9-dimensional error state (position, attitude log-map,
velocity), and the resulting time-varying LQR problem is solved by an
affine Riccati backward pass. Box input constraints are enforced by
clamping during the forward pass. The solution becomes the next tick's
warm start.

The internal model treats body rates as direct inputs (thrust plus three
rates); the simulator's body-rate lag is deliberate model mismatch. The
input cost penalizes deviation from the hover trim input so that an
on-reference hover is an exact fixed point of the controller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .dynamics import ControlInput, QuadState, VehicleParams, quat_mul, quat_rotate

PARAM_FIELDS = ("q_pos_xy", "q_pos_z", "q_attitude", "q_velocity", "horizon_len")
N_PARAMS_PER_SEGMENT = len(PARAM_FIELDS)


class ControllerFault(RuntimeError):
    """Solver produced a non-finite plan twice in a row."""


@dataclass(frozen=True)
class SegmentParams:
    q_pos_xy: float = 50.0
    q_pos_z: float = 50.0
    q_attitude: float = 5.0
    q_velocity: float = 10.0
    horizon_len: int = 20

    def __post_init__(self):
        for name in ("q_pos_xy", "q_pos_z", "q_attitude", "q_velocity"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if self.horizon_len < 1:
            raise ValueError("horizon_len must be >= 1")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.q_pos_xy, self.q_pos_z, self.q_attitude, self.q_velocity,
             float(self.horizon_len)]
        )

    @staticmethod
    def from_array(a: np.ndarray, horizon_max: int = 40) -> "SegmentParams":
        return SegmentParams(
            q_pos_xy=max(float(a[0]), 0.0),
            q_pos_z=max(float(a[1]), 0.0),
            q_attitude=max(float(a[2]), 0.0),
            q_velocity=max(float(a[3]), 0.0),
            horizon_len=int(min(max(round(float(a[4])), 1), horizon_max)),
        )


DEFAULT_FALLBACK_PARAMS = SegmentParams(50.0, 50.0, 5.0, 10.0, 20)


@dataclass(frozen=True)
class ParamVector:
    per_segment: tuple[SegmentParams, ...]

    def __post_init__(self):
        if not self.per_segment:
            raise ValueError("ParamVector must cover at least one segment")

    @property
    def n_segments(self) -> int:
        return len(self.per_segment)

    def to_array(self) -> np.ndarray:
        return np.stack([sp.as_array() for sp in self.per_segment])

    def to_flat(self) -> np.ndarray:
        return self.to_array().ravel()

    @staticmethod
    def from_array(a: np.ndarray, horizon_max: int = 40) -> "ParamVector":
        a = np.asarray(a, dtype=np.float64).reshape(-1, N_PARAMS_PER_SEGMENT)
        return ParamVector(tuple(SegmentParams.from_array(row, horizon_max) for row in a))

    @staticmethod
    def from_flat(x: np.ndarray, horizon_max: int = 40) -> "ParamVector":
        return ParamVector.from_array(
            np.asarray(x, dtype=np.float64).reshape(-1, N_PARAMS_PER_SEGMENT), horizon_max
        )

    @staticmethod
    def uniform(sp: SegmentParams, n_segments: int) -> "ParamVector":
        return ParamVector(tuple(sp for _ in range(n_segments)))

    def scaled_weights(self, factor: float) -> "ParamVector":
        """Multiply all four state weights by a factor, keeping horizons."""
        out = []
        for sp in self.per_segment:
            out.append(
                SegmentParams(
                    sp.q_pos_xy * factor, sp.q_pos_z * factor,
                    sp.q_attitude * factor, sp.q_velocity * factor,
                    sp.horizon_len,
                )
            )
        return ParamVector(tuple(out))


@dataclass(frozen=True)
class FixedMpcConfig:
    r_thrust: float = 1.0
    r_pitchroll: float = 1.0
    r_yaw: float = 1.0
    control_freq: float = 200.0  # Hz
    horizon_step: float = 0.05   # s
    horizon_max: int = 40

    @property
    def control_dt(self) -> float:
        return 1.0 / self.control_freq


@dataclass
class SolverState:
    """Warm start carried between RTI solves; owned by a single rollout."""

    u_seq: np.ndarray  # (H, 4): thrust, wx, wy, wz
    segment_index: int = 0

    @staticmethod
    def hover_init(vp: VehicleParams, horizon_len: int) -> "SolverState":
        u = np.zeros((horizon_len, 4))
        u[:, 0] = vp.hover_thrust
        return SolverState(u_seq=u)

    def resized(self, horizon_len: int) -> "SolverState":
        """Truncate or extend (repeating the terminal input) to a new horizon."""
        h = self.u_seq.shape[0]
        if horizon_len == h:
            return self
        if horizon_len < h:
            u = self.u_seq[:horizon_len].copy()
        else:
            u = np.vstack([self.u_seq, np.repeat(self.u_seq[-1:], horizon_len - h, axis=0)])
        return SolverState(u_seq=u, segment_index=self.segment_index)


@dataclass(frozen=True)
class RefWindow:
    """Reference states over the horizon, spaced at the horizon step."""

    p: np.ndarray  # (H+1, 3)
    q: np.ndarray  # (H+1, 4)
    v: np.ndarray  # (H+1, 3)


def select_segment_params(plan, w: ParamVector, tick: int) -> SegmentParams:
    """Parameters of the segment containing the tick; a boundary tick is
    owned by the segment starting there."""
    if w.n_segments != plan.n_segments:
        raise ValueError("ParamVector does not match plan segment count")
    return w.per_segment[plan.segment_of_tick(tick)]


def build_cost(sp: SegmentParams, fixed: FixedMpcConfig) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal stage weights over the 9-dim error state and 4-dim input."""
    q = np.array(
        [sp.q_pos_xy, sp.q_pos_xy, sp.q_pos_z,
         sp.q_attitude, sp.q_attitude, sp.q_attitude,
         sp.q_velocity, sp.q_velocity, sp.q_velocity]
    )
    r = np.array([fixed.r_thrust, fixed.r_pitchroll, fixed.r_pitchroll, fixed.r_yaw])
    return q, r


def input_bounds(vp: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([0.0, -vp.pitchroll_max, -vp.pitchroll_max, -vp.yaw_max])
    hi = np.array([vp.thrust_max, vp.pitchroll_max, vp.pitchroll_max, vp.yaw_max])
    return lo, hi


def trim_input(vp: VehicleParams) -> np.ndarray:
    return np.array([vp.hover_thrust, 0.0, 0.0, 0.0])


# --- numba kernels -----------------------------------------------------------

@njit(cache=True)
def so3_exp_quat(phi):
    """Unit quaternion of a rotation vector."""
    angle = math.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
    q = np.empty(4)
    if angle < 1e-12:
        q[0] = 1.0
        q[1] = 0.5 * phi[0]
        q[2] = 0.5 * phi[1]
        q[3] = 0.5 * phi[2]
        n = math.sqrt(q[0] ** 2 + q[1] ** 2 + q[2] ** 2 + q[3] ** 2)
        return q / n
    half = 0.5 * angle
    s = math.sin(half) / angle
    q[0] = math.cos(half)
    q[1] = s * phi[0]
    q[2] = s * phi[1]
    q[3] = s * phi[2]
    return q


@njit(cache=True)
def quat_log(q):
    """Rotation vector of a unit quaternion, canonical branch (angle <= pi)."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    nv = math.sqrt(x * x + y * y + z * z)
    out = np.empty(3)
    if nv < 1e-12:
        out[0] = 2.0 * x
        out[1] = 2.0 * y
        out[2] = 2.0 * z
        return out
    angle = 2.0 * math.atan2(nv, w)
    s = angle / nv
    out[0] = s * x
    out[1] = s * y
    out[2] = s * z
    return out


@njit(cache=True)
def quat_to_rot(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return R


@njit(cache=True)
def so3_right_jacobian(phi):
    theta = math.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
    P = np.zeros((3, 3))
    P[0, 1] = -phi[2]
    P[0, 2] = phi[1]
    P[1, 0] = phi[2]
    P[1, 2] = -phi[0]
    P[2, 0] = -phi[1]
    P[2, 1] = phi[0]
    if theta < 1e-6:
        c1 = 0.5 - theta ** 2 / 24.0
        c2 = 1.0 / 6.0 - theta ** 2 / 120.0
    else:
        c1 = (1.0 - math.cos(theta)) / theta ** 2
        c2 = (theta - math.sin(theta)) / theta ** 3
    return np.eye(3) - c1 * P + c2 * (P @ P)


@njit(cache=True)
def internal_step(s, u, h, mass, gravity):
    """Prediction-model step: Euler translation, exact attitude increment.

    State is a 10-vector (p, q, v); inputs are thrust and body rates.
    """
    out = np.empty(10)
    q = s[3:7]
    ez = np.zeros(3)
    ez[2] = u[0] / mass
    acc = quat_rotate(q, ez)
    out[0:3] = s[0:3] + h * s[7:10]
    phi = np.empty(3)
    phi[0] = h * u[1]
    phi[1] = h * u[2]
    phi[2] = h * u[3]
    dq = so3_exp_quat(phi)
    qn = quat_mul(q, dq)
    nq = math.sqrt(qn[0] ** 2 + qn[1] ** 2 + qn[2] ** 2 + qn[3] ** 2)
    out[3:7] = qn / nq
    out[7] = s[7] + h * acc[0]
    out[8] = s[8] + h * acc[1]
    out[9] = s[9] + h * (acc[2] - gravity)
    return out


@njit(cache=True)
def error_state(s, rp, rq, rv):
    """9-dim tracking error: position, attitude log-map, velocity."""
    e = np.empty(9)
    e[0] = s[0] - rp[0]
    e[1] = s[1] - rp[1]
    e[2] = s[2] - rp[2]
    # q_err = conj(rq) * q
    rqc = np.empty(4)
    rqc[0] = rq[0]
    rqc[1] = -rq[1]
    rqc[2] = -rq[2]
    rqc[3] = -rq[3]
    qe = quat_mul(rqc, s[3:7])
    att = quat_log(qe)
    e[3] = att[0]
    e[4] = att[1]
    e[5] = att[2]
    e[6] = s[7] - rv[0]
    e[7] = s[8] - rv[1]
    e[8] = s[9] - rv[2]
    return e


@njit(cache=True)
def linearize(s, u, h, mass, gravity):
    """Exact Jacobians of the prediction-model step in error coordinates."""
    A = np.zeros((9, 9))
    B = np.zeros((9, 4))
    R = quat_to_rot(s[3:7])
    for i in range(3):
        A[i, i] = 1.0
        A[i, 6 + i] = h
        A[6 + i, 6 + i] = 1.0
    phi = np.empty(3)
    phi[0] = h * u[1]
    phi[1] = h * u[2]
    phi[2] = h * u[3]
    Re = quat_to_rot(so3_exp_quat(phi))
    for i in range(3):
        for j in range(3):
            A[3 + i, 3 + j] = Re[j, i]  # transpose
    # d v' / d(attitude error) = -h*(T/m) * R @ [e3]x, with
    # [e3]x = [[0,-1,0],[1,0,0],[0,0,0]] expanded column-wise
    c = h * u[0] / mass
    for i in range(3):
        A[6 + i, 3 + 0] = -c * (R[i, 1] * 1.0)
        A[6 + i, 3 + 1] = -c * (-R[i, 0])
        A[6 + i, 3 + 2] = 0.0
    Jr = so3_right_jacobian(phi)
    for i in range(3):
        B[6 + i, 0] = h * R[i, 2] / mass
        for j in range(3):
            B[3 + i, 1 + j] = h * Jr[i, j]
    return A, B


@njit(cache=True)
def solve_tvlqr(s10, useq, ref_p, ref_q, ref_v, q_stages, r_diag, h, mass, gravity,
                u_lo, u_hi, u_ref):
    """One RTI iteration: rollout, linearize, affine Riccati, clamped forward.

    ``q_stages`` carries a (H+1, 9) diagonal state weight per horizon stage,
    so upcoming segment switches inside the horizon are anticipated and the
    commanded input evolves smoothly across the boundary.

    Returns (new input sequence, quadratic-model cost at zero step,
    quadratic-model cost at the unconstrained solution, ok flag). ok=False
    signals a non-finite rollout or warm start.
    """
    H = useq.shape[0]
    X = np.empty((H + 1, 10))
    X[0] = s10
    ok = True
    for i in range(H):
        for j in range(4):
            if not math.isfinite(useq[i, j]):
                ok = False
        if not ok:
            break
        X[i + 1] = internal_step(X[i], useq[i], h, mass, gravity)
    if ok:
        for j in range(10):
            if not math.isfinite(X[H, j]):
                ok = False
    if not ok:
        return useq.copy(), 0.0, 0.0, False

    As = np.empty((H, 9, 9))
    Bs = np.empty((H, 9, 4))
    es = np.empty((H + 1, 9))
    rs = np.empty((H, 4))
    for i in range(H):
        A, B = linearize(X[i], useq[i], h, mass, gravity)
        As[i] = A
        Bs[i] = B
        es[i] = error_state(X[i], ref_p[i], ref_q[i], ref_v[i])
        for j in range(4):
            rs[i, j] = r_diag[j] * (useq[i, j] - u_ref[j])
    es[H] = error_state(X[H], ref_p[H], ref_q[H], ref_v[H])
    for i in range(H + 1):
        for j in range(9):
            if not math.isfinite(es[i, j]):
                ok = False
    if not ok:
        return useq.copy(), 0.0, 0.0, False

    # backward affine Riccati
    P = np.zeros((9, 9))
    p = np.empty(9)
    for j in range(9):
        P[j, j] = q_stages[H, j]
        p[j] = q_stages[H, j] * es[H, j]
    Ks = np.empty((H, 4, 9))
    ks = np.empty((H, 4))
    for i in range(H - 1, -1, -1):
        A = As[i]
        B = Bs[i]
        PA = P @ A
        PB = P @ B
        M = B.T @ PB
        for j in range(4):
            M[j, j] += r_diag[j]
        S = B.T @ PA              # (4,9)
        rhs = np.empty(4)
        Bp = B.T @ p
        for j in range(4):
            rhs[j] = rs[i, j] + Bp[j]
        Minv_S = np.linalg.solve(M, S)
        Minv_rhs = np.linalg.solve(M, rhs)
        Ks[i] = -Minv_S
        ks[i] = -Minv_rhs
        Pn = A.T @ PA - S.T @ Minv_S
        for j in range(9):
            Pn[j, j] += q_stages[i, j]
        pn = A.T @ p - S.T @ Minv_rhs
        for j in range(9):
            pn[j] += q_stages[i, j] * es[i, j]
        # symmetrize to keep the recursion stable
        P = 0.5 * (Pn + Pn.T)
        p = pn

    # forward pass: clamped inputs drive the returned plan, and the
    # unconstrained solution is scored against the zero step on the
    # quadratic model (Gauss-Newton decrease check)
    u_new = np.empty((H, 4))
    dx_c = np.zeros(9)
    dx_f = np.zeros(9)
    cost_zero = 0.0
    cost_free = 0.0
    for i in range(H):
        du_f = Ks[i] @ dx_f + ks[i]
        du_c = Ks[i] @ dx_c + ks[i]
        for j in range(4):
            un = useq[i, j] + du_c[j]
            if un < u_lo[j]:
                un = u_lo[j]
            elif un > u_hi[j]:
                un = u_hi[j]
            u_new[i, j] = un
        for j in range(9):
            ez = es[i, j]
            cost_zero += q_stages[i, j] * ez * ez
            ef = ez + dx_f[j]
            cost_free += q_stages[i, j] * ef * ef
        for j in range(4):
            rz = useq[i, j] - u_ref[j]
            cost_zero += r_diag[j] * rz * rz
            rf = rz + du_f[j]
            cost_free += r_diag[j] * rf * rf
        du_cl = np.empty(4)
        for j in range(4):
            du_cl[j] = u_new[i, j] - useq[i, j]
        dx_c = As[i] @ dx_c + Bs[i] @ du_cl
        dx_f = As[i] @ dx_f + Bs[i] @ du_f
    for j in range(9):
        ez = es[H, j]
        cost_zero += q_stages[H, j] * ez * ez
        ef = ez + dx_f[j]
        cost_free += q_stages[H, j] * ef * ef
    return u_new, cost_zero, cost_free, True


@njit(cache=True)
def resize_useq(useq, horizon_len):
    h = useq.shape[0]
    if horizon_len == h:
        return useq
    out = np.empty((horizon_len, 4))
    for i in range(horizon_len):
        src = i if i < h else h - 1
        out[i] = useq[src]
    return out


@njit(cache=True)
def controller_tick(s10, useq, ref_p, ref_q, ref_v, q_stages, r_diag, h, mass,
                    gravity, u_lo, u_hi, u_ref):
    """Solve with fault recovery: a non-finite warm start or plan is reset
    to the hover trim once; a second failure reports a fault.

    Returns (first input, new warm start, fault flag).
    """
    u_new, _, _, ok = solve_tvlqr(
        s10, useq, ref_p, ref_q, ref_v, q_stages, r_diag, h, mass, gravity,
        u_lo, u_hi, u_ref,
    )
    if ok:
        finite = True
        for j in range(4):
            if not math.isfinite(u_new[0, j]):
                finite = False
        if finite:
            return u_new[0].copy(), u_new, False
    reset = np.empty_like(useq)
    for i in range(useq.shape[0]):
        reset[i] = u_ref
    u_new, _, _, ok = solve_tvlqr(
        s10, reset, ref_p, ref_q, ref_v, q_stages, r_diag, h, mass, gravity,
        u_lo, u_hi, u_ref,
    )
    if ok:
        finite = True
        for j in range(4):
            if not math.isfinite(u_new[0, j]):
                finite = False
        if finite:
            return u_new[0].copy(), u_new, False
    return u_ref.copy(), reset, True


# --- public wrappers ----------------------------------------------------------

def linearize_dynamics(
    s: QuadState, u: ControlInput, dt: float, vp: VehicleParams
) -> tuple[np.ndarray, np.ndarray]:
    """Discrete Jacobians of the prediction model about (s, u)."""
    s10 = s.as_vector()[:10]
    return linearize(s10, u.as_array(), dt, vp.mass, vp.gravity)


def predict_step(s: QuadState, u: ControlInput, dt: float, vp: VehicleParams) -> QuadState:
    """The prediction model's discrete step (body rates as direct inputs)."""
    out = internal_step(s.as_vector()[:10], u.as_array(), dt, vp.mass, vp.gravity)
    x = np.concatenate([out, u.rates])
    return QuadState.from_vector(x)


def solve_step(
    s: QuadState,
    ref_window: RefWindow,
    sp: SegmentParams,
    fixed: FixedMpcConfig,
    solver: SolverState,
    vp: VehicleParams,
    q_schedule: np.ndarray | None = None,
) -> tuple[ControlInput, SolverState]:
    """One RTI solve; returns the clamped first input and the updated state.

    ``q_schedule`` optionally overrides the stage weights with a (H+1, 9)
    per-stage schedule (used when the horizon spans a segment switch);
    by default every stage uses the active segment's weights.
    """
    H = sp.horizon_len
    if ref_window.p.shape[0] != H + 1:
        raise ValueError("ref_window must supply horizon_len + 1 reference states")
    if solver.u_seq.shape[0] != H:
        solver = solver.resized(H)
    q_diag, r_diag = build_cost(sp, fixed)
    if q_schedule is None:
        q_schedule = np.tile(q_diag, (H + 1, 1))
    elif q_schedule.shape != (H + 1, 9):
        raise ValueError("q_schedule must have shape (horizon_len + 1, 9)")
    u_lo, u_hi = input_bounds(vp)
    u0, u_new, fault = controller_tick(
        s.as_vector()[:10], solver.u_seq,
        np.ascontiguousarray(ref_window.p), np.ascontiguousarray(ref_window.q),
        np.ascontiguousarray(ref_window.v),
        np.ascontiguousarray(q_schedule), r_diag, fixed.horizon_step,
        vp.mass, vp.gravity, u_lo, u_hi, trim_input(vp),
    )
    if fault:
        raise ControllerFault("non-finite solver state after warm-start reset")
    return ControlInput.from_array(u0), SolverState(u_seq=u_new, segment_index=solver.segment_index)
