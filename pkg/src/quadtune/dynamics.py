"""Rigid-body quadrotor simulator.

State is position, unit attitude quaternion (world<-body, scalar first),
velocity and body rates. Inputs are collective thrust plus commanded body
rates; commanded rates are tracked through a first-order lag with time
constant ``rate_tau`` (``rate_tau = 0`` gives instantaneous rate tracking).
Integration is fixed-step RK4 with the quaternion renormalized after every
step.

Conventions: world z is up-positive, gravity acts along -z.

Note on platform limits: the simulated airframe is advertised with a
thrust-to-weight ratio of 4.179, which is inconsistent with its 20 N thrust
cap on a 1.0 kg airframe (ratio ~2.04). Both numbers are exposed on
``VehicleParams``; the thrust cap is what the simulation enforces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

GRAVITY = 9.81


class SimulationDiverged(RuntimeError):
    """Raised when a non-finite state is fed to the integrator."""


@dataclass(frozen=True)
class NoiseConfig:
    """Additive Gaussian actuation noise on the commanded inputs."""

    thrust_std: float = 0.05  # N
    rate_std: float = 0.01    # rad/s
    seed: int = 0

    def __post_init__(self):
        if self.thrust_std < 0 or self.rate_std < 0:
            raise ValueError("noise stds must be >= 0")

    @property
    def enabled(self) -> bool:
        return self.thrust_std > 0 or self.rate_std > 0


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1.0          # kg
    gravity: float = GRAVITY   # m/s^2
    thrust_max: float = 20.0   # N
    pitchroll_max: float = 10.0  # rad/s
    yaw_max: float = 3.0       # rad/s
    rate_tau: float = 0.03     # s, body-rate tracking lag; 0 = instantaneous
    rated_twr: float = 4.179   # advertised; see module docstring
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be > 0")
        if self.thrust_max <= 0:
            raise ValueError("thrust_max must be > 0")

    @property
    def twr(self) -> float:
        """Thrust-to-weight ratio actually enforced by the thrust cap."""
        return self.thrust_max / (self.mass * self.gravity)

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity


@dataclass(frozen=True)
class ControlInput:
    thrust: float              # N, collective
    rates: np.ndarray          # rad/s, commanded (roll, pitch, yaw)

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.thrust, self.rates[0], self.rates[1], self.rates[2]],
            dtype=np.float64,
        )

    @staticmethod
    def from_array(u: np.ndarray) -> "ControlInput":
        return ControlInput(thrust=float(u[0]), rates=np.asarray(u[1:4], dtype=np.float64))


@dataclass(frozen=True)
class QuadState:
    p: np.ndarray       # m, world position
    q: np.ndarray       # unit quaternion (w, x, y, z), world<-body
    v: np.ndarray       # m/s, world velocity
    w_body: np.ndarray  # rad/s, body rates

    def as_vector(self) -> np.ndarray:
        out = np.empty(13, dtype=np.float64)
        out[0:3] = self.p
        out[3:7] = self.q
        out[7:10] = self.v
        out[10:13] = self.w_body
        return out

    @staticmethod
    def from_vector(x: np.ndarray) -> "QuadState":
        x = np.asarray(x, dtype=np.float64)
        return QuadState(p=x[0:3].copy(), q=x[3:7].copy(), v=x[7:10].copy(), w_body=x[10:13].copy())

    @staticmethod
    def hover(p: np.ndarray | None = None, yaw: float = 0.0) -> "QuadState":
        p = np.zeros(3) if p is None else np.asarray(p, dtype=np.float64)
        q = np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])
        return QuadState(p=p.copy(), q=q, v=np.zeros(3), w_body=np.zeros(3))

    @property
    def finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.p))
            and np.all(np.isfinite(self.q))
            and np.all(np.isfinite(self.v))
            and np.all(np.isfinite(self.w_body))
        )


@dataclass(frozen=True)
class CrashConfig:
    """Crash test: gross tracking loss, ground strike, or numerical blow-up."""

    max_pos_error: float = 5.0  # m from the current reference point
    floor_z: float = 0.0        # m, tracks are laid out above ground


# --- numba kernels -----------------------------------------------------------

@njit(cache=True)
def quat_mul(a, b):
    out = np.empty(4)
    out[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    out[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    out[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    out[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]
    return out


@njit(cache=True)
def quat_rotate(q, v):
    # R(q) v via the sandwich product, expanded
    w, x, y, z = q[0], q[1], q[2], q[3]
    t0 = 2.0 * (y * v[2] - z * v[1])
    t1 = 2.0 * (z * v[0] - x * v[2])
    t2 = 2.0 * (x * v[1] - y * v[0])
    out = np.empty(3)
    out[0] = v[0] + w * t0 + (y * t2 - z * t1)
    out[1] = v[1] + w * t1 + (z * t0 - x * t2)
    out[2] = v[2] + w * t2 + (x * t1 - y * t0)
    return out


@njit(cache=True)
def _state_deriv(x, thrust, wcmd, mass, gravity, rate_tau):
    dx = np.zeros(13)
    # p_dot = v
    dx[0:3] = x[7:10]
    # q_dot = 0.5 * q (x) (0, w_body)
    q = x[3:7]
    w = x[10:13]
    dx[3] = 0.5 * (-q[1] * w[0] - q[2] * w[1] - q[3] * w[2])
    dx[4] = 0.5 * (q[0] * w[0] + q[2] * w[2] - q[3] * w[1])
    dx[5] = 0.5 * (q[0] * w[1] - q[1] * w[2] + q[3] * w[0])
    dx[6] = 0.5 * (q[0] * w[2] + q[1] * w[1] - q[2] * w[0])
    # v_dot = R(q) e3 * thrust / m - g e3
    ez = np.zeros(3)
    ez[2] = thrust / mass
    acc = quat_rotate(q, ez)
    dx[7] = acc[0]
    dx[8] = acc[1]
    dx[9] = acc[2] - gravity
    # body-rate first-order lag toward the command
    if rate_tau > 0.0:
        for i in range(3):
            dx[10 + i] = (wcmd[i] - w[i]) / rate_tau
    return dx


@njit(cache=True)
def rk4_step(x, thrust, wcmd, dt, mass, gravity, rate_tau):
    xs = x.copy()
    if rate_tau <= 0.0:
        xs[10:13] = wcmd
    k1 = _state_deriv(xs, thrust, wcmd, mass, gravity, rate_tau)
    k2 = _state_deriv(xs + 0.5 * dt * k1, thrust, wcmd, mass, gravity, rate_tau)
    k3 = _state_deriv(xs + 0.5 * dt * k2, thrust, wcmd, mass, gravity, rate_tau)
    k4 = _state_deriv(xs + dt * k3, thrust, wcmd, mass, gravity, rate_tau)
    out = xs + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if rate_tau <= 0.0:
        out[10:13] = wcmd
    nq = math.sqrt(out[3] ** 2 + out[4] ** 2 + out[5] ** 2 + out[6] ** 2)
    out[3:7] /= nq
    return out


# --- public operations -------------------------------------------------------

def clamp_input(u: ControlInput, vp: VehicleParams) -> ControlInput:
    """Saturate an input to the vehicle's actuation box. Total and idempotent."""
    thrust = min(max(u.thrust, 0.0), vp.thrust_max)
    rates = np.clip(
        np.asarray(u.rates, dtype=np.float64),
        [-vp.pitchroll_max, -vp.pitchroll_max, -vp.yaw_max],
        [vp.pitchroll_max, vp.pitchroll_max, vp.yaw_max],
    )
    return ControlInput(thrust=thrust, rates=rates)


def step(
    s: QuadState,
    u: ControlInput,
    dt: float,
    vp: VehicleParams,
    rng: np.random.Generator | None = None,
) -> QuadState:
    """Advance the state by one RK4 step of length ``dt``.

    ``u`` is expected to be clamped already. If ``rng`` is given, Gaussian
    actuation noise (per ``vp.noise``) perturbs the commanded thrust and
    rates before integration; the perturbed command is re-clamped.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if not s.finite:
        raise SimulationDiverged("non-finite state fed to step()")
    thrust = u.thrust
    wcmd = np.asarray(u.rates, dtype=np.float64)
    if rng is not None and vp.noise.enabled:
        thrust = thrust + rng.normal(0.0, vp.noise.thrust_std)
        wcmd = wcmd + rng.normal(0.0, vp.noise.rate_std, size=3)
        clamped = clamp_input(ControlInput(thrust, wcmd), vp)
        thrust, wcmd = clamped.thrust, clamped.rates
    x = rk4_step(s.as_vector(), thrust, wcmd, dt, vp.mass, vp.gravity, vp.rate_tau)
    return QuadState.from_vector(x)


def crashed(s: QuadState, ref_point: QuadState, cfg: CrashConfig = CrashConfig()) -> bool:
    """True iff the vehicle lost the reference, hit the floor, or blew up."""
    if not s.finite:
        return True
    if s.p[2] < cfg.floor_z:
        return True
    err = float(np.linalg.norm(s.p - ref_point.p))
    return err > cfg.max_pos_error


def make_rng(seed: int) -> np.random.Generator:
    """Seeded, isolated noise stream; identical seed, identical sequence."""
    return np.random.default_rng(seed)


def hover_input(vp: VehicleParams) -> ControlInput:
    return ControlInput(thrust=vp.hover_thrust, rates=np.zeros(3))


def with_noise_off(vp: VehicleParams) -> VehicleParams:
    return replace(vp, noise=NoiseConfig(0.0, 0.0, vp.noise.seed))
