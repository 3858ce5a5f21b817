import math

import numpy as np
import pytest

from quadtune.dynamics import (
    ControlInput,
    CrashConfig,
    NoiseConfig,
    QuadState,
    SimulationDiverged,
    VehicleParams,
    clamp_input,
    crashed,
    hover_input,
    make_rng,
    step,
    with_noise_off,
)

VP = with_noise_off(VehicleParams())


def test_clamp_thrust_cap():
    u = clamp_input(ControlInput(25.0, np.zeros(3)), VP)
    assert u.thrust == 20.0


def test_clamp_identity_inside_box():
    u0 = ControlInput(9.0, np.array([1.0, -2.0, 0.5]))
    u1 = clamp_input(u0, VP)
    assert u1.thrust == u0.thrust
    assert np.array_equal(u1.rates, u0.rates)
    # idempotent
    u2 = clamp_input(u1, VP)
    assert u2.thrust == u1.thrust
    assert np.array_equal(u2.rates, u1.rates)


def test_clamp_rate_limits():
    u = clamp_input(ControlInput(5.0, np.array([12.0, -12.0, 5.0])), VP)
    assert np.allclose(u.rates, [10.0, -10.0, 3.0])


def test_hover_equilibrium():
    s0 = QuadState.hover(np.array([1.0, 2.0, 3.0]))
    s = s0
    for _ in range(100):
        s = step(s, hover_input(VP), 0.0025, VP)
    assert np.linalg.norm(s.p - s0.p) < 1e-9
    assert np.linalg.norm(s.v) < 1e-9
    assert abs(np.linalg.norm(s.q) - 1.0) < 1e-9


def test_free_fall_matches_constant_acceleration():
    # oracle: closed-form kinematics under constant acceleration -g
    t = 0.1
    g = VP.gravity
    v_expect = -g * t
    p_expect = -0.5 * g * t * t
    s = QuadState.hover(np.zeros(3))
    for _ in range(40):
        s = step(s, ControlInput(0.0, np.zeros(3)), t / 40, VP)
    assert abs(s.v[2] - v_expect) < 1e-9
    assert abs(s.p[2] - p_expect) < 1e-9
    assert s.v[2] == pytest.approx(-0.981)
    assert s.p[2] == pytest.approx(-0.04905)


def test_constant_yaw_rate_matches_quaternion_exponential():
    # oracle: for constant body rate w, q(t) = q0 * exp(t*w/2)
    vp = VehicleParams(rate_tau=0.0, noise=NoiseConfig(0, 0))
    w = np.array([0.0, 0.0, math.pi])
    s = QuadState.hover(np.zeros(3))
    u = ControlInput(vp.hover_thrust, w)
    n = 400
    for _ in range(n):
        s = step(s, u, 1.0 / n, vp)
    angle = np.linalg.norm(w) * 1.0
    q_expect = np.array([math.cos(angle / 2), 0.0, 0.0, math.sin(angle / 2)])
    assert min(np.linalg.norm(s.q - q_expect), np.linalg.norm(s.q + q_expect)) < 1e-9
    yaw = math.atan2(2 * (s.q[0] * s.q[3] + s.q[1] * s.q[2]),
                     1 - 2 * (s.q[2] ** 2 + s.q[3] ** 2))
    assert abs(abs(yaw) - math.pi) < 1e-9


def test_rate_lag_converges_to_command():
    vp = VehicleParams(rate_tau=0.05, noise=NoiseConfig(0, 0))
    s = QuadState.hover(np.zeros(3))
    u = ControlInput(vp.hover_thrust, np.array([1.0, 0.0, 0.0]))
    for _ in range(400):
        s = step(s, u, 0.0025, vp)
    # 1 s >> 20 time constants
    assert abs(s.w_body[0] - 1.0) < 1e-6


def test_crashed_cases():
    ref = QuadState.hover(np.array([0.0, 0.0, 5.0]))
    on_ref = QuadState.hover(np.array([0.0, 0.0, 5.0]))
    assert not crashed(on_ref, ref)
    far = QuadState.hover(np.array([6.0, 0.0, 5.0]))
    assert crashed(far, ref, CrashConfig(max_pos_error=5.0))
    below = QuadState.hover(np.array([0.0, 0.0, -0.1]))
    assert crashed(below, ref)
    bad = QuadState(p=np.zeros(3), q=np.array([1.0, 0, 0, 0]),
                    v=np.array([np.nan, 0, 0]), w_body=np.zeros(3))
    assert crashed(bad, ref)


def test_step_rejects_nonfinite_state():
    bad = QuadState(p=np.array([np.inf, 0, 0]), q=np.array([1.0, 0, 0, 0]),
                    v=np.zeros(3), w_body=np.zeros(3))
    with pytest.raises(SimulationDiverged):
        step(bad, hover_input(VP), 0.0025, VP)


def test_noise_determinism():
    vp = VehicleParams()
    runs = []
    for _ in range(2):
        rng = make_rng(42)
        s = QuadState.hover(np.zeros(3))
        states = []
        for _ in range(200):
            s = step(s, hover_input(vp), 0.0025, vp, rng)
            states.append(s.as_vector())
        runs.append(np.array(states))
    assert np.array_equal(runs[0], runs[1])
    # a different seed gives a different trajectory
    rng = make_rng(43)
    s = QuadState.hover(np.zeros(3))
    for _ in range(200):
        s = step(s, hover_input(vp), 0.0025, vp, rng)
    assert not np.array_equal(s.as_vector(), runs[0][-1])


def test_quaternion_norm_stays_unit():
    rng = np.random.default_rng(0)
    s = QuadState.hover(np.zeros(3))
    vp = VehicleParams(rate_tau=0.0, noise=NoiseConfig(0, 0))
    for _ in range(2000):
        rates = rng.uniform(-8, 8, 3)
        s = step(s, ControlInput(vp.hover_thrust, rates), 0.0025, vp)
        assert abs(np.linalg.norm(s.q) - 1.0) < 1e-9


def test_free_fall_energy_balance():
    # kinetic gain equals potential loss; thrust off, noise off
    vp = with_noise_off(VehicleParams())
    s = QuadState(p=np.array([0.0, 0.0, 100.0]), q=np.array([1.0, 0, 0, 0]),
                  v=np.array([3.0, -2.0, 1.0]), w_body=np.zeros(3))
    m, g = vp.mass, vp.gravity
    e0 = 0.5 * m * np.dot(s.v, s.v) + m * g * s.p[2]
    for _ in range(400):
        s = step(s, ControlInput(0.0, np.zeros(3)), 0.005, vp)
    e1 = 0.5 * m * np.dot(s.v, s.v) + m * g * s.p[2]
    assert abs(e1 - e0) / abs(e0) < 1e-6


def test_noise_off_step_is_pure():
    s = QuadState.hover(np.array([0.5, 0.5, 2.0]))
    u = ControlInput(8.0, np.array([0.3, -0.2, 0.1]))
    a = step(s, u, 0.0025, VP).as_vector()
    b = step(s, u, 0.0025, VP).as_vector()
    assert np.array_equal(a, b)
