import math

import numpy as np
import pytest

from quadtune.trajectory import (
    ReferenceParseError,
    ReferenceTrajectory,
    TrackSpec,
    TrajectoryError,
    load_reference_csv,
    make_circle_track,
    make_drop_track,
    save_reference_csv,
    spline_reference,
)


@pytest.fixture(scope="module")
def circle():
    return make_circle_track(radius=16.0, n_waypoints=12, speed=10.0, dt=0.005)


@pytest.fixture(scope="module")
def drop():
    return make_drop_track(TrackSpec(kind="drop", speed=8.0))


def test_circle_waypoint_spacing(circle):
    # 12 waypoints equally spaced on a r=16 circle: arc length 2*pi*16/12
    arc = 2 * math.pi * 16.0 / 12
    assert arc == pytest.approx(8.3776, abs=1e-3)
    gaps = []
    prev = circle.positions[0]
    for wp in circle.waypoints:
        gaps.append(np.linalg.norm(wp - prev))
        prev = wp
    # chord length of a 30 degree arc on r=16
    chord = 2 * 16.0 * math.sin(math.pi / 12)
    assert np.allclose(gaps, chord, atol=1e-6)
    assert circle.n_waypoints == 12


def test_circle_two_waypoints_diametrical():
    ref = make_circle_track(radius=16.0, n_waypoints=2, speed=10.0, dt=0.005)
    d = np.linalg.norm(ref.waypoints[0] - ref.waypoints[1])
    assert d == pytest.approx(32.0, abs=1e-9)


def test_circle_duration_arithmetic(circle):
    # trapezoid profile: L/v cruise time plus v/a lost in the two ramps
    L = 2 * math.pi * 16.0
    expect = L / 10.0 + 10.0 / 10.0
    assert circle.duration == pytest.approx(expect, abs=0.05)
    assert L == pytest.approx(100.53, abs=0.01)


def test_tracks_start_and_end_at_hover(circle, drop):
    for ref in (circle, drop):
        speeds = ref.speeds()
        assert speeds[0] < 0.01
        assert speeds[-1] < 0.01


def test_waypoint_times_consistent(circle, drop):
    for ref in (circle, drop):
        assert np.all(np.diff(ref.waypoint_times) > 0)
        for wp, t in zip(ref.waypoints, ref.waypoint_times):
            p = ref.positions[ref.tick_of_time(t)]
            assert np.linalg.norm(p - wp) < 0.5


def test_velocity_matches_position_difference(circle, drop):
    # the final sample holds the end state over the trailing partial tick,
    # so the check covers the interior of the grid
    for ref in (circle, drop):
        p = ref.positions[:-1]
        v = ref.velocities[:-1]
        fd = (p[2:] - p[:-2]) / (2 * ref.dt)
        err = np.linalg.norm(fd - v[1:-1], axis=1)
        scale = max(np.max(np.linalg.norm(v, axis=1)), 1.0)
        assert np.max(err) / scale < 1e-3


def test_spline_two_waypoints_straight_line():
    wps = np.array([[0.0, 0.0, 5.0], [10.0, 0.0, 5.0]])
    ref = spline_reference(wps, speeds=5.0, dt=0.005)
    assert ref.duration == pytest.approx(2.0, abs=1e-9)
    mid = ref.positions[ref.tick_of_time(1.0)]
    assert np.allclose(mid, [5.0, 0.0, 5.0], atol=1e-9)
    assert np.allclose(ref.waypoint_times, [0.0, 2.0])


def test_spline_interpolates_square():
    wps = np.array(
        [[0, 0, 5], [10, 0, 5], [10, 10, 5], [0, 10, 5], [0, 0.01, 5]], dtype=float
    )
    ref = spline_reference(wps, speeds=4.0, dt=0.005)
    for wp, t in zip(ref.waypoints, ref.waypoint_times):
        tick = ref.tick_of_time(t)
        # knot times may fall between ticks; evaluate both neighbors
        d = min(
            np.linalg.norm(ref.positions[k] - wp)
            for k in (max(tick - 1, 0), tick, min(tick + 1, ref.n_ticks - 1))
        )
        assert d < 0.05


def test_spline_circle_radial_deviation():
    # sample-and-measure oracle: spline through 12 circle points stays near
    # the true circle
    th = np.linspace(0, 2 * math.pi, 13)
    wps = np.stack([16 * np.cos(th), 16 * np.sin(th), np.full(13, 5.0)], axis=1)
    ref = spline_reference(wps, speeds=8.0, dt=0.005)
    r = np.hypot(ref.positions[:, 0], ref.positions[:, 1])
    assert np.max(np.abs(r - 16.0)) < 0.3


def test_spline_rejects_duplicate_waypoints():
    wps = np.array([[0, 0, 5], [0, 0, 5], [1, 0, 5]], dtype=float)
    with pytest.raises(TrajectoryError):
        spline_reference(wps, speeds=5.0, dt=0.01)


def test_drop_geometry(drop):
    assert drop.n_waypoints == 12
    # net height change: +21 up then -16 down
    z0 = drop.positions[0, 2]
    z1 = drop.waypoints[3, 2]  # bottom of the dive
    top = drop.waypoints[2, 2]
    assert top - z0 == pytest.approx(21.0, abs=1e-6)
    assert top - z1 == pytest.approx(16.0, abs=1e-6)
    assert z1 - z0 == pytest.approx(5.0, abs=1e-6)


def test_drop_descent_is_steep(drop):
    # evaluate the generated path gradient over the dive region
    top_t = drop.waypoint_times[2]
    bot_t = drop.waypoint_times[3]
    lo, hi = drop.tick_of_time(top_t), drop.tick_of_time(bot_t)
    p = drop.positions[lo:hi + 1]
    dz = np.diff(p[:, 2])
    ds_h = np.hypot(np.diff(p[:, 0]), np.diff(p[:, 1]))
    grad = np.abs(dz) / np.maximum(ds_h, 1e-12)
    assert np.max(grad) > math.tan(math.radians(45.0))


def test_drop_flat_degenerate():
    spec = TrackSpec(kind="drop", speed=8.0, ascent_height=0.0, descent_height=0.0)
    # zero heights are invalid TrackSpec geometry parameters only when negative;
    # the builder flattens the layout
    ref = make_drop_track(spec)
    assert np.allclose(ref.positions[:, 2], spec.altitude, atol=1e-9)


def test_drop_validation():
    with pytest.raises(TrajectoryError):
        make_drop_track(TrackSpec(kind="drop", ascent_height=5.0, descent_height=30.0,
                                  altitude=5.0))
    with pytest.raises(TrajectoryError):
        make_drop_track(TrackSpec(kind="circle"))


def test_csv_round_trip(tmp_path, circle):
    path = str(tmp_path / "ref.csv")
    save_reference_csv(circle, path)
    back = load_reference_csv(path)
    assert back.dt == circle.dt
    assert np.array_equal(back.positions, circle.positions)
    assert np.array_equal(back.quaternions, circle.quaternions)
    assert np.array_equal(back.velocities, circle.velocities)
    assert np.array_equal(back.waypoints, circle.waypoints)
    assert np.array_equal(back.waypoint_times, circle.waypoint_times)


def test_csv_non_monotone_time_names_row(tmp_path):
    path = tmp_path / "bad.csv"
    lines = ["t,x,y,z,qw,qx,qy,qz,vx,vy,vz"]
    for i, t in enumerate([0.0, 0.005, 0.01, 0.015, 0.02, 0.002]):
        lines.append(f"{t},0,0,5,1,0,0,0,0,0,0")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ReferenceParseError, match="row 7"):
        load_reference_csv(str(path))


def test_csv_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,x,y,z\n0,0,0,5\n")
    with pytest.raises(ReferenceParseError, match="missing columns"):
        load_reference_csv(str(path))


def test_csv_nan_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    lines = ["t,x,y,z,qw,qx,qy,qz,vx,vy,vz",
             "0,0,0,5,1,0,0,0,0,0,0",
             "0.005,0,nan,5,1,0,0,0,0,0,0"]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ReferenceParseError, match="row 3"):
        load_reference_csv(str(path))


def test_csv_ned_import(tmp_path):
    path = tmp_path / "ned.csv"
    lines = ["t,x,y,z,qw,qx,qy,qz,vx,vy,vz",
             "0,1,2,-5,1,0,0,0,0.5,0,-0.25",
             "0.005,1,2,-5,1,0,0,0,0.5,0,-0.25"]
    path.write_text("\n".join(lines) + "\n")
    ref = load_reference_csv(str(path), ned=True)
    assert ref.positions[0, 2] == 5.0
    assert ref.velocities[0, 2] == 0.25
