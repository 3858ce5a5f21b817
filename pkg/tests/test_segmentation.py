import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadtune.segmentation import (
    Segment,
    SegmentClass,
    SegmentPlan,
    SegmentationConfig,
    classify_points,
    cluster_segments,
    segment_trajectory,
    single_segment_plan,
    split_steep,
)
from quadtune.trajectory import ReferenceTrajectory, TrackSpec, make_circle_track, make_drop_track

CFG = SegmentationConfig()


def synthetic_ref(alts: np.ndarray, dt: float = 0.005, xy_step: float = 1.0) -> ReferenceTrajectory:
    """Reference with a prescribed altitude profile, moving steadily in x."""
    n = len(alts)
    p = np.zeros((n, 3))
    p[:, 0] = np.arange(n) * xy_step * dt
    p[:, 2] = alts
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    v = np.gradient(p, dt, axis=0)
    wp = p[-1:].copy()
    return ReferenceTrajectory(dt=dt, positions=p, quaternions=q, velocities=v,
                               waypoints=wp, waypoint_times=np.array([(n - 1) * dt]))


@pytest.fixture(scope="module")
def drop_ref():
    return make_drop_track(TrackSpec(kind="drop", speed=8.0))


def test_flat_circle_single_segment():
    ref = make_circle_track(radius=16, n_waypoints=12, speed=10.0, dt=0.005)
    plan = segment_trajectory(ref, CFG)
    assert plan.n_segments == 1
    assert plan.segments[0].label is SegmentClass.FLAT


def test_classify_all_ascent():
    # 3 m altitude gain per stride point, threshold 1 m
    n = 2001
    per_tick = 3.0 / 100  # stride 0.5 s = 100 ticks at dt 0.005
    ref = synthetic_ref(np.arange(n) * per_tick)
    classes = classify_points(ref, CFG)
    assert all(c is SegmentClass.ASCENT for c in classes)


def test_classify_last_point_inherits():
    alts = np.concatenate([np.zeros(101), np.full(100, 3.0)])
    ref = synthetic_ref(alts)
    classes = classify_points(ref, CFG)
    assert classes[-1] is classes[-2]


def test_classify_short_reference_single_flat():
    ref = synthetic_ref(np.zeros(50))  # shorter than one stride
    assert classify_points(ref, CFG) == [SegmentClass.FLAT]


def test_cluster_absorbs_short_run():
    # runs (at 0.5 s stride): flat 5 s, ascent 0.5 s, flat 5 s
    classes = (
        [SegmentClass.FLAT] * 10 + [SegmentClass.ASCENT] * 1 + [SegmentClass.FLAT] * 10
    )
    runs = cluster_segments(classes, CFG)
    assert runs == [(0, 21, SegmentClass.FLAT)]


def test_cluster_single_run_unchanged():
    classes = [SegmentClass.DESCENT] * 7
    assert cluster_segments(classes, CFG) == [(0, 7, SegmentClass.DESCENT)]


def test_cluster_keeps_long_runs():
    classes = [SegmentClass.ASCENT] * 6 + [SegmentClass.DESCENT] * 6
    runs = cluster_segments(classes, CFG)
    assert runs == [
        (0, 6, SegmentClass.ASCENT),
        (6, 12, SegmentClass.DESCENT),
    ]


def test_cluster_tie_prefers_preceding():
    # short descent between two equal flats: absorbed into the preceding one
    classes = (
        [SegmentClass.ASCENT] * 8 + [SegmentClass.DESCENT] * 2 + [SegmentClass.FLAT] * 8
    )
    runs = cluster_segments(classes, CFG)
    assert [r[2] for r in runs] == [SegmentClass.ASCENT, SegmentClass.FLAT]
    assert runs[0][1] == 10  # the 1 s descent run joined its preceding neighbor


def test_split_steep_vertical_descent():
    # straight down: zero horizontal motion counts as 90 degrees
    n = 1001
    alts = 30.0 - np.arange(n) * (10.0 / (n - 1))
    ref = synthetic_ref(alts, xy_step=0.0)
    seg = Segment(0, n, SegmentClass.DESCENT)
    out = split_steep([seg], ref, CFG)
    assert out[0].label is SegmentClass.STEEP
    assert out[0].end_tick == n // 2


def test_split_steep_below_threshold_unchanged():
    # 30 degree climb
    n = 2001
    dx = 8.0 * 0.005
    alts = np.arange(n) * dx * np.tan(np.radians(30.0))
    ref = synthetic_ref(alts, xy_step=8.0)
    seg = Segment(0, n, SegmentClass.ASCENT)
    assert split_steep([seg], ref, CFG) == [seg]


def test_split_steep_respects_min_duration():
    n = 301  # 1.5 s < min_duration
    alts = 30.0 - np.arange(n) * 0.05
    ref = synthetic_ref(alts, xy_step=0.0)
    seg = Segment(0, n, SegmentClass.DESCENT)
    assert split_steep([seg], ref, CFG) == [seg]


def test_drop_plan_has_steep(drop_ref):
    plan = segment_trajectory(drop_ref, CFG)
    labels = plan.labels()
    assert plan.n_segments >= 3
    assert SegmentClass.STEEP in labels
    assert SegmentClass.ASCENT in labels


def test_drop_classify_sequence(drop_ref):
    classes = classify_points(drop_ref, CFG)
    # flat prefix (speed ramp), then an ascent block, then a descent block
    assert classes[0] is SegmentClass.FLAT
    seq = [c for i, c in enumerate(classes) if i == 0 or classes[i - 1] is not c]
    a = seq.index(SegmentClass.ASCENT)
    d = seq.index(SegmentClass.DESCENT)
    assert a < d


def test_drop_large_threshold_single_segment(drop_ref):
    plan = segment_trajectory(drop_ref, SegmentationConfig(height_threshold=30.0))
    assert plan.n_segments == 1


def test_threshold_to_infinity_single_flat(drop_ref):
    plan = segment_trajectory(drop_ref, SegmentationConfig(height_threshold=1e9))
    assert plan.n_segments == 1
    assert plan.segments[0].label is SegmentClass.FLAT


def test_min_duration_to_infinity_single_segment(drop_ref):
    plan = segment_trajectory(drop_ref, SegmentationConfig(min_duration=1e9))
    assert plan.n_segments == 1


def test_plan_determinism(drop_ref):
    a = segment_trajectory(drop_ref, CFG)
    b = segment_trajectory(drop_ref, CFG)
    assert a == b


def test_min_duration_after_clustering(drop_ref):
    classes = classify_points(drop_ref, CFG)
    runs = cluster_segments(classes, CFG)
    durations = [(e - s) * CFG.stride for s, e, _ in runs]
    assert all(d >= CFG.min_duration for d in durations)


@settings(max_examples=30, deadline=None)
@given(
    st.lists(
        st.floats(min_value=-4.0, max_value=4.0, allow_nan=False),
        min_size=1, max_size=40,
    ),
    st.integers(min_value=120, max_value=3000),
)
def test_partition_property(deltas, n):
    # random altitude profile: cumulative sum of bounded stride jumps,
    # interpolated to tick resolution
    knots = np.concatenate([[0.0], np.cumsum(deltas)])
    alts = np.interp(np.linspace(0, len(deltas), n), np.arange(len(knots)), knots)
    ref = synthetic_ref(alts)
    plan = segment_trajectory(ref, CFG)
    assert plan.segments[0].start_tick == 0
    assert plan.segments[-1].end_tick == ref.n_ticks
    for a, b in zip(plan.segments, plan.segments[1:]):
        assert a.end_tick == b.start_tick


def _count_nonflat(classes):
    return sum(1 for c in classes if c is not SegmentClass.FLAT)


def _ascent_descent_adjacencies(classes):
    pairs = zip(classes, classes[1:])
    return sum(
        1 for a, b in pairs
        if {a, b} == {SegmentClass.ASCENT, SegmentClass.DESCENT}
    )


def test_threshold_monotonicity():
    rng = np.random.default_rng(7)
    knots = np.cumsum(rng.uniform(-4, 4, size=60))
    alts = np.interp(np.linspace(0, 60, 4000), np.arange(61), np.concatenate([[0], knots]))
    ref = synthetic_ref(alts)
    prev_nonflat = None
    prev_adj = None
    for theta in (0.5, 1.0, 2.0, 4.0, 8.0):
        classes = classify_points(ref, SegmentationConfig(height_threshold=theta))
        nonflat = _count_nonflat(classes)
        adj = _ascent_descent_adjacencies(classes)
        if prev_nonflat is not None:
            assert nonflat <= prev_nonflat
            assert adj <= prev_adj
        prev_nonflat, prev_adj = nonflat, adj


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([SegmentClass.FLAT, SegmentClass.ASCENT,
                                 SegmentClass.DESCENT]),
                min_size=1, max_size=60))
def test_cluster_min_duration_property(classes):
    runs = cluster_segments(classes, CFG)
    # partition of the stride-point range
    assert runs[0][0] == 0
    assert runs[-1][1] == len(classes)
    for (_, e1, c1), (s2, _, c2) in zip(runs, runs[1:]):
        assert e1 == s2
        assert c1 is not c2
    # min duration holds unless the whole sequence is shorter
    if len(classes) * CFG.stride >= CFG.min_duration:
        assert all((e - s) * CFG.stride >= CFG.min_duration for s, e, _ in runs)
    else:
        assert len(runs) == 1


def test_single_segment_plan_covers(drop_ref):
    plan = single_segment_plan(drop_ref)
    assert plan.n_segments == 1
    assert plan.n_ticks == drop_ref.n_ticks


def test_plan_validation():
    cfg = CFG
    with pytest.raises(ValueError):
        SegmentPlan(segments=(), cfg=cfg, dt=0.005)
    with pytest.raises(ValueError):
        SegmentPlan(
            segments=(Segment(0, 10, SegmentClass.FLAT), Segment(12, 20, SegmentClass.FLAT)),
            cfg=cfg, dt=0.005,
        )


def test_segment_of_tick_boundaries(drop_ref):
    plan = segment_trajectory(drop_ref, CFG)
    for i, seg in enumerate(plan.segments):
        assert plan.segment_of_tick(seg.start_tick) == i
        assert plan.segment_of_tick(seg.end_tick - 1) == i
