"""Reference segmentation by altitude change.

The reference is sampled at stride intervals and each stride point is
classified flat / ascent / descent from the altitude change to its
successor. Runs of equal class are clustered so every segment lasts at
least a minimum duration, and ascent/descent segments steeper than a slope
threshold are recursively halved, the first half relabeled steep.

Classification works on up-positive altitude; ascent means the reference
gains at least the height threshold per stride.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .trajectory import ReferenceTrajectory


class SegmentClass(Enum):
    FLAT = "flat"
    ASCENT = "ascent"
    DESCENT = "descent"
    STEEP = "steep"


@dataclass(frozen=True)
class SegmentationConfig:
    height_threshold: float = 1.0  # m per stride point
    min_duration: float = 2.0      # s
    stride: float = 0.5            # s between classified points
    steep_slope_deg: float = 45.0

    def __post_init__(self):
        for name in ("height_threshold", "min_duration", "stride", "steep_slope_deg"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Segment:
    start_tick: int
    end_tick: int  # exclusive
    label: SegmentClass

    def duration(self, dt: float) -> float:
        return (self.end_tick - self.start_tick) * dt


@dataclass(frozen=True)
class SegmentPlan:
    segments: tuple[Segment, ...]
    cfg: SegmentationConfig
    dt: float

    def __post_init__(self):
        if not self.segments:
            raise ValueError("plan must contain at least one segment")
        prev_end = 0
        for seg in self.segments:
            if seg.start_tick != prev_end:
                raise ValueError("segments must partition the tick range contiguously")
            if seg.end_tick <= seg.start_tick:
                raise ValueError("empty segment")
            prev_end = seg.end_tick

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def n_ticks(self) -> int:
        return self.segments[-1].end_tick

    def segment_of_tick(self, tick: int) -> int:
        """Index of the segment containing the tick (boundary tick belongs
        to the segment starting there)."""
        tick = min(max(tick, 0), self.n_ticks - 1)
        for i, seg in enumerate(self.segments):
            if tick < seg.end_tick:
                return i
        return len(self.segments) - 1

    def tick_segment_ids(self) -> np.ndarray:
        ids = np.empty(self.n_ticks, dtype=np.int64)
        for i, seg in enumerate(self.segments):
            ids[seg.start_tick:seg.end_tick] = i
        return ids

    def labels(self) -> list[SegmentClass]:
        return [s.label for s in self.segments]


def _stride_ticks(ref: ReferenceTrajectory, cfg: SegmentationConfig) -> int:
    return max(1, int(round(cfg.stride / ref.dt)))


def classify_points(ref: ReferenceTrajectory, cfg: SegmentationConfig) -> list[SegmentClass]:
    """Per-stride-point class from the altitude change to the next point.

    The last point inherits its predecessor's class; fewer than two stride
    points collapses to a single flat class.
    """
    st = _stride_ticks(ref, cfg)
    alts = ref.positions[::st, 2]
    if len(alts) < 2:
        return [SegmentClass.FLAT]
    classes = []
    for j in range(len(alts) - 1):
        dh = alts[j + 1] - alts[j]
        if dh >= cfg.height_threshold:
            classes.append(SegmentClass.ASCENT)
        elif dh <= -cfg.height_threshold:
            classes.append(SegmentClass.DESCENT)
        else:
            classes.append(SegmentClass.FLAT)
    classes.append(classes[-1])
    return classes


def cluster_segments(
    classes: list[SegmentClass], cfg: SegmentationConfig
) -> list[tuple[int, int, SegmentClass]]:
    """Merge equal-class runs and absorb runs shorter than the minimum
    duration into their longer neighbor (ties prefer the preceding one).

    Intervals are in stride-point index space, [start, end) convention.
    Shortest offending runs are absorbed first (ties leftmost) so the
    result is deterministic.
    """
    if not classes:
        raise ValueError("classes must be non-empty")
    runs: list[list] = []
    for j, c in enumerate(classes):
        if runs and runs[-1][2] is c:
            runs[-1][1] = j + 1
        else:
            runs.append([j, j + 1, c])

    def dur(run):
        return (run[1] - run[0]) * cfg.stride

    while len(runs) > 1:
        short = [i for i, r in enumerate(runs) if dur(r) < cfg.min_duration]
        if not short:
            break
        i = min(short, key=lambda k: (dur(runs[k]), k))
        if i == 0:
            target = 1
        elif i == len(runs) - 1:
            target = i - 1
        else:
            target = i - 1 if dur(runs[i - 1]) >= dur(runs[i + 1]) else i + 1
        lo = min(i, target)
        hi = max(i, target)
        runs[lo] = [runs[lo][0], runs[hi][1], runs[target][2]]
        del runs[hi]
        # coalesce with any now-equal neighbors
        j = 0
        while j < len(runs) - 1:
            if runs[j][2] is runs[j + 1][2]:
                runs[j][1] = runs[j + 1][1]
                del runs[j + 1]
            else:
                j += 1
    return [(r[0], r[1], r[2]) for r in runs]


def _segment_slope(ref: ReferenceTrajectory, start_tick: int, end_tick: int) -> float:
    """Slope (radians) of the line between the segment's first and last
    point; a purely vertical segment counts as 90 degrees."""
    p0 = ref.positions[start_tick]
    p1 = ref.positions[end_tick - 1]
    dz = abs(p1[2] - p0[2])
    horiz = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    if horiz < 1e-9:
        return math.pi / 2
    return math.atan2(dz, horiz)


def split_steep(
    segments: list[Segment], ref: ReferenceTrajectory, cfg: SegmentationConfig
) -> list[Segment]:
    """Recursively halve over-steep ascent/descent segments.

    The first half of each split is relabeled steep and the second half is
    re-tested. A segment shorter than the minimum duration is never split
    (recursion base case), so steep halves can undercut the clustering
    minimum by at most a factor of two per level.
    """
    thresh = math.radians(cfg.steep_slope_deg)

    def rec(seg: Segment) -> list[Segment]:
        if seg.label not in (SegmentClass.ASCENT, SegmentClass.DESCENT):
            return [seg]
        if seg.duration(ref.dt) < cfg.min_duration:
            return [seg]
        if _segment_slope(ref, seg.start_tick, seg.end_tick) <= thresh:
            return [seg]
        mid = seg.start_tick + (seg.end_tick - seg.start_tick) // 2
        first = Segment(seg.start_tick, mid, SegmentClass.STEEP)
        return [first] + rec(Segment(mid, seg.end_tick, seg.label))

    out: list[Segment] = []
    for seg in segments:
        out.extend(rec(seg))
    return out


def segment_trajectory(ref: ReferenceTrajectory, cfg: SegmentationConfig) -> SegmentPlan:
    """Full pipeline: classify at stride points, cluster, split steep."""
    classes = classify_points(ref, cfg)
    runs = cluster_segments(classes, cfg)
    st = _stride_ticks(ref, cfg)
    n = ref.n_ticks
    segments = []
    for start_pt, end_pt, label in runs:
        start_tick = min(start_pt * st, n)
        end_tick = min(end_pt * st, n)
        segments.append(Segment(start_tick, end_tick, label))
    # the last run covers any tail ticks beyond the final stride point
    last = segments[-1]
    segments[-1] = Segment(last.start_tick, n, last.label)
    segments = [s for s in segments if s.end_tick > s.start_tick]
    segments = split_steep(segments, ref, cfg)
    return SegmentPlan(segments=tuple(segments), cfg=cfg, dt=ref.dt)


def single_segment_plan(ref: ReferenceTrajectory) -> SegmentPlan:
    """Trivial plan treating the whole reference as one flat segment."""
    cfg = SegmentationConfig(height_threshold=1e9, min_duration=1e9, stride=max(ref.dt, 0.5))
    seg = Segment(0, ref.n_ticks, SegmentClass.FLAT)
    return SegmentPlan(segments=(seg,), cfg=cfg, dt=ref.dt)


def plan_to_csv_lines(plan: SegmentPlan) -> list[str]:
    lines = ["start_s,end_s,class"]
    for seg in plan.segments:
        lines.append(
            f"{seg.start_tick * plan.dt:.3f},{seg.end_tick * plan.dt:.3f},{seg.label.value}"
        )
    return lines
