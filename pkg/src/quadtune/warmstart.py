"""Warm-start regressors: predict per-segment controller parameters.

For every segment class a set of gradient-boosted regression trees (one per
target parameter) is trained on previously tuned tracks. Features describe
the segment's reference geometry and motion. Classes never seen in
training fall back to documented default parameters.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .mpc import DEFAULT_FALLBACK_PARAMS, PARAM_FIELDS, ParamVector, SegmentParams
from .segmentation import Segment, SegmentClass, SegmentPlan
from .trajectory import ReferenceTrajectory

STANDARD_FEATURES = ("n_points", "slope", "dz", "mean_v", "mean_a")
CANDIDATE_FEATURES = (
    "n_points", "slope", "dz",
    "min_v", "mean_v", "max_v",
    "min_a", "mean_a", "max_a",
)
MAX_CV_POOL = 16


@dataclass(frozen=True)
class SegmentFeatures:
    n_points: int
    slope: float   # radians, line from first to last point
    dz: float      # m, altitude(end) - altitude(start)
    mean_v: float  # m/s
    mean_a: float  # m/s^2

    def as_dict(self) -> dict[str, float]:
        return {
            "n_points": float(self.n_points),
            "slope": self.slope,
            "dz": self.dz,
            "mean_v": self.mean_v,
            "mean_a": self.mean_a,
        }


def extract_feature_dict(ref: ReferenceTrajectory, segment: Segment) -> dict[str, float]:
    """All candidate features of a segment, including velocity and
    acceleration extrema used only during feature selection."""
    lo, hi = segment.start_tick, segment.end_tick
    if hi - lo < 2 or hi > ref.n_ticks:
        raise ValueError("segment must span at least 2 ticks of the reference")
    p0 = ref.positions[lo]
    p1 = ref.positions[hi - 1]
    dz = float(p1[2] - p0[2])
    horiz = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    slope = math.pi / 2 if horiz < 1e-9 else math.atan2(abs(dz), horiz)
    speeds = np.linalg.norm(ref.velocities[lo:hi], axis=1)
    accels = np.linalg.norm(ref.accelerations()[lo:hi], axis=1)
    return {
        "n_points": float(hi - lo),
        "slope": slope,
        "dz": dz,
        "min_v": float(speeds.min()),
        "mean_v": float(speeds.mean()),
        "max_v": float(speeds.max()),
        "min_a": float(accels.min()),
        "mean_a": float(accels.mean()),
        "max_a": float(accels.max()),
    }


def extract_features(ref: ReferenceTrajectory, segment: Segment) -> SegmentFeatures:
    d = extract_feature_dict(ref, segment)
    return SegmentFeatures(
        n_points=int(d["n_points"]),
        slope=d["slope"],
        dz=d["dz"],
        mean_v=d["mean_v"],
        mean_a=d["mean_a"],
    )


# --- gradient boosted trees ---------------------------------------------------

@dataclass(frozen=True)
class GbrtConfig:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1


class _TreeNode:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, value=0.0, feature=-1, threshold=0.0, left=None, right=None):
        self.value = value
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right

    @property
    def is_leaf(self):
        return self.feature < 0


def _best_split(X: np.ndarray, y: np.ndarray):
    """Exhaustive squared-error split search over features and midpoints."""
    n, d = X.shape
    base_sse = float(np.sum((y - y.mean()) ** 2))
    best = (None, None, base_sse)
    for j in range(d):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        ys = y[order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys ** 2)
        total_sum = csum[-1]
        total_sq = csq[-1]
        for i in range(n - 1):
            if xs[i + 1] <= xs[i]:
                continue
            nl = i + 1
            nr = n - nl
            sl = csum[i]
            sse_l = csq[i] - sl * sl / nl
            sr = total_sum - sl
            sse_r = (total_sq - csq[i]) - sr * sr / nr
            sse = sse_l + sse_r
            if sse < best[2] - 1e-12:
                best = (j, 0.5 * (xs[i] + xs[i + 1]), sse)
    return best


def _grow_tree(X: np.ndarray, y: np.ndarray, depth: int) -> _TreeNode:
    if depth == 0 or len(y) < 2 or np.ptp(y) < 1e-12:
        return _TreeNode(value=float(y.mean()))
    j, thresh, _ = _best_split(X, y)
    if j is None:
        return _TreeNode(value=float(y.mean()))
    mask = X[:, j] < thresh
    return _TreeNode(
        feature=j,
        threshold=thresh,
        left=_grow_tree(X[mask], y[mask], depth - 1),
        right=_grow_tree(X[~mask], y[~mask], depth - 1),
    )


def _tree_predict(node: _TreeNode, x: np.ndarray) -> float:
    while not node.is_leaf:
        node = node.left if x[node.feature] < node.threshold else node.right
    return node.value


def _tree_to_dict(node: _TreeNode) -> dict:
    if node.is_leaf:
        return {"value": node.value}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _tree_to_dict(node.left),
        "right": _tree_to_dict(node.right),
    }


def _tree_from_dict(d: dict) -> _TreeNode:
    if "value" in d:
        return _TreeNode(value=d["value"])
    return _TreeNode(
        feature=d["feature"],
        threshold=d["threshold"],
        left=_tree_from_dict(d["left"]),
        right=_tree_from_dict(d["right"]),
    )


class GradientBoostedRegressor:
    """Stage-wise boosting of depth-limited regression trees on
    squared-error residuals."""

    def __init__(self, cfg: GbrtConfig = GbrtConfig()):
        self.cfg = cfg
        self.base = 0.0
        self.trees: list[_TreeNode] = []

    def fit(self, X: np.ndarray, y: np.ndarray) -> "GradientBoostedRegressor":
        X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
        y = np.asarray(y, dtype=np.float64)
        if len(y) < 1:
            raise ValueError("need at least one training row")
        self.base = float(y.mean())
        self.trees = []
        if len(y) == 1 or np.ptp(y) < 1e-12:
            return self  # constant target: single-leaf model via the base
        pred = np.full(len(y), self.base)
        for _ in range(self.cfg.n_trees):
            resid = y - pred
            tree = _grow_tree(X, resid, self.cfg.max_depth)
            self.trees.append(tree)
            pred = pred + self.cfg.learning_rate * np.array(
                [_tree_predict(tree, x) for x in X]
            )
        return self

    def predict_one(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        out = self.base
        for tree in self.trees:
            out += self.cfg.learning_rate * _tree_predict(tree, x)
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.array([self.predict_one(x) for x in X.reshape(len(X), -1)])

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "n_trees": self.cfg.n_trees,
            "max_depth": self.cfg.max_depth,
            "learning_rate": self.cfg.learning_rate,
            "trees": [_tree_to_dict(t) for t in self.trees],
        }

    @staticmethod
    def from_dict(d: dict) -> "GradientBoostedRegressor":
        model = GradientBoostedRegressor(
            GbrtConfig(d["n_trees"], d["max_depth"], d["learning_rate"])
        )
        model.base = d["base"]
        model.trees = [_tree_from_dict(t) for t in d["trees"]]
        return model


def fit_gbrt(X: np.ndarray, y: np.ndarray, cfg: GbrtConfig = GbrtConfig()) -> GradientBoostedRegressor:
    return GradientBoostedRegressor(cfg).fit(X, y)


def predict_gbrt(model: GradientBoostedRegressor, x: np.ndarray) -> float:
    return model.predict_one(x)


# --- dataset -------------------------------------------------------------------

@dataclass
class TuningDataset:
    """Rows of (segment class, features, tuned parameters) from winning runs."""

    rows: list[tuple[SegmentClass, dict[str, float], SegmentParams]] = field(default_factory=list)

    def append(self, cls: SegmentClass, features: dict[str, float], params: SegmentParams):
        self.rows.append((cls, dict(features), params))

    def classes(self) -> set[SegmentClass]:
        return {cls for cls, _, _ in self.rows}

    def rows_for(self, cls: SegmentClass):
        return [(f, p) for c, f, p in self.rows if c is cls]

    CSV_HEADER = "class," + ",".join(STANDARD_FEATURES) + "," + ",".join(PARAM_FIELDS)

    def save_csv(self, path: str, append: bool = False):
        import os

        write_header = not (append and os.path.exists(path))
        with open(path, "a" if append else "w") as f:
            if write_header:
                f.write(self.CSV_HEADER + "\n")
            for cls, feats, params in self.rows:
                vals = [feats.get(name, 0.0) for name in STANDARD_FEATURES]
                row = [cls.value] + ["%.17g" % v for v in vals] + [
                    "%.17g" % v for v in params.as_array()
                ]
                f.write(",".join(row) + "\n")

    @staticmethod
    def load_csv(path: str) -> "TuningDataset":
        ds = TuningDataset()
        with open(path) as f:
            lines = [l.strip() for l in f if l.strip() and not l.startswith("#")]
        if not lines:
            return ds
        names = lines[0].split(",")
        for line in lines[1:]:
            parts = line.split(",")
            rec = dict(zip(names, parts))
            cls = SegmentClass(rec["class"])
            feats = {name: float(rec[name]) for name in STANDARD_FEATURES}
            params = SegmentParams.from_array(
                np.array([float(rec[name]) for name in PARAM_FIELDS])
            )
            ds.append(cls, feats, params)
        return ds


# --- warm-start model -----------------------------------------------------------

class WarmStartModel:
    """Per-class, per-target boosted-tree regressors with a default fallback."""

    def __init__(
        self,
        feature_names: tuple[str, ...] = STANDARD_FEATURES,
        cfg: GbrtConfig = GbrtConfig(),
        fallback: SegmentParams = DEFAULT_FALLBACK_PARAMS,
    ):
        self.feature_names = tuple(feature_names)
        self.cfg = cfg
        self.fallback = fallback
        self.models: dict[SegmentClass, dict[str, GradientBoostedRegressor]] = {}

    def train(self, dataset: TuningDataset) -> "WarmStartModel":
        for cls in dataset.classes():
            rows = dataset.rows_for(cls)
            X = np.array([[f[name] for name in self.feature_names] for f, _ in rows])
            self.models[cls] = {}
            for t_idx, target in enumerate(PARAM_FIELDS):
                y = np.array([p.as_array()[t_idx] for _, p in rows])
                self.models[cls][target] = fit_gbrt(X, y, self.cfg)
        return self

    def predict_segment(self, features: dict[str, float], cls: SegmentClass) -> SegmentParams:
        if cls not in self.models:
            warnings.warn(
                f"no warm-start model for class {cls.value!r}; using fallback defaults"
            )
            return self.fallback
        x = np.array([features[name] for name in self.feature_names])
        raw = np.array([self.models[cls][t].predict_one(x) for t in PARAM_FIELDS])
        return SegmentParams.from_array(raw)

    def save(self, path: str):
        payload = {
            "format": "quadtune-warmstart-v1",
            "feature_names": list(self.feature_names),
            "fallback": list(self.fallback.as_array()),
            "classes": {
                cls.value: {t: m.to_dict() for t, m in targets.items()}
                for cls, targets in self.models.items()
            },
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=1, sort_keys=True)

    @staticmethod
    def load(path: str) -> "WarmStartModel":
        with open(path) as f:
            payload = json.load(f)
        if payload.get("format") != "quadtune-warmstart-v1":
            raise ValueError(f"{path}: not a warm-start model file")
        model = WarmStartModel(
            feature_names=tuple(payload["feature_names"]),
            fallback=SegmentParams.from_array(np.array(payload["fallback"])),
        )
        for cls_name, targets in payload["classes"].items():
            cls = SegmentClass(cls_name)
            model.models[cls] = {
                t: GradientBoostedRegressor.from_dict(d) for t, d in targets.items()
            }
        return model


def predict_init(ref: ReferenceTrajectory, plan: SegmentPlan, model: WarmStartModel) -> ParamVector:
    """Initial parameters for every plan segment from the trained model;
    predictions are clamped into the valid parameter ranges."""
    out = []
    for seg in plan.segments:
        feats = extract_feature_dict(ref, seg)
        out.append(model.predict_segment(feats, seg.label))
    return ParamVector(tuple(out))


def harvest_rows(
    ref: ReferenceTrajectory, plan: SegmentPlan, w: ParamVector
) -> TuningDataset:
    """Dataset rows pairing each segment's features with its tuned params."""
    ds = TuningDataset()
    for seg, params in zip(plan.segments, w.per_segment):
        ds.append(seg.label, extract_feature_dict(ref, seg), params)
    return ds


# --- cross-validated feature selection ------------------------------------------

def _cv_rmse(
    dataset: TuningDataset,
    feature_names: tuple[str, ...],
    k_folds: int,
    cfg: GbrtConfig,
    rng: np.random.Generator,
) -> float:
    """Pooled k-fold RMSE of predicted parameters over all classes/targets."""
    sq_errs = []
    for cls in sorted(dataset.classes(), key=lambda c: c.value):
        rows = dataset.rows_for(cls)
        n = len(rows)
        if n < k_folds:
            raise ValueError(f"class {cls.value} has {n} rows < {k_folds} folds")
        X = np.array([[f[name] for name in feature_names] for f, _ in rows])
        Y = np.stack([p.as_array() for _, p in rows])
        idx = rng.permutation(n)
        folds = np.array_split(idx, k_folds)
        for fold in folds:
            mask = np.ones(n, dtype=bool)
            mask[fold] = False
            for t in range(Y.shape[1]):
                m = fit_gbrt(X[mask], Y[mask, t], cfg)
                pred = m.predict(X[fold])
                sq_errs.extend((pred - Y[fold, t]) ** 2)
    return float(np.sqrt(np.mean(sq_errs)))


def select_features_cv(
    dataset: TuningDataset,
    candidate_features: tuple[str, ...] = CANDIDATE_FEATURES,
    k_folds: int = 5,
    cfg: GbrtConfig = GbrtConfig(),
    seed: int = 0,
) -> tuple[str, ...]:
    """Exhaustive subset search minimizing k-fold CV RMSE.

    Ties prefer smaller subsets, then lexicographic order. The candidate
    pool is capped to keep the exhaustive search bounded.
    """
    if len(candidate_features) > MAX_CV_POOL:
        raise ValueError(f"candidate pool exceeds {MAX_CV_POOL} features")
    if not candidate_features:
        raise ValueError("candidate pool must be non-empty")
    best_subset = None
    best_rmse = math.inf
    for size in range(1, len(candidate_features) + 1):
        for subset in combinations(sorted(candidate_features), size):
            rng = np.random.default_rng(seed)
            rmse = _cv_rmse(dataset, subset, k_folds, cfg, rng)
            if rmse < best_rmse - 1e-12:
                best_rmse = rmse
                best_subset = subset
    return best_subset
