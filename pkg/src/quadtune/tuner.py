"""Metropolis-Hastings parameter search.

The chain perturbs every scalar of every segment's parameters with Gaussian
noise each proposal; segments preceding the rotating active segment use a
variance reduced by the shrink factor (25% by default). A proposal is
accepted with probability min(1, score ratio). Sampling runs until a
candidate meets the target completion on its evaluation and on a set of
re-evaluation seeds, or until the evaluation budget is exhausted, in which
case the best-scoring sample seen is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .evaluation import EvalConfig, EvalRecord, SimObjective
from .mpc import ParamVector
from .segmentation import SegmentPlan
from .trajectory import ReferenceTrajectory


@dataclass(frozen=True)
class TunerConfig:
    sigma: float = 5.0             # proposal std on every scalar
    shrink: float = 0.75           # variance factor for preceding segments
    budget: int = 200              # chain evaluations (re-evaluations excluded)
    target_completion: float = 100.0
    reeval_count: int = 4
    reeval_seeds: tuple[int, ...] | None = None
    reeval_rule: str = "all"       # all | majority
    seed: int = 0
    horizon_max: int = 40
    segment_sweep: tuple[int, ...] | None = None  # default: track order

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not (0 < self.shrink <= 1):
            raise ValueError("shrink must be in (0, 1]")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.reeval_rule not in ("all", "majority"):
            raise ValueError("reeval_rule must be 'all' or 'majority'")

    def resolved_reeval_seeds(self) -> list[int]:
        if self.reeval_seeds is not None:
            return list(self.reeval_seeds)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, 0x5EED])
        return [int(s) for s in ss.generate_state(self.reeval_count)]


@dataclass(frozen=True)
class HistoryRecord:
    iter: int
    accepted: bool
    score: float
    completion: float
    time_pen: float
    seed: int
    params: ParamVector
    active_segment: int = 0
    phase: str = "chain"  # chain | reeval


@dataclass
class TuningHistory:
    records: list[HistoryRecord] = field(default_factory=list)

    def append(self, rec: HistoryRecord):
        self.records.append(rec)

    @property
    def n_chain_evals(self) -> int:
        return sum(1 for r in self.records if r.phase == "chain")

    def best_scores(self) -> np.ndarray:
        """Running best chain score per chain evaluation."""
        best = -math.inf
        out = []
        for r in self.records:
            if r.phase != "chain":
                continue
            best = max(best, r.score)
            out.append(best)
        return np.array(out)

    def best_completion(self) -> float:
        return max(r.completion for r in self.records if r.phase == "chain")


@dataclass
class TuneResult:
    best: ParamVector
    history: TuningHistory
    target_met: bool
    evals_to_target: int | None  # chain evals until the confirmed candidate


def propose(
    current: ParamVector,
    cfg: TunerConfig,
    active_segment: int,
    rng: np.random.Generator,
) -> ParamVector:
    """Gaussian perturbation of every scalar; segments before the active one
    use the shrunk standard deviation sigma*sqrt(shrink)."""
    arr = current.to_array()
    n_seg = arr.shape[0]
    stds = np.full(n_seg, cfg.sigma)
    stds[:active_segment] = cfg.sigma * math.sqrt(cfg.shrink)
    noise = rng.normal(0.0, 1.0, size=arr.shape) * stds[:, None]
    return ParamVector.from_array(arr + noise, cfg.horizon_max)


def accept(score_new: float, score_old: float, rng: np.random.Generator) -> bool:
    """Metropolis rule: accept with probability min(1, score_new/score_old)."""
    if score_new < 0 or score_old < 0:
        raise ValueError("scores must be >= 0")
    u = rng.uniform()
    if score_old == 0.0:
        return True
    return u < score_new / score_old


class _Evaluator:
    """Budget-counted objective access with target confirmation."""

    def __init__(self, objective, cfg: TunerConfig, history: TuningHistory):
        self.objective = objective
        self.cfg = cfg
        self.history = history
        self.n_evals = 0

    def evaluate_chain(self, w: ParamVector, active_segment: int) -> EvalRecord:
        rec = self.objective(w, self.n_evals)
        self.n_evals += 1
        self.history.append(
            HistoryRecord(
                iter=self.n_evals - 1,
                accepted=False,
                score=rec.score,
                completion=rec.completion,
                time_pen=rec.time_pen,
                seed=rec.seed,
                params=w,
                active_segment=active_segment,
                phase="chain",
            )
        )
        return rec

    def mark_accepted(self, index: int):
        rec = self.history.records[index]
        self.history.records[index] = replace(rec, accepted=True)

    def confirm(self, w: ParamVector, active_segment: int) -> bool:
        """Re-evaluate a target-meeting candidate on the fixed re-eval seeds."""
        seeds = self.cfg.resolved_reeval_seeds()
        hits = 0
        for k, seed in enumerate(seeds):
            out = self.objective.evaluate(w, seed)
            met = out.completion >= self.cfg.target_completion
            hits += int(met)
            self.history.append(
                HistoryRecord(
                    iter=self.n_evals - 1,
                    accepted=False,
                    score=out.score,
                    completion=out.completion,
                    time_pen=out.penalized_time,
                    seed=seed,
                    params=w,
                    active_segment=active_segment,
                    phase="reeval",
                )
            )
            if self.cfg.reeval_rule == "all" and not met:
                return False
        if self.cfg.reeval_rule == "all":
            return hits == len(seeds)
        return hits * 2 > len(seeds)


def run_chain(objective, w0: ParamVector, cfg: TunerConfig) -> TuneResult:
    """Core M-H loop over any objective exposing the SimObjective protocol
    (``__call__(w, eval_index) -> EvalRecord`` and ``evaluate(w, seed)``)."""
    rng = np.random.default_rng(cfg.seed)
    history = TuningHistory()
    ev = _Evaluator(objective, cfg, history)
    sweep = cfg.segment_sweep or tuple(range(w0.n_segments))
    sweep_pos = 0

    best_w = w0
    best_score = -math.inf

    rec = ev.evaluate_chain(w0, sweep[sweep_pos])
    ev.mark_accepted(0)
    best_score = rec.score
    if rec.completion >= cfg.target_completion and ev.confirm(w0, sweep[sweep_pos]):
        return TuneResult(w0, history, True, ev.n_evals)

    current = w0
    current_score = rec.score
    while ev.n_evals < cfg.budget:
        active = sweep[sweep_pos]
        w_prop = propose(current, cfg, active, rng)
        rec = ev.evaluate_chain(w_prop, active)
        chain_idx = len(history.records) - 1
        if rec.score > best_score:
            best_score = rec.score
            best_w = w_prop
        if rec.completion >= cfg.target_completion and ev.confirm(w_prop, active):
            ev.mark_accepted(chain_idx)
            return TuneResult(w_prop, history, True, ev.n_evals)
        if accept(rec.score, current_score, rng):
            ev.mark_accepted(chain_idx)
            current = w_prop
            current_score = rec.score
            sweep_pos = (sweep_pos + 1) % len(sweep)
    return TuneResult(best_w, history, False, None)


def tune(
    ref: ReferenceTrajectory,
    plan: SegmentPlan,
    w0: ParamVector,
    cfg: TunerConfig,
    eval_cfg: EvalConfig = EvalConfig(),
) -> TuneResult:
    """Tune per-segment controller parameters on a reference trajectory."""
    if w0.n_segments != plan.n_segments:
        raise ValueError("w0 does not match the plan's segment count")
    objective = SimObjective(ref, plan, eval_cfg, base_seed=cfg.seed)
    return run_chain(objective, w0, cfg)
