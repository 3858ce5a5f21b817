"""Black-box baseline optimizers sharing the rollout objective.

All optimizers maximize a score over flat parameter vectors clipped to a
validity box, respect their evaluation budget exactly, and are reproducible
under a fixed seed. A vector adapter maps flat vectors to per-segment
controller parameters so the baselines consume the same objective as the
M-H tuner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .evaluation import EvalConfig, EvaluationOutcome, SimObjective
from .mpc import N_PARAMS_PER_SEGMENT, ParamVector
from .segmentation import SegmentPlan
from .trajectory import ReferenceTrajectory
from .warmstart import WarmStartModel, predict_init


@dataclass(frozen=True)
class OptRecord:
    iter: int
    score: float
    completion: float
    time_pen: float
    seed: int
    x: np.ndarray


@dataclass
class OptResult:
    best_x: np.ndarray
    best_score: float
    best_completion: float
    history: list[OptRecord] = field(default_factory=list)

    @property
    def n_evals(self) -> int:
        return len(self.history)


class VectorObjective:
    """Score a flat vector; funnels everything through one evaluation counter."""

    def __init__(self, fn, lo: np.ndarray, hi: np.ndarray):
        self.fn = fn
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.n_evals = 0

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    def __call__(self, x: np.ndarray) -> EvalRecord:
        rec = self.fn(self.clip(x), self.n_evals)
        self.n_evals += 1
        return rec


class SimVectorObjective(VectorObjective):
    """Rollout objective over flattened per-segment parameters."""

    def __init__(
        self,
        ref: ReferenceTrajectory,
        plan: SegmentPlan,
        cfg: EvalConfig = EvalConfig(),
        base_seed: int = 0,
        weight_hi: float = 200.0,
        horizon_max: int = 40,
    ):
        self.sim = SimObjective(ref, plan, cfg, base_seed)
        self.horizon_max = horizon_max
        lo, hi = param_bounds(plan.n_segments, horizon_max, weight_hi)

        def fn(x, eval_index):
            return self.sim(ParamVector.from_flat(x, horizon_max), eval_index)

        super().__init__(fn, lo, hi)


def param_bounds(n_segments: int, horizon_max: int = 40, weight_hi: float = 200.0):
    """Search box for flattened parameters: weights in [0, weight_hi],
    horizon length in [1, horizon_max]."""
    lo = np.zeros(n_segments * N_PARAMS_PER_SEGMENT)
    hi = np.full(n_segments * N_PARAMS_PER_SEGMENT, weight_hi)
    for s in range(n_segments):
        lo[s * N_PARAMS_PER_SEGMENT + 4] = 1.0
        hi[s * N_PARAMS_PER_SEGMENT + 4] = float(horizon_max)
    return lo, hi


def _record(history, objective, x, rec):
    history.append(
        OptRecord(
            iter=len(history),
            score=rec.score,
            completion=rec.completion,
            time_pen=rec.time_pen,
            seed=rec.seed,
            x=objective.clip(x).copy(),
        )
    )


def _result(history) -> OptResult:
    best = max(history, key=lambda r: r.score)
    return OptResult(
        best_x=best.x.copy(),
        best_score=best.score,
        best_completion=max(r.completion for r in history),
        history=history,
    )


RANDOM_SEARCH_STD = 5.0
# half-width giving a uniform distribution the target std
RANDOM_SEARCH_DELTA = RANDOM_SEARCH_STD * math.sqrt(3.0)


def random_search(
    objective: VectorObjective,
    x0: np.ndarray,
    budget: int,
    rng: np.random.Generator,
    target_completion: float | None = None,
) -> OptResult:
    """Uniform sampling in a fixed box around the start point.

    Each scalar is drawn uniformly from [x0 - delta, x0 + delta] with delta
    chosen so the per-axis standard deviation is 5, then clipped to
    validity. The start point spends the first evaluation. The optional
    completion target stops the search early once reached (the returned
    best cannot improve in completion afterwards).
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    history: list[OptRecord] = []
    rec = objective(x0)
    _record(history, objective, x0, rec)
    while len(history) < budget:
        if target_completion is not None and history[-1].completion >= target_completion:
            break
        x = x0 + rng.uniform(-RANDOM_SEARCH_DELTA, RANDOM_SEARCH_DELTA, size=x0.shape)
        rec = objective(x)
        _record(history, objective, x, rec)
    return _result(history)


@dataclass(frozen=True)
class PsoConfig:
    n_particles: int = 10
    inertia: float = 0.5
    cognitive: float = 1.0
    social: float = 2.0
    init_sigma: float = 5.0
    vmax_box_frac: float = 0.5  # velocity clamp as a fraction of box width


def pso(
    objective: VectorObjective,
    x0: np.ndarray,
    budget: int,
    rng: np.random.Generator,
    cfg: PsoConfig = PsoConfig(),
    target_completion: float | None = None,
) -> OptResult:
    """Global-best particle swarm; particles start Gaussian around x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    n = len(x0)
    if budget < cfg.n_particles:
        raise ValueError("budget must cover at least one full swarm evaluation")
    width = np.where(np.isfinite(objective.hi - objective.lo),
                     objective.hi - objective.lo, 10.0 * cfg.init_sigma)
    vmax = cfg.vmax_box_frac * width

    X = np.empty((cfg.n_particles, n))
    X[0] = x0
    for i in range(1, cfg.n_particles):
        X[i] = x0 + rng.normal(0.0, cfg.init_sigma, size=n)
    X = np.clip(X, objective.lo, objective.hi)
    V = np.zeros((cfg.n_particles, n))

    history: list[OptRecord] = []
    pbest_x = X.copy()
    pbest_f = np.full(cfg.n_particles, -np.inf)

    def evaluate(i):
        rec = objective(X[i])
        _record(history, objective, X[i], rec)
        if rec.score > pbest_f[i]:
            pbest_f[i] = rec.score
            pbest_x[i] = objective.clip(X[i]).copy()

    done = False
    while not done:
        for i in range(cfg.n_particles):
            evaluate(i)
            if len(history) >= budget:
                done = True
                break
            if target_completion is not None and history[-1].completion >= target_completion:
                done = True
                break
        if done:
            break
        g = int(np.argmax(pbest_f))
        r1 = rng.uniform(size=(cfg.n_particles, n))
        r2 = rng.uniform(size=(cfg.n_particles, n))
        V = (
            cfg.inertia * V
            + cfg.cognitive * r1 * (pbest_x - X)
            + cfg.social * r2 * (pbest_x[g] - X)
        )
        V = np.clip(V, -vmax, vmax)
        X = np.clip(X + V, objective.lo, objective.hi)
    return _result(history)


@dataclass(frozen=True)
class CmaConfig:
    sigma0: float = 5.0
    popsize: int | None = None  # default 4 + floor(3 ln n)


def cma_popsize(n: int) -> int:
    return 4 + int(3 * math.log(n))


def cma_es(
    objective: VectorObjective,
    x0: np.ndarray,
    budget: int,
    rng: np.random.Generator,
    cfg: CmaConfig = CmaConfig(),
    target_completion: float | None = None,
) -> OptResult:
    """(mu/mu_w, lambda) CMA-ES with CSA step-size control and rank-one plus
    rank-mu covariance updates; candidates are clipped to validity before
    evaluation. Losing positive-definiteness triggers an eigenvalue floor.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = len(x0)
    lam = cfg.popsize or cma_popsize(n)
    if budget < lam:
        raise ValueError("budget must cover at least one generation")
    mu = lam // 2
    w = np.log(lam / 2 + 0.5) - np.log(np.arange(1, mu + 1))
    w = w / w.sum()
    mueff = 1.0 / np.sum(w ** 2)
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n ** 2))

    mean = x0.copy()
    sigma = cfg.sigma0
    C = np.eye(n)
    pc = np.zeros(n)
    ps = np.zeros(n)
    history: list[OptRecord] = []

    def eigendecomp(C):
        vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
        if np.any(vals < 1e-12) or not np.all(np.isfinite(vals)):
            vals = np.maximum(vals, 1e-12)
        return vals, vecs

    counteval = 0
    while counteval < budget:
        vals, vecs = eigendecomp(C)
        D = np.sqrt(vals)
        k = min(lam, budget - counteval)
        Z = rng.normal(size=(lam, n))
        Y = Z @ np.diag(D) @ vecs.T
        X = mean[None, :] + sigma * Y
        scores = np.empty(k)
        for i in range(k):
            rec = objective(X[i])
            _record(history, objective, X[i], rec)
            scores[i] = rec.score
            if target_completion is not None and rec.completion >= target_completion:
                return _result(history)
        counteval += k
        if k < lam:
            break  # partial final generation: candidates count, no update
        order = np.argsort(-scores)  # maximize
        xsel = X[order[:mu]]
        ysel = (xsel - mean) / sigma
        y_w = w @ ysel
        mean = mean + sigma * y_w

        invsqrt = vecs @ np.diag(1.0 / D) @ vecs.T
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * (invsqrt @ y_w)
        gen = counteval // lam
        hsig = (
            np.linalg.norm(ps) / math.sqrt(1 - (1 - cs) ** (2 * gen)) / chi_n
            < 1.4 + 2 / (n + 1)
        )
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * y_w
        c1a = c1 * (1 - (1 - hsig) * cc * (2 - cc))
        C = (
            (1 - c1a - cmu) * C
            + c1 * np.outer(pc, pc)
            + cmu * (ysel.T * w) @ ysel
        )
        sigma = sigma * math.exp((cs / damps) * (np.linalg.norm(ps) / chi_n - 1))
        sigma = min(sigma, 1e6)
    return _result(history)


@dataclass
class RegressorOnlyResult:
    params: ParamVector
    outcomes: list[EvaluationOutcome]

    @property
    def mean_completion(self) -> float:
        return float(np.mean([o.completion for o in self.outcomes]))

    @property
    def min_completion(self) -> float:
        return float(min(o.completion for o in self.outcomes))


def regressor_only(
    model: WarmStartModel,
    ref: ReferenceTrajectory,
    plan: SegmentPlan,
    cfg: EvalConfig = EvalConfig(),
    seeds: tuple[int, ...] = (0, 1, 2, 3),
) -> RegressorOnlyResult:
    """Prediction without sampling: one multi-seed evaluation of the
    regressor's initial parameters."""
    w = predict_init(ref, plan, model)
    sim = SimObjective(ref, plan, cfg, base_seed=0)
    outcomes = [sim.evaluate(w, seed) for seed in seeds]
    return RegressorOnlyResult(params=w, outcomes=outcomes)
