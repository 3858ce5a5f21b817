"""Experiment command line.

Subcommands: tune, baseline, evaluate, segment, ablate-seg, ablate-comp,
landscape, harvest, tracks. Every output file embeds the fully resolved
configuration and the artifact version; repeated runs with the same config
produce byte-identical outputs. Exit codes: 0 success, 2 config/IO error,
3 finished without meeting the completion target.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from itertools import product

import numpy as np

from . import __version__
from .baselines import (
    CmaConfig,
    PsoConfig,
    SimVectorObjective,
    cma_es,
    pso,
    random_search,
    regressor_only,
)
from .config import ConfigError, ExperimentConfig, load_config, resolved_dict
from .evaluation import rollout
from .mpc import DEFAULT_FALLBACK_PARAMS, PARAM_FIELDS, ParamVector, SegmentParams
from .segmentation import SegmentPlan, plan_to_csv_lines, segment_trajectory, single_segment_plan
from .trajectory import (
    ReferenceTrajectory,
    TrackSpec,
    load_reference_csv,
    make_track,
    save_reference_csv,
)
from .tuner import TuneResult, tune
from .warmstart import GbrtConfig, TuningDataset, WarmStartModel, harvest_rows, predict_init

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TARGET_NOT_MET = 3

# published schema for history JSONL evaluation records (the first line of
# every history file is a header object with "type": "header" instead)
HISTORY_RECORD_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["iter", "accepted", "score", "completion", "time_pen", "seed", "params"],
    "properties": {
        "iter": {"type": "integer", "minimum": 0},
        "accepted": {"type": "boolean"},
        "score": {"type": "number", "minimum": 0, "maximum": 1},
        "completion": {"type": "number", "minimum": 0, "maximum": 100},
        "time_pen": {"type": "number", "minimum": 0},
        "seed": {"type": "integer"},
        "params": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["q_pos_xy", "q_pos_z", "q_attitude",
                             "q_velocity", "horizon_len"],
                "properties": {
                    "q_pos_xy": {"type": "number", "minimum": 0},
                    "q_pos_z": {"type": "number", "minimum": 0},
                    "q_attitude": {"type": "number", "minimum": 0},
                    "q_velocity": {"type": "number", "minimum": 0},
                    "horizon_len": {"type": "integer", "minimum": 1},
                },
            },
        },
    },
}


# --- output helpers -----------------------------------------------------------

def _atomic_write(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _header_line(cfg: ExperimentConfig) -> str:
    return _json_line({"type": "header", "version": __version__, "config": resolved_dict(cfg)})


def _params_to_json(w: ParamVector) -> list[dict]:
    out = []
    for sp in w.per_segment:
        d = {name: getattr(sp, name) for name in PARAM_FIELDS}
        d["horizon_len"] = int(d["horizon_len"])
        out.append(d)
    return out


def _params_from_json(data: list[dict]) -> ParamVector:
    return ParamVector(
        tuple(
            SegmentParams(
                q_pos_xy=d["q_pos_xy"], q_pos_z=d["q_pos_z"],
                q_attitude=d["q_attitude"], q_velocity=d["q_velocity"],
                horizon_len=int(d["horizon_len"]),
            )
            for d in data
        )
    )


def write_history_jsonl(path: str, cfg: ExperimentConfig, records) -> None:
    lines = [_header_line(cfg)]
    for r in records:
        lines.append(_json_line(r))
    _atomic_write(path, "\n".join(lines) + "\n")


def tune_history_records(result: TuneResult):
    for r in result.history.records:
        yield {
            "iter": r.iter,
            "accepted": r.accepted,
            "score": r.score,
            "completion": r.completion,
            "time_pen": r.time_pen,
            "seed": r.seed,
            "params": _params_to_json(r.params),
            "active_segment": r.active_segment,
            "phase": r.phase,
        }


def opt_history_records(history, horizon_max: int):
    best = -float("inf")
    for r in history:
        improved = r.score > best
        best = max(best, r.score)
        yield {
            "iter": r.iter,
            "accepted": improved,
            "score": r.score,
            "completion": r.completion,
            "time_pen": r.time_pen,
            "seed": r.seed,
            "params": _params_to_json(ParamVector.from_flat(r.x, horizon_max)),
            "phase": "chain",
        }


def write_best_params(path: str, cfg: ExperimentConfig, w: ParamVector, extra: dict):
    payload = {
        "version": __version__,
        "config": resolved_dict(cfg),
        "params": _params_to_json(w),
    }
    payload.update(extra)
    _atomic_write(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")


def write_csv(path: str, cfg: ExperimentConfig, header: str, rows: list[str]):
    lines = [f"# version = {__version__}"]
    for k, v in sorted(resolved_dict(cfg).items()):
        lines.append(f"# {k} = {v}")
    lines.append(header)
    lines.extend(rows)
    _atomic_write(path, "\n".join(lines) + "\n")


# --- experiment construction ---------------------------------------------------

def build_reference(cfg: ExperimentConfig) -> ReferenceTrajectory:
    if cfg.track_kind == "csv":
        if not cfg.track_path:
            raise ConfigError("track.path required for track.kind = csv")
        return load_reference_csv(cfg.track_path, ned=cfg.track_ned)
    spec = replace(cfg.track, kind=cfg.track_kind, dt=cfg.mpc.control_dt)
    return make_track(spec)


def build_plan(cfg: ExperimentConfig, ref: ReferenceTrajectory) -> SegmentPlan:
    if not cfg.use_segmentation:
        return single_segment_plan(ref)
    return segment_trajectory(ref, cfg.segmentation)


def build_initial_params(
    cfg: ExperimentConfig, ref: ReferenceTrajectory, plan: SegmentPlan
) -> ParamVector:
    if cfg.init_mode == "default":
        return ParamVector.uniform(DEFAULT_FALLBACK_PARAMS, plan.n_segments)
    if cfg.init_mode == "degraded":
        base = ParamVector.uniform(DEFAULT_FALLBACK_PARAMS, plan.n_segments)
        return base.scaled_weights(cfg.init_degrade_factor)
    if cfg.init_mode == "file":
        if not cfg.init_file:
            raise ConfigError("init.file required for init.mode = file")
        with open(cfg.init_file) as f:
            payload = json.load(f)
        w = _params_from_json(payload["params"])
        if w.n_segments == 1 and plan.n_segments > 1:
            w = ParamVector.uniform(w.per_segment[0], plan.n_segments)
        if w.n_segments != plan.n_segments:
            raise ConfigError(
                f"init.file has {w.n_segments} segments, plan needs {plan.n_segments}"
            )
        return w
    if cfg.init_mode == "model":
        if not cfg.init_model:
            raise ConfigError("init.model required for init.mode = model")
        model = WarmStartModel.load(cfg.init_model)
        return predict_init(ref, plan, model)
    raise ConfigError(f"unknown init.mode {cfg.init_mode!r}")


def _tuner_with_seed(cfg: ExperimentConfig, seed: int | None = None, budget: int | None = None):
    tuner_cfg = cfg.tuner
    if seed is not None:
        tuner_cfg = replace(tuner_cfg, seed=seed)
    else:
        tuner_cfg = replace(tuner_cfg, seed=cfg.seed)
    if budget is not None:
        tuner_cfg = replace(tuner_cfg, budget=budget)
    return replace(tuner_cfg, horizon_max=cfg.mpc.horizon_max)


# --- subcommands ----------------------------------------------------------------

def cmd_tune(cfg: ExperimentConfig) -> int:
    ref = build_reference(cfg)
    plan = build_plan(cfg, ref)
    w0 = build_initial_params(cfg, ref, plan)
    result = tune(ref, plan, w0, _tuner_with_seed(cfg), cfg.eval_config())
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_history_jsonl(
        os.path.join(cfg.out_dir, "history.jsonl"), cfg, tune_history_records(result)
    )
    write_best_params(
        os.path.join(cfg.out_dir, "best_params.json"), cfg, result.best,
        {
            "target_met": result.target_met,
            "evals_to_target": result.evals_to_target,
            "best_completion": result.history.best_completion(),
        },
    )
    return EXIT_OK if result.target_met else EXIT_TARGET_NOT_MET


def cmd_baseline(cfg: ExperimentConfig) -> int:
    ref = build_reference(cfg)
    plan = build_plan(cfg, ref)
    budget = cfg.baseline_budget or cfg.tuner.budget
    target = cfg.tuner.target_completion if cfg.baseline_stop_on_target else None
    os.makedirs(cfg.out_dir, exist_ok=True)

    if cfg.method == "regressor":
        if not cfg.init_model:
            raise ConfigError("init.model required for method = regressor")
        model = WarmStartModel.load(cfg.init_model)
        res = regressor_only(model, ref, plan, cfg.eval_config(),
                             seeds=tuple(_tuner_with_seed(cfg).resolved_reeval_seeds()))
        records = [
            {
                "iter": i,
                "accepted": i == 0,
                "score": out.score,
                "completion": out.completion,
                "time_pen": out.penalized_time,
                "seed": out.seed,
                "params": _params_to_json(res.params),
                "phase": "reeval",
            }
            for i, out in enumerate(res.outcomes)
        ]
        write_history_jsonl(os.path.join(cfg.out_dir, "history.jsonl"), cfg, records)
        write_best_params(
            os.path.join(cfg.out_dir, "best_params.json"), cfg, res.params,
            {"mean_completion": res.mean_completion, "min_completion": res.min_completion},
        )
        met = res.min_completion >= cfg.tuner.target_completion
        return EXIT_OK if met else EXIT_TARGET_NOT_MET

    w0 = build_initial_params(cfg, ref, plan)
    objective = SimVectorObjective(
        ref, plan, cfg.eval_config(), base_seed=cfg.seed,
        weight_hi=cfg.weight_hi, horizon_max=cfg.mpc.horizon_max,
    )
    rng = np.random.default_rng(cfg.seed)
    x0 = w0.to_flat()
    if cfg.method == "random":
        res = random_search(objective, x0, budget, rng, target_completion=target)
    elif cfg.method == "pso":
        res = pso(
            objective, x0, budget, rng,
            PsoConfig(
                n_particles=cfg.pso_particles, inertia=cfg.pso_inertia,
                cognitive=cfg.pso_cognitive, social=cfg.pso_social,
            ),
            target_completion=target,
        )
    elif cfg.method == "cmaes":
        res = cma_es(objective, x0, budget, rng, CmaConfig(sigma0=cfg.cma_sigma0),
                     target_completion=target)
    else:
        raise ConfigError(f"method {cfg.method!r} is not a baseline")
    write_history_jsonl(
        os.path.join(cfg.out_dir, "history.jsonl"), cfg,
        opt_history_records(res.history, cfg.mpc.horizon_max),
    )
    best_w = ParamVector.from_flat(res.best_x, cfg.mpc.horizon_max)
    write_best_params(
        os.path.join(cfg.out_dir, "best_params.json"), cfg, best_w,
        {"best_completion": res.best_completion, "n_evals": res.n_evals},
    )
    met = res.best_completion >= cfg.tuner.target_completion
    return EXIT_OK if met else EXIT_TARGET_NOT_MET


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    ref = build_reference(cfg)
    plan = build_plan(cfg, ref)
    w = build_initial_params(cfg, ref, plan)
    out = rollout(ref, plan, w, cfg.seed, cfg.eval_config(), record_trace=True)
    os.makedirs(cfg.out_dir, exist_ok=True)
    payload = {
        "version": __version__,
        "config": resolved_dict(cfg),
        "passed": [bool(b) for b in out.passed],
        "status": out.status,
        "stop_tick": out.stop_tick,
        "raw_time": out.raw_time,
        "penalized_time": out.penalized_time,
        "completion": out.completion,
        "score": out.score,
        "seed": out.seed,
        "params": _params_to_json(w),
    }
    _atomic_write(
        os.path.join(cfg.out_dir, "outcome.json"),
        json.dumps(payload, sort_keys=True, indent=1) + "\n",
    )
    rows = []
    tr = out.trace
    for i in range(len(tr.times)):
        s = tr.states[i]
        u = tr.inputs[i]
        rows.append(
            "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g"
            % (tr.times[i], s[0], s[1], s[2], u[0], u[1], u[2], u[3])
        )
    write_csv(
        os.path.join(cfg.out_dir, "trace.csv"), cfg,
        "t,x,y,z,thrust,wx,wy,wz", rows,
    )
    return EXIT_OK


def cmd_segment(cfg: ExperimentConfig) -> int:
    ref = build_reference(cfg)
    plan = build_plan(cfg, ref)
    lines = plan_to_csv_lines(plan)
    for line in lines:
        print(line)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_csv(os.path.join(cfg.out_dir, "segments.csv"), cfg, lines[0], lines[1:])
    return EXIT_OK


def _ablate_seg_cell(args):
    cfg, height, min_dur = args
    cell_cfg = replace(
        cfg,
        segmentation=replace(
            cfg.segmentation, height_threshold=height, min_duration=min_dur
        ),
    )
    ref = build_reference(cell_cfg)
    plan = build_plan(cell_cfg, ref)
    w0 = build_initial_params(cell_cfg, ref, plan)
    result = tune(ref, plan, w0, _tuner_with_seed(cell_cfg, budget=cfg.ablate_budget),
                  cell_cfg.eval_config())
    return (
        height, min_dur, plan.n_segments,
        result.history.best_completion(),
        result.evals_to_target if result.target_met else -1,
    )


def cmd_ablate_segmentation(cfg: ExperimentConfig) -> int:
    cells = [(cfg, h, d) for h, d in product(cfg.ablate_heights, cfg.ablate_min_durations)]
    results = _run_cells(_ablate_seg_cell, cells, cfg.jobs)
    rows = [
        "%.17g,%.17g,%d,%.17g,%d" % tuple(r)
        for r in results
    ]
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_csv(
        os.path.join(cfg.out_dir, "ablate_segmentation.csv"), cfg,
        "height_threshold,min_duration,n_segments,best_completion,evals_to_target",
        rows,
    )
    return EXIT_OK


def _ablate_comp_cell(args):
    cfg, variant = args
    cell_cfg = cfg
    if variant == "full":
        cell_cfg = replace(cfg, init_mode="model")
    elif variant == "no_regressor":
        cell_cfg = replace(cfg, init_mode="degraded")
    elif variant == "no_segmentation":
        cell_cfg = replace(cfg, init_mode="degraded", use_segmentation=False)
    ref = build_reference(cell_cfg)
    plan = build_plan(cell_cfg, ref)
    w0 = build_initial_params(cell_cfg, ref, plan)
    result = tune(ref, plan, w0, _tuner_with_seed(cell_cfg), cell_cfg.eval_config())
    return (
        variant,
        result.history.best_completion(),
        result.evals_to_target if result.target_met else -1,
        result.target_met,
    )


def cmd_ablate_components(cfg: ExperimentConfig) -> int:
    if not cfg.init_model:
        raise ConfigError("ablate-comp needs init.model (trained warm-start model)")
    variants = ["full", "no_regressor", "no_segmentation"]
    results = _run_cells(_ablate_comp_cell, [(cfg, v) for v in variants], cfg.jobs)
    rows = [
        "%s,%.17g,%d,%s" % (v, comp, evals, str(met).lower())
        for v, comp, evals, met in results
    ]
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_csv(
        os.path.join(cfg.out_dir, "ablate_components.csv"), cfg,
        "variant,best_completion,evals_to_target,target_met", rows,
    )
    return EXIT_OK


def _parse_param_name(name: str, n_segments: int) -> tuple[int, str]:
    try:
        seg_part, field_name = name.split(".", 1)
        if not seg_part.startswith("seg"):
            raise ValueError
        seg_idx = int(seg_part[3:])
    except ValueError:
        raise ConfigError(f"bad landscape parameter name {name!r}; use segK.field") from None
    if field_name not in PARAM_FIELDS:
        raise ConfigError(f"unknown parameter field {field_name!r}")
    if not (0 <= seg_idx < n_segments):
        raise ConfigError(f"segment index {seg_idx} out of range")
    return seg_idx, field_name


def _with_param(w: ParamVector, seg_idx: int, field_name: str, value: float) -> ParamVector:
    arr = w.to_array()
    arr[seg_idx, PARAM_FIELDS.index(field_name)] = value
    return ParamVector.from_array(arr)


def _landscape_cell(args):
    cfg, xv, yv = args
    ref = build_reference(cfg)
    plan = build_plan(cfg, ref)
    w = build_initial_params(cfg, ref, plan)
    xi = _parse_param_name(cfg.landscape_param_x, plan.n_segments)
    yi = _parse_param_name(cfg.landscape_param_y, plan.n_segments)
    w = _with_param(w, xi[0], xi[1], xv)
    w = _with_param(w, yi[0], yi[1], yv)
    out = rollout(ref, plan, w, cfg.seed, cfg.eval_config(), record_trace=False)
    return (xv, yv, out.completion, out.penalized_time)


def cmd_landscape(cfg: ExperimentConfig) -> int:
    xs = np.linspace(*cfg.landscape_x[:2], int(cfg.landscape_x[2]))
    ys = np.linspace(*cfg.landscape_y[:2], int(cfg.landscape_y[2]))
    cells = [(cfg, float(xv), float(yv)) for xv in xs for yv in ys]
    results = _run_cells(_landscape_cell, cells, cfg.jobs)
    rows = ["%.17g,%.17g,%.17g,%.17g" % r for r in results]
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_csv(
        os.path.join(cfg.out_dir, "landscape.csv"), cfg,
        f"{cfg.landscape_param_x},{cfg.landscape_param_y},completion,time_pen", rows,
    )
    return EXIT_OK


def default_harvest_suite() -> list[TrackSpec]:
    """Training tracks for the warm-start model: drop variants with distinct
    geometry plus two circles, covering all four segment classes."""
    return [
        TrackSpec(kind="drop", speed=7.0, ascent_height=18.0, ascent_length=45.0,
                  descent_height=14.0, descent_length=8.0, radius=14.0),
        TrackSpec(kind="drop", speed=9.0, ascent_height=24.0, ascent_length=55.0,
                  descent_height=18.0, descent_length=8.5, radius=18.0),
        TrackSpec(kind="drop", speed=8.0, ascent_height=14.0, ascent_length=38.0,
                  descent_height=11.0, descent_length=5.5, radius=12.0, altitude=4.0),
        TrackSpec(kind="circle", radius=12.0, speed=8.0),
        TrackSpec(kind="circle", radius=20.0, speed=11.0),
    ]


def _harvest_cell(args):
    cfg, spec = args
    cell_cfg = replace(cfg, track=replace(spec, dt=cfg.mpc.control_dt),
                       track_kind=spec.kind)
    ref = build_reference(cell_cfg)
    plan = build_plan(cell_cfg, ref)
    w0 = build_initial_params(cell_cfg, ref, plan)
    result = tune(ref, plan, w0, _tuner_with_seed(cell_cfg, budget=cfg.harvest_budget),
                  cell_cfg.eval_config())
    if not result.target_met:
        return None
    return harvest_rows(ref, plan, result.best)


def cmd_harvest(cfg: ExperimentConfig) -> int:
    cells = [(cfg, spec) for spec in default_harvest_suite()]
    results = _run_cells(_harvest_cell, cells, cfg.jobs)
    dataset = TuningDataset()
    n_tracks = 0
    for ds in results:
        if ds is None:
            continue
        n_tracks += 1
        dataset.rows.extend(ds.rows)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, cfg.harvest_dataset)
    dataset.save_csv(path, append=os.path.exists(path))
    print(f"harvested {len(dataset.rows)} segments from {n_tracks} tracks -> {path}")
    if cfg.harvest_model:
        full = TuningDataset.load_csv(path)
        model = WarmStartModel(cfg=GbrtConfig()).train(full)
        model.save(os.path.join(cfg.out_dir, cfg.harvest_model))
        print(f"trained warm-start model -> {os.path.join(cfg.out_dir, cfg.harvest_model)}")
    return EXIT_OK if n_tracks > 0 else EXIT_TARGET_NOT_MET


def cmd_tracks(cfg: ExperimentConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    builtins = {
        "circle": TrackSpec(kind="circle", dt=cfg.mpc.control_dt),
        "drop": TrackSpec(kind="drop", speed=8.0, dt=cfg.mpc.control_dt),
    }
    for name, spec in builtins.items():
        ref = make_track(spec)
        path = os.path.join(cfg.out_dir, f"{name}.csv")
        save_reference_csv(ref, path, header_comment=f"version = {__version__}")
        print(f"{name}: {ref.n_ticks} ticks, {ref.duration:.2f} s, "
              f"{ref.n_waypoints} waypoints -> {path}")
    return EXIT_OK


def _run_cells(fn, cells, jobs: int):
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


# --- entry point -----------------------------------------------------------------

_COMMANDS = {
    "tune": cmd_tune,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "segment": cmd_segment,
    "ablate-seg": cmd_ablate_segmentation,
    "ablate-comp": cmd_ablate_components,
    "landscape": cmd_landscape,
    "harvest": cmd_harvest,
    "tracks": cmd_tracks,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quadtune",
        description="MPC parameter tuning workbench for quadrotor tracking",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file path")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--jobs", type=int, help="worker pool size")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--ned", action="store_true",
                       help="treat imported CSV references as NED (negate z)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable")
        if name == "baseline":
            p.add_argument("--method", choices=["random", "pso", "cmaes", "regressor"],
                           help="baseline optimizer")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.jobs is not None:
        overrides["jobs"] = str(args.jobs)
    if args.out is not None:
        overrides["out"] = args.out
    if args.ned:
        overrides["track.ned"] = "true"
    if getattr(args, "method", None):
        overrides["method"] = args.method
    try:
        cfg = load_config(args.config, overrides)
        return _COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
