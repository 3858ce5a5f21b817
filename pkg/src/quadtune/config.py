"""Flat key-value experiment configuration.

Config files are line-oriented ``section.key = value`` pairs with ``#``
comments. Every run embeds its fully resolved configuration in its outputs
so results are reproducible from the artifacts alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .dynamics import CrashConfig, NoiseConfig, VehicleParams
from .evaluation import EvalConfig
from .mpc import FixedMpcConfig
from .segmentation import SegmentationConfig
from .trajectory import TrackSpec
from .tuner import TunerConfig


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _to_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _to_list(s: str, conv) -> tuple:
    return tuple(conv(part.strip()) for part in s.split(",") if part.strip())


@dataclass
class ExperimentConfig:
    seed: int = 0
    method: str = "mh"  # mh | random | pso | cmaes | regressor
    out_dir: str = "out"
    jobs: int = 1

    track_kind: str = "circle"          # circle | drop | csv
    track_path: str = ""                # reference CSV (kind=csv)
    track_ned: bool = False
    track: TrackSpec = field(default_factory=TrackSpec)

    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    use_segmentation: bool = True
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    mpc: FixedMpcConfig = field(default_factory=FixedMpcConfig)
    crash: CrashConfig = field(default_factory=CrashConfig)
    pass_radius: float = 1.3
    pass_window: float = 0.0
    v_pen: float = 1.0
    sim_substeps: int = 2
    tuner: TunerConfig = field(default_factory=TunerConfig)

    init_mode: str = "default"          # default | degraded | file | model
    init_degrade_factor: float = 0.01
    init_file: str = ""
    init_model: str = ""

    baseline_budget: int = 0            # 0: use tuner.budget
    baseline_stop_on_target: bool = True
    weight_hi: float = 200.0
    pso_particles: int = 10
    pso_inertia: float = 0.5
    pso_cognitive: float = 1.0
    pso_social: float = 2.0
    cma_sigma0: float = 5.0

    ablate_heights: tuple[float, ...] = (1.0, 30.0)
    ablate_min_durations: tuple[float, ...] = (2.0,)
    ablate_budget: int = 100

    landscape_param_x: str = "seg0.q_pos_xy"
    landscape_param_y: str = "seg0.q_velocity"
    landscape_x: tuple[float, float, int] = (1.0, 100.0, 5)
    landscape_y: tuple[float, float, int] = (1.0, 100.0, 5)

    harvest_dataset: str = "dataset.csv"
    harvest_model: str = ""
    harvest_budget: int = 150

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            vehicle=self.vehicle,
            mpc=self.mpc,
            crash=self.crash,
            pass_radius=self.pass_radius,
            pass_window=self.pass_window,
            v_pen=self.v_pen,
            sim_substeps=self.sim_substeps,
        )


# key -> (target, attribute, converter); targets name sub-config groups
_KEYMAP: dict[str, tuple[str, str, object]] = {
    "seed": ("root", "seed", int),
    "method": ("root", "method", str),
    "out": ("root", "out_dir", str),
    "jobs": ("root", "jobs", int),
    "track.kind": ("root", "track_kind", str),
    "track.path": ("root", "track_path", str),
    "track.ned": ("root", "track_ned", _to_bool),
    "track.radius": ("track", "radius", float),
    "track.n_waypoints": ("track", "n_waypoints", int),
    "track.speed": ("track", "speed", float),
    "track.altitude": ("track", "altitude", float),
    "track.dt": ("track", "dt", float),
    "track.ascent_height": ("track", "ascent_height", float),
    "track.ascent_length": ("track", "ascent_length", float),
    "track.descent_height": ("track", "descent_height", float),
    "track.descent_length": ("track", "descent_length", float),
    "track.accel_max": ("track", "accel_max", float),
    "track.lat_accel_max": ("track", "lat_accel_max", float),
    "segmentation.enabled": ("root", "use_segmentation", _to_bool),
    "segmentation.height_threshold": ("segmentation", "height_threshold", float),
    "segmentation.min_duration": ("segmentation", "min_duration", float),
    "segmentation.stride": ("segmentation", "stride", float),
    "segmentation.steep_slope": ("segmentation", "steep_slope_deg", float),
    "vehicle.mass": ("vehicle", "mass", float),
    "vehicle.gravity": ("vehicle", "gravity", float),
    "vehicle.thrust_max": ("vehicle", "thrust_max", float),
    "vehicle.pitchroll_max": ("vehicle", "pitchroll_max", float),
    "vehicle.yaw_max": ("vehicle", "yaw_max", float),
    "vehicle.rate_tau": ("vehicle", "rate_tau", float),
    "noise.thrust_std": ("noise", "thrust_std", float),
    "noise.rate_std": ("noise", "rate_std", float),
    "mpc.control_freq": ("mpc", "control_freq", float),
    "mpc.horizon_step": ("mpc", "horizon_step", float),
    "mpc.horizon_max": ("mpc", "horizon_max", int),
    "mpc.r_thrust": ("mpc", "r_thrust", float),
    "mpc.r_pitchroll": ("mpc", "r_pitchroll", float),
    "mpc.r_yaw": ("mpc", "r_yaw", float),
    "eval.pass_radius": ("root", "pass_radius", float),
    "eval.pass_window": ("root", "pass_window", float),
    "eval.v_pen": ("root", "v_pen", float),
    "eval.crash_dist": ("crash", "max_pos_error", float),
    "eval.floor_z": ("crash", "floor_z", float),
    "eval.sim_substeps": ("root", "sim_substeps", int),
    "tuner.sigma": ("tuner", "sigma", float),
    "tuner.shrink": ("tuner", "shrink", float),
    "tuner.budget": ("tuner", "budget", int),
    "tuner.target_completion": ("tuner", "target_completion", float),
    "tuner.reeval_count": ("tuner", "reeval_count", int),
    "tuner.reeval_rule": ("tuner", "reeval_rule", str),
    "tuner.reeval_seeds": ("tuner", "reeval_seeds", lambda s: _to_list(s, int)),
    "tuner.horizon_max": ("tuner", "horizon_max", int),
    "init.mode": ("root", "init_mode", str),
    "init.degrade_factor": ("root", "init_degrade_factor", float),
    "init.file": ("root", "init_file", str),
    "init.model": ("root", "init_model", str),
    "baseline.budget": ("root", "baseline_budget", int),
    "baseline.stop_on_target": ("root", "baseline_stop_on_target", _to_bool),
    "baseline.weight_hi": ("root", "weight_hi", float),
    "pso.particles": ("root", "pso_particles", int),
    "pso.inertia": ("root", "pso_inertia", float),
    "pso.cognitive": ("root", "pso_cognitive", float),
    "pso.social": ("root", "pso_social", float),
    "cmaes.sigma0": ("root", "cma_sigma0", float),
    "ablate.heights": ("root", "ablate_heights", lambda s: _to_list(s, float)),
    "ablate.min_durations": ("root", "ablate_min_durations", lambda s: _to_list(s, float)),
    "ablate.budget": ("root", "ablate_budget", int),
    "landscape.param_x": ("root", "landscape_param_x", str),
    "landscape.param_y": ("root", "landscape_param_y", str),
    "landscape.x": ("root", "landscape_x", lambda s: _grid_spec(s)),
    "landscape.y": ("root", "landscape_y", lambda s: _grid_spec(s)),
    "harvest.dataset": ("root", "harvest_dataset", str),
    "harvest.model": ("root", "harvest_model", str),
    "harvest.budget": ("root", "harvest_budget", int),
}


def _grid_spec(s: str) -> tuple[float, float, int]:
    parts = [p.strip() for p in s.split(":")]
    if len(parts) != 3:
        raise ConfigError(f"grid spec must be lo:hi:n, got {s!r}")
    return (float(parts[0]), float(parts[1]), int(parts[2]))


def load_config(path: str | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from a file plus key=value overrides."""
    kv: dict[str, str] = {}
    if path:
        with open(path) as f:
            kv.update(parse_config_text(f.read()))
    if overrides:
        kv.update(overrides)
    groups: dict[str, dict] = {
        "root": {}, "track": {}, "segmentation": {}, "vehicle": {},
        "noise": {}, "mpc": {}, "crash": {}, "tuner": {},
    }
    for key, raw in kv.items():
        if key not in _KEYMAP:
            raise ConfigError(f"unknown config key {key!r}")
        target, attr, conv = _KEYMAP[key]
        try:
            groups[target][attr] = conv(raw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from None
    try:
        track = TrackSpec(kind=groups["root"].get("track_kind", "circle"), **groups["track"]) \
            if groups["root"].get("track_kind", "circle") != "csv" \
            else TrackSpec(kind="custom", **groups["track"])
        noise = NoiseConfig(**groups["noise"]) if groups["noise"] else NoiseConfig()
        vehicle = VehicleParams(noise=noise, **groups["vehicle"])
        cfg = ExperimentConfig(
            track=track,
            segmentation=SegmentationConfig(**groups["segmentation"]),
            vehicle=vehicle,
            mpc=FixedMpcConfig(**groups["mpc"]),
            crash=CrashConfig(**groups["crash"]),
            tuner=TunerConfig(**groups["tuner"]),
            **groups["root"],
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if cfg.method not in ("mh", "random", "pso", "cmaes", "regressor"):
        raise ConfigError(f"unknown method {cfg.method!r}")
    if cfg.init_mode not in ("default", "degraded", "file", "model"):
        raise ConfigError(f"unknown init.mode {cfg.init_mode!r}")
    return cfg


def resolved_dict(cfg: ExperimentConfig) -> dict[str, object]:
    """Flat, fully resolved key -> value mapping for embedding in outputs."""
    out: dict[str, object] = {}
    lookup = {
        "root": cfg, "track": cfg.track, "segmentation": cfg.segmentation,
        "vehicle": cfg.vehicle, "noise": cfg.vehicle.noise, "mpc": cfg.mpc,
        "crash": cfg.crash, "tuner": cfg.tuner,
    }
    for key, (target, attr, _) in _KEYMAP.items():
        val = getattr(lookup[target], attr)
        if isinstance(val, tuple):
            val = list(val)
        out[key] = val
    return out
