"""Experiment configuration: one JSON document, loaded strictly into dataclasses.

Unknown keys, missing required fields and wrongly typed values all raise
ConfigError with the dotted path of the offending field.
"""
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from data_pipeline import BucketGrid, CropConfig
from diffusion_forcing import DEFAULT_TIMESTEPS, RolloutConfig, ToyVideoSpec
from errors import ConfigError, DForceError
from flow_match import ModelConfig, TrainConfig
from preference_opt import DPOConfig, RewardTrainConfig

EXPERIMENT_KINDS = ("gaussian-toy", "blob", "bounce")
STAGES = ("train", "evaluate", "reward", "dpo")

# Toy dynamics used by each experiment kind.
KIND_DYNAMICS = {"gaussian-toy": "linear-gaussian", "blob": "blob", "bounce": "bounce"}


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    out_dir: str = "runs/default"
    timesteps: int = DEFAULT_TIMESTEPS
    dataset_size: int = 512
    eval_seeds: int = 4
    stages: tuple = ("train", "evaluate")
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: ToyVideoSpec = None
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    reward: RewardTrainConfig = field(default_factory=RewardTrainConfig)
    dpo: DPOConfig = field(default_factory=DPOConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    buckets: BucketGrid = field(default_factory=BucketGrid)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError("kind", f"must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        self.stages = tuple(self.stages)
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ConfigError("stages", f"unknown stages {unknown}; expected a subset of {STAGES}")
        if self.data is None:
            self.data = ToyVideoSpec(kind=KIND_DYNAMICS[self.kind], dim=self.model.dim,
                                     frames=self.model.max_frames)
        if self.data.kind != KIND_DYNAMICS[self.kind]:
            raise ConfigError("data.kind", f"{self.kind} experiments use {KIND_DYNAMICS[self.kind]!r} data")
        if self.data.dim != self.model.dim:
            raise ConfigError("model.dim", f"{self.model.dim} does not match data.dim {self.data.dim}")
        if self.data.frames > self.model.max_frames:
            raise ConfigError("data.frames", f"exceeds model.max_frames {self.model.max_frames}")
        if self.rollout.window > self.model.max_frames:
            raise ConfigError("rollout", f"window {self.rollout.window} exceeds model.max_frames")
        if self.dpo.n_prompts > self.model.n_prompts:
            raise ConfigError("dpo.n_prompts", f"exceeds model.n_prompts {self.model.n_prompts}")
        if self.timesteps < 2:
            raise ConfigError("timesteps", "must be >= 2")
        if self.dataset_size < 1 or self.eval_seeds < 1:
            raise ConfigError("dataset_size", "dataset_size and eval_seeds must be >= 1")


# ------------------------------------------------------------
# Strict (de)serialisation
# ------------------------------------------------------------

def _coerce(value, ftype, path):
    if dataclasses.is_dataclass(ftype):
        return from_dict(ftype, value, path)
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if ftype is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def from_dict(cls, data, path=""):
    """Build dataclass cls from a plain dict, rejecting anything it does not declare."""
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    prefix = f"{path}." if path else ""
    for key in data:
        if key not in fields:
            raise ConfigError(prefix + key, "unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(prefix + name, "required field is missing")
            continue
        if data[name] is None:
            continue
        kwargs[name] = _coerce(data[name], f.type, prefix + name)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except DForceError as exc:
        raise ConfigError(path or "<root>", str(exc)) from exc


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def dumps(cfg):
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return from_dict(ExperimentConfig, data)


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"{path} does not exist")
    return loads(path.read_text(encoding="utf-8"))


def with_overrides(cfg, seed=None, out_dir=None):
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if out_dir is not None:
        changes["out_dir"] = str(out_dir)
    return dataclasses.replace(cfg, **changes) if changes else cfg
