"""Experiment configuration: dataclasses with a TOML round trip.

A config file has top-level ``seed`` and ``out`` keys plus ``[corpus]``,
``[steering]``, ``[optimizer]``, ``[eval]`` tables and one ``[[models]]``
entry per model.  A model may carry its own ``[models.plant]`` and
``[models.steering]`` tables.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .corpus import BEHAVIORS
from .model import INIT_SCALE, ModelConfig, ToyVLM, build_model, plant_behavior, random_direction
from .optim import OptimizerParams, PGDParams
from .preprocess import CLIP_LIKE, SIGLIP_LIKE, PreprocessSpec
from .steering import SteeringConfig

PRESETS = {"clip": CLIP_LIKE, "siglip": SIGLIP_LIKE, "plain": PreprocessSpec()}
MODES = ("universal", "pgd")
EVAL_METHODS = ("none", "system_pos", "system_neg", "steer_pos", "steer_neg", "image", "random")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PlantSpec:
    layer: int
    direction_seed: int = 99
    coupling: float = 2.0
    write_scale: float = 0.01


@dataclass(frozen=True)
class ModelSpec:
    name: str
    seed: int
    patch_size: int = 16
    vision_layers: int = 2
    lm_layers: int = 6
    hidden_dim: int = 64
    visual_token_count: int = 16
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    family_seed: int | None = None
    family_mix: float = 0.0
    knowledge_fraction: float = 0.4
    knowledge_strength: float = 3.0
    init_scale: float = INIT_SCALE
    checkpoint: str | None = None
    plant: PlantSpec | None = None
    steering: SteeringConfig | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            name=self.name, seed=self.seed, patch_size=self.patch_size,
            vision_layers=self.vision_layers, lm_layers=self.lm_layers,
            hidden_dim=self.hidden_dim, visual_token_count=self.visual_token_count,
            preprocess=self.preprocess, family_seed=self.family_seed,
            family_mix=self.family_mix, knowledge_fraction=self.knowledge_fraction,
            knowledge_strength=self.knowledge_strength, init_scale=self.init_scale,
        )

    def build(self, behavior: str, base_dir: Path | None = None) -> ToyVLM:
        model = build_model(self.model_config())
        if self.checkpoint:
            from .artifacts import load_checkpoint

            path = Path(self.checkpoint)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            model = load_checkpoint(path, model)
        if self.plant is not None:
            p = self.plant
            d = random_direction(self.hidden_dim, p.direction_seed)
            model = plant_behavior(model, p.layer, d, p.coupling, behavior, p.write_scale)
        return model


@dataclass(frozen=True)
class CorpusSpec:
    behavior: str = "refusal"
    train_count: int | None = None
    test_count: int | None = None
    seed: int = 0
    path: str | None = None  # JSONL; generated when absent

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ConfigError(f"unknown behavior {self.behavior!r}; choose from {sorted(BEHAVIORS)}")


@dataclass(frozen=True)
class OptimSpec:
    mode: str = "universal"
    multiplier: float = -1.0
    n_prompts: int = 5
    params: OptimizerParams = field(default_factory=OptimizerParams)
    pgd: PGDParams = field(default_factory=PGDParams)
    checkpoint_every: int = 500
    converge_ratio: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"optimizer mode must be one of {MODES}, got {self.mode!r}")
        if self.n_prompts < 1:
            raise ConfigError("n_prompts must be >= 1")


@dataclass(frozen=True)
class EvalSpec:
    methods: tuple[str, ...] = EVAL_METHODS
    multiplier: float = 1.0
    random_seed: int = 0
    unrelated_tasks: int = 0
    task_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    models: tuple[ModelSpec, ...]
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    steering: SteeringConfig = field(default_factory=lambda: SteeringConfig(layers=(3,)))
    optimizer: OptimSpec = field(default_factory=OptimSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    seed: int = 0
    out: str = "runs/out"

    def __post_init__(self):
        if not self.models:
            raise ConfigError("at least one [[models]] entry is required")
        names = [m.name for m in self.models]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ConfigError(f"duplicate model names: {dup}")
        bad = [m for m in self.eval.methods if m not in EVAL_METHODS]
        if bad:
            raise ConfigError(f"unknown eval methods {bad}; choose from {EVAL_METHODS}")

    def steering_for(self, spec: ModelSpec) -> SteeringConfig:
        return spec.steering or self.steering

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       mode: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if out is not None:
            cfg = dataclasses.replace(cfg, out=out)
        if mode is not None:
            cfg = dataclasses.replace(cfg, optimizer=dataclasses.replace(cfg.optimizer, mode=mode))
        return cfg


# ---------------------------------------------------------------------------
# dict <-> dataclass


def _pick(cls, data: dict, where: str) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys {unknown}")
    return dict(data)


def _tuple(v):
    return tuple(v) if isinstance(v, list) else v


def _preprocess(v, where: str) -> PreprocessSpec:
    if isinstance(v, str):
        if v not in PRESETS:
            raise ConfigError(f"[{where}] unknown preprocess preset {v!r}; choose from {sorted(PRESETS)}")
        return PRESETS[v]
    d = _pick(PreprocessSpec, v, where + ".preprocess")
    return PreprocessSpec(**{k: _tuple(x) for k, x in d.items()})


def _steering(d: dict, where: str) -> SteeringConfig:
    d = _pick(SteeringConfig, d, where)
    return SteeringConfig(**{k: _tuple(x) for k, x in d.items()})


def _model(d: dict, i: int) -> ModelSpec:
    where = f"models[{i}]"
    d = _pick(ModelSpec, d, where)
    if "preprocess" in d:
        d["preprocess"] = _preprocess(d["preprocess"], where)
    if "plant" in d:
        d["plant"] = PlantSpec(**_pick(PlantSpec, d["plant"], where + ".plant"))
    if "steering" in d:
        d["steering"] = _steering(d["steering"], where + ".steering")
    try:
        return ModelSpec(**d)
    except TypeError as e:
        raise ConfigError(f"[{where}] {e}") from None


def from_dict(data: dict) -> ExperimentConfig:
    data = _pick(ExperimentConfig, data, "top level")
    try:
        models = tuple(_model(m, i) for i, m in enumerate(data.pop("models", [])))
        kw: dict[str, Any] = {"models": models}
        if "corpus" in data:
            kw["corpus"] = CorpusSpec(**_pick(CorpusSpec, data.pop("corpus"), "corpus"))
        if "steering" in data:
            kw["steering"] = _steering(data.pop("steering"), "steering")
        if "optimizer" in data:
            o = _pick(OptimSpec, data.pop("optimizer"), "optimizer")
            if "params" in o:
                o["params"] = OptimizerParams(**_pick(OptimizerParams, o["params"], "optimizer.params"))
            if "pgd" in o:
                o["pgd"] = PGDParams(**_pick(PGDParams, o["pgd"], "optimizer.pgd"))
            kw["optimizer"] = OptimSpec(**o)
        if "eval" in data:
            e = _pick(EvalSpec, data.pop("eval"), "eval")
            kw["eval"] = EvalSpec(**{k: _tuple(v) for k, v in e.items()})
        kw.update(data)
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def _plain(obj):
    """Dataclass tree -> TOML-ready dict (None fields dropped, tuples as lists)."""
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if getattr(obj, f.name) is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}") from None
    return from_dict(data)


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def save(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
