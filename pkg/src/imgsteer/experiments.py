"""Programmatic pipeline shared by the experiment scripts and the acceptance suite.

The CLI writes files between stages; these helpers keep everything in memory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, ModelSpec
from .corpus import CorpusSplit, generate_behavior_corpus
from .evaluation import EvalMethod, TransferResult, bas, transfer_delta
from .model import ToyVLM
from .optim import Member, OptimResult, optimize_pgd, optimize_universal
from .steering import SteeringVectorSet, compute_steering_vector, get_target_activations, mid_grey


@dataclass
class Prepared:
    config: ExperimentConfig
    split: CorpusSplit
    models: list[ToyVLM]
    vectors: list[SteeringVectorSet]
    members: list[Member]
    x0: np.ndarray

    def index(self, name: str) -> int:
        return [m.name for m in self.config.models].index(name)


def prepare(cfg: ExperimentConfig, base_dir: Path | None = None, split: CorpusSplit | None = None) -> Prepared:
    """Build models, extract vectors and compute optimisation targets."""
    c = cfg.corpus
    if split is None:
        split = generate_behavior_corpus(c.behavior, c.train_count, c.test_count, seed=c.seed)
    x0 = mid_grey(cfg.seed)
    prompts = [ex.prompt for ex in split.train[: cfg.optimizer.n_prompts]]
    models, vectors, members = [], [], []
    for spec in cfg.models:
        model = spec.build(split.behavior, base_dir)
        scfg = cfg.steering_for(spec)
        vs = compute_steering_vector(model, split.train, scfg, x0)
        tg = get_target_activations(model, x0, prompts, vs, cfg.optimizer.multiplier, scfg)
        models.append(model)
        vectors.append(vs)
        members.append(Member(model, tg, scfg, spec.name))
    return Prepared(cfg, split, models, vectors, members, x0)


def run_universal(prep: Prepared, names: Sequence[str] | None = None, **overrides) -> OptimResult:
    """Universal optimisation over the named ensemble members (all by default)."""
    members = prep.members if names is None else [prep.members[prep.index(n)] for n in names]
    params = dataclasses.replace(prep.config.optimizer.params, seed=prep.config.seed, **overrides)
    return optimize_universal(prep.x0, members, params)


def run_pgd(prep: Prepared, name: str, **overrides) -> OptimResult:
    params = dataclasses.replace(prep.config.optimizer.pgd, seed=prep.config.seed, **overrides)
    return optimize_pgd(prep.x0, prep.members[prep.index(name)], params)


def steering_bas(prep: Prepared, name: str, multiplier: float) -> float:
    i = prep.index(name)
    positions = prep.config.steering_for(prep.config.models[i]).token_positions
    method = EvalMethod.steering(prep.vectors[i], multiplier, positions)
    return bas(prep.models[i], prep.split.test, method, prep.x0)


def image_bas(prep: Prepared, name: str, image: np.ndarray | None) -> float:
    i = prep.index(name)
    method = EvalMethod.none() if image is None else EvalMethod.with_image(image)
    return bas(prep.models[i], prep.split.test, method, prep.x0)


def held_out_spec(spec: ModelSpec, seed: int) -> ModelSpec:
    """Same architecture, family and plant as ``spec`` with fresh private weights."""
    return dataclasses.replace(spec, name=f"{spec.name}_h{seed}", seed=seed, checkpoint=None)


def held_out_models(cfg: ExperimentConfig, seeds: Sequence[int]) -> list[ToyVLM]:
    """One held-out model per seed, cycling through the ensemble architectures."""
    specs = [held_out_spec(cfg.models[i % len(cfg.models)], s) for i, s in enumerate(seeds)]
    return [s.build(cfg.corpus.behavior) for s in specs]


def transfer_table(images: dict[str, np.ndarray], models: Sequence[ToyVLM], split: CorpusSplit,
                   random_seed: int = 0) -> dict[str, list[TransferResult]]:
    return {label: [transfer_delta(img, m, split.test, random_seed) for m in models]
            for label, img in images.items()}
