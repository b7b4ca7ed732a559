"""Contrastive steering vectors, steered forward passes and activation targets."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import BehaviorExample
from .model import Steer, ToyVLM, forward, run
from .preprocess import OPT_SIZE
from .tensor import no_grad


@dataclass(frozen=True)
class SteeringConfig:
    layers: tuple[int, ...]
    multiplier_pos: float = 1.0
    multiplier_neg: float = -1.0
    token_positions: int = 1
    layer_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        if not self.layers:
            raise ValueError("at least one steering layer is required")
        if len(set(self.layers)) != len(self.layers):
            raise ValueError(f"steering layers must be distinct, got {self.layers}")
        if self.token_positions < 1:
            raise ValueError("token_positions must be >= 1")
        weights = self.layer_weights
        if weights is None:
            weights = (1.0,) * len(self.layers)
        weights = tuple(float(w) for w in weights)
        if len(weights) != len(self.layers):
            raise ValueError("layer_weights must match layers in length")
        if any(w <= 0 for w in weights):
            raise ValueError("layer_weights must be positive")
        object.__setattr__(self, "layer_weights", weights)

    def validate_for(self, model: ToyVLM) -> None:
        depth = model.config.lm_layers
        bad = [l for l in self.layers if not 0 <= l < depth]
        if bad:
            raise ValueError(f"steering layers {bad} outside model depth {depth}")


@dataclass
class SteeringVectorSet:
    vectors: dict[int, np.ndarray]
    n_pairs: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def layers(self) -> list[int]:
        return sorted(self.vectors)

    def steers(self, multiplier: float, last_n: int) -> dict[int, Steer]:
        return {l: Steer(v, multiplier, last_n) for l, v in self.vectors.items()}


def mid_grey(seed: int = 0, size: int = OPT_SIZE, noise: float = 0.1) -> np.ndarray:
    """Mid-grey (128/255) baseline image with seeded Gaussian noise, clipped to [0, 1]."""
    rng = np.random.default_rng([seed, 128])
    img = 128.0 / 255.0 + noise * rng.standard_normal((size, size, 3))
    return np.clip(img, 0.0, 1.0)


def _group_by_length(token_lists: Sequence[Sequence[int]]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = defaultdict(list)
    for i, toks in enumerate(token_lists):
        groups[len(toks)].append(i)
    return dict(groups)


def _last_n_mean(model, image, token_lists, layers, n, steer=None) -> dict[int, np.ndarray]:
    """Per layer: (N, D) mean hidden state over the last ``n`` positions."""
    out = {l: np.zeros((len(token_lists), model.config.hidden_dim)) for l in layers}
    with no_grad():
        for length, idx in _group_by_length(token_lists).items():
            if n > length:
                raise ValueError(f"token_positions {n} exceeds sequence length {length}")
            batch = np.array([token_lists[i] for i in idx])
            fw = run(model, image, batch, steer=steer, upto=max(layers))
            for l in layers:
                out[l][idx] = fw.hidden[l].data[0, :, -n:, :].mean(axis=1)
    return out


def compute_steering_vector(
    model: ToyVLM,
    pairs: Sequence[BehaviorExample],
    config: SteeringConfig,
    baseline: np.ndarray,
) -> SteeringVectorSet:
    """Mean over pairs of hidden(prompt + positive) - hidden(prompt + negative).

    Hidden states are averaged over the last ``config.token_positions``
    positions of the answer-appended sequence.
    """
    if not pairs:
        raise ValueError("compute_steering_vector needs at least one contrastive pair")
    config.validate_for(model)
    pos = [model.tokenize(f"{ex.prompt} {ex.positive}") for ex in pairs]
    neg = [model.tokenize(f"{ex.prompt} {ex.negative}") for ex in pairs]
    hp = _last_n_mean(model, baseline, pos, config.layers, config.token_positions)
    hn = _last_n_mean(model, baseline, neg, config.layers, config.token_positions)
    vectors = {l: (hp[l] - hn[l]).mean(axis=0) for l in config.layers}
    meta = {"token_positions": config.token_positions,
            "multiplier_pos": config.multiplier_pos,
            "multiplier_neg": config.multiplier_neg}
    return SteeringVectorSet(vectors, n_pairs=len(pairs), meta=meta)


def steered_forward(
    model: ToyVLM,
    image,
    tokens,
    vectors: SteeringVectorSet,
    multiplier: float,
    positions: int = 1,
):
    """Forward pass with ``multiplier * v_l`` added at the last ``positions`` text tokens."""
    return forward(model, image, tokens, steer=vectors.steers(multiplier, positions))


@dataclass
class TargetGroup:
    tokens: np.ndarray  # (N, T)
    prompt_index: np.ndarray  # (N,) positions in the original prompt list
    targets: np.ndarray  # (N, n_layers, last_n, D)


@dataclass
class TargetActivations:
    """Desired hidden states h_l(x0, p_j) + alpha * v_l at the last-n positions."""

    layers: tuple[int, ...]
    last_n: int
    multiplier: float
    groups: list[TargetGroup]

    @property
    def n_prompts(self) -> int:
        return sum(len(g.prompt_index) for g in self.groups)

    def get(self, prompt: int, layer: int) -> np.ndarray:
        li = self.layers.index(layer)
        for g in self.groups:
            hit = np.flatnonzero(g.prompt_index == prompt)
            if hit.size:
                return g.targets[hit[0], li]
        raise KeyError(prompt)

    def count(self) -> int:
        return sum(g.targets.shape[0] * g.targets.shape[1] * g.targets.shape[2] for g in self.groups)


def get_target_activations(
    model: ToyVLM,
    x0: np.ndarray,
    prompts: Sequence[str],
    vectors: SteeringVectorSet,
    multiplier: float,
    config: SteeringConfig,
) -> TargetActivations:
    if not prompts:
        raise ValueError("at least one prompt is required")
    config.validate_for(model)
    missing = [l for l in config.layers if l not in vectors.vectors]
    if missing:
        raise ValueError(f"no steering vector for layers {missing}")
    n = config.token_positions
    token_lists = [model.tokenize(p) for p in prompts]
    groups = []
    with no_grad():
        for length, idx in _group_by_length(token_lists).items():
            if n > length:
                raise ValueError(f"token_positions {n} exceeds prompt length {length}")
            batch = np.array([token_lists[i] for i in idx])
            fw = run(model, x0, batch, upto=max(config.layers))
            tgt = np.stack([fw.hidden[l].data[0, :, -n:, :] for l in config.layers], axis=1)
            shift = np.stack([multiplier * vectors.vectors[l] for l in config.layers])
            tgt = tgt + shift[None, :, None, :]
            groups.append(TargetGroup(batch, np.array(idx), tgt))
    return TargetActivations(config.layers, n, float(multiplier), groups)
