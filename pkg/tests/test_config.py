import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from imgsteer import config as C
from imgsteer.optim import OptimizerParams
from imgsteer.preprocess import CLIP_LIKE, PreprocessSpec
from imgsteer.steering import SteeringConfig

TOML = """
seed = 3
out = "runs/x"

[corpus]
behavior = "sycophancy"
train_count = 20

[steering]
layers = [1]

[optimizer]
mode = "universal"
multiplier = -1.5

[optimizer.params]
iterations = 10
noise_sigma = 0.0

[eval]
methods = ["none", "random"]

[[models]]
name = "A"
seed = 1
preprocess = "clip"

[models.plant]
layer = 1
coupling = 3.0

[[models]]
name = "B"
seed = 2
lm_layers = 3
preprocess = { input_height = 32, input_width = 32 }

[models.steering]
layers = [0, 2]
token_positions = 2
"""


def test_parse_fields():
    cfg = C.loads(TOML)
    a, b = cfg.models
    assert cfg.seed == 3 and cfg.corpus.behavior == "sycophancy" and cfg.corpus.train_count == 20
    assert a.preprocess == CLIP_LIKE and a.plant == C.PlantSpec(layer=1, coupling=3.0)
    assert b.preprocess == PreprocessSpec(32, 32) and b.lm_layers == 3
    assert cfg.steering_for(a) == SteeringConfig(layers=(1,))
    assert cfg.steering_for(b) == SteeringConfig(layers=(0, 2), token_positions=2)
    assert cfg.optimizer.params == OptimizerParams(iterations=10, noise_sigma=0.0)
    assert cfg.eval.methods == ("none", "random")


def test_roundtrip_identity():
    cfg = C.loads(TOML)
    text = C.dumps(cfg)
    again = C.loads(text)
    assert again == cfg
    assert C.dumps(again) == text


def test_save_load(tmp_path):
    cfg = C.loads(TOML)
    C.save(cfg, tmp_path / "c.toml")
    assert C.load(tmp_path / "c.toml") == cfg


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), mult=st.floats(-5, 5, allow_nan=False),
       layers=st.lists(st.integers(0, 5), min_size=1, max_size=3, unique=True),
       iters=st.integers(1, 5000), mix=st.floats(0, 1))
def test_roundtrip_property(seed, mult, layers, iters, mix):
    cfg = C.ExperimentConfig(
        models=(C.ModelSpec("m", seed, family_seed=7, family_mix=mix),),
        steering=SteeringConfig(layers=tuple(layers)),
        optimizer=C.OptimSpec(multiplier=mult, params=OptimizerParams(iterations=iters)),
        seed=seed)
    assert C.loads(C.dumps(cfg)) == cfg


def test_overrides():
    cfg = C.loads(TOML).with_overrides(seed=9, out="elsewhere", mode="pgd")
    assert (cfg.seed, cfg.out, cfg.optimizer.mode) == (9, "elsewhere", "pgd")
    assert cfg.optimizer.multiplier == -1.5


@pytest.mark.parametrize("edit, msg", [
    (lambda t: t.replace('name = "B"', 'name = "A"'), "duplicate model names"),
    (lambda t: t.replace('"random"]', '"magic"]'), "unknown eval methods"),
    (lambda t: t.replace('mode = "universal"', 'mode = "adam"'), "mode"),
    (lambda t: t.replace('behavior = "sycophancy"', 'behavior = "joy"'), "unknown behavior"),
    (lambda t: t.replace('preprocess = "clip"', 'preprocess = "vit"'), "preset"),
    (lambda t: t.replace("lm_layers = 3", "lm_layrs = 3"), "unknown keys"),
    (lambda t: t.replace("iterations = 10", "iterations = 0"), "iterations"),
    (lambda t: t + "\n[oops", "invalid TOML"),
    (lambda t: t.split("[[models]]")[0], "at least one"),
])
def test_errors(edit, msg):
    with pytest.raises(C.ConfigError, match=msg):
        C.loads(edit(TOML))


def test_build_applies_plant():
    spec = dataclasses.replace(C.loads(TOML).models[0], lm_layers=3, hidden_dim=32, patch_size=14)
    m = spec.build("refusal")
    assert len(m.plants) == 1 and m.plants[0].layer == 1 and m.plants[0].coupling == 3.0


def test_shipped_demo_config_parses():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "demo.toml"
    cfg = C.load(path)
    assert len(cfg.models) == 2 and cfg.optimizer.mode == "universal"
    assert C.loads(C.dumps(cfg)) == cfg
