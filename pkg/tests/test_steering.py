import numpy as np
import pytest

from conftest import small_config
from imgsteer.model import build_model, forward, run
from imgsteer.steering import (
    SteeringConfig,
    SteeringVectorSet,
    compute_steering_vector,
    get_target_activations,
    mid_grey,
    steered_forward,
)


def test_mid_grey_is_seeded_and_clipped():
    a, b = mid_grey(3), mid_grey(3)
    assert np.array_equal(a, b) and not np.array_equal(a, mid_grey(4))
    assert a.min() >= 0 and a.max() <= 1 and a.shape == (64, 64, 3)
    assert abs(a.mean() - 128 / 255) < 0.01


@pytest.mark.parametrize("kw, msg", [
    (dict(layers=()), "at least one"),
    (dict(layers=(1, 1)), "distinct"),
    (dict(layers=(1,), token_positions=0), "token_positions"),
    (dict(layers=(1, 2), layer_weights=(1.0,)), "length"),
    (dict(layers=(1,), layer_weights=(-1.0,)), "positive"),
])
def test_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        SteeringConfig(**kw)


def test_validate_for_depth(small_model):
    with pytest.raises(ValueError, match="outside model depth"):
        SteeringConfig(layers=(5,)).validate_for(small_model)


def test_vector_is_mean_difference(small_model, refusal_split):
    pairs = refusal_split.train[:6]
    x0 = mid_grey(0)
    cfg = SteeringConfig(layers=(0, 2), token_positions=2)
    vs = compute_steering_vector(small_model, pairs, cfg, x0)
    for layer in (0, 2):
        diffs = []
        for ex in pairs:
            _, hp = forward(small_model, x0, small_model.tokenize(f"{ex.prompt} {ex.positive}"))
            _, hn = forward(small_model, x0, small_model.tokenize(f"{ex.prompt} {ex.negative}"))
            diffs.append(hp[layer].data[-2:].mean(0) - hn[layer].data[-2:].mean(0))
        np.testing.assert_allclose(vs.vectors[layer], np.mean(diffs, axis=0), atol=1e-13)
    assert vs.n_pairs == 6


def test_swapping_pairs_negates_vector(planted_small, refusal_split):
    pairs = refusal_split.train[:8]
    cfg = SteeringConfig(layers=(1,))
    v = compute_steering_vector(planted_small, pairs, cfg, mid_grey(0)).vectors[1]
    w = compute_steering_vector(planted_small, [p.swapped() for p in pairs], cfg, mid_grey(0)).vectors[1]
    np.testing.assert_allclose(v, -w, atol=1e-14)


def test_extraction_errors(small_model):
    with pytest.raises(ValueError, match="at least one"):
        compute_steering_vector(small_model, [], SteeringConfig(layers=(0,)), mid_grey())


def test_steered_forward_zero_multiplier_is_plain(small_model, refusal_split):
    vs = SteeringVectorSet({1: np.ones(32)})
    toks = small_model.tokenize(refusal_split.test[0].prompt)
    a = steered_forward(small_model, mid_grey(), toks, vs, 0.0)[0].data
    b = forward(small_model, mid_grey(), toks)[0].data
    np.testing.assert_array_equal(a, b)


def test_steering_touches_only_last_positions(small_model, refusal_split):
    vs = SteeringVectorSet({1: np.linspace(-1, 1, 32)})
    toks = small_model.tokenize(refusal_split.test[0].prompt)
    _, plain = forward(small_model, mid_grey(), toks)
    _, steered = steered_forward(small_model, mid_grey(), toks, vs, 2.0, positions=3)
    diff = steered[1].data - plain[1].data
    np.testing.assert_allclose(diff[-3:], 2.0 * np.linspace(-1, 1, 32)[None].repeat(3, 0), atol=1e-12)
    assert np.abs(diff[:-3]).max() == 0
    assert np.array_equal(steered[0].data, plain[0].data)


def test_targets_shift_and_zero_multiplier(small_model, refusal_split):
    prompts = [ex.prompt for ex in refusal_split.train[:3]] + ["which fruit (A) fig answer"]
    cfg = SteeringConfig(layers=(0, 2), token_positions=2)
    vs = SteeringVectorSet({0: np.ones(32), 2: np.arange(32.0)})
    x0 = mid_grey(1)
    base = get_target_activations(small_model, x0, prompts, vs, 0.0, cfg)
    tg = get_target_activations(small_model, x0, prompts, vs, -1.5, cfg)
    assert base.n_prompts == 4 and len(base.groups) == 2
    assert base.count() == 4 * 2 * 2
    for j, p in enumerate(prompts):
        _, h = forward(small_model, x0, small_model.tokenize(p))
        np.testing.assert_allclose(base.get(j, 2), h[2].data[-2:], atol=1e-13)
        np.testing.assert_allclose(tg.get(j, 0) - base.get(j, 0), -1.5 * np.ones((2, 32)), atol=1e-13)
    with pytest.raises(KeyError):
        base.get(9, 0)


def test_target_errors(small_model):
    cfg = SteeringConfig(layers=(0,))
    vs = SteeringVectorSet({1: np.ones(32)})
    with pytest.raises(ValueError, match="no steering vector"):
        get_target_activations(small_model, mid_grey(), ["tell me"], vs, 1.0, cfg)
    with pytest.raises(ValueError, match="at least one prompt"):
        get_target_activations(small_model, mid_grey(), [], SteeringVectorSet({0: np.ones(32)}), 1.0, cfg)
    with pytest.raises(ValueError, match="exceeds"):
        get_target_activations(small_model, mid_grey(), ["tell"], SteeringVectorSet({0: np.ones(32)}), 1.0,
                               SteeringConfig(layers=(0,), token_positions=3))


def test_planted_recovery_small(planted_small, refusal_split):
    plant = planted_small.plants[0]
    vs = compute_steering_vector(planted_small, refusal_split.train[:64], SteeringConfig(layers=(1,)), mid_grey(0))
    v = vs.vectors[1]
    assert v @ plant.direction / np.linalg.norm(v) > 0.9
