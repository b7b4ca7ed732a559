"""Acceptance criteria 1-11, run against the shipped configs/demo.toml.

Each test prints one line ``[criterion N] PASS|FAIL: ...``.  The optimisation
runs are shared module fixtures; the whole module takes several minutes on
one core.  Run directly with ``python3 tests/test_acceptance.py``.
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from imgsteer import config as cfgmod
from imgsteer import experiments as E
from imgsteer.corpus import BEHAVIORS, BehaviorExample, generate_unrelated_tasks
from imgsteer.evaluation import EvalMethod, bas, bas_detail, random_image, system_prompt_eval, unrelated_task_eval
from imgsteer.model import random_direction
from imgsteer.optim import OptimizerParams, ScheduleState, activation_loss, adaptive_step, optimize_universal
from imgsteer.steering import SteeringConfig, compute_steering_vector
from imgsteer.tensor import Tensor, grad_check, reshape
from imgsteer.transforms import bilinear_resize, dct2d, idct2d

DEMO = Path(__file__).resolve().parents[1] / "configs" / "demo.toml"
HELD_OUT_SEEDS = (101, 102, 103, 104, 105, 106)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def cfg():
    return cfgmod.load(DEMO)


@pytest.fixture(scope="module")
def prep(cfg):
    return E.prepare(cfg)


@pytest.fixture(scope="module")
def universal(prep):
    t = time.perf_counter()
    res = E.run_universal(prep)
    return res, time.perf_counter() - t


@pytest.fixture(scope="module")
def single(prep):
    """K=1 image: the same optimiser on ensemble member A alone."""
    return E.run_universal(prep, names=["A"])


@pytest.fixture(scope="module")
def pgd(prep):
    return {name: E.run_pgd(prep, name) for name in ("A", "B")}


# ---------------------------------------------------------------------------


def test_c01_gradient_fidelity(capsys, prep):
    from test_tensor import CASES

    t = time.perf_counter()
    worst = {}
    for name, (fn, shape) in sorted(CASES.items()):
        point = np.random.default_rng(len(name)).standard_normal(shape)
        worst[name] = grad_check(fn, point, step=1e-5, n_coords=20, seed=1)
    mem = prep.members[0]
    pipeline = lambda t_: activation_loss(mem.model, mem.targets, mem.config, reshape(t_, (1, 64, 64, 3)))
    x = np.random.default_rng(5).uniform(0.2, 0.8, (64, 64, 3))
    worst["pipeline"] = grad_check(pipeline, x, step=1e-5, n_coords=20, seed=1)
    elapsed = time.perf_counter() - t
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    report(capsys, 1, not bad and elapsed < 60,
           f"{len(worst)} checks, max rel err {max(worst.values()):.2e}, {elapsed:.1f}s, failing {sorted(bad)}")


def test_c02_transforms(capsys):
    rng = np.random.default_rng(2)
    x = rng.random((64, 64, 3))
    spec = dct2d(x).data
    roundtrip = np.abs(idct2d(spec).data - x).max()
    energy = abs((x ** 2).sum() - (spec ** 2).sum())
    same = np.abs(bilinear_resize(x, (64, 64)).data - x).max()
    y = rng.random((64, 64, 3))
    lin = np.abs(bilinear_resize(2.5 * x - y, (56, 56)).data
                 - (2.5 * bilinear_resize(x, (56, 56)).data - bilinear_resize(y, (56, 56)).data)).max()
    ok = roundtrip < 1e-9 and energy < 1e-9 and same < 1e-12 and lin < 1e-9
    report(capsys, 2, ok, f"roundtrip {roundtrip:.1e}, energy {energy:.1e}, identity {same:.1e}, linearity {lin:.1e}")


def test_c03_dual_momentum_mechanics(capsys, prep):
    p = OptimizerParams(iterations=5, spectral_samples=2, noise_sigma=4.0, mask_rho=0.2,
                        step_outer=1 / 255, momentum=0.9, seed=3)
    res = optimize_universal(prep.x0, prep.members, p, record=True)
    mu = p.momentum
    normed = [n for rec in res.records for n in rec["normed"]]
    inner = [g for rec in res.records for g in rec["inner"]]
    inner_err = max(np.abs(inner[m] - sum(mu ** (m - j) * normed[j] for j in range(m + 1))).max()
                    for m in range(len(normed)))
    outer_err, step_ok, range_ok = 0.0, True, True
    for t, rec in enumerate(res.records):
        closed = sum(mu ** (t - s) * r["delta"] / np.abs(r["delta"]).sum() for s, r in enumerate(res.records[: t + 1]))
        outer_err = max(outer_err, np.abs(rec["outer"] - closed).max())
        mags = np.abs(rec["pre_clip"] - rec["x_orig"])
        step_ok &= bool(np.all((mags < 1e-15) | (np.abs(mags - p.step_outer) < 1e-15)))
        range_ok &= bool(rec["post_clip"].min() >= 0 and rec["post_clip"].max() <= 1)
    again = optimize_universal(prep.x0, prep.members, p)
    det = [r.ensemble for r in again.trace] == [r.ensemble for r in res.trace] and np.array_equal(again.image, res.image)
    ok = inner_err < 1e-9 and outer_err < 1e-9 and step_ok and range_ok and det
    report(capsys, 3, ok, f"inner {inner_err:.1e}, outer {outer_err:.1e}, steps exact {step_ok}, "
                          f"in [0,1] {range_ok}, deterministic {det}")


def test_c04_vector_recovery(capsys, cfg, prep):
    t = time.perf_counter()
    spec = dataclasses.replace(cfg.models[0], plant=dataclasses.replace(cfg.models[0].plant, coupling=2.0))
    model = spec.build(cfg.corpus.behavior)
    layer = spec.plant.layer
    vs = compute_steering_vector(model, prep.split.train[:64], SteeringConfig(layers=(layer,)), prep.x0)
    v = vs.vectors[layer]
    d = random_direction(spec.hidden_dim, spec.plant.direction_seed)
    cos = float(v @ d / np.linalg.norm(v))
    elapsed = time.perf_counter() - t
    report(capsys, 4, cos > 0.9 and elapsed < 60, f"cosine {cos:.4f} with 64 pairs, coupling 2.0, {elapsed:.1f}s")


def test_c05_steering_ordering(capsys, cfg, prep):
    m = cfg.eval.multiplier
    parts, ok = [], True
    for name in ("A", "B"):
        plus, none, minus = E.steering_bas(prep, name, m), E.image_bas(prep, name, None), E.steering_bas(prep, name, -m)
        ok &= plus - none >= 0.05 and none - minus >= 0.05
        parts.append(f"{name}: {plus:.3f} > {none:.3f} > {minus:.3f}")
    report(capsys, 5, ok, f"multiplier {m}; " + "; ".join(parts))


def test_c06_pgd_parity(capsys, cfg, prep, pgd):
    parts, ok = [], True
    for name, res in pgd.items():
        ratio = min(r.ensemble for r in res.trace) / res.initial_loss
        base = E.image_bas(prep, name, None)
        vec_shift = E.steering_bas(prep, name, cfg.optimizer.multiplier) - base
        img_shift = E.image_bas(prep, name, res.image) - base
        good = (len(res.trace) <= 2000 and ratio <= 0.1 and np.sign(img_shift) == np.sign(vec_shift)
                and abs(img_shift) >= 0.5 * abs(vec_shift))
        ok &= bool(good)
        parts.append(f"{name}: loss x{ratio:.3f}, image shift {img_shift:+.3f} vs vector {vec_shift:+.3f}")
    report(capsys, 6, ok, "; ".join(parts))


def test_c07_universal(capsys, cfg, prep, universal):
    res, elapsed = universal
    ratio = res.final_loss / res.initial_loss
    shifts = {n: E.image_bas(prep, n, res.image) - E.image_bas(prep, n, None) for n in ("A", "B")}
    want = np.sign(cfg.optimizer.multiplier)
    ok = (ratio < 0.1 and len(res.trace) <= 5000 and elapsed < 1800
          and all(np.sign(s) == want and abs(s) >= 0.05 for s in shifts.values()))
    report(capsys, 7, ok, f"ensemble loss x{ratio:.4f} after {len(res.trace)} it, {elapsed:.0f}s; "
                          + ", ".join(f"{n} shift {s:+.3f}" for n, s in shifts.items()))


def test_c08_transfer(capsys, cfg, prep, universal, single):
    models = E.held_out_models(cfg, HELD_OUT_SEEDS)
    table = E.transfer_table({"K2": universal[0].image, "K1": single.image}, models, prep.split,
                             cfg.eval.random_seed)
    k2 = np.array([r.delta for r in table["K2"]])
    k1 = np.array([r.delta for r in table["K1"]])
    neg = int(np.sum(k2 < 0))
    wins = int(np.sum(k2 <= k1))
    n = len(models)
    ok = n >= 5 and neg >= 0.8 * n and wins > n / 2
    report(capsys, 8, ok, f"{neg}/{n} negative K=2 deltas (mean {k2.mean():+.3f}); K=2 <= K=1 in {wins}/{n}")


def test_c09_unrelated_tasks(capsys, cfg, prep, universal):
    tasks = generate_unrelated_tasks(14000, seed=cfg.eval.task_seed)
    rnd = random_image(cfg.eval.random_seed)
    parts, ok = [], True
    for name, model in zip(("A", "B"), prep.models):
        a_img = unrelated_task_eval(universal[0].image, model, tasks)
        a_rnd = unrelated_task_eval(rnd, model, tasks)
        ok &= abs(a_img - a_rnd) < 0.01
        parts.append(f"{name}: image {a_img:.4f} vs random {a_rnd:.4f}")
    report(capsys, 9, ok, "14000 tasks; " + "; ".join(parts))


def test_c10_metric_properties(capsys, prep):
    model = prep.models[0]
    test = prep.split.test
    detail = bas_detail(model, test, EvalMethod.none(), prep.x0)
    in_range = bool(np.all((detail.per_example >= 0) & (detail.per_example <= 1)))
    swapped = bas(model, [e.swapped() for e in test], EvalMethod.none(), prep.x0)
    swap_err = abs(swapped - (1 - detail.score))
    flat = dataclasses.replace(model, params={k: Tensor(np.zeros_like(t.data)) for k, t in model.params.items()},
                               plants=(), knowledge=frozenset())
    equal = bas(flat, test, EvalMethod.none(), prep.x0)
    ok = in_range and 0 <= detail.score <= 1 and swap_err < 1e-12 and equal == 0.5
    report(capsys, 10, ok, f"BAS {detail.score:.4f} in [0,1] {in_range}, swap error {swap_err:.1e}, "
                           f"equal-logit BAS {equal!r}")


def reference_replay(base, start, losses, best=float("inf"), patience=3):
    step, stag, out = start, 0, []
    for loss in losses:
        if loss < best:
            best, stag = loss, 0
            step *= 1.1
        else:
            stag += 1
            if stag == patience:
                stag = 0
                step *= 0.8
        step = min(5 * base, max(0.1 * base, step))
        out.append((step, stag))
    return out


def test_c11_schedule(capsys):
    # improve/stagnate scripts of 10 events; the second and third start near a bound
    scripts = [
        (1.0, 1.0, [5, 4, 4, 4, 4, 3, 3, 3, 3, 2]),
        (1.0, 4.8, [9, 8, 7, 7, 7, 7, 6, 5, 5, 5]),
        (1.0, 0.11, [1, 1, 1, 1, 1, 1, 1, 0.5, 0.5, 0.5]),
    ]
    ok, seen = True, set()
    for base, start, losses in scripts:
        s = dataclasses.replace(ScheduleState.start(base), current_step=start)
        got = []
        for loss in losses:
            prev = s.current_step
            s = adaptive_step(s, float(loss))
            got.append((s.current_step, s.stagnation_count))
            ratio = s.current_step / prev
            for tag, r in (("x1.1", 1.1), ("x0.8", 0.8)):
                if abs(ratio - r) < 1e-12:
                    seen.add(tag)
            if s.current_step in (0.1 * base, 5 * base):
                seen.add("clamp")
        ref = reference_replay(base, start, losses)
        ok &= all(abs(a[0] - b[0]) < 1e-12 and a[1] == b[1] for a, b in zip(got, ref))
    ok &= seen == {"x1.1", "x0.8", "clamp"}
    report(capsys, 11, ok, f"3 scripts x 10 events replayed, observed {sorted(seen)}")


# ---------------------------------------------------------------------------
# demo-model examples that belong with the shipped config


def test_padding_prompt_is_inert_on_demo_models(cfg, prep):
    for model in prep.models:
        base = bas(model, prep.split.test, EvalMethod.none(), prep.x0)
        pad = system_prompt_eval(model, prep.split.test, "<pad> <pad> <pad>", prep.x0)
        assert abs(pad - base) < 0.05


def test_behaviour_prompts_move_in_opposite_directions(prep):
    spec = BEHAVIORS[prep.split.behavior]
    for model in prep.models:
        base = bas(model, prep.split.test, EvalMethod.none(), prep.x0)
        pos = system_prompt_eval(model, prep.split.test, spec.system_pos, prep.x0)
        neg = system_prompt_eval(model, prep.split.test, spec.system_neg, prep.x0)
        assert pos > base > neg


def test_behaviour_prompts_bracket_neutral_prefixes(prep):
    # neutral prefixes of the same word count isolate the cue effect from the prefix effect
    spec = BEHAVIORS[prep.split.behavior]
    rng = np.random.default_rng(0)
    test = prep.split.test

    def neutral(model, n_words):
        return [system_prompt_eval(model, test, " ".join(rng.choice(spec.scenario, n_words)), prep.x0)
                for _ in range(8)]

    for model in prep.models:
        pos = system_prompt_eval(model, test, spec.system_pos, prep.x0)
        neg = system_prompt_eval(model, test, spec.system_neg, prep.x0)
        assert pos > max(neutral(model, len(spec.system_pos.split())))
        assert neg < min(neutral(model, len(spec.system_neg.split())))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
