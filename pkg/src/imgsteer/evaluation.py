"""Behavioural alignment scores, method comparison, transfer deltas and
unrelated-task accuracy.

BAS for one example is P(x+) / (P(x+) + P(x-)) with both probabilities taken
from full-continuation log-probabilities under the chosen control method.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import corpus
from .corpus import BehaviorExample, UnrelatedTask
from .model import Steer, ToyVLM, log_softmax_np, run
from .preprocess import OPT_SIZE
from .steering import SteeringVectorSet, _group_by_length
from .tensor import no_grad

log = logging.getLogger(__name__)

WORKERS_ENV = "IMGSTEER_WORKERS"
METHOD_KINDS = ("none", "system_prompt", "steering_vector", "image")


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1, got {n}")
    return n


def _ordered_map(fn: Callable, items: Sequence) -> list:
    """Map in a thread pool (numpy releases the GIL in GEMMs); results keep input order."""
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class EvalMethod:
    kind: str
    prompt: str | None = None
    vectors: SteeringVectorSet | None = None
    multiplier: float = 0.0
    positions: int = 1
    image: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}; expected one of {METHOD_KINDS}")
        if self.kind == "system_prompt" and not (self.prompt and self.prompt.strip()):
            raise ValueError("system_prompt method needs non-empty prompt text")
        if self.kind == "steering_vector" and self.vectors is None:
            raise ValueError("steering_vector method needs a SteeringVectorSet")
        if self.kind == "image":
            if self.image is None:
                raise ValueError("image method needs an image payload")
            img = np.asarray(self.image, dtype=np.float64)
            if img.ndim != 3 or img.shape[-1] != 3:
                raise ValueError(f"image payload must be (H, W, 3), got {img.shape}")
            if img.min() < 0.0 or img.max() > 1.0:
                raise ValueError("image payload must lie in [0, 1]")
            object.__setattr__(self, "image", img)

    @classmethod
    def none(cls) -> "EvalMethod":
        return cls("none")

    @classmethod
    def system(cls, text: str) -> "EvalMethod":
        return cls("system_prompt", prompt=text)

    @classmethod
    def steering(cls, vectors: SteeringVectorSet, multiplier: float, positions: int = 1) -> "EvalMethod":
        return cls("steering_vector", vectors=vectors, multiplier=float(multiplier), positions=positions)

    @classmethod
    def with_image(cls, image) -> "EvalMethod":
        return cls("image", image=image)


def random_image(seed: int, size: int = OPT_SIZE) -> np.ndarray:
    """I.i.d. uniform [0, 1] pixels."""
    return np.random.default_rng([seed, 271828]).random((size, size, 3))


# ---------------------------------------------------------------------------
# scoring


def continuation_logprobs(
    model: ToyVLM,
    image,
    prompts: Sequence[str],
    continuations: Sequence[str],
    steer_vectors: SteeringVectorSet | None = None,
    multiplier: float = 0.0,
    positions: int = 1,
) -> np.ndarray:
    """log P(continuation | image, prompt) for each pair, batched by length.

    Steering covers the last ``positions`` prompt tokens and every
    continuation token whose prediction is scored.
    """
    if len(prompts) != len(continuations):
        raise ValueError("prompts and continuations differ in length")
    p_ids = [model.tokenize(p) for p in prompts]
    c_ids = [model.tokenize(c) for c in continuations]
    if any(not c for c in c_ids):
        raise ValueError("every continuation needs at least one token")
    # the last continuation token is never an input
    seqs = [p + c[:-1] for p, c in zip(p_ids, c_ids)]
    out = np.zeros(len(prompts))
    keys = [(len(s), len(c)) for s, c in zip(seqs, c_ids)]
    groups: dict[tuple[int, int], list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    with no_grad():
        for (length, n_cont), idx in groups.items():
            steer = None
            if steer_vectors is not None and multiplier != 0.0:
                steer = {l: Steer(v, multiplier, min(length, positions + n_cont - 1))
                         for l, v in steer_vectors.vectors.items()}
            batch = np.array([seqs[i] for i in idx])
            fw = run(model, image, batch, steer=steer)
            lp = log_softmax_np(fw.logits.data[0, :, -n_cont:, :])  # (n, n_cont, V)
            for r, i in enumerate(idx):
                out[i] = sum(lp[r, j, tok] for j, tok in enumerate(c_ids[i]))
    return out


def pair_scores(lp_pos: np.ndarray, lp_neg: np.ndarray) -> np.ndarray:
    """Per-example two-option ratio, NaN where both log-probabilities are -inf."""
    lp_pos = np.asarray(lp_pos, dtype=np.float64)
    lp_neg = np.asarray(lp_neg, dtype=np.float64)
    out = np.full(lp_pos.shape, np.nan)
    ok = ~(np.isneginf(lp_pos) & np.isneginf(lp_neg))
    m = np.maximum(lp_pos[ok], lp_neg[ok])
    ep, en = np.exp(lp_pos[ok] - m), np.exp(lp_neg[ok] - m)
    out[ok] = ep / (ep + en)
    return out


@dataclass
class BASResult:
    score: float
    n_used: int
    n_skipped: int
    per_example: np.ndarray = field(repr=False)


def bas_detail(
    model: ToyVLM,
    test_set: Sequence[BehaviorExample],
    method: EvalMethod,
    baseline_image,
) -> BASResult:
    if not test_set:
        raise ValueError("test_set must be non-empty")
    image = method.image if method.kind == "image" else baseline_image
    prompts = [ex.prompt for ex in test_set]
    if method.kind == "system_prompt":
        prompts = [f"{method.prompt} {p}" for p in prompts]
    kw = {}
    if method.kind == "steering_vector":
        kw = dict(steer_vectors=method.vectors, multiplier=method.multiplier, positions=method.positions)
    conts = [ex.positive for ex in test_set] + [ex.negative for ex in test_set]
    lp = continuation_logprobs(model, image, prompts + prompts, conts, **kw)
    n = len(test_set)
    per = pair_scores(lp[:n], lp[n:])
    used = ~np.isnan(per)
    skipped = int(n - used.sum())
    if skipped:
        log.warning("bas: skipped %d degenerate examples (both log-probabilities -inf)", skipped)
    if not used.any():
        raise ValueError("every example was degenerate; BAS undefined")
    return BASResult(float(per[used].mean()), int(used.sum()), skipped, per)


def bas(model: ToyVLM, test_set: Sequence[BehaviorExample], method: EvalMethod, baseline_image) -> float:
    return bas_detail(model, test_set, method, baseline_image).score


def system_prompt_eval(model: ToyVLM, test_set, prompt_text: str, baseline_image) -> float:
    return bas(model, test_set, EvalMethod.system(prompt_text), baseline_image)


@dataclass(frozen=True)
class TransferResult:
    score_random: float
    score_image: float
    delta: float


def transfer_delta(image, unseen_model: ToyVLM, test_set, random_seed: int) -> TransferResult:
    """BAS(image) - BAS(seeded uniform random image) on a model outside the ensemble."""
    rnd = random_image(random_seed, size=np.asarray(image).shape[0])
    s_rand = bas(unseen_model, test_set, EvalMethod.with_image(rnd), rnd)
    s_img = bas(unseen_model, test_set, EvalMethod.with_image(image), rnd)
    return TransferResult(s_rand, s_img, s_img - s_rand)


def unrelated_task_eval(
    image,
    model: ToyVLM,
    tasks: Sequence[UnrelatedTask],
    chunk: int = 1000,
) -> float:
    """4-way argmax accuracy over the option letters at the end of each task prompt."""
    if not tasks:
        raise ValueError("tasks must be non-empty")
    letters = [model.token_id(l) for l in corpus.LETTERS]
    toks = [model.tokenize(t.prompt) for t in tasks]
    groups = _group_by_length(toks)

    def score(block: tuple[int, list[int]]) -> tuple[list[int], np.ndarray]:
        _, idx = block
        with no_grad():
            fw = run(model, image, np.array([toks[i] for i in idx]))
        last = fw.logits.data[0, :, -1, :][:, letters]
        return idx, np.argmax(last, axis=1)

    blocks = []
    for length, idx in groups.items():
        for s in range(0, len(idx), chunk):
            blocks.append((length, idx[s:s + chunk]))
    correct = np.zeros(len(tasks), dtype=bool)
    for idx, pred in _ordered_map(score, blocks):
        for i, p in zip(idx, pred):
            correct[i] = int(p) == tasks[i].correct
    return float(correct.mean())


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalRow:
    model: str
    behavior: str
    method: str
    bas: float
    delta: float
    n: int
    skipped: int = 0
    seed: int = 0


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def get(self, model: str, behavior: str, method: str) -> EvalRow:
        for r in self.rows:
            if (r.model, r.behavior, r.method) == (model, behavior, method):
                return r
        raise KeyError((model, behavior, method))

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows], "extra": self.extra},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        return cls([EvalRow(**r) for r in data["rows"]], data.get("extra", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in EvalRow.__dataclass_fields__.values()]
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in asdict(r).items()})
        return buf.getvalue()


def evaluate_methods(
    model: ToyVLM,
    behavior: str,
    test_set: Sequence[BehaviorExample],
    methods: Iterable[tuple[str, EvalMethod]],
    baseline_image,
    seed: int = 0,
) -> list[EvalRow]:
    """One row per labelled method; ``delta`` is relative to the no-steering score."""
    methods = list(methods)
    labels = [l for l, _ in methods]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate method labels: {labels}")
    ref = bas(model, test_set, EvalMethod.none(), baseline_image)
    rows = []
    for label, m in methods:
        res = bas_detail(model, test_set, m, baseline_image)
        rows.append(EvalRow(model.config.name, behavior, label, res.score, res.score - ref,
                            res.n_used, res.n_skipped, seed))
    return rows
