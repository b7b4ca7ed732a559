"""Seeded toy vision-language models with per-layer hidden-state taps.

Architecture: patch embedding + bidirectional vision blocks, optional
spatial average pooling down to ``visual_token_count`` tokens, a 2-layer MLP
projector, then a pre-LN causal decoder over ``[visual tokens | text tokens]``.

Two kinds of hand-wired structure make the toys useful as ground truth:

* a *planted behaviour* (:func:`plant_behavior`): a unit direction ``d`` at one
  decoder layer.  In a behaviour context the (A)/(B) logits read
  ``coupling * polarity * <h_layer, d>``, and the layer output is written along
  ``d`` whenever an answer letter is the behaviour-matching one, or when the
  preamble contains behaviour cue words.  Contrastive extraction should
  therefore recover ``d``.
* a *knowledge head*: for ``which <category> (A) w ... answer`` prompts the
  letter whose word is a known member of the category gets a fixed logit bonus.
  Each model knows a seeded random subset of the facts.
"""

from __future__ import annotations

import dataclasses
import logging
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import corpus
from .preprocess import OPT_SIZE, PreprocessSpec, preprocess
from .tensor import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    embed,
    gelu,
    layer_norm,
    matmul,
    mul,
    no_grad,
    reshape,
    scale,
    slice_,
    softmax,
    transpose,
)

log = logging.getLogger(__name__)

HEADS = 4
INIT_SCALE = 0.02


@dataclass(frozen=True)
class ModelConfig:
    name: str = "toy"
    seed: int = 0
    patch_size: int = 16
    vision_layers: int = 2
    lm_layers: int = 6
    hidden_dim: int = 64
    vocab: tuple[str, ...] = field(default_factory=lambda: tuple(corpus.default_vocab()))
    visual_token_count: int = 16
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    max_positions: int = 96
    mlp_ratio: int = 4
    # members of a family share a seeded base; family_mix is the base's variance share
    family_seed: int | None = None
    family_mix: float = 0.0
    knowledge_fraction: float = 0.4
    knowledge_strength: float = 3.0
    init_scale: float = INIT_SCALE

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if self.hidden_dim % HEADS:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by {HEADS} heads")
        missing = [t for t in (corpus.PAD, corpus.UNK, "(A)", "(B)") if t not in self.vocab]
        if missing:
            raise ValueError(f"vocab lacks reserved tokens {missing}")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocab contains duplicate tokens")
        h, w = self.preprocess.size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"input {h}x{w} not divisible by patch size {self.patch_size}")
        gh, gw = self.patch_grid
        side = int(round(self.visual_token_count ** 0.5))
        if side * side != self.visual_token_count or gh % side or gw % side:
            raise ValueError(
                f"visual_token_count {self.visual_token_count} must be a square grid dividing the {gh}x{gw} patch grid"
            )
        if not 0.0 <= self.family_mix <= 1.0:
            raise ValueError("family_mix must lie in [0, 1]")

    @property
    def patch_grid(self) -> tuple[int, int]:
        h, w = self.preprocess.size
        return h // self.patch_size, w // self.patch_size

    @property
    def n_patches(self) -> int:
        gh, gw = self.patch_grid
        return gh * gw

    @property
    def pooled(self) -> bool:
        return self.visual_token_count < self.n_patches


def _block_shapes(prefix: str, d: int, mlp: int) -> list[tuple[str, tuple[int, ...]]]:
    out = [(f"{prefix}.ln1.g", (d,)), (f"{prefix}.ln1.b", (d,))]
    for p in "qkvo":
        out += [(f"{prefix}.attn.{p}.w", (d, d)), (f"{prefix}.attn.{p}.b", (d,))]
    out += [(f"{prefix}.ln2.g", (d,)), (f"{prefix}.ln2.b", (d,))]
    out += [(f"{prefix}.mlp.w1", (d, mlp)), (f"{prefix}.mlp.b1", (mlp,))]
    out += [(f"{prefix}.mlp.w2", (mlp, d)), (f"{prefix}.mlp.b2", (d,))]
    return out


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, ps = cfg.hidden_dim, cfg.patch_size
    mlp = cfg.mlp_ratio * d
    shapes = [("v.patch.w", (ps * ps * 3, d)), ("v.patch.b", (d,)), ("v.pos", (cfg.n_patches, d))]
    for i in range(cfg.vision_layers):
        shapes += _block_shapes(f"v.{i}", d, mlp)
    shapes += [("v.ln.g", (d,)), ("v.ln.b", (d,))]
    shapes += [("proj.w1", (d, d)), ("proj.b1", (d,)), ("proj.w2", (d, d)), ("proj.b2", (d,))]
    shapes += [("tok_emb", (len(cfg.vocab), d)), ("pos_emb", (cfg.max_positions, d))]
    for i in range(cfg.lm_layers):
        shapes += _block_shapes(f"lm.{i}", d, mlp)
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("unembed", (d, len(cfg.vocab)))]
    return shapes


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode())


def _init_param(cfg: ModelConfig, name: str, shape: tuple[int, ...]) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf.startswith("b"):
        return np.zeros(shape)
    z = np.random.default_rng([cfg.seed, _name_key(name)]).standard_normal(shape)
    if cfg.family_seed is not None and cfg.family_mix > 0:
        base = np.random.default_rng([cfg.family_seed, _name_key(name), 1]).standard_normal(shape)
        z = np.sqrt(1.0 - cfg.family_mix) * z + np.sqrt(cfg.family_mix) * base
    return cfg.init_scale * z


@dataclass(frozen=True)
class Plant:
    layer: int
    direction: np.ndarray
    coupling: float
    write_scale: float
    behavior: str
    pos_ids: frozenset[int]
    neg_ids: frozenset[int]


@dataclass(frozen=True)
class Steer:
    """Add ``multiplier * vector`` to the last ``last_n`` positions of one layer."""

    vector: np.ndarray
    multiplier: float
    last_n: int = 1


@dataclass(frozen=True)
class ToyVLM:
    config: ModelConfig
    params: Mapping[str, Tensor]
    plants: tuple[Plant, ...] = ()
    knowledge: frozenset[tuple[int, int]] = frozenset()

    @property
    def vocab_index(self) -> dict[str, int]:
        return _vocab_index(self.config.vocab)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def tokenize(self, text: str) -> list[int]:
        return tokenize(text, self.config.vocab)

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.config.vocab[i] for i in ids)

    def token_id(self, token: str) -> int:
        return self.vocab_index[token]


_VOCAB_CACHE: dict[tuple[str, ...], dict[str, int]] = {}


def _vocab_index(vocab: tuple[str, ...]) -> dict[str, int]:
    idx = _VOCAB_CACHE.get(vocab)
    if idx is None:
        idx = {w: i for i, w in enumerate(vocab)}
        _VOCAB_CACHE[vocab] = idx
    return idx


def tokenize(text: str, vocab: Sequence[str]) -> list[int]:
    """Whitespace tokenizer; unknown words map to ``<unk>``."""
    idx = _vocab_index(tuple(vocab))
    unk = idx[corpus.UNK]
    return [idx.get(w, unk) for w in text.split()]


def build_model(config: ModelConfig) -> ToyVLM:
    params = {}
    for name, shape in parameter_shapes(config):
        t = Tensor(_init_param(config, name, shape))
        t.data.setflags(write=False)
        params[name] = t
    return ToyVLM(config, params, knowledge=_sample_knowledge(config))


def _sample_knowledge(cfg: ModelConfig) -> frozenset[tuple[int, int]]:
    idx = _vocab_index(cfg.vocab)
    rng = np.random.default_rng([cfg.seed, 104729])
    known = set()
    for cat, members in corpus.CATEGORIES.items():
        for w in members:
            hit = rng.random() < cfg.knowledge_fraction
            if hit and cat in idx and w in idx:
                known.add((idx[cat], idx[w]))
    return frozenset(known)


def plant_behavior(
    model: ToyVLM,
    layer: int,
    direction,
    coupling: float,
    behavior: str = "refusal",
    write_scale: float = 1.0,
) -> ToyVLM:
    """Return a copy of ``model`` with a behaviour direction wired in at ``layer``."""
    if not 0 <= layer < model.config.lm_layers:
        raise ValueError(f"layer {layer} outside [0, {model.config.lm_layers})")
    d = np.asarray(direction, dtype=np.float64).reshape(-1)
    if d.shape != (model.config.hidden_dim,):
        raise ValueError(f"direction must have length {model.config.hidden_dim}")
    nrm = np.linalg.norm(d)
    if nrm == 0:
        raise ValueError("direction must be non-zero")
    if abs(nrm - 1.0) > 1e-9:
        log.warning("plant_behavior: direction norm %.6g normalised to 1", nrm)
        d = d / nrm
    d = d.copy()
    d.setflags(write=False)
    spec = corpus.BEHAVIORS[behavior]
    idx = model.vocab_index
    plant = Plant(
        layer=layer,
        direction=d,
        coupling=float(coupling),
        write_scale=float(write_scale),
        behavior=behavior,
        pos_ids=frozenset(idx[w] for w in spec.pos_cues if w in idx),
        neg_ids=frozenset(idx[w] for w in spec.neg_cues if w in idx),
    )
    return dataclasses.replace(model, plants=model.plants + (plant,))


def random_direction(dim: int, seed: int) -> np.ndarray:
    v = np.random.default_rng([seed, 31337]).standard_normal(dim)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# token-level features for the hand-wired heads


def plant_features(plant: Plant, tokens: np.ndarray, vocab: tuple[str, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Per-position (polarity, write coefficient) for a (N, T) token batch.

    Polarity is +1 when the behaviour-matching option is (A), -1 when it is
    (B), 0 outside a behaviour context.  The write coefficient is the
    preamble disposition (tanh of net cue count before the first option) plus
    +-1 on answer letters emitted after ``answer``.
    """
    idx = _vocab_index(vocab)
    a_id, b_id = idx["(A)"], idx["(B)"]
    ans_id = idx.get(corpus.ANSWER, -1)
    n, t = tokens.shape
    polarity = np.zeros((n, t))
    write = np.zeros((n, t))
    for r in range(n):
        seg = 0  # 0 preamble, 1 option A, 2 option B, 3 after answer
        pol = 0.0
        disp = 0.0
        for c in range(t):
            tok = int(tokens[r, c])
            letter = 0.0
            if seg == 3 and tok in (a_id, b_id):
                letter = pol if tok == a_id else -pol
            elif tok == a_id and seg == 0:
                seg = 1
            elif tok == b_id and seg == 1:
                seg = 2
            elif tok == ans_id and seg in (1, 2):
                seg = 3
            elif tok in plant.pos_ids or tok in plant.neg_ids:
                sign = 1.0 if tok in plant.pos_ids else -1.0
                if seg == 0:
                    disp += sign
                elif seg in (1, 2) and pol == 0.0:
                    pol = sign if seg == 1 else -sign
            polarity[r, c] = pol
            write[r, c] = np.tanh(disp) + letter
    return polarity, write


def knowledge_logits(model: ToyVLM, tokens: np.ndarray) -> np.ndarray | None:
    """Sparse (N, T, V) logit bonus from the knowledge head, or None if unused."""
    idx = model.vocab_index
    which, ans = idx.get(corpus.WHICH), idx.get(corpus.ANSWER)
    if which is None or ans is None or not model.knowledge:
        return None
    letters = [idx[l] for l in corpus.LETTERS if l in idx]
    n, t = tokens.shape
    out = None
    for r in range(n):
        row = tokens[r]
        hits = np.flatnonzero(row == which)
        if hits.size == 0 or hits[0] + 1 >= t:
            continue
        cat = int(row[hits[0] + 1])
        for c in range(hits[0] + 2, t):
            if row[c] != ans:
                continue
            for j in range(hits[0] + 2, c - 1):
                if int(row[j]) in letters and (cat, int(row[j + 1])) in model.knowledge:
                    if out is None:
                        out = np.zeros((n, t, len(model.config.vocab)))
                    out[r, c, int(row[j])] += model.config.knowledge_strength
    return out


# ---------------------------------------------------------------------------
# forward pass


def _linear(x: Tensor, model: ToyVLM, prefix: str, bias: bool = True) -> Tensor:
    y = matmul(x, model.p(prefix + ".w") if bias else model.p(prefix))
    return add(y, model.p(prefix + ".b")) if bias else y


def _ln(x: Tensor, model: ToyVLM, prefix: str) -> Tensor:
    return add(mul(layer_norm(x), model.p(prefix + ".g")), model.p(prefix + ".b"))


def _attention(x: Tensor, model: ToyVLM, prefix: str, mask: np.ndarray | None) -> Tensor:
    b, l, d = x.shape
    dh = d // HEADS

    def heads(name):
        y = reshape(_linear(x, model, f"{prefix}.attn.{name}"), (b, l, HEADS, dh))
        return y

    q = transpose(heads("q"), (0, 2, 1, 3))
    k = transpose(heads("k"), (0, 2, 3, 1))
    v = transpose(heads("v"), (0, 2, 1, 3))
    att = softmax(scale(matmul(q, k), 1.0 / np.sqrt(dh)), mask=mask)
    out = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (b, l, d))
    return _linear(out, model, f"{prefix}.attn.o")


def _block(x: Tensor, model: ToyVLM, prefix: str, mask: np.ndarray | None) -> Tensor:
    x = add(x, _attention(_ln(x, model, prefix + ".ln1"), model, prefix, mask))
    h = gelu(add(matmul(_ln(x, model, prefix + ".ln2"), model.p(prefix + ".mlp.w1")), model.p(prefix + ".mlp.b1")))
    h = add(matmul(h, model.p(prefix + ".mlp.w2")), model.p(prefix + ".mlp.b2"))
    return add(x, h)


def _patchify(x: Tensor, ps: int) -> Tensor:
    s, h, w, c = x.shape
    y = reshape(x, (s, h // ps, ps, w // ps, ps, c))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (s, (h // ps) * (w // ps), ps * ps * c))


def _pool_matrix(cfg: ModelConfig) -> np.ndarray:
    """(visual_token_count, n_patches) block-averaging matrix over the patch grid."""
    gh, gw = cfg.patch_grid
    side = int(round(cfg.visual_token_count ** 0.5))
    bh, bw = gh // side, gw // side
    m = np.zeros((cfg.visual_token_count, cfg.n_patches))
    for r in range(gh):
        for c in range(gw):
            m[(r // bh) * side + c // bw, r * gw + c] = 1.0 / (bh * bw)
    return m


def encode_image(model: ToyVLM, pixels: Tensor) -> Tensor:
    """(S, H, W, 3) preprocessed pixels -> (S, visual_token_count, D)."""
    cfg = model.config
    x = _patchify(pixels, cfg.patch_size)
    x = add(add(matmul(x, model.p("v.patch.w")), model.p("v.patch.b")), model.p("v.pos"))
    for i in range(cfg.vision_layers):
        x = _block(x, model, f"v.{i}", None)
    x = _ln(x, model, "v.ln")
    if cfg.pooled:
        x = matmul(_pool_matrix(cfg), x)
    h = gelu(add(matmul(x, model.p("proj.w1")), model.p("proj.b1")))
    return add(matmul(h, model.p("proj.w2")), model.p("proj.b2"))


@dataclass
class ForwardOutput:
    """Hidden states and logits laid out as (S images, N prompts, L positions, ...)."""

    hidden: list[Tensor]
    logits: Tensor | None
    n_visual: int


def _as_token_batch(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"tokens must be a sequence or (N, T) batch, got shape {arr.shape}")
    return arr


def _causal_mask(length: int) -> np.ndarray:
    m = np.zeros((length, length))
    m[np.triu_indices(length, 1)] = -np.inf
    return m


def run(
    model: ToyVLM,
    images,
    tokens,
    steer: Mapping[int, Steer] | None = None,
    upto: int | None = None,
    with_logits: bool = True,
) -> ForwardOutput:
    """Batched forward over every (image, prompt) pair.

    ``images`` is (H, W, 3) or (S, H, W, 3) at the optimisation resolution
    with values in [0, 1]; preprocessing happens here.  ``tokens`` is one
    id sequence or an (N, T) batch of equal-length sequences.  ``upto`` stops
    after that decoder layer (logits are then skipped).
    """
    cfg = model.config
    x = as_tensor(images)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"images must be (S, H, W, 3), got {x.shape}")
    tok = _as_token_batch(tokens)
    if tok.size and (tok.min() < 0 or tok.max() >= len(cfg.vocab)):
        raise ValueError(f"token id out of range [0, {len(cfg.vocab)})")
    s, n, t = x.shape[0], tok.shape[0], tok.shape[1]
    nv = cfg.visual_token_count
    length = nv + t
    if length > cfg.max_positions:
        raise ValueError(f"sequence length {length} exceeds max_positions {cfg.max_positions}")
    steer = dict(steer or {})
    for layer, st in steer.items():
        if not 0 <= layer < cfg.lm_layers:
            raise ValueError(f"steering layer {layer} outside [0, {cfg.lm_layers})")
        if st.last_n < 1 or st.last_n > t:
            raise ValueError(f"cannot steer last {st.last_n} positions of a {t}-token text")

    d = cfg.hidden_dim
    vis = encode_image(model, preprocess(x, cfg.preprocess))  # (S, nv, D)
    txt = embed(model.p("tok_emb"), tok)  # (N, T, D)
    vis = broadcast_to(reshape(vis, (s, 1, nv, d)), (s, n, nv, d))
    txt = broadcast_to(reshape(txt, (1, n, t, d)), (s, n, t, d))
    h = reshape(concat([vis, txt], axis=2), (s * n, length, d))
    pad = tok == model.vocab_index[corpus.PAD]
    if pad.any():
        # padding semantics: pads are never attended to and do not advance positions
        pos_ids = np.concatenate([np.tile(np.arange(nv), (n, 1)), nv + np.cumsum(~pad, axis=1) - (~pad)], axis=1)
        pos = broadcast_to(reshape(embed(model.p("pos_emb"), pos_ids), (1, n, length, d)), (s, n, length, d))
        h = add(h, reshape(pos, (s * n, length, d)))
        keys = np.zeros((n, length))
        keys[:, nv:][pad] = -np.inf
        mask = _causal_mask(length)[None] + keys[:, None, :]
        # visual keys keep every row non-empty
        mask = np.broadcast_to(mask[None], (s, n, length, length)).reshape(s * n, 1, length, length)
    else:
        h = add(h, slice_(model.p("pos_emb"), slice(0, length)))
        mask = _causal_mask(length)

    plant_data = [(p, *plant_features(p, tok, cfg.vocab)) for p in model.plants]
    last = cfg.lm_layers - 1 if upto is None else upto
    hidden: list[Tensor] = []
    for i in range(last + 1):
        h = _block(h, model, f"lm.{i}", mask)
        for p, _, write in plant_data:
            if p.layer == i and p.write_scale != 0.0 and np.any(write):
                w = np.zeros((s, n, length, d))
                w[:, :, nv:, :] = (p.write_scale * write)[None, :, :, None] * p.direction
                h = add(h, w.reshape(s * n, length, d))
        if i in steer:
            st = steer[i]
            add_vec = np.zeros((length, d))
            add_vec[length - st.last_n :] = st.multiplier * np.asarray(st.vector, dtype=np.float64)
            h = add(h, add_vec)
        hidden.append(h)

    hidden4 = [reshape(hh, (s, n, length, d)) for hh in hidden]
    if not with_logits or upto is not None:
        return ForwardOutput(hidden4, None, nv)

    logits = matmul(_ln(h, model, "ln_f"), model.p("unembed"))  # (S*N, L, V)
    logits = reshape(logits, (s, n, length, len(cfg.vocab)))
    idx = model.vocab_index
    for p, polarity, _ in plant_data:
        if p.coupling == 0.0 or not np.any(polarity):
            continue
        proj = matmul(hidden4[p.layer], p.direction.reshape(d, 1))  # (S, N, L, 1)
        coef = np.zeros((n, length, 1))
        coef[:, nv:, 0] = p.coupling * polarity
        pattern = np.zeros(len(cfg.vocab))
        pattern[idx["(A)"]], pattern[idx["(B)"]] = 1.0, -1.0
        logits = add(logits, mul(mul(proj, coef), pattern))
    bonus = knowledge_logits(model, tok)
    if bonus is not None:
        full = np.zeros((n, length, len(cfg.vocab)))
        full[:, nv:, :] = bonus
        logits = add(logits, full)
    return ForwardOutput(hidden4, logits, nv)


def forward(model: ToyVLM, image, tokens, steer: Mapping[int, Steer] | None = None):
    """Single image, single prompt: (logits (L, V), [hidden (L, D) per layer])."""
    out = run(model, image, list(tokens), steer=steer)
    logits = slice_(out.logits, (0, 0))
    return logits, [slice_(h, (0, 0)) for h in out.hidden]


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def sequence_logprob(
    model: ToyVLM,
    image,
    prompt: str,
    continuation: str,
    steer: Mapping[int, Steer] | None = None,
) -> float:
    p_ids = model.tokenize(prompt)
    c_ids = model.tokenize(continuation)
    if not c_ids:
        raise ValueError("continuation must contain at least one token")
    with no_grad():
        out = run(model, image, p_ids + c_ids, steer=steer)
    lp = log_softmax_np(out.logits.data[0, 0])
    start = out.n_visual + len(p_ids) - 1
    return float(sum(lp[start + i, c] for i, c in enumerate(c_ids)))


def next_token_logprobs(
    model: ToyVLM,
    image,
    prompts: np.ndarray,
    steer: Mapping[int, Steer] | None = None,
) -> np.ndarray:
    """(N, V) next-token log-probabilities after each of N equal-length prompts."""
    with no_grad():
        out = run(model, image, prompts, steer=steer)
    return log_softmax_np(out.logits.data[0, :, -1, :])
