"""Image optimisation: spectral-augmented gradients, dual-momentum ensemble
descent, signed-gradient PGD and the adaptive inner step schedule.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import ToyVLM, run
from .steering import SteeringConfig, TargetActivations
from .tensor import Tensor, add, backward, broadcast_to, mul, no_grad, reshape, scale, slice_, sub, sum_
from .transforms import dct2d, idct2d

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerParams:
    iterations: int = 2000
    momentum: float = 0.9
    step_inner: float = 100.0 / 255.0
    step_outer: float = 1.0 / 255.0
    epsilon: float = 1e-12
    spectral_samples: int = 20
    noise_sigma: float = 16.0  # 0-255 pixel units
    mask_rho: float = 0.5
    seed: int = 0
    adaptive: bool = True
    patience: int = 3
    shuffle: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.spectral_samples < 1:
            raise ValueError("spectral_samples must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.mask_rho < 1.0:
            raise ValueError("mask_rho must lie in [0, 1)")
        if self.step_inner <= 0:
            raise ValueError("step_inner must be positive")
        if self.step_outer < 0:
            raise ValueError("step_outer must be >= 0")


@dataclass(frozen=True)
class PGDParams:
    step: float = 5.0 / 255.0
    budget: float = 1.0
    iterations: int = 2000
    spectral_samples: int = 20
    noise_sigma: float = 16.0
    mask_rho: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.budget <= 1.0:
            raise ValueError("budget must lie in (0, 1]")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.iterations < 1 or self.spectral_samples < 1:
            raise ValueError("iterations and spectral_samples must be >= 1")
        if self.noise_sigma < 0 or not 0.0 <= self.mask_rho < 1.0:
            raise ValueError("need noise_sigma >= 0 and 0 <= mask_rho < 1")


# ---------------------------------------------------------------------------
# step-size schedule


@dataclass(frozen=True)
class ScheduleState:
    base_step: float
    current_step: float
    stagnation_count: int = 0
    best_loss: float = float("inf")
    patience: int = 3
    bounds: tuple[float, float] = (0.1, 5.0)

    @classmethod
    def start(cls, base_step: float, patience: int = 3) -> "ScheduleState":
        return cls(base_step=base_step, current_step=base_step, patience=patience)


def adaptive_step(state: ScheduleState, new_loss: float) -> ScheduleState:
    """x1.1 on a new best loss; x0.8 once ``patience`` non-improving steps pile up."""
    step, stag, best = state.current_step, state.stagnation_count, state.best_loss
    if new_loss < best:
        step *= 1.1
        stag = 0
        best = new_loss
    else:
        stag += 1
        if stag >= state.patience:
            step *= 0.8
            stag = 0
    lo, hi = state.bounds
    step = min(max(step, lo * state.base_step), hi * state.base_step)
    return dataclasses.replace(state, current_step=step, stagnation_count=stag, best_loss=best)


# ---------------------------------------------------------------------------
# augmentation + loss


def sample_spectral_mask(shape, rho: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")
    if rho == 0.0:
        return np.ones(shape)
    return rng.uniform(1.0 - rho, 1.0 + rho, size=shape)


def augment(x: Tensor, samples: int, sigma: float, rho: float, rng: np.random.Generator) -> Tensor:
    """S noisy, spectrally masked copies of ``x`` stacked as (S, H, W, 3).

    With ``rho == 0`` the DCT round trip is skipped: the mask is all ones and
    the transform pair is the identity.
    """
    h, w, c = x.shape
    xs = broadcast_to(reshape(x, (1, h, w, c)), (samples, h, w, c))
    if sigma > 0:
        xs = add(xs, rng.normal(0.0, sigma, size=(samples, h, w, c)) / 255.0)
    if rho > 0:
        mask = sample_spectral_mask((samples, h, w, c), rho, rng)
        xs = idct2d(mul(dct2d(xs), mask))
    return xs


def activation_loss(
    model: ToyVLM,
    targets: TargetActivations,
    config: SteeringConfig,
    images: Tensor,
) -> Tensor:
    """Layer-weighted squared distance to the targets, averaged over images.

    Each image contributes sum_j sum_l w_l ||h_l - target||^2 / (N_p * |L|).
    """
    s = images.shape[0]
    n_total = targets.n_prompts
    n = targets.last_n
    total = None
    for group in targets.groups:
        fw = run(model, images, group.tokens, upto=max(targets.layers))
        for li, (layer, weight) in enumerate(zip(targets.layers, config.layer_weights)):
            h = slice_(fw.hidden[layer], (slice(None), slice(None), slice(-n, None)))
            diff = sub(h, group.targets[:, li])
            term = scale(sum_(mul(diff, diff)), weight)
            total = term if total is None else add(total, term)
    return scale(total, 1.0 / (s * n_total * len(targets.layers)))


@dataclass
class Member:
    """One ensemble entry: a model and its precomputed targets."""

    model: ToyVLM
    targets: TargetActivations
    config: SteeringConfig
    name: str = ""


def member_loss(member: Member, x: np.ndarray) -> float:
    with no_grad():
        img = Tensor(np.asarray(x)[None])
        return activation_loss(member.model, member.targets, member.config, img).item()


def spectral_gradient(
    x: np.ndarray,
    member: Member,
    samples: int,
    sigma: float,
    rho: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Gradient of the augmented activation loss averaged over ``samples`` draws.

    Returns (gradient, mean augmented loss).
    """
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    aug = augment(xt, samples, sigma, rho, rng)
    loss = activation_loss(member.model, member.targets, member.config, aug)
    backward(loss)
    g = xt.grad
    if not np.all(np.isfinite(g)):
        bad = int(np.sum(~np.isfinite(g)))
        raise FloatingPointError(
            f"non-finite gradient for {member.name or 'model'}: {bad} entries, loss={loss.item()!r}"
        )
    return g, loss.item()


# ---------------------------------------------------------------------------
# optimisers


@dataclass
class TraceRow:
    iteration: int
    per_model: list[float]
    ensemble: float
    step: float


@dataclass
class OptimResult:
    image: np.ndarray
    initial_losses: list[float]
    trace: list[TraceRow] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    skipped_outer: int = 0

    @property
    def initial_loss(self) -> float:
        return float(sum(self.initial_losses))

    @property
    def final_loss(self) -> float:
        return self.trace[-1].ensemble if self.trace else self.initial_loss


def _check_finite(name: str, arr: np.ndarray, it: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} became non-finite at iteration {it}")


def optimize_universal(
    x0: np.ndarray,
    members: Sequence[Member],
    params: OptimizerParams,
    record: bool = False,
    callback: Callable[[int, np.ndarray, TraceRow], None] | None = None,
) -> OptimResult:
    """Dual-momentum ensemble optimisation.

    Per iteration: for each model, a spectral-augmented gradient is L2
    normalised into the inner momentum and the image takes an immediate
    inner step.  The iteration's total displacement is L1 normalised into the
    outer momentum; the image is then reset to its iteration start plus
    ``step_outer * sign(outer momentum)`` and clipped to [0, 1].

    ``step_outer == 0`` disables the outer sign step (the image keeps the
    inner-loop result), which reduces to normalised gradient descent.
    """
    if not members:
        raise ValueError("ensemble must contain at least one model")
    rng = np.random.default_rng(params.seed)
    x = np.array(x0, dtype=np.float64)
    g_inner = np.zeros_like(x)
    g_outer = np.zeros_like(x)
    sched = ScheduleState.start(params.step_inner, params.patience)
    result = OptimResult(x, [member_loss(m, x) for m in members])
    order = list(range(len(members)))

    for it in range(1, params.iterations + 1):
        x_orig = x.copy()
        if params.shuffle:
            rng.shuffle(order)
        step_inner = sched.current_step
        rec: dict = {"inner": [], "normed": []} if record else {}
        for k in order:
            grad, _ = spectral_gradient(x, members[k], params.spectral_samples,
                                        params.noise_sigma, params.mask_rho, rng)
            normed = grad / (np.linalg.norm(grad) + params.epsilon)
            g_inner = params.momentum * g_inner + normed
            x = x - step_inner * g_inner
            if record:
                rec["normed"].append(normed)
                rec["inner"].append(g_inner.copy())
        delta = x - x_orig
        l1 = np.abs(delta).sum()
        if l1 > 0:
            g_outer = params.momentum * g_outer + delta / l1
        else:
            result.skipped_outer += 1
            log.info("iteration %d: no inner movement, outer momentum update skipped", it)
        if params.step_outer > 0:
            x = x_orig + params.step_outer * np.sign(g_outer)
        if record:
            rec.update(x_orig=x_orig, delta=delta, outer=g_outer.copy(), pre_clip=x.copy(),
                       l1_zero=bool(l1 == 0))
        x = np.clip(x, 0.0, 1.0)
        for name, arr in (("image", x), ("inner momentum", g_inner), ("outer momentum", g_outer)):
            _check_finite(name, arr, it)

        losses = [member_loss(m, x) for m in members]
        ens = float(sum(losses))
        if not np.isfinite(ens):
            raise FloatingPointError(f"ensemble loss became non-finite at iteration {it}")
        row = TraceRow(it, losses, ens, step_inner)
        result.trace.append(row)
        if record:
            rec["post_clip"] = x.copy()
            result.records.append(rec)
        if params.adaptive:
            sched = adaptive_step(sched, ens)
        if callback is not None:
            callback(it, x, row)
    result.image = x
    return result


def optimize_pgd(
    x0: np.ndarray,
    member: Member,
    params: PGDParams,
    callback: Callable[[int, np.ndarray, TraceRow], None] | None = None,
) -> OptimResult:
    """Signed-gradient PGD with expectation over the spectral augmentation."""
    rng = np.random.default_rng(params.seed)
    x0 = np.array(x0, dtype=np.float64)
    x = x0.copy()
    result = OptimResult(x, [member_loss(member, x)])
    for it in range(1, params.iterations + 1):
        grad, _ = spectral_gradient(x, member, params.spectral_samples,
                                    params.noise_sigma, params.mask_rho, rng)
        x = x - params.step * np.sign(grad)
        x = np.clip(x, x0 - params.budget, x0 + params.budget)
        x = np.clip(x, 0.0, 1.0)
        _check_finite("image", x, it)
        loss = member_loss(member, x)
        row = TraceRow(it, [loss], loss, params.step)
        result.trace.append(row)
        if callback is not None:
            callback(it, x, row)
    result.image = x
    return result
