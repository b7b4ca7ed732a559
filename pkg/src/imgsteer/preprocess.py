"""Per-model differentiable preprocessing: bilinear resize, then normalize."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, mul, sub
from .transforms import bilinear_resize

# Canonical resolution the steering image is optimized at.
OPT_SIZE = 64


@dataclass(frozen=True)
class PreprocessSpec:
    input_height: int = OPT_SIZE
    input_width: int = OPT_SIZE
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.input_height < 1 or self.input_width < 1:
            raise ValueError(f"preprocess dimensions must be >= 1, got {self.input_height}x{self.input_width}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std need exactly 3 channel values")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std components must be positive, got {self.std}")
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))

    @property
    def size(self) -> tuple[int, int]:
        return (self.input_height, self.input_width)


CLIP_LIKE = PreprocessSpec(56, 56, (0.481, 0.458, 0.408), (0.269, 0.261, 0.276))
SIGLIP_LIKE = PreprocessSpec(64, 64, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))


def preprocess(image, spec: PreprocessSpec) -> Tensor:
    """(resize(image) - mean) / std for a (..., H, W, 3) image in [0, 1]."""
    if not isinstance(spec, PreprocessSpec):
        raise TypeError(f"expected PreprocessSpec, got {type(spec).__name__}")
    x = bilinear_resize(as_tensor(image), spec.size)
    mean = np.asarray(spec.mean)
    inv_std = 1.0 / np.asarray(spec.std)
    if np.all(mean == 0.0) and np.all(inv_std == 1.0):
        return x
    return mul(sub(x, mean), inv_std)

