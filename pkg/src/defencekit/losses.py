"""Training objectives: pixel BCE for segmentation and the five-term
inpainting objective (L1 reconstruction, perceptual, structure, and the two
least-squares adversarial terms).

Norm-based losses are normalized to per-element means so the weighting stays
comparable across resolutions.  Every loss is a differentiable scalar Tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module
from .tensor import Rng, ShapeError, Tensor, as_tensor

__all__ = [
    "LossWeights",
    "FeaturePyramid",
    "StructureSmoother",
    "bce_loss",
    "rec_loss",
    "perceptual_loss",
    "structure_loss",
    "d_texture_loss",
    "d_structure_loss",
    "g_adversarial_loss",
    "total_generator_loss",
]

BCE_CLIP = 1e-7


@dataclass
class LossWeights:
    """Weights for the five generator loss terms."""

    rec: float = 1.0
    per: float = 0.01
    struct: float = 1.0
    adv_tex: float = 0.1
    adv_struct: float = 0.1

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")

    def as_tuple(self):
        return (self.rec, self.per, self.struct, self.adv_tex, self.adv_struct)


class FeaturePyramid(Module):
    """Frozen random convolutional pyramid with three pooling stages.

    Weights are drawn once from the seed and never trained, so the features
    of a fixed input are bitwise stable for the lifetime of the run.
    """

    def __init__(self, seed: int = 0, in_ch: int = 3, widths=(8, 16, 32)):
        rng = Rng(seed, "feature-pyramid")
        self.stages = []
        ch = in_ch
        for i, width in enumerate(widths):
            conv = Conv2d(rng.stream(f"stage{i}"), ch, width, 3, act="relu")
            conv.weight.is_param = False  # frozen: invisible to optimizers
            conv.bias.is_param = False
            self.stages.append(conv)
            ch = width

    def features(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for conv in self.stages:
            h = T.max_pool2(conv(h))
            feats.append(h)
        return feats


class StructureSmoother(Module):
    """Fixed linear smoothing operator: K rounds of border-normalized 3x3
    weighted averaging applied per channel.

    Linear by construction, and constants are fixed points because each
    round is renormalized by the smoothing of an all-ones image.
    """

    KERNEL = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0

    def __init__(self, iterations: int = 5, channels: int = 3):
        self.iterations = iterations
        self.channels = channels
        w = np.zeros((channels, channels, 3, 3))
        for c in range(channels):
            w[c, c] = self.KERNEL
        self._weight = Tensor(w)  # not a param: never trained
        self._norm_cache: dict[tuple[int, int], np.ndarray] = {}

    def _border_scale(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._norm_cache:
            ones = np.ones((1, 1, h, w))
            mass = T.conv2d_raw(ones, self.KERNEL.reshape(1, 1, 3, 3), 1, 1, 1)
            self._norm_cache[key] = 1.0 / mass
        return self._norm_cache[key]

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"smoother built for {self.channels} channels, got {c}")
        scale = self._border_scale(h, w)
        out = x
        for _ in range(self.iterations):
            out = T.mul_const(T.conv2d(out, self._weight, None, 1, 1, 1), scale)
        return out


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} operands differ in shape: {a.shape} vs {b.shape}")


def bce_loss(prediction: Tensor, target) -> Tensor:
    """Mean binary cross entropy; predictions are clipped to keep logs finite."""
    target = as_tensor(target)
    _check_same_shape(prediction, target, "bce_loss")
    tv = target.data
    if not np.all((tv == 0.0) | (tv == 1.0)):
        raise ValueError("bce_loss target must contain only 0 and 1")
    p = T.clip(prediction, BCE_CLIP, 1.0 - BCE_CLIP)
    term = T.add(T.mul(target, T.log(p)), T.mul(1.0 - target, T.log(1.0 - p)))
    return T.neg(T.reduce(term, "mean"))


def rec_loss(prediction: Tensor, target) -> Tensor:
    """Mean absolute difference over all elements."""
    target = as_tensor(target)
    _check_same_shape(prediction, target, "rec_loss")
    return T.reduce(T.sub(prediction, target), "abs_mean")


def perceptual_loss(extractor: FeaturePyramid, prediction: Tensor, target) -> Tensor:
    """Average over the pyramid stages of the mean absolute feature gap."""
    target = as_tensor(target)
    _check_same_shape(prediction, target, "perceptual_loss")
    fp = extractor.features(prediction)
    ft = extractor.features(target)
    total = T.reduce(T.sub(fp[0], ft[0]), "abs_mean")
    for a, b in zip(fp[1:], ft[1:]):
        total = T.add(total, T.reduce(T.sub(a, b), "abs_mean"))
    return T.mul_const(total, 1.0 / len(fp))


def structure_loss(smoother: StructureSmoother, prediction: Tensor, target) -> Tensor:
    """Mean absolute difference between smoothed prediction and target."""
    target = as_tensor(target)
    _check_same_shape(prediction, target, "structure_loss")
    return T.reduce(T.sub(smoother(prediction), smoother(target)), "abs_mean")


def _lsgan_quadratic(real, fake) -> Tensor:
    real = as_tensor(real)
    fake = as_tensor(fake)
    real_term = T.reduce(T.mul(real - 1.0, real - 1.0), "mean")
    fake_term = T.reduce(T.mul(fake, fake), "mean")
    return T.mul_const(T.add(real_term, fake_term), 0.5)


def d_texture_loss(d_real, d_fake) -> Tensor:
    """0.5 * [ E(D(real) - 1)^2 + E D(fake)^2 ]; scores may be scalars or
    per-sample batches (the expectation is the batch mean)."""
    return _lsgan_quadratic(d_real, d_fake)


def d_structure_loss(d_real_structure, d_fake_structure) -> Tensor:
    """Same quadratic form as the texture critic, applied to scores on
    smoothed images."""
    return _lsgan_quadratic(d_real_structure, d_fake_structure)


def g_adversarial_loss(d_fake, d_fake_structure) -> tuple[Tensor, Tensor]:
    """Least-squares generator terms: each critic should score fakes as 1."""
    d_fake = as_tensor(d_fake)
    d_fake_structure = as_tensor(d_fake_structure)
    tex = T.mul_const(T.reduce(T.mul(d_fake - 1.0, d_fake - 1.0), "mean"), 0.5)
    struct = T.mul_const(
        T.reduce(T.mul(d_fake_structure - 1.0, d_fake_structure - 1.0), "mean"), 0.5)
    return tex, struct


def total_generator_loss(weights: LossWeights, rec, per, struct, adv_tex,
                         adv_struct) -> Tensor:
    """Weighted sum of the five generator terms."""
    terms = {"rec": rec, "per": per, "struct": struct,
             "adv_tex": adv_tex, "adv_struct": adv_struct}
    for name, term in terms.items():
        value = term.item() if isinstance(term, Tensor) else float(term)
        if not np.isfinite(value):
            raise ArithmeticError(f"loss term {name!r} is not finite: {value}")
    total = T.mul_const(as_tensor(rec), weights.rec)
    for w, term in [(weights.per, per), (weights.struct, struct),
                    (weights.adv_tex, adv_tex), (weights.adv_struct, adv_struct)]:
        total = T.add(total, T.mul_const(as_tensor(term), w))
    return total
