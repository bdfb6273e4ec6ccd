"""Finite-difference certification of every differentiable operation and
composite layer; used by the `grad-check` command and the acceptance suite."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import (
    Aspp,
    BatchNorm2d,
    DenseBlock,
    GatedConv2d,
    SelfAttention2d,
    SpectralNormConv2d,
)
from .losses import (
    FeaturePyramid,
    StructureSmoother,
    bce_loss,
    d_texture_loss,
    g_adversarial_loss,
    perceptual_loss,
    rec_loss,
    structure_loss,
)
from .tensor import Rng, Tensor, grad_check

__all__ = ["certify_gradients", "CHECKS"]


def _rand(rng, shape, scale=1.0, offset=0.0):
    return Tensor(rng.normal(shape, std=scale) + offset)


def _dot(out, coeffs):
    """Smooth scalar functional of a layer output (no |.| kinks)."""
    return T.reduce(T.mul(out, coeffs), "sum")


def _check_conv2d(rng, i):
    x = _rand(rng, (1, 2, 5, 5))
    w = _rand(rng, (3, 2, 3, 3), 0.5)
    b = _rand(rng, (3,), 0.1)
    stride = [1, 2][i % 2]
    dilation = [1, 2][(i // 2) % 2]
    probe = T.conv2d(x, w, b, stride, 2, dilation)
    c = Tensor(rng.normal(probe.shape), requires_grad=False)
    return grad_check(
        lambda xx, ww, bb: _dot(T.conv2d(xx, ww, bb, stride, 2, dilation), c),
        [x, w, b])


def _check_conv2d_transposed(rng, i):
    x = _rand(rng, (1, 2, 4, 4))
    w = _rand(rng, (2, 3, 2, 2), 0.5)
    c = Tensor(rng.normal((1, 3, 8, 8)), requires_grad=False)
    return grad_check(
        lambda xx, ww: _dot(T.conv2d_transposed(xx, ww, None, 2, 0), c),
        [x, w])


def _check_max_pool2(rng, i):
    x = _rand(rng, (1, 2, 6, 6))
    c = rng.normal((1, 2, 3, 3))
    return grad_check(lambda xx: T.reduce(T.mul(T.max_pool2(xx), Tensor(c)), "sum"), x)


def _check_upsample(rng, i):
    x = _rand(rng, (1, 2, 3, 3))
    c = rng.normal((1, 2, 6, 6))
    return grad_check(lambda xx: T.reduce(T.mul(T.upsample_nearest2(xx), Tensor(c)), "sum"), x)


def _make_activation_check(kind):
    def check(rng, i):
        x = _rand(rng, (24,), offset=0.30)  # offset keeps clear of kinks at 0
        c = rng.normal((24,))
        return grad_check(lambda xx: T.reduce(T.mul(T.activation(xx, kind), Tensor(c)), "sum"), x)
    return check


def _check_elementwise(rng, i):
    a = _rand(rng, (3, 4))
    b = _rand(rng, (3, 4))
    kind = ["add", "mul"][i % 2]
    return grad_check(lambda x, y: T.reduce(T.elementwise(x, y, kind), "abs_mean"), [a, b])


def _check_concat(rng, i):
    a = _rand(rng, (1, 2, 3, 3))
    b = _rand(rng, (1, 3, 3, 3))
    c = rng.normal((1, 5, 3, 3))
    return grad_check(lambda x, y: T.reduce(T.mul(T.concat([x, y]), Tensor(c)), "sum"), [a, b])


def _check_matmul(rng, i):
    a = _rand(rng, (3, 4))
    b = _rand(rng, (4, 2))
    return grad_check(lambda x, y: T.reduce(T.matmul(x, y), "abs_mean"), [a, b])


def _check_softmax(rng, i):
    x = _rand(rng, (3, 5))
    c = rng.normal((3, 5))
    return grad_check(lambda xx: T.reduce(T.mul(T.softmax(xx, -1), Tensor(c)), "sum"), x)


def _make_reduce_check(kind):
    def check(rng, i):
        x = _rand(rng, (17,), offset=0.3)
        return grad_check(lambda xx: T.reduce(xx, kind), x)
    return check


def _check_gated_conv(rng, i):
    layer = GatedConv2d(Rng(100 + i, "gc"), 2, 2, 3)
    x = _rand(rng, (1, 2, 4, 4))
    c = Tensor(rng.normal((1, 2, 4, 4)), requires_grad=False)
    return grad_check(
        lambda xx, wf, wg: _dot(layer(xx), c),
        [x, layer.weight_f, layer.weight_g])


def _check_sn_conv(rng, i):
    # sigma is treated as a constant per step, so certification covers the
    # input and bias path (u frozen during probing)
    layer = SpectralNormConv2d(Rng(200 + i, "sn"), 2, 3, 3, stride=1, padding=1)
    layer.eval()
    x = _rand(rng, (1, 2, 4, 4))
    c = Tensor(rng.normal((1, 3, 4, 4)), requires_grad=False)
    return grad_check(lambda xx, bb: _dot(layer(xx), c), [x, layer.bias])


def _check_dense_block(rng, i):
    block = DenseBlock(Rng(300 + i, "db"), 2, 2, 2)
    x = _rand(rng, (1, 2, 4, 4))
    c = Tensor(rng.normal((1, 6, 4, 4)), requires_grad=False)
    return grad_check(lambda xx: _dot(block(xx), c), x)


def _check_dilated_dense_block(rng, i):
    block = DenseBlock(Rng(400 + i, "ddb"), 2, 2, 4, dilations=(2, 4, 6, 8))
    x = _rand(rng, (1, 2, 8, 8))
    c = Tensor(rng.normal((1, 10, 8, 8)), requires_grad=False)
    return grad_check(lambda xx: _dot(block(xx), c), x)


def _check_aspp(rng, i):
    aspp = Aspp(Rng(500 + i, "aspp"), 1, 1)
    x = _rand(rng, (1, 1, 8, 8))
    c = Tensor(rng.normal((1, 1, 8, 8)), requires_grad=False)
    return grad_check(lambda xx: _dot(aspp(xx), c), x)


def _check_attention(rng, i):
    attn = SelfAttention2d(Rng(600 + i, "attn"), 2)
    attn.gamma.data[...] = 0.5
    x = _rand(rng, (1, 2, 3, 3))
    c = Tensor(rng.normal((1, 2, 3, 3)), requires_grad=False)
    return grad_check(lambda xx, g: _dot(attn(xx), c), [x, attn.gamma])


def _check_batch_norm(rng, i):
    bn = BatchNorm2d(2)
    x = _rand(rng, (2, 2, 3, 3))
    c = Tensor(rng.normal((2, 2, 3, 3)), requires_grad=False)
    return grad_check(lambda xx, g, b: _dot(bn(xx), c), [x, bn.gamma, bn.beta])


def _check_bce(rng, i):
    target = (rng.uniform((10,)) > 0.5).astype(float)
    x = Tensor(rng.uniform((10,), 0.05, 0.95))
    return grad_check(lambda p: bce_loss(p, target), x)


def _check_rec(rng, i):
    # offsets bounded away from zero keep the |.| kink out of probe range
    target = rng.normal((12,))
    gap = rng.uniform((12,), 0.2, 1.0) * np.where(rng.uniform((12,)) > 0.5, 1.0, -1.0)
    x = Tensor(target + gap)
    return grad_check(lambda p: rec_loss(p, target), x)


_PYRAMID = FeaturePyramid(seed=11)
_SMOOTHER = StructureSmoother()


def _check_perceptual(rng, i):
    target = rng.normal((1, 3, 8, 8))
    x = _rand(rng, (1, 3, 8, 8))
    return grad_check(lambda p: perceptual_loss(_PYRAMID, p, target), x)


def _check_structure(rng, i):
    target = rng.normal((1, 3, 6, 6))
    x = _rand(rng, (1, 3, 6, 6))
    return grad_check(lambda p: structure_loss(_SMOOTHER, p, target), x)


def _check_adversarial(rng, i):
    r = _rand(rng, (4, 1))
    f = _rand(rng, (4, 1))
    if i % 2 == 0:
        return grad_check(lambda a, b: d_texture_loss(a, b), [r, f])
    return grad_check(lambda a: g_adversarial_loss(a, 0.0)[0], f)


CHECKS = {
    "conv2d": _check_conv2d,
    "conv2d_transposed": _check_conv2d_transposed,
    "max_pool2": _check_max_pool2,
    "upsample_nearest2": _check_upsample,
    "relu": _make_activation_check("relu"),
    "leaky_relu": _make_activation_check("leaky_relu"),
    "sigmoid": _make_activation_check("sigmoid"),
    "tanh": _make_activation_check("tanh"),
    "elu": _make_activation_check("elu"),
    "elementwise": _check_elementwise,
    "concat": _check_concat,
    "matmul": _check_matmul,
    "softmax": _check_softmax,
    "reduce_sum": _make_reduce_check("sum"),
    "reduce_mean": _make_reduce_check("mean"),
    "reduce_abs_mean": _make_reduce_check("abs_mean"),
    "gated_conv": _check_gated_conv,
    "spectral_norm_conv": _check_sn_conv,
    "dense_block": _check_dense_block,
    "dilated_dense_block": _check_dilated_dense_block,
    "aspp": _check_aspp,
    "self_attention": _check_attention,
    "batch_norm": _check_batch_norm,
    "bce_loss": _check_bce,
    "rec_loss": _check_rec,
    "perceptual_loss": _check_perceptual,
    "structure_loss": _check_structure,
    "adversarial_losses": _check_adversarial,
}


def certify_gradients(instances: int = 20, seed: int = 0, tolerance: float = 1e-4,
                      report=None) -> dict[str, float]:
    """Run every check on `instances` random instances; returns the max
    relative error per operation.  `report(line)` receives one line per op."""
    results = {}
    for name, check in CHECKS.items():
        rng = Rng(seed, f"certify/{name}")
        worst = 0.0
        for i in range(instances):
            worst = max(worst, check(rng, i))
        results[name] = worst
        if report is not None:
            verdict = "ok" if worst <= tolerance else "FAIL"
            report(f"{name:22s} max_rel_err={worst:.3e}  {verdict}")
    return results
