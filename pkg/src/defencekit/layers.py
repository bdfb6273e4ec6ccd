"""Network building blocks: gated and spectrally normalized convolutions,
dense / dilated-dense blocks, multi-rate atrous pooling and self-attention.

Layers hold their parameters as `Tensor`s with `is_param=True`; a small
`Module` base provides recursive parameter/buffer discovery so optimizers and
checkpoints can address everything by name.  Parameter sets are immutable
during a forward pass; only the training step mutates them.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Rng, ShapeError, Tensor

__all__ = [
    "Module",
    "Conv2d",
    "ConvTranspose2d",
    "Linear",
    "BatchNorm2d",
    "GatedConv2d",
    "SpectralNormConv2d",
    "spectral_norm_sigma",
    "DenseBlock",
    "Aspp",
    "SelfAttention2d",
]


class Module:
    """Minimal container: walks its attributes to find params and buffers."""

    training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}", kind="param")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}", kind="buffer")

    def modules(self):
        yield self
        for value in vars(self).values():
            for m in _submodules(value):
                yield from m.modules()

    def train(self, flag: bool = True):
        for m in self.modules():
            m.training = flag
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, path, kind):
    if isinstance(value, Tensor):
        if kind == "param" and value.is_param:
            yield path, value
    elif isinstance(value, Module):
        if kind == "param":
            yield from value.named_parameters(path + ".")
        else:
            yield from value.named_buffers(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}", kind)
    elif kind == "buffer" and isinstance(value, _Buffer):
        yield path, value


def _submodules(value):
    if isinstance(value, Module):
        yield value
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _submodules(item)


class _Buffer(np.ndarray):
    """An ndarray subclass marking non-trainable persistent state."""


def buffer(arr) -> _Buffer:
    return np.asarray(arr, dtype=np.float64).view(_Buffer)


def he_normal(rng: Rng, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape, std=np.sqrt(2.0 / fan_in))


class Conv2d(Module):
    """Plain convolution with an optional fused activation."""

    def __init__(self, rng: Rng, in_ch: int, out_ch: int, kernel: int = 3,
                 stride: int = 1, padding: int | None = None, dilation: int = 1,
                 act: str = "identity", zero_init: bool = False):
        self.stride = stride
        self.padding = (kernel // 2) * dilation if padding is None else padding
        self.dilation = dilation
        self.act = act
        fan_in = in_ch * kernel * kernel
        w = np.zeros((out_ch, in_ch, kernel, kernel)) if zero_init else \
            he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in)
        self.weight = Tensor(w, is_param=True)
        self.bias = Tensor(np.zeros(out_ch), is_param=True)

    def forward(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)
        if self.act != "identity":
            out = T.activation(out, self.act)
        return out


class ConvTranspose2d(Module):
    def __init__(self, rng: Rng, in_ch: int, out_ch: int, kernel: int = 2,
                 stride: int = 2, padding: int = 0):
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(he_normal(rng, (in_ch, out_ch, kernel, kernel),
                                       in_ch * kernel * kernel), is_param=True)
        self.bias = Tensor(np.zeros(out_ch), is_param=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_transposed(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng: Rng, in_dim: int, out_dim: int):
        self.weight = Tensor(he_normal(rng, (in_dim, out_dim), in_dim), is_param=True)
        self.bias = Tensor(np.zeros(out_dim), is_param=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class BatchNorm2d(Module):
    """Per-channel normalization over (N, H, W) with running averages for eval."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones((1, channels, 1, 1)), is_param=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1)), is_param=True)
        self.running_mean = buffer(np.zeros((1, channels, 1, 1)))
        self.running_var = buffer(np.ones((1, channels, 1, 1)))

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            mu = T.mean_axes(x, (0, 2, 3))
            centered = T.sub(x, mu)
            var = T.mean_axes(T.mul(centered, centered), (0, 2, 3))
            inv = T.power(var + self.eps, -0.5)
            xhat = T.mul(centered, inv)
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mu.data
            self.running_var *= 1.0 - m
            self.running_var += m * var.data
        else:
            inv = 1.0 / np.sqrt(np.asarray(self.running_var) + self.eps)
            xhat = T.mul_const(T.add_const(x, -np.asarray(self.running_mean)), inv)
        return T.add(T.mul(xhat, self.gamma), self.beta)


class GatedConv2d(Module):
    """Convolution gated by a sigmoid of a second convolution over the same
    input: out = phi(conv_f(x)) * sigmoid(conv_g(x)).  The two filter banks
    have identical shapes and independent parameters."""

    def __init__(self, rng: Rng, in_ch: int, out_ch: int, kernel: int = 3,
                 stride: int = 1, padding: int | None = None, dilation: int = 1,
                 feature_act: str = "elu"):
        self.stride = stride
        self.padding = (kernel // 2) * dilation if padding is None else padding
        self.dilation = dilation
        self.feature_act = feature_act
        fan_in = in_ch * kernel * kernel
        self.weight_f = Tensor(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in),
                               is_param=True)
        self.weight_g = Tensor(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in),
                               is_param=True)
        self.bias_f = Tensor(np.zeros(out_ch), is_param=True)
        self.bias_g = Tensor(np.zeros(out_ch), is_param=True)

    def forward(self, x: Tensor) -> Tensor:
        feat = T.conv2d(x, self.weight_f, self.bias_f, self.stride, self.padding, self.dilation)
        gate = T.conv2d(x, self.weight_g, self.bias_g, self.stride, self.padding, self.dilation)
        return T.mul(T.activation(feat, self.feature_act), T.activation(gate, "sigmoid"))


def _l2norm(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return v / (np.linalg.norm(v) + eps)


def spectral_norm_sigma(w: np.ndarray, u: np.ndarray, iterations: int = 1,
                        refine: bool = False, tol: float = 1e-10,
                        max_iterations: int = 20000):
    """Power-iteration estimate of the top singular value of matrix `w`.

    Runs `iterations` u/v updates; with `refine=True` (certification mode)
    it keeps iterating past that floor until successive estimates agree to
    `tol` relative, so the estimate is trustworthy even for slow-gap
    matrices.  Returns (sigma, updated u).
    """
    sigma = 0.0
    count = 0
    v = None
    while True:
        v = _l2norm(w.T @ u)
        u = _l2norm(w @ v)
        count += 1
        new_sigma = float(u @ w @ v)
        done = count >= iterations
        if refine:
            done = count >= max(iterations, 30) and (
                abs(new_sigma - sigma) <= tol * max(abs(new_sigma), 1e-30)
                or count >= max_iterations)
        sigma = new_sigma
        if done:
            return sigma, u


class SpectralNormConv2d(Module):
    """Convolution whose weight is divided by its estimated top singular value.

    The estimate comes from power iteration on the O x (C*k*k) matrix view of
    the weight with a persistent left vector `u`; the scale is treated as a
    constant within each step so gradients flow through the raw weight only.
    `u` is updated only in training mode (single-threaded training step).
    """

    def __init__(self, rng: Rng, in_ch: int, out_ch: int, kernel: int = 4,
                 stride: int = 2, padding: int = 2, power_iterations: int = 1):
        self.stride = stride
        self.padding = padding
        self.power_iterations = power_iterations
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in),
                             is_param=True)
        self.bias = Tensor(np.zeros(out_ch), is_param=True)
        self.u = buffer(_l2norm(rng.normal((out_ch,))))

    def normalized_weight(self) -> Tensor:
        w = self.weight.data.reshape(self.weight.shape[0], -1)
        if not w.any():
            raise ZeroDivisionError("spectral norm of an all-zero weight is undefined")
        if self.training:
            sigma, u = spectral_norm_sigma(w, np.asarray(self.u), self.power_iterations)
            self.u[...] = u
        else:
            u = np.asarray(self.u)
            v = _l2norm(w.T @ u)
            sigma = float(u @ w @ v)
        return T.mul_const(self.weight, 1.0 / sigma)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.normalized_weight(), self.bias, self.stride, self.padding)


def spectral_norm_apply(weight: Tensor, u: np.ndarray, power_iterations: int = 1,
                        refine: bool = False):
    """Normalize `weight` (any 2-D-reshapable tensor) by its estimated top
    singular value; returns (normalized weight, sigma, updated u)."""
    w = weight.data.reshape(weight.shape[0], -1)
    if not w.any():
        raise ZeroDivisionError("spectral norm of an all-zero weight is undefined")
    sigma, u = spectral_norm_sigma(w, u, power_iterations, refine=refine)
    return T.mul_const(weight, 1.0 / sigma), sigma, u


class DenseBlock(Module):
    """Stack where layer i consumes the concatenation of the block input and
    all previous layer outputs; output channels grow to C_in + L * growth.

    `dilations` gives one rate per layer (all 1 for a plain block; e.g.
    2, 4, 6, 8 for a dilated block).  Padding equals the dilation so spatial
    size is preserved.  Layers are gated convolutions when `gated`, otherwise
    plain convolutions followed by `act`.
    """

    def __init__(self, rng: Rng, in_ch: int, growth: int, layers: int,
                 dilations=None, gated: bool = False, act: str = "relu"):
        if dilations is None:
            dilations = [1] * layers
        if len(dilations) != layers:
            raise ValueError("need one dilation per layer")
        self.layers = []
        ch = in_ch
        for i, d in enumerate(dilations):
            if gated:
                layer = GatedConv2d(rng.stream(f"dense{i}"), ch, growth, 3,
                                    padding=d, dilation=d)
            else:
                layer = Conv2d(rng.stream(f"dense{i}"), ch, growth, 3,
                               padding=d, dilation=d, act=act)
            self.layers.append(layer)
            ch += growth
        self.out_channels = ch

    def forward(self, x: Tensor) -> Tensor:
        feats = x
        for layer in self.layers:
            feats = T.concat([feats, layer(feats)], axis=1)
        return feats


class Aspp(Module):
    """Sum of four parallel atrous convolutions at rates 2, 4, 6, 8, each
    padded by its rate so every branch has the input's spatial size."""

    RATES = (2, 4, 6, 8)

    def __init__(self, rng: Rng, in_ch: int, out_ch: int):
        self.branches = [
            Conv2d(rng.stream(f"rate{r}"), in_ch, out_ch, 3, padding=r, dilation=r)
            for r in self.RATES
        ]

    def forward(self, x: Tensor) -> Tensor:
        out = self.branches[0](x)
        for branch in self.branches[1:]:
            out = T.add(out, branch(x))
        return out


class SelfAttention2d(Module):
    """Scaled dot-product attention over all spatial positions.

    1x1 projections produce queries/keys of dimension `key_dim` and values of
    the input width; out = x + gamma * softmax(Q K^T / sqrt(d_k)) V with the
    residual scale gamma learned and initialized to zero, so the layer starts
    as the identity.
    """

    def __init__(self, rng: Rng, channels: int, key_dim: int | None = None):
        self.channels = channels
        self.key_dim = key_dim or max(1, channels // 8)
        self.query = Conv2d(rng.stream("q"), channels, self.key_dim, kernel=1, padding=0)
        self.key = Conv2d(rng.stream("k"), channels, self.key_dim, kernel=1, padding=0)
        self.value = Conv2d(rng.stream("v"), channels, channels, kernel=1, padding=0)
        self.gamma = Tensor(np.zeros(()), is_param=True)
        self.last_attention: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"attention expects {self.channels} channels, got {c}")
        L = h * w
        q = T.permute(T.reshape(self.query(x), (n, self.key_dim, L)), (0, 2, 1))
        k = T.reshape(self.key(x), (n, self.key_dim, L))
        v = T.permute(T.reshape(self.value(x), (n, c, L)), (0, 2, 1))
        scores = T.mul_const(T.matmul(q, k), 1.0 / np.sqrt(self.key_dim))
        attn = T.softmax(scores, axis=-1)
        self.last_attention = attn.data
        mixed = T.reshape(T.permute(T.matmul(attn, v), (0, 2, 1)), (n, c, h, w))
        return T.add(x, T.mul(self.gamma, mixed))
