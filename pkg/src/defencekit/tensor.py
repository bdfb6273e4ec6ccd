"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything else in the package is built from the primitives here: plain and
transposed convolution, 2x2 max pooling, nearest-neighbour upsampling, the
usual elementwise/reduction/matmul operations, and a finite-difference
gradient checker.  All data is float64 in row-major order; image-like values
use N x C x H x W layout.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Rng",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "grad_check",
    "conv2d",
    "conv2d_transposed",
    "max_pool2",
    "upsample_nearest2",
    "activation",
    "elementwise",
    "concat",
    "matmul",
    "softmax",
    "reduce",
    "sum_axes",
    "mean_axes",
    "add",
    "sub",
    "mul",
    "neg",
    "log",
    "power",
    "absolute",
    "clip",
    "mul_const",
    "add_const",
    "reshape",
    "permute",
    "as_tensor",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    Tensors are value-like: operations never mutate their inputs.  When a
    `Tape` is active, every primitive records a pull-back closure so that
    `Tape.backward` can later populate `.grad` on everything reachable from
    a scalar loss.  Tensors with `requires_grad=False` (e.g. input batches)
    terminate the recording, which keeps constant branches out of the tape.
    """

    def __init__(self, data, is_param: bool = False, name: str | None = None,
                 requires_grad: bool = True):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.is_param = is_param
        self.name = name
        self.requires_grad = requires_grad or is_param
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A copy that is cut off from any recorded graph."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; scalars are folded into constant ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return reduce(self, "sum")

    def mean(self) -> "Tensor":
        return reduce(self, "mean")

    def __repr__(self):  # pragma: no cover - debugging aid
        tag = " param" if self.is_param else ""
        return f"Tensor(shape={self.shape}{tag})"


class Tape:
    """Execution-ordered record of primitive operations for one forward pass.

    Records are appended as operations execute, so inputs always precede the
    operations that consume them; the reverse sweep walks the list backwards
    exactly once.  A tape is confined to a single thread and is discarded
    after `backward`.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, pull) -> None:
        out.node = len(self._records)
        out._tape = self
        self._records.append((out, pull))

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` on every tensor reachable from `loss`.

        Gradients of tensors not on a path to the loss are left untouched.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        for out, pull in reversed(self._records):
            if out.grad is not None:
                pull(out.grad)


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss over the tape that recorded it."""
    if loss._tape is None:
        raise ValueError("loss is not attached to a tape; run the forward pass "
                         "inside `with Tape() as tape:`")
    loss._tape.backward(loss)


def _current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _attach(data: np.ndarray, pull, inputs) -> Tensor:
    # any NaN/Inf entry makes the whole sum non-finite, so one cheap
    # reduction detects bad values without materializing a boolean mask
    if not np.isfinite(data.sum()):
        raise NonFiniteError("forward operation produced a non-finite value")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape = _current_tape()
        if tape is not None:
            tape._record(out, pull)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # copy: g may be a view
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def pull(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _attach(data, pull, (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def pull(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _attach(data, pull, (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def pull(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _attach(data, pull, (a, b))


def neg(a: Tensor) -> Tensor:
    return _attach(-a.data, lambda g: _accum(a, -g), (a,))


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a plain float or ndarray that carries no gradient."""
    c = np.asarray(c, dtype=np.float64)
    data = a.data * c
    return _attach(data, lambda g: _accum(a, _unbroadcast(g * c, a.data.shape)), (a,))


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    data = a.data + c
    return _attach(data, lambda g: _accum(a, _unbroadcast(g, a.data.shape)), (a,))


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _attach(data, lambda g: _accum(a, g / a.data), (a,))


def power(a: Tensor, p: float) -> Tensor:
    data = a.data ** p
    return _attach(data, lambda g: _accum(a, g * p * a.data ** (p - 1.0)), (a,))


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)
    return _attach(data, lambda g: _accum(a, g * np.sign(a.data)), (a,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _attach(data, lambda g: _accum(a, g * inside), (a,))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

_LEAKY_SLOPE = 0.2


def activation(a: Tensor, kind: str) -> Tensor:
    x = a.data
    if kind == "relu":
        data = np.maximum(x, 0.0)
        return _attach(data, lambda g: _accum(a, g * (x > 0)), (a,))
    if kind == "leaky_relu":
        data = np.where(x > 0, x, _LEAKY_SLOPE * x)
        return _attach(data, lambda g: _accum(a, g * np.where(x > 0, 1.0, _LEAKY_SLOPE)), (a,))
    if kind == "sigmoid":
        y = _sigmoid(x)
        return _attach(y, lambda g: _accum(a, g * y * (1.0 - y)), (a,))
    if kind == "tanh":
        y = np.tanh(x)
        return _attach(y, lambda g: _accum(a, g * (1.0 - y * y)), (a,))
    if kind == "elu":
        y = np.where(x > 0, x, np.expm1(x))
        return _attach(y, lambda g: _accum(a, g * np.where(x > 0, 1.0, y + 1.0)), (a,))
    if kind == "identity":
        return _attach(x.copy(), lambda g: _accum(a, g), (a,))
    raise ValueError(f"unknown activation kind {kind!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    return _attach(data, lambda g: _accum(a, g.reshape(a.data.shape)), (a,))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)
    return _attach(data, lambda g: _accum(a, g.transpose(inverse)), (a,))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def pull(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accum(t, g[tuple(index)])

    return _attach(data, pull, tensors)


# ---------------------------------------------------------------------------
# Matmul / softmax / reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ShapeError(f"matmul needs two 2-D or two 3-D tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data
    swap = (-1, -2) if a.ndim == 2 else (0, 2, 1)

    def pull(g):
        _accum(a, g @ b.data.transpose(swap))
        _accum(b, a.data.transpose(swap) @ g)

    return _attach(data, pull, (a, b))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def pull(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _attach(y, pull, (a,))


def reduce(a: Tensor, kind: str) -> Tensor:
    n = a.data.size
    if kind == "sum":
        data = a.data.sum()
        pull = lambda g: _accum(a, np.broadcast_to(g, a.data.shape))
    elif kind == "mean":
        data = a.data.mean()
        pull = lambda g: _accum(a, np.broadcast_to(g / n, a.data.shape))
    elif kind == "abs_mean":
        data = np.abs(a.data).mean()
        pull = lambda g: _accum(a, g * np.sign(a.data) / n)
    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return _attach(np.asarray(data), pull, (a,))


def sum_axes(a: Tensor, axes, keepdims: bool = True) -> Tensor:
    axes = tuple(axes)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def pull(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _attach(data, pull, (a,))


def mean_axes(a: Tensor, axes, keepdims: bool = True) -> Tensor:
    axes = tuple(axes)
    count = int(np.prod([a.data.shape[i] for i in axes]))
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def pull(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g / count, a.data.shape))

    return _attach(data, pull, (a,))


# ---------------------------------------------------------------------------
# Convolution family
# ---------------------------------------------------------------------------


def _conv_out_extent(extent: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (extent + 2 * padding - (k - 1) * dilation - 1) // stride + 1


_BLOCK_ELEMS = 1 << 19  # patch-buffer budget (~4 MB) so temporaries stay hot


def _row_block(n: int, wo: int, ckk: int, ho: int) -> int:
    return max(1, min(ho, _BLOCK_ELEMS // max(1, n * wo * ckk)))


def _fill_block(block6, xp, rbc, r0, kh, kw, stride, dilation, wo):
    for i in range(kh):
        for j in range(kw):
            hi = i * dilation + r0 * stride
            wj = j * dilation
            block6[:, :rbc, :, :, i, j] = xp[:, :, hi:hi + rbc * stride:stride,
                                             wj:wj + wo * stride:stride].transpose(0, 2, 3, 1)


def _conv_forward(xp, w2dT, n, o, ckk, kh, kw, stride, dilation, ho, wo):
    """Row-blocked im2col + GEMM; small reused buffers keep the working set
    in cache instead of allocating one huge patch matrix."""
    c = ckk // (kh * kw)
    rb = _row_block(n, wo, ckk, ho)
    out = np.empty((n, o, ho, wo))
    block6 = np.empty((n, rb, wo, c, kh, kw))
    for r0 in range(0, ho, rb):
        rbc = min(rb, ho - r0)
        _fill_block(block6, xp, rbc, r0, kh, kw, stride, dilation, wo)
        ob = block6[:, :rbc].reshape(n * rbc * wo, ckk) @ w2dT
        out[:, :, r0:r0 + rbc, :] = ob.reshape(n, rbc, wo, o).transpose(0, 3, 1, 2)
    return out


def conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0,
               dilation: int = 1) -> np.ndarray:
    """Forward cross-correlation on plain arrays (no tape, no bias)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = _conv_out_extent(h, kh, stride, padding, dilation)
    wo = _conv_out_extent(wd, kw, stride, padding, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    w2dT = np.ascontiguousarray(w.reshape(o, -1).T)
    return _conv_forward(xp, w2dT, n, o, c * kh * kw, kh, kw, stride, dilation, ho, wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Zero-padded 2-D cross-correlation, differentiable in x, w and b."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {c2}")
    if kh < 1 or stride < 1 or dilation < 1:
        raise ShapeError("kernel, stride and dilation must all be >= 1")
    eff_h = (kh - 1) * dilation + 1
    eff_w = (kw - 1) * dilation + 1
    if eff_h > h + 2 * padding or eff_w > wd + 2 * padding:
        raise ShapeError(
            f"effective kernel {eff_h}x{eff_w} exceeds padded input "
            f"{h + 2 * padding}x{wd + 2 * padding}")
    ho = _conv_out_extent(h, kh, stride, padding, dilation)
    wo = _conv_out_extent(wd, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")
    if b is not None and b.data.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {b.data.shape}")

    ckk = c * kh * kw
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    w2d = w.data.reshape(o, -1)
    data = _conv_forward(xp, np.ascontiguousarray(w2d.T), n, o, ckk,
                         kh, kw, stride, dilation, ho, wo)
    if b is not None:
        data += b.data.reshape(1, o, 1, 1)

    def pull(g):
        # same row blocking as the forward pass: rebuild each patch block once
        # and feed both the weight-gradient and input-gradient GEMMs from it
        rb = _row_block(n, wo, ckk, ho)
        block6 = np.empty((n, rb, wo, c, kh, kw))
        gw = np.zeros((o, ckk)) if w.requires_grad else None
        gxp = np.zeros(xp.shape) if x.requires_grad else None
        for r0 in range(0, ho, rb):
            rbc = min(rb, ho - r0)
            gb = g[:, :, r0:r0 + rbc, :].transpose(0, 2, 3, 1).reshape(-1, o)
            if gw is not None:
                _fill_block(block6, xp, rbc, r0, kh, kw, stride, dilation, wo)
                gw += gb.T @ block6[:, :rbc].reshape(-1, ckk)
            if gxp is not None:
                gcols = (gb @ w2d).reshape(n, rbc, wo, c, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        hi = i * dilation + r0 * stride
                        wj = j * dilation
                        gxp[:, :, hi:hi + rbc * stride:stride,
                            wj:wj + wo * stride:stride] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if gw is not None:
            _accum(w, gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if gxp is not None:
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
            _accum(x, gxp)

    return _attach(data, pull, (x, w) if b is None else (x, w, b))


def conv2d_transposed(x: Tensor, w: Tensor, b: Tensor | None = None,
                      stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d: scatters each input pixel through the kernel.

    Weight layout is C_in x C_out x k x k.  Output extent is
    (H - 1) * stride - 2 * padding + k.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_transposed needs 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    c2, o, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d_transposed channel mismatch: input has {c}, weight expects {c2}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    hf = (h - 1) * stride + kh
    wf = (wd - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d_transposed output would be empty")
    if b is not None and b.data.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {b.data.shape}")

    # scatter x through the kernel into the full (uncropped) canvas; this is
    # the col2im adjoint of the gather that conv2d performs
    x2d = x.data.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    w2d = w.data.reshape(c, o * kh * kw)
    cols = (x2d @ w2d).reshape(n, h, wd, o, kh, kw)
    full = np.zeros((n, o, hf, wf))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + h * stride:stride, j:j + wd * stride:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    data = full[:, :, padding:hf - padding, padding:wf - padding].copy()
    if b is not None:
        data += b.data.reshape(1, o, 1, 1)

    def pull(g):
        gfull = np.zeros((n, o, hf, wf))
        gfull[:, :, padding:hf - padding, padding:wf - padding] = g
        gcols = np.empty((n, h, wd, o, kh, kw))
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, :, :, i, j] = gfull[:, :, i:i + h * stride:stride,
                                                j:j + wd * stride:stride].transpose(0, 2, 3, 1)
        gcols2 = gcols.reshape(n * h * wd, o * kh * kw)
        if x.requires_grad:
            _accum(x, (gcols2 @ w2d.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2))
        if w.requires_grad:
            _accum(w, (x2d.T @ gcols2).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _attach(data, pull, (x, w) if b is None else (x, w, b))


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first
    (top-left first, row-major) occurrence."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2 needs a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial extents, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2) \
        .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def pull(g):
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accum(x, gx)

    return _attach(data, pull, (x,))


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block; the adjoint sums each block."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2 needs a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def pull(g):
        _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _attach(data, pull, (x,))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, points, epsilon: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar-valued `f` against central
    differences at `points`; returns the max relative error over all
    coordinates, where error = |a - n| / max(1e-8, |a| + |n|).
    """
    if isinstance(points, Tensor):
        points = [points]
    points = list(points)
    for p in points:
        p.requires_grad = True

    with Tape() as tape:
        out = f(*points)
        if out.data.size != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in points]
    for p in points:
        p.zero_grad()

    worst = 0.0
    for p, a in zip(points, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = f(*points).item()
            flat[i] = orig - epsilon
            lo = f(*points).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError("function not finite near the probe point")
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Deterministic random streams
# ---------------------------------------------------------------------------


class Rng:
    """Counter-based random stream keyed by (seed, label, counter).

    Every draw derives a fresh generator from the triple and bumps the
    counter, so identical construction plus an identical call sequence
    reproduces identical values, and the whole state is three fields.
    """

    def __init__(self, seed: int, label: str = "root", counter: int = 0):
        self.seed = int(seed)
        self.label = label
        self.counter = int(counter)

    def stream(self, label: str) -> "Rng":
        """An independent child stream; does not advance this one."""
        return Rng(self.seed, f"{self.label}/{label}", 0)

    def _generator(self) -> np.random.Generator:
        digest = hashlib.sha256(self.label.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *words, self.counter])
        self.counter += 1
        return np.random.Generator(np.random.Philox(seq))

    def normal(self, shape=(), std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return self._generator().normal(mean, std, size=shape)

    def uniform(self, shape=(), lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return self._generator().uniform(lo, hi, size=shape)

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        return self._generator().integers(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def state(self) -> tuple[int, str, int]:
        return (self.seed, self.label, self.counter)

    @classmethod
    def from_state(cls, state) -> "Rng":
        seed, label, counter = state
        return cls(int(seed), str(label), int(counter))
