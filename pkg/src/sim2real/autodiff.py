"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Tensors are float32 by default; float64 is supported end to end and is the
required mode for finite-difference gradient checking. A single module-level
tape records one forward pass; ``backward`` consumes it and clears it.
Gradients accumulate into leaf tensors until ``zero_grad`` is called.

Broadcasting is deliberately narrow: a scalar may combine with any tensor,
and a 1-D row may be added to a 2-D matrix (bias rows). Everything else must
be shaped explicitly.
"""

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "AutodiffError",
    "backward",
    "grad_check",
    "no_grad",
    "forward_op",
    "registered_ops",
    "add", "sub", "mul", "div", "neg",
    "exp", "log", "sqrt", "square", "sigmoid", "tanh", "relu", "clip",
    "matmul", "conv2d", "deconv2d",
    "tsum", "tmean", "reshape", "slice_axis", "concat",
]


class AutodiffError(RuntimeError):
    pass


class ShapeMismatchError(ValueError):
    def __init__(self, op, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} vs {tuple(shape_b)}")


class Tensor:
    """Dense N-dimensional array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "_grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        """Accumulated gradient; zeros if backward never reached this tensor."""
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self):
        if self.data.size != 1:
            raise AutodiffError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all shape rules live in the op functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class TapeNode:
    """One recorded operation: output, inputs, and the rule mapping the
    output cotangent to input cotangents."""

    __slots__ = ("op", "out", "inputs", "backward_fn")

    def __init__(self, op, out, inputs, backward_fn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_tape = []
_recording = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference and data preprocessing paths)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _record(op, out_data, inputs, backward_fn):
    out = Tensor(out_data)
    if _recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = TapeNode(op, out, inputs, backward_fn)
        out.node = node
        _tape.append(node)
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf, then clear
    the tape. Rejects non-scalar losses and repeated calls on a spent tape."""
    if not isinstance(loss, Tensor):
        raise AutodiffError("backward expects a Tensor")
    if loss.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not _tape:
        raise AutodiffError("no active tape: run a forward pass before backward()")
    cotangents = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(_tape):
            g = cotangents.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp._grad = gi.copy() if inp._grad is None else inp._grad + gi
                else:
                    prev = cotangents.get(id(inp.node.out))
                    cotangents[id(inp.node.out)] = gi if prev is None else prev + gi
    finally:
        _tape.clear()


def _unbroadcast(g, shape):
    """Sum a gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    if shape == () or int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    # bias-row case: (B, F) gradient down to (F,)
    return g.sum(axis=0).reshape(shape)


def _check_elementwise(op, a, b):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.data.ndim == 2 and a.data.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise ShapeMismatchError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _as_tensor(b, a)
    _check_elementwise("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), bwd)


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _as_tensor(b, a)
    _check_elementwise("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), bwd)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _as_tensor(b, a)
    _check_elementwise("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), bwd)


def div(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _as_tensor(b, a)
    _check_elementwise("div", a, b)
    out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("div", out, (a, b), bwd)


def neg(a):
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * (0.5 / out),))


def square(a):
    return _record("square", a.data * a.data, (a,), lambda g: (g * (2.0 * a.data),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    out = np.maximum(a.data, 0)
    return _record("relu", out, (a,), lambda g: (g * (a.data > 0),))


def clip(a, lo, hi):
    """Clamp values; gradient is passed through only inside the interval."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _record("clip", out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions / shape

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).astype(a.dtype, copy=True),)

    return _record("sum", out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / n, a.shape).astype(a.dtype, copy=True),)

    return _record("mean", out, (a,), bwd)


def reshape(a, shape):
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record("slice", out, (a,), bwd)


def concat(tensors, axis):
    tensors = tuple(tensors)
    base = tensors[0]
    for t in tensors[1:]:
        if t.data.ndim != base.data.ndim:
            raise ShapeMismatchError("concat", base.shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tensors, bwd)


# ---------------------------------------------------------------------------
# convolutions, NCHW layout

def conv_out_size(n, kernel, stride, padding):
    return (n + 2 * padding - kernel) // stride + 1


def deconv_out_size(n, kernel, stride, padding, output_padding=0):
    return (n - 1) * stride - 2 * padding + kernel + output_padding


def _im2col(x, kh, kw, stride, padding):
    B, C, H, W = x.shape
    oh = conv_out_size(H, kh, stride, padding)
    ow = conv_out_size(W, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (B, C, kh, kw, oh, ow), (sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False)
    cols = view.transpose(0, 4, 5, 1, 2, 3).reshape(B * oh * ow, C * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, padding, oh, ow):
    B, C, H, W = x_shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    blocks = cols.reshape(B, oh, ow, C, kh, kw)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv2d(x, w, bias=None, stride=1, padding=0):
    """2-D convolution. x: (B, C, H, W), w: (Cout, C, kh, kw), bias: (Cout,)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError("conv2d", x.shape, w.shape)
    B, C, H, W = x.shape
    cout, _, kh, kw = w.shape
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeMismatchError("conv2d", x.shape, w.shape)
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, oh, ow, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(w.shape)
        gb = gmat.sum(axis=0) if bias is not None else None
        gcols = gmat @ wmat
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding, oh, ow)
        if bias is not None:
            return gx, gw, gb
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record("conv2d", out, inputs, bwd)


def deconv2d(x, w, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution (adjoint of conv2d's linear map).

    x: (B, Cin, H, W), w: (Cin, Cout, kh, kw). Output spatial size is
    (n-1)*stride - 2*padding + kernel + output_padding, the exact inverse of
    the conv2d size rule when output_padding = (n_in + 2p - k) mod stride.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError("deconv2d", x.shape, w.shape)
    if output_padding >= stride:
        raise ValueError(f"output_padding {output_padding} must be < stride {stride}")
    B, cin, H, W = x.shape
    _, cout, kh, kw = w.shape
    oh = deconv_out_size(H, kh, stride, padding, output_padding)
    ow = deconv_out_size(W, kw, stride, padding, output_padding)
    # scatter: the adjoint of im2col-gather with conv output size (H, W)
    wmat = w.data.reshape(cin, cout * kh * kw)
    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    cols = xmat @ wmat
    # scatter into the padded output canvas
    canvas = np.zeros((B, cout, oh + 2 * padding, ow + 2 * padding), dtype=x.dtype)
    blocks = cols.reshape(B, H, W, cout, kh, kw)
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i:i + stride * H:stride, j:j + stride * W:stride] += \
                blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = canvas[:, :, padding:padding + oh, padding:padding + ow]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def bwd(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
            if padding else g
        # gather back: same windows the forward scattered into
        sb, sc, sh, sw = gp.strides
        view = np.lib.stride_tricks.as_strided(
            gp, (B, cout, kh, kw, H, W), (sb, sc, sh, sw, sh * stride, sw * stride),
            writeable=False)
        gcols = np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(B * H * W, -1)
        gx = (gcols @ wmat.T).reshape(B, H, W, cin).transpose(0, 3, 1, 2)
        gw = (xmat.T @ gcols).reshape(w.shape)
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record("deconv2d", out, inputs, bwd)


# ---------------------------------------------------------------------------
# op registry and generic dispatch

_OPS = {
    "add": ("elementwise", add),
    "sub": ("elementwise", sub),
    "mul": ("elementwise", mul),
    "div": ("elementwise", div),
    "neg": ("elementwise", neg),
    "exp": ("elementwise", exp),
    "log": ("elementwise", log),
    "sqrt": ("elementwise", sqrt),
    "square": ("elementwise", square),
    "sigmoid": ("elementwise", sigmoid),
    "tanh": ("elementwise", tanh),
    "relu": ("elementwise", relu),
    "clip": ("elementwise", clip),
    "matmul": ("matmul", matmul),
    "conv2d": ("conv2d", conv2d),
    "deconv2d": ("deconv2d", deconv2d),
    "sum": ("reduce", tsum),
    "mean": ("reduce", tmean),
    "reshape": ("reduce", reshape),
    "slice": ("slice", slice_axis),
    "concat": ("concat", concat),
}


def registered_ops():
    """name -> (category, callable) for every differentiable op."""
    return dict(_OPS)


def forward_op(name, *args, **kwargs):
    """Dispatch by op name; categories follow the tape's op taxonomy."""
    if name not in _OPS:
        raise KeyError(f"unknown op {name!r}; known: {sorted(_OPS)}")
    return _OPS[name][1](*args, **kwargs)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f must map the float64 tensor x to a scalar Tensor. The relative error is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|), maximized over
    components of x.
    """
    if x.dtype != np.float64:
        raise AutodiffError("grad_check requires float64 tensors")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not x.requires_grad:
        raise AutodiffError("grad_check requires x.requires_grad")

    x.zero_grad()
    y = f(x)
    if y.size != 1:
        raise AutodiffError("grad_check requires a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise AutodiffError("non-finite value in f(x)")
    backward(y)
    analytic = x.grad.copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
