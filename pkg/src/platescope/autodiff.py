"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is define-by-run: operations executed inside a ``Tape`` context
record a backward closure, and ``backward(loss)`` replays the tape in exact
reverse recording order, accumulating gradients additively into every tensor
that contributed to the loss. Operations executed with no tape active are
plain numpy forwards (used for teacher/inference passes, which must never
receive gradients).

Layout is row-major float64 throughout. There is no implicit broadcasting
beyond bias-add (trailing dimension) and scalar scale/shift.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "add",
    "add_scalar",
    "add_channel_bias",
    "sub",
    "mul",
    "scale",
    "neg",
    "log",
    "cos",
    "acos",
    "clip",
    "relu",
    "matmul",
    "transpose",
    "dense",
    "conv2d",
    "depthwise_conv2d",
    "depthwise_separable_conv",
    "mean_pool2d",
    "l2_normalize_rows",
    "softmax_rows",
    "log_softmax_rows",
    "pick_per_row",
    "set_per_row",
    "tsum",
    "tmean",
]


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "node_id", "_tape")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return list(self.data.shape)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Tape:
    """Ordered record of operations; recording order is a topological order."""

    def __init__(self):
        self.ops = []  # list of (output Tensor, backward closure)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, bw) -> None:
        out.node_id = len(self.ops)
        out._tape = self
        self.ops.append((out, bw))

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != ():
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        loss.grad = np.ones((), dtype=np.float64)
        # Exact reverse recording order; ops whose output never received a
        # gradient did not feed the loss and are skipped.
        for idx in range(loss.node_id, -1, -1):
            out, bw = self.ops[idx]
            if out.grad is not None:
                bw(out.grad)


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Populate grads of everything reachable from a scalar recorded loss."""
    if loss._tape is None:
        raise ValueError("loss is not attached to any tape; run the forward inside `with Tape():`")
    loss._tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unary(x: Tensor, out_data: np.ndarray, grad_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, lambda g: _accum(x, grad_fn(g)))
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    """Elementwise sum; also accepts a trailing-dimension bias as ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    bias_mode = b.data.ndim == 1 and a.data.ndim > 1 and a.data.shape[-1] == b.data.shape[0]
    if not bias_mode and a.data.shape != b.data.shape:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)
    tape = _active_tape()
    if tape is not None:
        lead = tuple(range(a.data.ndim - 1))

        def bw(g):
            _accum(a, g)
            _accum(b, g.sum(axis=lead) if bias_mode else g)

        tape.record(out, bw)
    return out


def add_scalar(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _unary(x, x.data + float(c), lambda g: g)


def add_channel_bias(x, b) -> Tensor:
    """Add a per-channel bias [C] to a feature map [N,C,H,W]."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 4 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_channel_bias: got map {x.shape} and bias {b.shape}")
    out = Tensor(x.data + b.data[None, :, None, None])
    tape = _active_tape()
    if tape is not None:

        def bw(g):
            _accum(x, g)
            _accum(b, g.sum(axis=(0, 2, 3)))

        tape.record(out, bw)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data - b.data)
    tape = _active_tape()
    if tape is not None:

        def bw(g):
            _accum(a, g)
            _accum(b, -g)

        tape.record(out, bw)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)
    tape = _active_tape()
    if tape is not None:
        ad, bd = a.data, b.data

        def bw(g):
            _accum(a, g * bd)
            _accum(b, g * ad)

        tape.record(out, bw)
    return out


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    return _unary(x, x.data * s, lambda g: g * s)


def neg(x) -> Tensor:
    return scale(x, -1.0)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda g: g / x.data)


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.cos(x.data), lambda g: -g * np.sin(x.data))


def acos(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.arccos(x.data), lambda g: -g / np.sqrt(1.0 - x.data * x.data))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _unary(x, np.clip(x.data, lo, hi), lambda g: g * mask)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _unary(x, np.maximum(x.data, 0.0), lambda g: g * mask)


# ---------------------------------------------------------------------------
# linear algebra


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    return _unary(x, x.data.T.copy(), lambda g: g.T)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    tape = _active_tape()
    if tape is not None:
        ad, bd = a.data, b.data

        def bw(g):
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)

        tape.record(out, bw)
    return out


def dense(x, weight, bias=None) -> Tensor:
    """Affine map [N,D] @ [D,K] (+ bias [K])."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# convolutions


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv_args(stride: int, padding: int) -> None:
    if stride < 1:
        raise ShapeError(f"conv: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv: padding must be >= 0, got {padding}")


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [N,C,H,W] with [F,C,kh,kw] filters."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if c != ck:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ck} (shapes {x.shape}, {kernel.shape})")
    _check_conv_args(stride, padding)
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kernel.shape} does not fit input {x.shape} at stride={stride}, padding={padding}")

    xp = _pad_hw(x.data, padding)
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    cols = view.reshape(n, c * kh * kw, ho * wo)  # copies: the im2col buffer
    km = kernel.data.reshape(f, c * kh * kw)
    out = Tensor(np.matmul(km, cols).reshape(n, f, ho, wo))

    tape = _active_tape()
    if tape is not None:

        def bw(g):
            g2 = g.reshape(n, f, ho * wo)
            _accum(kernel, np.einsum("nfl,nkl->fk", g2, cols).reshape(kernel.data.shape))
            dcols = np.matmul(km.T, g2).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            _accum(x, dxp[:, :, padding : padding + h, padding : padding + w])

        tape.record(out, bw)
    return out


def depthwise_conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution: [N,C,H,W] with one [kh,kw] filter per channel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 3:
        raise ShapeError(f"depthwise_conv2d: expected [N,C,H,W] and [C,kh,kw], got {x.shape} and {kernel.shape}")
    n, c, h, w = x.data.shape
    ck, kh, kw = kernel.data.shape
    if c != ck:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels but kernel has {ck}")
    _check_conv_args(stride, padding)
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"depthwise_conv2d: kernel {kernel.shape} does not fit input {x.shape}")

    xp = _pad_hw(x.data, padding)
    out_data = np.zeros((n, c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out_data += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * kernel.data[:, i, j][None, :, None, None]
    out = Tensor(out_data)

    tape = _active_tape()
    if tape is not None:

        def bw(g):
            dk = np.empty_like(kernel.data)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    sl = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    dk[:, i, j] = np.einsum("nchw,nchw->c", g, sl)
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * kernel.data[:, i, j][None, :, None, None]
            _accum(kernel, dk)
            _accum(x, dxp[:, :, padding : padding + h, padding : padding + w])

        tape.record(out, bw)
    return out


def depthwise_separable_conv(x, depthwise_kernel, pointwise_kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Depthwise conv followed by a 1x1 pointwise conv; stride acts depthwise."""
    pointwise_kernel = as_tensor(pointwise_kernel)
    if pointwise_kernel.data.ndim != 4 or pointwise_kernel.data.shape[2:] != (1, 1):
        raise ShapeError(f"depthwise_separable_conv: pointwise kernel must be [F,C,1,1], got {pointwise_kernel.shape}")
    mid = depthwise_conv2d(x, depthwise_kernel, stride=stride, padding=padding)
    return conv2d(mid, pointwise_kernel, stride=1, padding=0)


def mean_pool2d(x) -> Tensor:
    """Global average pool [N,C,H,W] -> [N,C]."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"mean_pool2d: expected [N,C,H,W], got {x.shape}")
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    tape = _active_tape()
    if tape is not None:
        tape.record(out, lambda g: _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w))))
    return out


# ---------------------------------------------------------------------------
# row-wise ops


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    """Divide each row by its Euclidean norm (floored at ``eps``)."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected a matrix, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = x.data / denom
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None:
        live = norms > eps  # rows at the floor fall back to a linear map

        def bw(g):
            proj = (g * y).sum(axis=1, keepdims=True)
            _accum(x, np.where(live, (g - y * proj) / denom, g / eps))

        tape.record(out, bw)
    return out


def _row_softmax(data: np.ndarray) -> np.ndarray:
    shifted = data - data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got {x.shape}")
    y = _row_softmax(x.data)
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None:

        def bw(g):
            _accum(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

        tape.record(out, bw)
    return out


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows: expected a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Tensor(shifted - lse)
    tape = _active_tape()
    if tape is not None:
        sm = np.exp(shifted - lse)

        def bw(g):
            _accum(x, g - sm * g.sum(axis=1, keepdims=True))

        tape.record(out, bw)
    return out


def pick_per_row(x, indices) -> Tensor:
    """Gather x[i, indices[i]] -> vector of length N."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 2 or idx.shape != (x.data.shape[0],):
        raise ShapeError(f"pick_per_row: got matrix {x.shape} and indices {list(idx.shape)}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[1]):
        raise ShapeError(f"pick_per_row: index out of range for {x.data.shape[1]} columns")
    rows = np.arange(x.data.shape[0])
    out = Tensor(x.data[rows, idx])
    tape = _active_tape()
    if tape is not None:

        def bw(g):
            dx = np.zeros_like(x.data)
            dx[rows, idx] = g
            _accum(x, dx)

        tape.record(out, bw)
    return out


def set_per_row(x, indices, values) -> Tensor:
    """Copy of x with x[i, indices[i]] replaced by values[i]."""
    x, values = as_tensor(x), as_tensor(values)
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 2 or idx.shape != (x.data.shape[0],) or values.data.shape != idx.shape:
        raise ShapeError(f"set_per_row: got matrix {x.shape}, indices {list(idx.shape)}, values {values.shape}")
    rows = np.arange(x.data.shape[0])
    out_data = x.data.copy()
    out_data[rows, idx] = values.data
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:

        def bw(g):
            dx = g.copy()
            dx[rows, idx] = 0.0
            _accum(x, dx)
            _accum(values, g[rows, idx])

        tape.record(out, bw)
    return out


# ---------------------------------------------------------------------------
# reductions


def tsum(x) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = as_tensor(x)
    shape = x.data.shape
    return _unary(x, x.data.sum(), lambda g: np.full(shape, g))


def tmean(x) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    x = as_tensor(x)
    shape = x.data.shape
    size = x.data.size
    return _unary(x, x.data.mean(), lambda g: np.full(shape, g / size))


def check_finite_grads(named_tensors) -> None:
    """Raise NumericError naming the first parameter with a non-finite grad."""
    for name, t in named_tensors:
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
