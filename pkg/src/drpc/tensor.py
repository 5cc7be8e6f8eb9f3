"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of operations the segmentation objective needs are
provided. Every differentiable operation is a :class:`Function` subclass
with a ``forward`` on raw arrays and a ``backward`` mapping the output
gradient to one gradient per input.
"""

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DataError, DimensionError

DTYPE = np.float64

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Tape:
    """Ordered record of graph nodes plus the RNG for stochastic ops.

    A tape is active inside a ``with`` block and only on the thread that
    entered it. Re-running the same forward code under a fresh tape with the
    same seed produces bit-identical results.
    """

    def __init__(self, seed=0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, node):
        self.nodes.append(node)


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float64 array that may take part in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None, node=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Return a graph-free tensor sharing no state with this one."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return Add.apply(self, other)
        return AddScalar.apply(self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return Sub.apply(self, other)
        return AddScalar.apply(self, value=-float(other))

    def __rsub__(self, other):
        return AddScalar.apply(Scale.apply(self, factor=-1.0), value=float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return Mul.apply(self, other)
        return Scale.apply(self, factor=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Scale.apply(self, factor=1.0 / float(other))

    def __neg__(self):
        return Scale.apply(self, factor=-1.0)

    def __getitem__(self, index):
        return Slice.apply(self, index=index)

    def sum(self):
        return Sum.apply(self)

    def mean(self):
        return Mean.apply(self)

    def abs(self):
        return Abs.apply(self)

    def relu(self):
        return ReLU.apply(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)


def as_tensor(x, requires_grad=False):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad)


def parameter(data, name=None):
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


class Function:
    """One node of the graph: the op that produced a tensor, and its inputs."""

    def __init__(self, inputs):
        self.inputs = inputs
        self.saved = None

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        for t in inputs:
            if not isinstance(t, Tensor):
                raise ContractError(f"{cls.__name__} expects Tensor inputs, got {type(t).__name__}")
        fn = cls(inputs)
        out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        needs_grad = any(t.requires_grad for t in inputs)
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.grad = None
        out.requires_grad = needs_grad
        out.node = fn if needs_grad else None
        out.name = None
        if needs_grad:
            tape = current_tape()
            if tape is not None:
                tape.record(fn)
        return out


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward() needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(_topological_order(loss)):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.node is None:
            if tensor.requires_grad:
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            continue
        parent_grads = tensor.node.backward(g)
        for parent, pg in zip(tensor.node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# elementwise ---------------------------------------------------------------


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        for axis, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise DimensionError(f"{op}: extent mismatch on axis {axis}: {x} vs {y}")
        raise DimensionError(f"{op}: rank mismatch {a.ndim} vs {b.ndim}")


class Add(Function):
    def forward(self, a, b):
        _check_same_shape("add", a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        _check_same_shape("sub", a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        _check_same_shape("mul", a, b)
        self.saved = (a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return grad * b, grad * a


class Scale(Function):
    def forward(self, a, factor):
        self.saved = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.saved,)


class AddScalar(Function):
    def forward(self, a, value):
        return a + value

    def backward(self, grad):
        return (grad,)


class Sum(Function):
    def forward(self, a):
        self.saved = a.shape
        return np.asarray(a.sum())

    def backward(self, grad):
        return (np.broadcast_to(grad, self.saved).copy(),)


class Mean(Function):
    def forward(self, a):
        self.saved = a.shape
        return np.asarray(a.mean())

    def backward(self, grad):
        n = int(np.prod(self.saved))
        return (np.full(self.saved, float(grad) / n),)


class Abs(Function):
    def forward(self, a):
        self.saved = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.saved,)


class AbsDiffConst(Function):
    """|x - target| with ``target`` a constant broadcastable to ``x``."""

    def forward(self, x, target):
        diff = x - target
        if diff.shape != x.shape:
            raise DimensionError(f"target shape {np.shape(target)} does not broadcast to {x.shape}")
        self.saved = np.sign(diff)
        return np.abs(diff)

    def backward(self, grad):
        return (grad * self.saved,)


class ReLU(Function):
    def forward(self, a):
        self.saved = a > 0
        return np.where(self.saved, a, 0.0)

    def backward(self, grad):
        return (grad * self.saved,)


# shape ---------------------------------------------------------------------


class Reshape(Function):
    def forward(self, a, shape):
        self.saved = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.saved),)


class Slice(Function):
    """Basic (view-style) indexing: ints and slices only."""

    def forward(self, a, index):
        if not isinstance(index, tuple):
            index = (index,)
        for item in index:
            if not isinstance(item, (int, np.integer, slice)):
                raise ContractError("only integer and slice indexing is differentiable")
        self.saved = (a.shape, index)
        out = a[index]
        if out.size == 0:
            raise DimensionError(f"empty slice {index} of shape {a.shape}")
        return out.copy()

    def backward(self, grad):
        shape, index = self.saved
        full = np.zeros(shape)
        full[index] = grad
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.saved = (axis, [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        axis, sizes = self.saved
        bounds = np.cumsum(sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=axis))


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def stack(tensors):
    """Stack equal-shape tensors along a new leading axis."""
    return concat([t.reshape((1,) + t.shape) for t in tensors], axis=0)


# linear maps ---------------------------------------------------------------


class SeparableMap(Function):
    """``rows @ x @ cols.T`` over the last two axes, for constant matrices.

    Resizing and region pooling are both separable linear maps of this form.
    """

    def forward(self, x, rows, cols):
        if x.ndim < 2:
            raise DimensionError("separable map needs at least 2 axes")
        if rows.shape[1] != x.shape[-2]:
            raise DimensionError(f"row map expects height {rows.shape[1]}, got {x.shape[-2]}")
        if cols.shape[1] != x.shape[-1]:
            raise DimensionError(f"column map expects width {cols.shape[1]}, got {x.shape[-1]}")
        self.saved = (rows, cols)
        return rows @ x @ cols.T

    def backward(self, grad):
        rows, cols = self.saved
        return (rows.T @ grad @ cols,)


def separable_map(x, rows, cols):
    return SeparableMap.apply(x, rows=np.asarray(rows, DTYPE), cols=np.asarray(cols, DTYPE))


class LinearMap(Function):
    """``x @ matrix.T`` over the last axis with a constant matrix."""

    def forward(self, x, matrix):
        if matrix.shape[1] != x.shape[-1]:
            raise DimensionError(f"linear map expects last extent {matrix.shape[1]}, got {x.shape[-1]}")
        self.saved = matrix
        return x @ matrix.T

    def backward(self, grad):
        return (grad @ self.saved,)


def linear_map(x, matrix):
    return LinearMap.apply(x, matrix=np.asarray(matrix, DTYPE))


def _resize_matrix(n_in, n_out, mode):
    if n_in == n_out:
        return np.eye(n_in)
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    if mode == "nearest":
        src = np.minimum(np.floor((np.arange(n_out) + 0.5) * scale).astype(int), n_in - 1)
        m[np.arange(n_out), src] = 1.0
    elif mode == "bilinear":
        # half-pixel centres, edge-clamped
        pos = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
        np.add.at(m, (np.arange(n_out), hi), frac)
    elif mode == "area":
        # exact overlap of [i*scale, (i+1)*scale) with each source cell
        for i in range(n_out):
            start, stop = i * scale, (i + 1) * scale
            j0, j1 = int(np.floor(start)), int(np.ceil(stop))
            for j in range(j0, min(j1, n_in)):
                overlap = min(stop, j + 1) - max(start, j)
                if overlap > 0:
                    m[i, j] = overlap / scale
    else:
        raise ContractError(f"unknown resize mode {mode!r}")
    return m


def resize2d(x, out_h, out_w, mode="bilinear"):
    """Resize the last two axes of an ``N x C x H x W`` tensor."""
    if x.ndim != 4:
        raise DimensionError(f"resize2d expects N x C x H x W, got rank {x.ndim}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output size must be positive, got {out_h} x {out_w}")
    h, w = x.shape[2:]
    return separable_map(x, _resize_matrix(h, out_h, mode), _resize_matrix(w, out_w, mode))


# convolution ---------------------------------------------------------------


class Conv2d(Function):
    def forward(self, x, kernel, bias, stride=1, pad=0):
        if x.ndim != 4:
            raise DimensionError(f"conv2d input must be N x C x H x W, got rank {x.ndim}")
        if kernel.ndim != 4:
            raise DimensionError(f"conv2d kernel must be F x C x kh x kw, got rank {kernel.ndim}")
        n, c, h, w = x.shape
        f, kc, kh, kw = kernel.shape
        if kc != c:
            raise DimensionError(f"conv2d channel axis (1) mismatch: input {c}, kernel {kc}")
        if bias.shape != (f,):
            raise DimensionError(f"conv2d bias axis 0 must have extent {f}, got {bias.shape}")
        if stride < 1 or pad < 0:
            raise ContractError("stride must be positive and pad non-negative")
        if kh > h + 2 * pad:
            raise DimensionError(f"conv2d height axis (2): kernel {kh} exceeds padded input {h + 2 * pad}")
        if kw > w + 2 * pad:
            raise DimensionError(f"conv2d width axis (3): kernel {kw} exceeds padded input {w + 2 * pad}")
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        out_h = (h + 2 * pad - kh) // stride + 1
        out_w = (w + 2 * pad - kw) // stride + 1
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
        # (N, H', W', C, kh, kw) flattened into an im2col matrix
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * out_h * out_w, c * kh * kw)
        kmat = kernel.reshape(f, -1)
        out = cols @ kmat.T + bias
        self.saved = (cols, kernel, xp.shape, stride, pad, (n, out_h, out_w))
        return np.ascontiguousarray(out.reshape(n, out_h, out_w, f).transpose(0, 3, 1, 2))

    def backward(self, grad):
        cols, kernel, padded_shape, stride, pad, (n, out_h, out_w) = self.saved
        f, c, kh, kw = kernel.shape
        g2 = grad.transpose(0, 2, 3, 1).reshape(n * out_h * out_w, f)
        d_kernel = (g2.T @ cols).reshape(kernel.shape)
        d_bias = g2.sum(axis=0)
        d_cols = (g2 @ kernel.reshape(f, -1)).reshape(n, out_h, out_w, c, kh, kw)
        dxp = np.zeros(padded_shape)
        h_span = stride * (out_h - 1) + 1
        w_span = stride * (out_w - 1) + 1
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + h_span:stride, j:j + w_span:stride] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if pad:
            dxp = dxp[:, :, pad:-pad, pad:-pad]
        return dxp, d_kernel, d_bias


def conv2d(x, kernel, bias, stride=1, pad=0):
    return Conv2d.apply(x, kernel, bias, stride=stride, pad=pad)


def relu(x):
    return ReLU.apply(x)


def abs_diff_const(x, target):
    return AbsDiffConst.apply(x, target=np.asarray(target, DTYPE))


# loss ----------------------------------------------------------------------


class CrossEntropy(Function):
    """Per-image mean pixel cross-entropy, averaged over images.

    Pixels labelled ``ignore_index`` are skipped; images with no valid pixel
    are left out of the image average.
    """

    def forward(self, logits, labels, ignore_index=255):
        n, k, h, w = logits.shape
        valid = labels != ignore_index
        counts = valid.reshape(n, -1).sum(axis=1)
        used = counts > 0
        if not used.any():
            raise DataError("every pixel is ignored; cross-entropy is undefined")
        safe = np.where(valid, labels, 0).astype(np.intp)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
        nll = (log_z - picked) * valid
        # weight of each pixel in the final scalar
        per_image = np.where(used, 1.0 / np.maximum(counts, 1), 0.0) / used.sum()
        weights = valid * per_image[:, None, None]
        self.saved = (shifted, log_z, safe, weights)
        return np.asarray((nll * weights).sum())

    def backward(self, grad):
        shifted, log_z, safe, weights = self.saved
        probs = np.exp(shifted - log_z[:, None])
        np.put_along_axis(probs, safe[:, None], np.take_along_axis(probs, safe[:, None], axis=1) - 1.0, axis=1)
        return (probs * weights[:, None] * float(grad),)


def cross_entropy(logits, labels, ignore_index=255):
    return CrossEntropy.apply(logits, labels=np.asarray(labels), ignore_index=ignore_index)
