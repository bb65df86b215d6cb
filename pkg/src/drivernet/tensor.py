"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation the model needs lives here. Operations record a
node on the thread's current :class:`Tape` whenever gradient recording is
enabled and at least one input requires a gradient. ``backward(loss)`` walks
the tape in reverse, accumulates into the ``grad`` of leaf tensors, and then
clears the tape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand extents are incompatible with the operation."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf from finite inputs."""


class TapeStateError(RuntimeError):
    """Backward was requested on a graph that no longer exists."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations; recording order is a topological order."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.generation = 0
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.generation += 1
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self.consumed:
            self.reset()
        node = _Node(out, inputs, backward)
        out._node = (self.generation, len(self.nodes))
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        if loss._node is None:
            loss.grad += 1.0
            return
        generation, index = loss._node
        if self.consumed or generation != self.generation:
            raise TapeStateError(
                "this graph was already differentiated or reset; run a fresh forward pass"
            )
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: index + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad += gi
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        self.nodes.clear()
        self.consumed = True


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires a gradient."""
    current_tape().backward(loss)


def reset_tape() -> None:
    current_tape().reset()


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by a forward operation")
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.name = None
    out._node = None
    out.grad = None
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        current_tape().record(out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast"
        ) from None

    if b.ndim == 2:
        # [..., m, k] x [k, n]: fold the leading axes so dW is one GEMM
        k = b.shape[0]

        def back2(g):
            ga = gb = None
            if a.requires_grad:
                ga = g @ b.data.T
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _make(a.data @ b.data, (a, b), back2)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    return _make(y, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor, start: int = 1) -> Tensor:
    return reshape(x, x.shape[:start] + (-1,))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concatenate(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concatenate: shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=ax),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    n = len(tensors)
    return _make(
        np.stack([t.data for t in tensors], axis=ax),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)),
    )


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    ax = axis % x.ndim

    def back(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return _make(np.take(x.data, index, axis=ax), (x,), back)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# normalisation and attention primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), back)


def layer_norm(x: Tensor, axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Standardise each slice along ``axis``; no learnable gain or bias."""
    if x.shape[axis] < 2:
        raise DimensionError(f"layer_norm needs extent >= 2 along axis {axis}, got {x.shape}")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (x,), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, rescale survivors by 1/(1-p)."""
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[B, C]`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    b = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(b), labels].mean()
    p = np.exp(logp)

    def back(g):
        d = p.copy()
        d[np.arange(b), labels] -= 1.0
        return (d * (g / b),)

    return _make(np.asarray(loss), (logits,), back)


# ---------------------------------------------------------------------------
# convolutions


def conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Valid, stride-1, bias-free cross-correlation.

    ``x`` is ``[..., L, C_in]`` and ``kernel`` is ``[k, C_in, C_out]``; the
    result is ``[..., L - k + 1, C_out]``.
    """
    k, c_in, c_out = kernel.shape
    length = x.shape[-2]
    if x.shape[-1] != c_in:
        raise DimensionError(f"conv1d: input channels {x.shape} vs kernel {kernel.shape}")
    if length < k:
        raise DimensionError(f"conv1d: length {length} shorter than kernel size {k}")
    out_len = length - k + 1
    # windows: [..., out_len, k, C_in]
    cols = np.stack([x.data[..., j : j + out_len, :] for j in range(k)], axis=-2)
    flat_k = kernel.data.reshape(k * c_in, c_out)
    y = cols.reshape(cols.shape[:-2] + (k * c_in,)) @ flat_k

    def back(g):
        gx = gk = None
        if kernel.requires_grad:
            c2 = cols.reshape(-1, k * c_in)
            gk = (c2.T @ g.reshape(-1, c_out)).reshape(kernel.shape)
        if x.requires_grad:
            gcols = (g @ flat_k.T).reshape(g.shape[:-1] + (k, c_in))
            gx = np.zeros_like(x.data)
            for j in range(k):
                gx[..., j : j + out_len, :] += gcols[..., j, :]
        return gx, gk

    return _make(y, (x, kernel), back)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, spatial_stride: int = 2) -> Tensor:
    """Channel-last 3D convolution with 3x3x3 kernels and padding 1 on every axis.

    ``x`` is ``[S, T, H, W, C_in]``, ``kernel`` is ``[3, 3, 3, C_in, C_out]``.
    The temporal stride is 1, so T is preserved; spatial axes use
    ``spatial_stride``.
    """
    s, t, h, w, c_in = x.shape
    kt, kh, kw, kc, c_out = kernel.shape
    if kc != c_in:
        raise DimensionError(f"conv3d: input channels {x.shape} vs kernel {kernel.shape}")
    st = spatial_stride
    ho = (h + 2 - kh) // st + 1
    wo = (w + 2 - kw) // st + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv3d: spatial extent {h}x{w} too small")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    offsets = [(a, b, c) for a in range(kt) for b in range(kh) for c in range(kw)]
    cols = np.empty((s, t, ho, wo, len(offsets), c_in))
    for i, (a, b, c) in enumerate(offsets):
        cols[..., i, :] = xp[:, a : a + t, b : b + st * ho : st, c : c + st * wo : st, :]
    flat_k = kernel.data.reshape(-1, c_out)
    cols = cols.reshape(-1, flat_k.shape[0])
    y = (cols @ flat_k + bias.data).reshape(s, t, ho, wo, c_out)

    def back(g):
        g2 = g.reshape(-1, c_out)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ flat_k.T).reshape(s, t, ho, wo, len(offsets), c_in)
            gxp = np.zeros_like(xp)
            for i, (a, b, c) in enumerate(offsets):
                gxp[:, a : a + t, b : b + st * ho : st, c : c + st * wo : st, :] += gcols[
                    ..., i, :
                ]
            gx = gxp[:, 1:-1, 1:-1, 1:-1, :]
        return gx, gk, gb

    return _make(y, (x, kernel, bias), back)
