"""Parametric layers: fully connected, multi-head attention, GRU, dropout, view aggregation."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .config import ConfigError
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    def freeze(self) -> None:
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        if not self.requires_grad:
            self.requires_grad = True
            self.grad = np.zeros_like(self.data)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Parameter:
    bound = math.sqrt(1.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, dict):
                for key, sub in value.items():
                    if isinstance(sub, Module):
                        yield from sub.named_parameters(f"{full}.{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, dict):
                yield from (v for v in value.values() if isinstance(v, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.unfreeze()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """y = act(x W + b) over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, activation: str | None = "relu"):
        if activation not in ("relu", None):
            raise ConfigError(f"unsupported activation {activation!r}")
        self.d_in, self.d_out = d_in, d_out
        self.activation = activation
        self.W = uniform_init(rng, (d_in, d_out), d_in)
        self.b = uniform_init(rng, (d_out,), d_in)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise T.DimensionError(f"Linear expects last extent {self.d_in}, got {x.shape}")
        lead = x.shape[:-1]
        y = T.reshape(x, (-1, self.d_in)) @ self.W + self.b
        if self.activation == "relu":
            y = T.relu(y)
        return T.reshape(y, lead + (self.d_out,))


class MultiHeadAttention(Module):
    """Bias-free scaled dot-product attention with ``heads`` heads of width d_model/heads.

    The per-head projections are stored side by side, so ``W_Q[:, h*d_k:(h+1)*d_k]``
    is head h's query matrix.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ConfigError(f"d_model {d_model} not divisible by {heads} heads")
        self.d_model, self.heads = d_model, heads
        self.d_k = d_model // heads
        self.W_Q = uniform_init(rng, (d_model, d_model), d_model)
        self.W_K = uniform_init(rng, (d_model, d_model), d_model)
        self.W_V = uniform_init(rng, (d_model, d_model), d_model)
        self.W_O = uniform_init(rng, (d_model, d_model), d_model)

    def _split(self, x: Tensor) -> Tensor:
        s, t, _ = x.shape
        return T.transpose(T.reshape(x, (s, t, self.heads, self.d_k)), (0, 2, 1, 3))

    def __call__(self, q_in: Tensor, kv_in: Tensor | None = None) -> Tensor:
        kv_in = q_in if kv_in is None else kv_in
        if q_in.ndim != 3 or kv_in.ndim != 3:
            raise T.DimensionError(f"attention expects [S, T, d], got {q_in.shape} / {kv_in.shape}")
        if q_in.shape[0] != kv_in.shape[0] or q_in.shape[2] != kv_in.shape[2]:
            raise T.DimensionError(f"attention extents differ: {q_in.shape} vs {kv_in.shape}")
        if q_in.shape[2] != self.d_model:
            raise T.DimensionError(f"attention d_model {self.d_model}, input {q_in.shape}")
        s, t_q, _ = q_in.shape
        q = self._split(q_in @ self.W_Q)
        k = self._split(kv_in @ self.W_K)
        v = self._split(kv_in @ self.W_V)
        scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(self.d_k))
        heads = T.softmax(scores, axis=-1) @ v
        merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (s, t_q, self.d_model))
        return merged @ self.W_O


class GRU(Module):
    """Unidirectional GRU with zero initial state; returns every hidden state."""

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        self.d_in, self.d_h = d_in, d_h
        for gate in ("z", "r", "h"):
            setattr(self, f"W_{gate}", uniform_init(rng, (d_in, d_h), d_in))
            setattr(self, f"U_{gate}", uniform_init(rng, (d_h, d_h), d_h))
            setattr(self, f"b_{gate}", uniform_init(rng, (d_h,), d_h))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.d_in:
            raise T.DimensionError(f"GRU expects [S, N, {self.d_in}], got {x.shape}")
        s, n, _ = x.shape
        h = Tensor(np.zeros((s, self.d_h)))
        outputs = []
        for t in range(n):
            # projecting per step keeps h_t bit-identical under prefix truncation
            x_t = T.take(x, t, 1)
            z = T.sigmoid(x_t @ self.W_z + h @ self.U_z + self.b_z)
            r = T.sigmoid(x_t @ self.W_r + h @ self.U_r + self.b_r)
            cand = T.tanh(x_t @ self.W_h + (r * h) @ self.U_h + self.b_h)
            h = h + z * (cand - h)
            outputs.append(h)
        return T.stack(outputs, axis=1)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        return T.dropout(x, self.p, self.rng)


class ViewAggregator(Module):
    """Reduce ``[S, V, d]`` to ``[S, d]`` by mean, softmax-weighted sum, or a conv over views."""

    def __init__(self, variant: str, n_views: int, d: int, rng: np.random.Generator, kernel: int = 3):
        self.variant = variant
        self.n_views = n_views
        if variant == "ws":
            # zero logits start the weighted sum at the plain mean
            self.logits = Parameter(np.zeros(n_views))
        elif variant == "conv1d":
            if n_views < kernel:
                raise ConfigError(f"conv1d aggregation needs at least {kernel} views, got {n_views}")
            if n_views - kernel + 1 != 1:
                raise ConfigError("conv1d aggregation must reduce the view axis to length 1")
            self.kernel = uniform_init(rng, (kernel, d, d), kernel * d)
        elif variant != "gap":
            raise ConfigError(f"unknown aggregation {variant!r}")

    def weights(self) -> np.ndarray:
        if self.variant != "ws":
            raise ConfigError("only the ws aggregator has view weights")
        e = np.exp(self.logits.data - self.logits.data.max())
        return e / e.sum()

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.n_views:
            raise T.DimensionError(f"aggregator expects [S, {self.n_views}, d], got {x.shape}")
        if self.variant == "gap":
            # weighting by fl(1/V) rather than dividing the sum keeps uniform WS bit-identical
            return T.sum(x * np.full((1, self.n_views, 1), 1.0 / self.n_views), axis=1)
        if self.variant == "ws":
            w = T.reshape(T.softmax(self.logits, axis=0), (1, self.n_views, 1))
            return T.sum(x * w, axis=1)
        y = T.conv1d(x, self.kernel)
        return T.reshape(y, (y.shape[0], y.shape[2]))
