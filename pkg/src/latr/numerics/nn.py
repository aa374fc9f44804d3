"""Parameterized building blocks: linear layers, MLPs, attention, layer norm."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

NEG_INF = -1e9


class Module:
    """Parameter container; parameters are discovered by attribute order."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = param(xavier_uniform(rng, d_in, d_out))
        self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        return x @ self.weight + self.bias


class MLP(Module):
    """Affine layers with ReLU between them; the last layer is linear."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


def mlp_forward(x, layers: list[tuple], activation=T.relu) -> Tensor:
    """Functional MLP over explicit ``(weight, bias)`` pairs."""
    x = T.as_tensor(x)
    for i, (w, b) in enumerate(layers):
        w, b = T.as_tensor(w), T.as_tensor(b)
        if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[-1]:
            raise ShapeError(f"layer {i}: input {x.shape}, weight {w.shape}, bias {b.shape}")
        x = x @ w + b
        if i < len(layers) - 1:
            x = activation(x)
    return x


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = param(np.ones(dim))
        self.shift = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.eps) * self.gain + self.shift


class MultiHeadAttention(Module):
    """Scaled dot-product attention with learned Q/K/V/output projections.

    ``key_mask`` is a boolean array broadcastable to (..., T_k); False keys
    receive zero weight.
    """

    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 1):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        h = self.heads
        x = x.reshape(tuple(lead) + (n, h, d // h))
        return T.swapaxes(x, -2, -3)  # (..., h, n, dh)

    def _merge(self, x: Tensor) -> Tensor:
        x = T.swapaxes(x, -2, -3)
        *lead, n, h, dh = x.shape
        return x.reshape(tuple(lead) + (n, h * dh))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, key_mask=None) -> Tensor:
        d = query.shape[-1]
        if key.shape[-1] != d or value.shape[-1] != d:
            raise ShapeError(f"attention dims differ: {query.shape}, {key.shape}, {value.shape}")
        if key.shape[-2] != value.shape[-2]:
            raise ShapeError("key and value lengths differ")
        q, k, v = self.q_proj(query), self.k_proj(key), self.v_proj(value)
        multi = self.heads > 1
        if multi:
            q, k, v = self._split(q), self._split(k), self._split(v)
        dh = d // self.heads
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, NEG_INF)
            bias = bias[..., None, :]  # over query positions
            if multi:
                bias = bias[..., None, :, :]
            scores = scores + bias
        attn = T.softmax(scores, axis=-1)
        out = attn @ v
        if multi:
            out = self._merge(out)
        return self.out_proj(out)


def self_attention(tokens: Tensor, attn: MultiHeadAttention, positional=None, key_mask=None) -> Tensor:
    """Self-attention where positional encodings join queries and keys only."""
    qk = tokens if positional is None else tokens + positional
    return attn(qk, qk, tokens, key_mask)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.mlp = MLP([dim, hidden, dim], rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Standard transformer sine/cosine table, shape (n, dim)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    freq = 1.0 / (10000.0 ** (2 * i / dim))
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : dim - dim // 2]
    return table


def sine_embed(values: np.ndarray, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Embed scalars in [0, 1] (last axis = coordinates) into ``dim`` features.

    Each coordinate receives ``dim // n_coords`` sine/cosine channels, as in
    anchor-based DETR position embeddings.
    """
    values = np.asarray(values, dtype=np.float64)
    n_coords = values.shape[-1]
    per = dim // n_coords
    half = per // 2
    freq = temperature ** (2 * np.arange(half) / per)
    parts = []
    for c in range(n_coords):
        x = values[..., c : c + 1] * 2 * math.pi / freq
        parts.append(np.sin(x))
        parts.append(np.cos(x))
    out = np.concatenate(parts, axis=-1)
    if out.shape[-1] < dim:
        out = np.concatenate([out, np.zeros(out.shape[:-1] + (dim - out.shape[-1],))], axis=-1)
    return out
