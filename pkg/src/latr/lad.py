"""Length-aware decoder: k-means anchors, suppression allocation and refinement."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import tensor as T
from .numerics.nn import MLP, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, sine_embed
from .numerics.tensor import Tensor
from .qli import PROSE, apply_rs, generate_rs

log = logging.getLogger(__name__)


class AnchorError(ValueError):
    pass


def kmeans_anchors(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-9) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding on (center, length) pairs.

    Returns ``(k, 2)`` centroids sorted by length, then center.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < k:
        raise AnchorError(f"need at least {k} moments for {k} anchors, got {n}")
    rng = np.random.default_rng(seed)

    centroids = [pts[rng.integers(n)]]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k: duplicate an existing point
            nxt = pts[rng.integers(n)]
        else:
            nxt = pts[rng.choice(n, p=d2 / total)]
        centroids.append(nxt)
        d2 = np.minimum(d2, ((pts - nxt) ** 2).sum(axis=1))
    c = np.array(centroids)

    for _ in range(max_iter):
        dist = ((pts[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        new = c.copy()
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.abs(new - c).max()
        c = new
        if shift < tol:
            break
    order = np.lexsort((c[:, 0], c[:, 1]))
    return c[order]


def rs_allocation(group_scalars, roles) -> np.ndarray:
    """Broadcast per-group scalars ``(..., K)`` to per-query scalars ``(..., N_q)``."""
    return np.asarray(group_scalars, dtype=np.float64)[..., np.asarray(roles)]


def top_select(confidences, roles, n_select: int, n_groups: int | None = None) -> np.ndarray:
    """Mean of each group's ``n_select`` highest confidences, shape ``(..., K)``."""
    conf = np.asarray(confidences, dtype=np.float64)
    roles = np.asarray(roles)
    n_groups = n_groups or int(roles.max()) + 1
    if n_select < 1:
        raise ValueError("top-select count must be >= 1")
    out = np.empty(conf.shape[:-1] + (n_groups,))
    for g in range(n_groups):
        members = conf[..., roles == g]
        s = min(n_select, members.shape[-1])
        if s < n_select:
            log.debug("top-select %d exceeds group %d size %d; clamping", n_select, g, s)
        top = -np.sort(-members, axis=-1)[..., :s]
        out[..., g] = top.mean(axis=-1)
    return out


def rs_update(prev, new) -> np.ndarray:
    return np.minimum(prev, new)


def topk_save(scalars, confidences, k: int) -> np.ndarray:
    """Flag the ``k`` most confident queries among those with negative scalars.

    Ties go to the lower query index. Works on ``(N_q,)`` or ``(B, N_q)``.
    """
    s = np.asarray(scalars, dtype=np.float64)
    conf = np.asarray(confidences, dtype=np.float64)
    flags = np.zeros(s.shape, dtype=bool)
    if k <= 0:
        return flags
    flat_s, flat_c, flat_f = s.reshape(-1, s.shape[-1]), conf.reshape(-1, s.shape[-1]), flags.reshape(-1, s.shape[-1])
    for row in range(flat_s.shape[0]):
        cand = np.flatnonzero(flat_s[row] < 0)
        if not len(cand):
            continue
        order = cand[np.argsort(-flat_c[row, cand], kind="stable")]
        flat_f[row, order[:k]] = True
    return flags


def inverse_sigmoid(x, eps: float = 1e-5) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), eps, 1 - eps)
    return np.log(x / (1 - x))


def clamp_spans(spans: np.ndarray) -> np.ndarray:
    """Clip (center, length) spans so the interval lies inside [0, 1]."""
    start = np.clip(spans[..., 0] - spans[..., 1] / 2, 0.0, 1.0)
    end = np.clip(spans[..., 0] + spans[..., 1] / 2, 0.0, 1.0)
    end = np.maximum(end, np.minimum(start + 1e-6, 1.0))
    start = np.minimum(start, end - 1e-6)
    return np.stack([(start + end) / 2, end - start], axis=-1)


class DecoderLayer(Module):
    """Query self-attention, cross-attention to clips, feed-forward; post-norm."""

    def __init__(self, dim: int, ffn_dim: int, rng, heads: int = 1):
        self.self_attn = MultiHeadAttention(dim, rng, heads)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, rng, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.norm3 = LayerNorm(dim)

    def __call__(self, content: Tensor, query_pos: Tensor, memory: Tensor, memory_pos, memory_mask) -> Tensor:
        qk = content + query_pos
        x = self.norm1(content + self.self_attn(qk, qk, content))
        keys = memory if memory_pos is None else memory + memory_pos
        x = self.norm2(x + self.cross_attn(x + query_pos, keys, memory, memory_mask))
        return self.norm3(x + self.ffn(x))


@dataclass
class LayerOutput:
    span_logits: Tensor  # (B, N_q, 2) pre-sigmoid
    spans: Tensor  # (B, N_q, 2) (center, length) in (0, 1)
    conf_logits: Tensor  # (B, N_q)

    @property
    def confidences(self) -> np.ndarray:
        return T._sigmoid(self.conf_logits.data)

    def moments(self) -> np.ndarray:
        return clamp_spans(self.spans.data)


@dataclass
class DecodeTrace:
    """Suppression state seen by each layer, for inspection and tests."""

    group_scalars: list[np.ndarray] = field(default_factory=list)  # (B, K) entering each layer
    effective: list[np.ndarray] = field(default_factory=list)  # (B, N_q) applied to content
    saved: list[np.ndarray] = field(default_factory=list)  # (B, N_q) flags in force


@dataclass
class DecodeSettings:
    tau: float = 0.5
    mode: str = PROSE
    refine: bool = True  # top-select + rs_update between layers
    top_select: int = 2
    topk_save: int = 0
    forced_probability: float | None = None  # test hook: replaces top-select output
    # test hook: per-layer (B, N_q) scalars from an earlier trace, applied as-is;
    # freezes the schedule so finite differences see the same function backprop does
    replay: list[np.ndarray] | None = None


class LengthAwareDecoder(Module):
    def __init__(
        self,
        dim: int,
        anchors: np.ndarray,
        roles: np.ndarray,
        rng: np.random.Generator,
        n_layers: int = 3,
        heads: int = 1,
        ffn_dim: int | None = None,
    ):
        ffn_dim = ffn_dim or 2 * dim
        self.anchors = np.asarray(anchors, dtype=np.float64)
        self.roles = np.asarray(roles, dtype=int)
        self.n_groups = int(self.roles.max()) + 1
        self.dim = dim
        self.anchor_mlp = MLP([dim, dim, dim], rng)
        self.layers = [DecoderLayer(dim, ffn_dim, rng, heads) for _ in range(n_layers)]
        self.span_head = MLP([dim, dim, 2], rng)
        # start from the anchors: the last span layer outputs zero offsets
        self.span_head.layers[-1].weight.data[:] = 0.0
        self.conf_head = Linear(dim, 1, rng)

    @property
    def n_queries(self) -> int:
        return len(self.anchors)

    def query_positions(self) -> Tensor:
        return self.anchor_mlp(Tensor(sine_embed(self.anchors, self.dim)))

    def heads(self, content: Tensor) -> LayerOutput:
        offsets = self.span_head(content)
        logits = offsets + inverse_sigmoid(self.anchors)
        conf = self.conf_head(content)
        return LayerOutput(logits, T.sigmoid(logits), conf.reshape(conf.shape[:-1]))

    def decode(
        self,
        memory: Tensor,
        memory_pos,
        memory_mask,
        group_rs: np.ndarray | None,
        settings: DecodeSettings,
        sample_mask: np.ndarray | None = None,
    ) -> tuple[list[LayerOutput], DecodeTrace]:
        """Run every layer, suppressing query content before each one.

        ``group_rs`` is ``(B, K)`` or None for a suppression-free decode;
        ``sample_mask`` is ``(B,)`` with 0 disabling suppression for a sample.
        """
        b = memory.shape[0]
        nq = self.n_queries
        pos = self.query_positions()
        content = Tensor(np.zeros((b, nq, self.dim)))
        trace = DecodeTrace()
        outputs = []
        group = None if group_rs is None else np.array(group_rs, dtype=np.float64)
        saved = np.zeros((b, nq), dtype=bool)
        gate = np.ones(b) if sample_mask is None else np.asarray(sample_mask, dtype=np.float64).reshape(b)
        for depth, layer in enumerate(self.layers):
            if group is not None:
                alloc = rs_allocation(group, self.roles)
                eff = np.where(saved, 0.0, alloc) * gate[:, None]
                if settings.replay is not None:
                    eff = settings.replay[depth]
                content = apply_rs(content, eff)
                trace.group_scalars.append(group.copy())
                trace.effective.append(eff)
                trace.saved.append(saved.copy())
            content = layer(content, pos, memory, memory_pos, memory_mask)
            out = self.heads(content)
            outputs.append(out)
            if group is None:
                continue
            if settings.refine:
                refreshed = top_select(out.confidences, self.roles, settings.top_select, self.n_groups)
                if settings.forced_probability is not None:
                    refreshed = np.full_like(refreshed, settings.forced_probability)
                group = rs_update(group, generate_rs(refreshed, settings.tau, settings.mode))
            if settings.topk_save > 0:
                saved = topk_save(rs_allocation(group, self.roles), out.confidences, settings.topk_save)
        return outputs, trace
