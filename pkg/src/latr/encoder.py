"""Projection, alignment, cross-modal fusion and saliency scoring."""
from __future__ import annotations

import logging

import numpy as np

from .numerics import tensor as T
from .numerics.nn import MLP, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, self_attention, sine_embed
from .numerics.tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

SALIENCY_MARGIN = 0.2


def clip_positions(video_mask: np.ndarray, dim: int) -> np.ndarray:
    """Sine embedding of each clip's normalized center time, zero on padding."""
    lengths = video_mask.sum(axis=1, keepdims=True)
    idx = np.arange(video_mask.shape[1])[None, :]
    centers = np.where(video_mask, (idx + 0.5) / np.maximum(lengths, 1), 0.0)
    return sine_embed(centers[..., None], dim) * video_mask[..., None]


def positive_clip_mask(video_mask: np.ndarray, moments: list[np.ndarray]) -> np.ndarray:
    """Clips whose center falls inside any ground-truth span (nearest clip if none)."""
    pos = np.zeros_like(video_mask)
    for i, ms in enumerate(moments):
        n = int(video_mask[i].sum())
        centers = (np.arange(n) + 0.5) / n
        for c, w in ms:
            inside = (centers >= c - w / 2) & (centers <= c + w / 2)
            if not inside.any():
                inside[int(np.argmin(np.abs(centers - c)))] = True
            pos[i, :n] |= inside
    return pos


class CrossBlock(Module):
    """Video clips attend to words, then a feed-forward, each post-normed."""

    def __init__(self, dim: int, ffn_dim: int, rng, heads: int = 1):
        self.attn = MultiHeadAttention(dim, rng, heads)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor, words: Tensor, text_mask) -> Tensor:
        x = self.norm1(x + self.attn(x, words, words, text_mask))
        return self.norm2(x + self.ffn(x))


class EncoderLayer(Module):
    def __init__(self, dim: int, ffn_dim: int, rng, heads: int = 1):
        self.attn = MultiHeadAttention(dim, rng, heads)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor, pos, key_mask) -> Tensor:
        x = self.norm1(x + self_attention(x, self.attn, pos, key_mask))
        return self.norm2(x + self.ffn(x))


class Encoder(Module):
    def __init__(
        self,
        d_v: int,
        d_t: int,
        dim: int,
        rng: np.random.Generator,
        heads: int = 1,
        n_cross: int = 2,
        n_self: int = 2,
        ffn_dim: int | None = None,
    ):
        ffn_dim = ffn_dim or 2 * dim
        self.d_v, self.d_t, self.dim = d_v, d_t, dim
        self.video_proj = MLP([d_v, dim, dim], rng)
        self.text_proj = MLP([d_t, dim, dim], rng)
        self.cross_blocks = [CrossBlock(dim, ffn_dim, rng, heads) for _ in range(n_cross)]
        self.self_layers = [EncoderLayer(dim, ffn_dim, rng, heads) for _ in range(n_self)]
        self.saliency = Linear(dim, 1, rng)

    def project(self, video, text) -> tuple[Tensor, Tensor]:
        video, text = T.as_tensor(video), T.as_tensor(text)
        if video.shape[-1] != self.d_v or text.shape[-1] != self.d_t:
            raise ShapeError(
                f"expected feature dims ({self.d_v}, {self.d_t}), got ({video.shape[-1]}, {text.shape[-1]})"
            )
        return self.video_proj(video), self.text_proj(text)

    def fuse(self, video_p: Tensor, text_p: Tensor, video_mask, text_mask, clip_pos=None) -> Tensor:
        x = video_p
        for blk in self.cross_blocks:
            x = blk(x, text_p, text_mask)
        for layer in self.self_layers:
            x = layer(x, clip_pos, video_mask)
        return x

    def saliency_head(self, fused: Tensor) -> Tensor:
        out = self.saliency(fused)
        return out.reshape(out.shape[:-1])


def _l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x / T.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)


def alignment_loss(
    video_p: Tensor,
    text_p: Tensor,
    positives: np.ndarray,
    video_mask: np.ndarray,
    text_mask: np.ndarray,
    temperature: float = 0.1,
) -> tuple[Tensor, int]:
    """Contrastive clip/sentence loss over a batch.

    The sentence vector (masked mean of words) scores every clip by cosine
    similarity over ``temperature``; the loss is the negative log of the
    softmax mass on positive clips. Returns the batch mean over samples that
    have positives, and the number of samples skipped for having none.
    """
    tmask = text_mask.astype(np.float64)[..., None]
    sentence = (text_p * tmask).sum(axis=1) / tmask.sum(axis=1)
    sim = (_l2_normalize(video_p) * _l2_normalize(sentence).reshape((sentence.shape[0], 1, -1))).sum(axis=-1)
    sim = sim * (1.0 / temperature)
    pos = positives & video_mask
    has_pos = pos.any(axis=1)
    skipped = int((~has_pos).sum())
    if skipped:
        log.warning("alignment loss: %d sample(s) without positive clips", skipped)
    if not has_pos.any():
        return Tensor(0.0), skipped
    keep = np.flatnonzero(has_pos)
    sim = sim[keep]
    per = T.logsumexp(sim, axis=-1, mask=video_mask[keep]) - T.logsumexp(sim, axis=-1, mask=pos[keep])
    return per.mean(), skipped


def saliency_loss(scores: Tensor, targets: np.ndarray, video_mask: np.ndarray, margin: float = SALIENCY_MARGIN) -> Tensor:
    """Hinge ranking over every (positive, negative) clip pair of each sample."""
    pos = (targets > 0.5) & video_mask
    neg = (targets <= 0.5) & video_mask
    pairs = pos[:, :, None] & neg[:, None, :]  # (B, p, n)
    counts = pairs.sum(axis=(1, 2))
    valid = counts > 0
    if not valid.any():
        return Tensor(0.0)
    b, n = scores.shape
    diff = scores.reshape((b, 1, n)) - scores.reshape((b, n, 1))  # s_n - s_p
    hinge = T.relu(diff + margin) * pairs
    per = hinge.sum(axis=(1, 2)) * (1.0 / np.maximum(counts, 1))
    return per[np.flatnonzero(valid)].mean()
