"""Query-length interaction: length token pooling, length classification and
residual suppression of query content embeddings.

Group-indexed arrays (probabilities, suppression scalars, roles) are ordered
from the shortest category to the longest.
"""
from __future__ import annotations

import logging

import numpy as np

from .data import ConfigError, bucket
from .numerics import tensor as T
from .numerics.nn import MLP, Module, MultiHeadAttention, param
from .numerics.tensor import Tensor

log = logging.getLogger(__name__)

PROSE = "prose"
LITERAL = "literal"
RS_MODES = (PROSE, LITERAL)


class LengthPerceiver(Module):
    """Prepends the length token to the clips and runs one self-attention.

    Positional encodings join queries and keys; the token sits at a zero
    position. The attention output is added back to its input, so a zero
    output projection leaves both the token and the clips untouched.
    """

    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 1, init: str = "zero"):
        if init == "zero":
            token = np.zeros(dim)
        elif init == "random":
            token = rng.normal(scale=0.02, size=dim)
        else:
            raise ConfigError(f"unknown length token init {init!r}")
        self.token = param(token)
        self.attn = MultiHeadAttention(dim, rng, heads)

    def __call__(self, fused: Tensor, clip_pos=None, video_mask=None) -> tuple[Tensor, Tensor]:
        b, n, d = fused.shape
        tok = T.broadcast_to(self.token.reshape((1, 1, d)), (b, 1, d))
        seq = T.concat([tok, fused], axis=1)
        qk = seq
        if clip_pos is not None:
            qk = seq + np.concatenate([np.zeros((b, 1, d)), clip_pos], axis=1)
        key_mask = None
        if video_mask is not None:
            key_mask = np.concatenate([np.ones((b, 1), dtype=bool), video_mask], axis=1)
        out = seq + self.attn(qk, qk, seq, key_mask)
        return out[:, 0, :], out[:, 1:, :]


class LengthClassifier(Module):
    """One 2-layer MLP + sigmoid per category, or a single softmax head."""

    def __init__(self, dim: int, n_categories: int, rng: np.random.Generator, variant: str = "binary"):
        if variant not in ("binary", "softmax"):
            raise ConfigError(f"unknown classifier variant {variant!r}")
        self.variant = variant
        if variant == "binary":
            self.heads = [MLP([dim, dim, 1], rng) for _ in range(n_categories)]
        else:
            self.heads = [MLP([dim, dim, n_categories], rng)]

    def logits(self, lt: Tensor) -> Tensor:
        if self.variant == "binary":
            return T.concat([h(lt) for h in self.heads], axis=-1)
        return self.heads[0](lt)

    def probabilities(self, logits: Tensor) -> Tensor:
        if self.variant == "binary":
            return T.sigmoid(logits)
        return T.softmax(logits, axis=-1)

    def __call__(self, lt: Tensor) -> tuple[Tensor, Tensor]:
        z = self.logits(lt)
        return z, self.probabilities(z)


def classify_length(classifier: LengthClassifier, lt: Tensor) -> np.ndarray:
    return classifier(lt)[1].data


def generate_rs(probs, tau: float = 0.5, mode: str = PROSE) -> np.ndarray:
    """Turn category probabilities into per-group suppression scalars.

    ``literal`` returns ``tau - p``. ``prose`` returns ``min(0, p - tau)``:
    confident groups pass untouched and the rest shrink by how far they fall
    short of the threshold.
    """
    if not 0 < tau < 1:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    p = np.asarray(probs, dtype=np.float64)
    if mode == LITERAL:
        return tau - p
    if mode == PROSE:
        return np.minimum(0.0, p - tau)
    raise ConfigError(f"unknown suppression mode {mode!r}")


def apply_rs(content: Tensor, scalars) -> Tensor:
    """``E + s * E`` with ``s`` treated as constant guidance.

    ``scalars`` has the content's shape minus the embedding axis.
    """
    factor = 1.0 + np.asarray(scalars, dtype=np.float64)
    return T.scale_no_grad(content, factor[..., None])


def assign_length_roles(anchor_lengths, boundaries) -> np.ndarray:
    """Bucket anchor lengths into categories, then make every group non-empty.

    An empty group borrows the anchor nearest to its interval from a group that
    can spare one.
    """
    lengths = np.asarray(anchor_lengths, dtype=np.float64)
    k = len(boundaries) - 1
    if len(lengths) < k:
        raise ConfigError(f"{len(lengths)} anchors cannot cover {k} length groups")
    roles = np.array([bucket(float(np.clip(x, boundaries[0], boundaries[-1])), boundaries) for x in lengths])
    while True:
        sizes = np.bincount(roles, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if not len(empty):
            return roles
        g = int(empty[0])
        lo, hi = boundaries[g], boundaries[g + 1]
        dist = np.maximum(lo - lengths, 0) + np.maximum(lengths - hi, 0)
        donors = sizes[roles] > 1
        dist = np.where(donors, dist, np.inf)
        pick = int(np.argmin(dist))
        log.warning("length group %d empty; moving anchor %d (length %.4f) into it", g, pick, lengths[pick])
        roles[pick] = g
