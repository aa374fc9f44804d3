"""Quality masking, length classification loss, set-matched moment loss and
the weighted total objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ConfigError
from .numerics import tensor as T
from .numerics.nn import MLP
from .numerics.tensor import Tensor, UsageError

L1_WEIGHT = 10.0
GIOU_WEIGHT = 1.0
CONF_WEIGHT = 4.0
WEIGHT_EPS = 1e-8


# ---------------------------------------------------------------- quality masking

def quality_scores(evaluator: MLP, lt: Tensor) -> Tensor:
    z = evaluator(lt)
    return T.sigmoid(z.reshape(z.shape[:-1]))


def build_masks(qs, n_queries: int, threshold: float = 0.5) -> np.ndarray:
    """Ones for samples with ``qs >= threshold``, zeros otherwise; ``(B, N_q, 1)``."""
    q = np.asarray(qs.data if isinstance(qs, Tensor) else qs, dtype=np.float64).reshape(-1)
    keep = (q >= threshold).astype(np.float64)
    return np.repeat(keep[:, None, None], n_queries, axis=1)


# ---------------------------------------------------------------- length loss

@dataclass
class LengthLoss:
    mean: Tensor
    weight: Tensor
    median: Tensor
    total: Tensor


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def per_sample_ce(logits: Tensor, labels, variant: str = "binary") -> Tensor:
    """Sum of per-category binary CEs (or softmax CE for the 3-way variant)."""
    y = one_hot(labels, logits.shape[-1])
    if variant == "binary":
        return T.bce_with_logits(logits, y).sum(axis=-1)
    return -(T.log_softmax(logits, axis=-1) * y).sum(axis=-1)


def median_gap(qs: Tensor) -> Tensor:
    """|median(qs) - min(qs)|; even sizes average the two middle values."""
    n = qs.shape[0]
    order = np.argsort(qs.data, kind="stable")
    if n % 2:
        med = qs[order[n // 2]]
    else:
        med = (qs[order[n // 2 - 1]] + qs[order[n // 2]]) * 0.5
    return T.absolute(med - qs[order[0]])


def length_cls_loss(
    logits: Tensor,
    labels,
    qs: Tensor | None,
    variant: str = "binary",
    use_mean: bool = True,
    use_weight: bool = True,
    use_median: bool = True,
) -> LengthLoss:
    if logits.shape[0] == 0:
        raise UsageError("length loss needs a non-empty batch")
    ce = per_sample_ce(logits, labels, variant)
    zero = Tensor(0.0)
    l_mean = ce.mean()
    if qs is None:
        l_weight = l_median = zero
    else:
        weighted = (qs * ce).sum()
        if float(qs.data.sum()) > WEIGHT_EPS:
            l_weight = weighted / qs.sum()
        else:
            l_weight = weighted * (1.0 / WEIGHT_EPS)
        l_median = median_gap(qs)
    has_q = qs is not None
    picks = ((l_mean, use_mean), (l_weight, use_weight and has_q), (l_median, use_median and has_q))
    parts = [p for p, on in picks if on]
    total = parts[0] if parts else zero
    for p in parts[1:]:
        total = total + p
    return LengthLoss(l_mean, l_weight, l_median, total)


# ---------------------------------------------------------------- spans

def span_bounds(spans):
    """(center, length) -> (start, end) for tensors or arrays."""
    if isinstance(spans, Tensor):
        c, w = spans[..., 0], spans[..., 1]
        return c - w * 0.5, c + w * 0.5
    spans = np.asarray(spans, dtype=np.float64)
    return spans[..., 0] - spans[..., 1] / 2, spans[..., 0] + spans[..., 1] / 2


def giou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU between (n, 2) and (m, 2) (center, length) spans."""
    s1, e1 = span_bounds(np.asarray(a)[:, None, :])
    s2, e2 = span_bounds(np.asarray(b)[None, :, :])
    inter = np.clip(np.minimum(e1, e2) - np.maximum(s1, s2), 0, None)
    union = (e1 - s1) + (e2 - s2) - inter
    hull = np.maximum(e1, e2) - np.minimum(s1, s2)
    return inter / union - (hull - union) / hull


def giou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Elementwise generalized IoU between matched rows."""
    s1, e1 = span_bounds(pred)
    s2, e2 = span_bounds(gt)
    inter = T.relu(T.minimum(e1, e2) - T.maximum(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    hull = T.maximum(e1, e2) - T.minimum(s1, s2)
    return inter / union - (hull - union) / hull


# ---------------------------------------------------------------- matching

def _hungarian_cost(cost: np.ndarray) -> tuple[float, np.ndarray]:
    """Shortest augmenting path assignment for rows <= cols.

    Returns the optimal total and the column assigned to every row.
    """
    n, m = cost.shape
    inf = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return float(cost[np.arange(n), cols].sum()), cols


def hungarian(cost, tie_tol: float = 1e-9) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column.

    Among optimal assignments the lexicographically smallest column sequence
    wins. Returns ``cols`` with ``cols[row]``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"cannot match {n} targets to {m} predictions")
    if n == 0:
        return np.zeros(0, dtype=int)
    best, _ = _hungarian_cost(cost)
    tol = tie_tol * (1.0 + abs(best))
    cols = np.empty(n, dtype=int)
    free = list(range(m))
    fixed = 0.0
    for row in range(n):
        for j in free:
            rest = [c for c in free if c != j]
            remainder = 0.0
            if row + 1 < n:
                remainder, _ = _hungarian_cost(cost[row + 1 :][:, rest])
            if fixed + cost[row, j] + remainder <= best + tol:
                cols[row] = j
                fixed += cost[row, j]
                free = rest
                break
    return cols


def match_cost(pred_spans: np.ndarray, confidences: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """(m, N_q) cost of assigning each ground truth to each query."""
    l1 = np.abs(gts[:, None, :] - pred_spans[None, :, :]).sum(axis=-1)
    giou = giou_np(gts, pred_spans)
    return L1_WEIGHT * l1 + GIOU_WEIGHT * (1.0 - giou) - CONF_WEIGHT * confidences[None, :]


def hungarian_match(pred_spans, confidences, gts) -> list[tuple[int, int]]:
    """Returns ``(query, gt)`` pairs."""
    pred_spans = np.asarray(pred_spans, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if len(gts) > len(pred_spans):
        raise ValueError(f"{len(gts)} ground truths exceed {len(pred_spans)} queries")
    cols = hungarian(match_cost(pred_spans, np.asarray(confidences, dtype=np.float64), gts))
    return [(int(q), g) for g, q in enumerate(cols)]


# ---------------------------------------------------------------- moment loss

def layer_moment_loss(spans: Tensor, conf_logits: Tensor, gt_moments: list[np.ndarray]) -> Tensor:
    """L1 + gIoU on matched spans (per ground truth) plus foreground CE (per query)."""
    b, nq, _ = spans.shape
    conf = T._sigmoid(conf_logits.data)
    rows, qidx, targets = [], [], []
    fg = np.zeros((b, nq))
    for i in range(b):
        for q, g in hungarian_match(spans.data[i], conf[i], gt_moments[i]):
            rows.append(i)
            qidx.append(q)
            targets.append(gt_moments[i][g])
            fg[i, q] = 1.0
    n_gt = max(len(rows), 1)
    matched = spans[np.array(rows), np.array(qidx)]
    tgt = np.array(targets)
    l1 = T.absolute(matched - tgt).sum() * (1.0 / n_gt)
    giou = (1.0 - giou_tensor(matched, tgt)).sum() * (1.0 / n_gt)
    ce = T.bce_with_logits(conf_logits, fg).mean()
    return L1_WEIGHT * l1 + GIOU_WEIGHT * giou + CONF_WEIGHT * ce


def moment_loss(layer_outputs, gt_moments: list[np.ndarray]) -> Tensor:
    """Summed over decoder layers (auxiliary losses included)."""
    total = None
    for out in layer_outputs:
        term = layer_moment_loss(out.spans, out.conf_logits, gt_moments)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------- total

@dataclass
class LossBreakdown:
    moment: float
    saliency: float
    alignment: float
    length: float
    length_mean: float
    length_weight: float
    length_median: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return dict(vars(self))


@dataclass(frozen=True)
class LossWeights:
    saliency: float = 1.0
    alignment: float = 0.3
    length: float = 1.0

    def __post_init__(self):
        for name, val in vars(self).items():
            if val < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {val}")


def total_loss(moment, saliency, alignment, length, weights: LossWeights):
    """Weighted sum of the four parts; works on floats and tensors alike."""
    return moment + weights.saliency * saliency + weights.alignment * alignment + weights.length * length
