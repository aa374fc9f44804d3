import itertools

import numpy as np

from latr.numerics.tensor import Tensor, no_grad

FD_STEP = 1e-5
GRAD_RTOL = 1e-4
# gradients smaller than this are compared absolutely (to GRAD_RTOL * GRAD_FLOOR);
# exact zeros such as a key bias under softmax leave ~1e-10 of round-off at h = 1e-5
GRAD_FLOOR = 1e-5


def gradcheck(fn, params, n_points=10, seed=0, h=FD_STEP, floor=GRAD_FLOOR):
    """Compare backprop gradients of scalar ``fn()`` with central differences.

    Checks ``n_points`` random coordinates of every tensor in ``params``.
    Returns the worst relative error seen.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    fn().backward()
    # a parameter the output does not depend on has a zero gradient
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_points, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = g.reshape(-1)[i]
            err = abs(num - ana) / max(abs(num), abs(ana), floor)
            worst = max(worst, err)
    return worst


def rand_tensor(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def tiny_samples(n=4, seed=0, **kw):
    from latr.data import SyntheticConfig, generate_synthetic

    cfg = dict(n_samples=n, clip_range=(6, 9), word_range=(3, 5), d_v=5, d_t=4, seed=seed)
    cfg.update(kw)
    return generate_synthetic(SyntheticConfig(**cfg))


# ---------------------------------------------------------------- plain numpy references

def np_softmax(x, axis=-1):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def np_linear(x, lin):
    return x @ lin.weight.data + lin.bias.data


def np_mlp(x, mlp):
    for i, lin in enumerate(mlp.layers):
        x = np_linear(x, lin)
        if i < len(mlp.layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def np_attention(attn, q_in, k_in, v_in, key_mask=None):
    """Single-head scaled dot-product attention with the module's weights."""
    q, k, v = np_linear(q_in, attn.q_proj), np_linear(k_in, attn.k_proj), np_linear(v_in, attn.v_proj)
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = np.where(np.asarray(key_mask)[..., None, :], scores, -np.inf)
    return np_linear(np_softmax(scores) @ v, attn.out_proj)


def np_layer_norm(x, ln, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * ln.gain.data + ln.shift.data


def np_ffn(x, ffn):
    return np_mlp(x, ffn.mlp)


# ---------------------------------------------------------------- metric oracle

def _interval_iou(a, b):
    s1, e1 = a[0] - a[1] / 2, a[0] + a[1] / 2
    s2, e2 = b[0] - b[1] / 2, b[0] + b[1] / 2
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    return inter / ((e1 - s1) + (e2 - s2) - inter)


def oracle_ap(spans, gts, th):
    """Enumerate every assignment of predictions to ground truths, keep the one
    consistent with rank-order greedy claiming, then average interpolated
    precision over the ground-truth recall levels."""
    n, m = len(spans), len(gts)
    iou = [[_interval_iou(s, g) for g in gts] for s in spans]
    consistent = []
    for choice in itertools.product([None, *range(m)], repeat=n):
        used = [c for c in choice if c is not None]
        if len(used) != len(set(used)):
            continue
        ok = True
        for r, c in enumerate(choice):
            free = [g for g in range(m) if g not in choice[:r]]
            best = max(free, key=lambda g: (iou[r][g], -g)) if free else None
            want = best if best is not None and iou[r][best] >= th else None
            ok &= c == want
        if ok:
            consistent.append(choice)
    assert len(consistent) == 1
    hits = [c is not None for c in consistent[0]]
    precision = [sum(hits[: r + 1]) / (r + 1) for r in range(n)]
    recall_count = [sum(hits[: r + 1]) for r in range(n)]
    total = 0.0
    for k in range(1, m + 1):
        reach = [p for p, rc in zip(precision, recall_count) if rc >= k]
        total += max(reach) if reach else 0.0
    return total / m


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES: list[str] = []


def report_criterion(criterion: str, ok: bool, detail: str) -> bool:
    """Record and print one pass/fail line; the caller asserts ``ok``."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
