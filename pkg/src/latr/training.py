"""Data preparation, training loop, checkpoints, evaluation and analysis."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    LengthRule,
    Sample,
    SyntheticConfig,
    bucket,
    collate,
    generate_synthetic,
    label_length_category,
    load_dataset,
)
from .lad import kmeans_anchors
from .metrics import Concentration, MetricsReport, Prediction, concentration_from_lengths, evaluate, population_std
from .model import LATR
from .numerics.optim import AdamW
from .numerics.tensor import NumericError, no_grad
from .qli import assign_length_roles

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EVAL_SEED_OFFSET = 100_003
LOSS_FIELDS = ("moment", "saliency", "alignment", "length", "length_mean", "length_weight", "length_median", "total")


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, checkpoint: Path | None):
        super().__init__(msg)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------- data

def synthetic_config(cfg: RunConfig, n: int, seed: int, label_noise: float) -> SyntheticConfig:
    return SyntheticConfig(
        n_samples=n,
        clip_range=(cfg.clip_min, cfg.clip_max),
        word_range=(cfg.word_min, cfg.word_max),
        d_v=cfg.d_v,
        d_t=cfg.d_t,
        signal=cfg.signal,
        noise=cfg.noise,
        label_noise=label_noise,
        multi_moment=cfg.multi_moment,
        seed=seed,
        world_seed=cfg.world_seed,
    )


def load_or_generate(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    """Train/eval sets from files when given, else seeded synthetic data.

    The synthetic eval set is always label-clean and shares the train set's
    feature directions.
    """
    if cfg.train_path:
        train = load_dataset(cfg.train_path)
    else:
        train = generate_synthetic(synthetic_config(cfg, cfg.n_train, cfg.seed, cfg.label_noise))
    return train, eval_samples(cfg)


def eval_samples(cfg: RunConfig) -> list[Sample]:
    if cfg.eval_path:
        return load_dataset(cfg.eval_path)
    return generate_synthetic(synthetic_config(cfg, cfg.n_eval, cfg.seed + EVAL_SEED_OFFSET, 0.0))


@dataclass
class Layout:
    """Data-derived pieces a model needs: anchors, query roles, label rule."""

    anchors: np.ndarray
    roles: np.ndarray
    boundaries: tuple[float, ...]  # normalized cut points used for roles
    label_rule: LengthRule | None  # None: use the stored 3-way labels


def _moment_array(samples: list[Sample]) -> np.ndarray:
    return np.array([[m.center, m.length] for s in samples for m in s.moments])


def build_layout(cfg: RunConfig, train: list[Sample]) -> Layout:
    lengths = np.array([s.moments[0].length for s in train])
    if cfg.split == 3:
        label_rule = None
        if cfg.rule.mode == "normalized":
            boundaries = cfg.rule.boundaries
        else:
            # normalized cuts at the stored labels' cumulative proportions
            props = np.cumsum(np.bincount([s.length_label for s in train], minlength=3))[:-1] / len(train)
            boundaries = (0.0, *(float(np.quantile(lengths, q)) for q in props), 1.0)
    else:
        label_rule = LengthRule.equal_split(lengths, cfg.split)
        boundaries = label_rule.boundaries
    anchors = kmeans_anchors(_moment_array(train), cfg.nq, seed=cfg.seed)
    roles = assign_length_roles(anchors[:, 1], boundaries)
    return Layout(anchors, roles, boundaries, label_rule)


def labels_for(samples: list[Sample], layout: Layout) -> np.ndarray:
    if layout.label_rule is None:
        return np.array([s.length_label for s in samples])
    return np.array([bucket(s.moments[0].length, layout.label_rule.boundaries) for s in samples])


def clean_labels(samples: list[Sample], cfg: RunConfig, layout: Layout) -> np.ndarray:
    """Labels recomputed from the moments, ignoring any stored label noise."""
    if layout.label_rule is not None:
        return labels_for(samples, layout)
    return np.array([int(label_length_category(s.moments[0], cfg.rule)) for s in samples])


def build_model(cfg: RunConfig, train: list[Sample]) -> tuple[LATR, Layout]:
    layout = build_layout(cfg, train)
    d_v, d_t = train[0].video.shape[1], train[0].text.shape[1]
    return LATR(cfg, d_v, d_t, layout.anchors, layout.roles), layout


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: LATR, layout: Layout, opt: AdamW | None, epoch: int) -> Path:
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["anchors"] = layout.anchors
    arrays["roles"] = layout.roles
    if opt is not None:
        st = opt.state_dict()
        for i, (m, v) in enumerate(zip(st["m"], st["v"])):
            arrays[f"adam_m/{i}"] = m
            arrays[f"adam_v/{i}"] = v
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "d_v": model.encoder.d_v,
        "d_t": model.encoder.d_t,
        "boundaries": list(layout.boundaries),
        "label_rule": None if layout.label_rule is None else list(layout.label_rule.boundaries),
        "epoch": epoch,
        "step": 0 if opt is None else opt.step_count,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


@dataclass
class Checkpoint:
    model: LATR
    layout: Layout
    epoch: int
    step: int
    adam: dict | None


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        cfg = RunConfig.from_dict(meta["config"])
        rule = meta["label_rule"]
        layout = Layout(
            z["anchors"].copy(),
            z["roles"].copy(),
            tuple(meta["boundaries"]),
            None if rule is None else LengthRule("normalized", tuple(rule)),
        )
        model = LATR(cfg, meta["d_v"], meta["d_t"], layout.anchors, layout.roles)
        model.load_state_dict({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        n_m = sum(1 for k in z.files if k.startswith("adam_m/"))
        adam = None
        if n_m:
            adam = {
                "step": meta["step"],
                "m": [z[f"adam_m/{i}"] for i in range(n_m)],
                "v": [z[f"adam_v/{i}"] for i in range(n_m)],
            }
    return Checkpoint(model, layout, meta["epoch"], meta["step"], adam)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: LATR
    layout: Layout
    history: list[dict]
    step: int

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"] if self.history else float("nan")


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, size):
        yield perm[i : i + size]


def train(
    cfg: RunConfig,
    train_set: list[Sample],
    out_dir=None,
    resume=None,
    progress: bool = False,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs; with ``resume`` continue a checkpoint."""
    cfg.validate()
    out_dir = Path(out_dir) if out_dir else None
    start_epoch = 0
    if resume:
        ck = load_checkpoint(resume)
        model, layout, start_epoch = ck.model, ck.layout, ck.epoch
        model.cfg = dataclasses.replace(model.cfg, epochs=cfg.epochs)
        cfg = model.cfg
    else:
        model, layout = build_model(cfg, train_set)
    labels = labels_for(train_set, layout)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if resume and ck.adam is not None:
        opt.load_state_dict(ck.adam)

    log_fh = writer = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (out_dir / "train_log.csv").open("a" if resume else "w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=["epoch", "step", *LOSS_FIELDS])
        if not resume:
            writer.writeheader()
    history = []
    ckpt_path = out_dir / "checkpoint.npz" if out_dir else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, 3, epoch])
            sums = dict.fromkeys(LOSS_FIELDS, 0.0)
            n_batches = 0
            for idx in _batches(len(train_set), cfg.batch_size, rng):
                batch = collate([train_set[i] for i in idx], labels[idx])
                try:
                    out = model(batch)
                    loss, parts = model.losses(out, batch)
                    opt.zero_grad()
                    loss.backward()
                except NumericError as exc:
                    saved = save_checkpoint(ckpt_path, model, layout, opt, epoch) if ckpt_path else None
                    raise TrainingAborted(f"non-finite value at step {opt.step_count + 1}: {exc}", saved) from exc
                opt.step()
                for k in LOSS_FIELDS:
                    sums[k] += getattr(parts, k)
                n_batches += 1
            row = {"epoch": epoch + 1, "step": opt.step_count, **{k: sums[k] / n_batches for k in LOSS_FIELDS}}
            history.append(row)
            if writer:
                writer.writerow(row)
                log_fh.flush()
            if progress:
                log.info("epoch %d total %.4f", epoch + 1, row["total"])
    finally:
        if log_fh:
            log_fh.close()
    if ckpt_path:
        save_checkpoint(ckpt_path, model, layout, opt, cfg.epochs)
    return TrainResult(model, layout, history, opt.step_count)


# ---------------------------------------------------------------- inference

@dataclass
class Inference:
    predictions: dict[str, Prediction]
    length_probs: np.ndarray  # (n, K)
    query_lengths: np.ndarray  # (n, N_q) final-layer predicted lengths
    ids: list[str]


def infer(model: LATR, samples: list[Sample], batch_size: int = 64) -> Inference:
    preds: dict[str, Prediction] = {}
    probs, qlen = [], []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            batch = collate(samples[i : i + batch_size])
            out = model(batch)
            preds.update(model.predictions(out, batch))
            qlen.append(out.final.moments()[..., 1])
            if out.length_probs is not None:
                probs.append(out.length_probs.data)
    return Inference(
        preds,
        np.concatenate(probs) if probs else np.zeros((len(samples), 0)),
        np.concatenate(qlen),
        [s.id for s in samples],
    )


def ground_truths(samples: list[Sample]) -> dict[str, np.ndarray]:
    return {s.id: np.array([[m.center, m.length] for m in s.moments]) for s in samples}


def evaluate_model(model: LATR, layout: Layout, samples: list[Sample], inf: Inference | None = None) -> MetricsReport:
    inf = inf or infer(model, samples)
    report = evaluate(inf.predictions, ground_truths(samples))
    if inf.length_probs.size:
        truth = clean_labels(samples, model.cfg, layout)
        report.length_accuracy = float((inf.length_probs.argmax(axis=1) == truth).mean())
    report.query_std = [population_std(col) for col in inf.query_lengths.T]
    return report


def analysis_indices(n_total: int, n: int = 50, seed: int = 0) -> np.ndarray:
    n = min(n, n_total)
    return np.sort(np.random.default_rng([seed, 5]).choice(n_total, size=n, replace=False))


def query_concentration(model: LATR, samples: list[Sample], query: int, n: int = 50, seed: int = 0) -> Concentration:
    """Predicted lengths of one query over ``n`` seeded samples."""
    idx = analysis_indices(len(samples), n, seed)
    inf = infer(model, [samples[i] for i in idx])
    return concentration_from_lengths(query, inf.query_lengths[:, query])


def all_concentrations(model: LATR, samples: list[Sample], n: int = 50, seed: int = 0) -> tuple[list[Concentration], np.ndarray]:
    idx = analysis_indices(len(samples), n, seed)
    inf = infer(model, [samples[i] for i in idx])
    return [concentration_from_lengths(q, inf.query_lengths[:, q]) for q in range(model.decoder.n_queries)], idx
