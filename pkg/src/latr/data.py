"""Samples, length categories, the planted-signal generator and JSONL I/O."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


class LabelingError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class ValidationError(ValueError):
    def __init__(self, sample_id: str, msg: str):
        super().__init__(f"sample {sample_id!r}: {msg}")
        self.sample_id = sample_id


class LengthCategory(enum.IntEnum):
    SHORT = 0
    MIDDLE = 1
    LONG = 2


# Category indices always run from shortest to longest.
CATEGORY_NAMES = {
    2: ("short", "long"),
    3: ("short", "middle", "long"),
    4: ("short", "middle_short", "middle_long", "long"),
}


def category_names(k: int) -> tuple[str, ...]:
    try:
        return CATEGORY_NAMES[k]
    except KeyError:
        raise ConfigError(f"unsupported number of length categories: {k}") from None


@dataclass(frozen=True)
class Moment:
    center: float
    length: float
    seconds: float | None = None

    @property
    def start(self) -> float:
        return self.center - self.length / 2

    @property
    def end(self) -> float:
        return self.center + self.length / 2

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (
            math.isfinite(self.center)
            and math.isfinite(self.length)
            and self.length > 0
            and self.start >= -tol
            and self.end <= 1 + tol
        )

    def clamped(self) -> "Moment":
        s, e = max(0.0, self.start), min(1.0, self.end)
        if e <= s:
            e = min(1.0, s + 1e-6)
            s = e - 1e-6
        return Moment((s + e) / 2, e - s, self.seconds)

    @classmethod
    def from_bounds(cls, start: float, end: float, seconds: float | None = None) -> "Moment":
        return cls((start + end) / 2, end - start, seconds)


@dataclass(frozen=True)
class LengthRule:
    """Cut points over moment durations; buckets are [lo, hi) and the last is closed."""

    mode: str  # "seconds" or "normalized"
    boundaries: tuple[float, ...]

    def __post_init__(self):
        if self.mode not in ("seconds", "normalized"):
            raise ConfigError(f"unknown length rule mode {self.mode!r}")
        b = tuple(float(x) for x in self.boundaries)
        if len(b) < 3 or any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise ConfigError(f"boundaries must be strictly increasing with >= 2 buckets: {b}")
        object.__setattr__(self, "boundaries", b)

    @property
    def n_categories(self) -> int:
        return len(self.boundaries) - 1

    @classmethod
    def equal_split(cls, lengths, k: int) -> "LengthRule":
        """Normalized rule whose inner cuts put roughly n/k lengths in each bucket."""
        lengths = np.sort(np.asarray(lengths, dtype=np.float64))
        inner = [float(np.quantile(lengths, q)) for q in np.arange(1, k) / k]
        for i in range(1, len(inner)):
            if inner[i] <= inner[i - 1]:
                inner[i] = np.nextafter(inner[i - 1], 1.0)
        return cls("normalized", (0.0, *inner, 1.0))


QVHIGHLIGHTS_RULE = LengthRule("seconds", (0.0, 10.0, 30.0, 150.0))
CHARADES_RULE = LengthRule("normalized", (0.0, 0.2, 0.302, 1.0))
TACOS_RULE = LengthRule("normalized", (0.0, 0.045, 0.1, 1.0))
SYNTHETIC_RULE = LengthRule("normalized", (0.0, 0.2, 0.4, 1.0))


def bucket(value: float, boundaries: tuple[float, ...]) -> int:
    if not boundaries[0] <= value <= boundaries[-1]:
        raise LabelingError(f"duration {value} outside [{boundaries[0]}, {boundaries[-1]}]")
    for i, hi in enumerate(boundaries[1:-1]):
        if value < hi:
            return i
    return len(boundaries) - 2


def label_length_category(m: Moment, rule: LengthRule) -> int:
    if rule.mode == "seconds":
        if m.seconds is None:
            raise LabelingError("absolute-seconds rule needs the moment duration in seconds")
        value = m.seconds
    else:
        value = m.length
    idx = bucket(value, rule.boundaries)
    return LengthCategory(idx) if rule.n_categories == 3 else idx


@dataclass
class Sample:
    id: str
    video: np.ndarray  # (L, d_v)
    text: np.ndarray  # (N, d_t)
    moments: list[Moment]
    saliency: np.ndarray  # (L,)
    length_label: int
    label_flipped: bool = False

    def validate(self, rule: LengthRule | None = None) -> None:
        if self.video.ndim != 2 or self.video.shape[0] < 1:
            raise ValidationError(self.id, f"video must be L x d_v with L >= 1, got {self.video.shape}")
        if self.text.ndim != 2 or self.text.shape[0] < 1:
            raise ValidationError(self.id, f"text must be N x d_t with N >= 1, got {self.text.shape}")
        if not self.moments:
            raise ValidationError(self.id, "at least one ground-truth moment is required")
        for m in self.moments:
            if not m.is_valid():
                raise ValidationError(self.id, f"invalid moment {m}")
        if self.saliency.shape != (self.video.shape[0],):
            raise ValidationError(self.id, "saliency length must equal the clip count")
        if np.any(self.saliency < 0) or np.any(self.saliency > 1):
            raise ValidationError(self.id, "saliency targets must lie in [0, 1]")
        if rule is not None and not self.label_flipped:
            expected = int(label_length_category(self.moments[0], rule))
            if expected != self.length_label:
                raise ValidationError(
                    self.id, f"length label {self.length_label} disagrees with rule ({expected})"
                )


@dataclass
class SyntheticConfig:
    n_samples: int = 300
    clip_range: tuple[int, int] = (24, 40)
    word_range: tuple[int, int] = (6, 12)
    d_v: int = 32
    d_t: int = 16
    priors: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    # one normalized length interval per category, aligned with ``rule``
    length_ranges: tuple[tuple[float, float], ...] = ((0.05, 0.2), (0.2, 0.4), (0.4, 0.8))
    rule: LengthRule = field(default_factory=lambda: SYNTHETIC_RULE)
    signal: float = 3.0
    noise: float = 0.0
    background: float = 1.0
    word_jitter: float = 0.5
    label_noise: float = 0.0
    multi_moment: bool = False
    clip_seconds: float = 2.0
    seed: int = 0
    world_seed: int = 0  # fixes signal directions; share it between train and eval sets

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        for name, (lo, hi) in (("clip_range", self.clip_range), ("word_range", self.word_range)):
            if lo < 1 or hi < lo:
                raise ConfigError(f"degenerate {name}: {(lo, hi)}")
        if self.d_v < 1 or self.d_t < 1:
            raise ConfigError("feature dims must be positive")
        if abs(sum(self.priors) - 1.0) > 1e-9 or any(p < 0 for p in self.priors):
            raise ConfigError(f"category priors must be non-negative and sum to 1: {self.priors}")
        if len(self.priors) != len(self.length_ranges):
            raise ConfigError("one length range per category prior is required")
        for lo, hi in self.length_ranges:
            if not 0 < lo < hi <= 1:
                raise ConfigError(f"degenerate length range {(lo, hi)}")
        if self.signal < 0 or self.noise < 0 or self.background < 0:
            raise ConfigError("signal, noise and background must be >= 0")
        if not 0 <= self.label_noise <= 1:
            raise ConfigError("label_noise must lie in [0, 1]")


def _stratified_categories(n: int, priors, rng: np.random.Generator) -> np.ndarray:
    raw = np.asarray(priors) * n
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    cats = np.repeat(np.arange(len(priors)), counts)
    rng.shuffle(cats)
    return cats


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _planted_clips(m: Moment, n_clips: int) -> np.ndarray:
    centers = (np.arange(n_clips) + 0.5) / n_clips
    inside = (centers >= m.start) & (centers <= m.end)
    if not inside.any():
        inside[int(np.argmin(np.abs(centers - m.center)))] = True
    return inside


def generate_synthetic(cfg: SyntheticConfig) -> list[Sample]:
    """Seeded video/text features with one planted target segment per sample.

    Planted clips carry a shared foreground direction, a direction specific to
    the length category and a projection of the sentence topic, all scaled by
    ``cfg.signal``. Text tokens are noisy copies of the topic vector.
    """
    cfg.validate()
    world = np.random.default_rng([cfg.world_seed, 7])
    k = len(cfg.priors)
    cat_dirs = np.stack([_unit(world.normal(size=cfg.d_v)) for _ in range(k)])
    fg_dir = _unit(world.normal(size=cfg.d_v))
    topic_map = world.normal(size=(cfg.d_t, cfg.d_v)) / math.sqrt(cfg.d_t)

    rng = np.random.default_rng([cfg.seed, 0])
    cats = _stratified_categories(cfg.n_samples, cfg.priors, rng)
    samples = []
    for i, cat in enumerate(cats):
        n_clips = int(rng.integers(cfg.clip_range[0], cfg.clip_range[1] + 1))
        n_words = int(rng.integers(cfg.word_range[0], cfg.word_range[1] + 1))
        duration = n_clips * cfg.clip_seconds

        moments = [_draw_moment(rng, cfg.length_ranges[cat], duration)]
        if cfg.multi_moment:
            for _ in range(int(rng.integers(0, 3))):
                extra = _draw_moment(rng, cfg.length_ranges[int(rng.integers(k))], duration)
                if all(extra.end <= m.start or extra.start >= m.end for m in moments):
                    moments.append(extra)

        topic = rng.normal(size=cfg.d_t)
        topic_v = _unit(topic @ topic_map)
        video = cfg.background * rng.normal(size=(n_clips, cfg.d_v))
        if cfg.noise:
            video = video + cfg.noise * rng.normal(size=video.shape)
        saliency = np.zeros(n_clips)
        for m in moments:
            planted = _planted_clips(m, n_clips)
            m_cat = bucket(m.length, cfg.rule.boundaries)
            video[planted] += cfg.signal * (fg_dir + cat_dirs[m_cat] + topic_v)
            saliency[planted] = 1.0
        text = topic[None, :] + (cfg.word_jitter + cfg.noise) * rng.normal(size=(n_words, cfg.d_t))

        label = int(label_length_category(moments[0], cfg.rule))
        samples.append(Sample(f"syn-{cfg.seed}-{i:05d}", video, text, moments, saliency, label))

    n_flip = math.floor(cfg.label_noise * cfg.n_samples)
    if n_flip:
        noise_rng = np.random.default_rng([cfg.seed, 1])
        n_cat = cfg.rule.n_categories
        for idx in noise_rng.choice(cfg.n_samples, size=n_flip, replace=False):
            s = samples[idx]
            s.length_label = int((s.length_label + noise_rng.integers(1, n_cat)) % n_cat)
            s.label_flipped = True
    return samples


def _draw_moment(rng: np.random.Generator, length_range, duration: float) -> Moment:
    lo, hi = length_range
    length = float(rng.uniform(lo, hi))
    center = float(rng.uniform(length / 2, 1 - length / 2))
    return Moment(center, length, length * duration)


# ---------------------------------------------------------------- I/O

REQUIRED_KEYS = ("id", "video", "text", "moments", "saliency", "length_label")


def sample_to_record(s: Sample, n_categories: int = 3) -> dict:
    names = category_names(n_categories)
    rec = {
        "id": s.id,
        "video": s.video.tolist(),
        "text": s.text.tolist(),
        "moments": [
            {"center": m.center, "length": m.length, **({"seconds": m.seconds} if m.seconds is not None else {})}
            for m in s.moments
        ],
        "saliency": s.saliency.tolist(),
        "length_label": names[s.length_label],
    }
    if s.label_flipped:
        rec["label_flipped"] = True
    return rec


def record_to_sample(rec: dict, line: int, n_categories: int = 3) -> Sample:
    if not isinstance(rec, dict):
        raise DatasetParseError(line, "record is not a JSON object")
    missing = [k for k in REQUIRED_KEYS if k not in rec]
    if missing:
        raise DatasetParseError(line, f"missing field(s) {missing}")
    names = category_names(n_categories)
    if rec["length_label"] not in names:
        raise DatasetParseError(line, f"unknown length_label {rec['length_label']!r}")
    try:
        moments = [Moment(float(m["center"]), float(m["length"]), m.get("seconds")) for m in rec["moments"]]
        video = np.asarray(rec["video"], dtype=np.float64)
        text = np.asarray(rec["text"], dtype=np.float64)
        saliency = np.asarray(rec["saliency"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(line, f"bad field value: {exc}") from exc
    return Sample(
        str(rec["id"]),
        video,
        text,
        moments,
        saliency,
        names.index(rec["length_label"]),
        bool(rec.get("label_flipped", False)),
    )


def save_dataset(samples: list[Sample], path, n_categories: int = 3) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s, n_categories)) + "\n")


def load_dataset(path, rule: LengthRule | None = None, n_categories: int = 3) -> list[Sample]:
    samples = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(lineno, f"invalid JSON: {exc.msg}") from exc
            s = record_to_sample(rec, lineno, n_categories)
            s.validate(rule)
            samples.append(s)
    return samples


def category_counts(samples: list[Sample], n_categories: int = 3) -> dict[str, int]:
    names = category_names(n_categories)
    counts = {n: 0 for n in names}
    for s in samples:
        counts[names[s.length_label]] += 1
    return counts


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    ids: list[str]
    video: np.ndarray  # (B, L, d_v), zero padded
    video_mask: np.ndarray  # (B, L) bool
    text: np.ndarray  # (B, N, d_t)
    text_mask: np.ndarray  # (B, N) bool
    moments: list[np.ndarray]  # per sample (m, 2) of (center, length)
    saliency: np.ndarray  # (B, L)
    labels: np.ndarray  # (B,) int

    @property
    def size(self) -> int:
        return len(self.ids)


def collate(samples: list[Sample], labels=None) -> Batch:
    b = len(samples)
    max_l = max(s.video.shape[0] for s in samples)
    max_n = max(s.text.shape[0] for s in samples)
    d_v, d_t = samples[0].video.shape[1], samples[0].text.shape[1]
    video = np.zeros((b, max_l, d_v))
    text = np.zeros((b, max_n, d_t))
    vmask = np.zeros((b, max_l), dtype=bool)
    tmask = np.zeros((b, max_n), dtype=bool)
    sal = np.zeros((b, max_l))
    for i, s in enumerate(samples):
        n_l, n_w = s.video.shape[0], s.text.shape[0]
        video[i, :n_l] = s.video
        text[i, :n_w] = s.text
        vmask[i, :n_l] = True
        tmask[i, :n_w] = True
        sal[i, :n_l] = s.saliency
    moments = [np.array([[m.center, m.length] for m in s.moments]) for s in samples]
    if labels is None:
        labels = [s.length_label for s in samples]
    return Batch([s.id for s in samples], video, vmask, text, tmask, moments, sal, np.asarray(labels, dtype=int))
