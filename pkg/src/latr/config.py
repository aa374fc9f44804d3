"""Run configuration: one flat set of named keys, loadable from a plain-text
``key = value`` file and overridable from the command line."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .data import CHARADES_RULE, QVHIGHLIGHTS_RULE, SYNTHETIC_RULE, TACOS_RULE, ConfigError, LengthRule
from .qli import RS_MODES

LENGTH_RULES = {
    "synthetic": SYNTHETIC_RULE,
    "qvhighlights": QVHIGHLIGHTS_RULE,
    "charades": CHARADES_RULE,
    "tacos": TACOS_RULE,
}

# component grid: (length prediction + suppression, decoder refinement,
# quality masking, top-k save)
ABLATION_ROWS = {
    "a": (False, False, False, False),
    "b": (True, False, False, False),
    "c": (True, True, False, False),
    "d": (True, True, True, False),
    "e": (True, True, False, True),
    "f": (True, True, True, True),
}


@dataclass
class RunConfig:
    # data
    train_path: str = ""
    eval_path: str = ""
    n_train: int = 1000
    n_eval: int = 300
    clip_min: int = 24
    clip_max: int = 40
    word_min: int = 6
    word_max: int = 12
    d_v: int = 32
    d_t: int = 16
    signal: float = 3.0
    noise: float = 0.0
    label_noise: float = 0.0
    world_seed: int = 0
    multi_moment: bool = False
    length_rule: str = "synthetic"
    # model
    dim: int = 256
    heads: int = 1
    enc_cross_layers: int = 2
    enc_self_layers: int = 2
    dec_layers: int = 3
    ffn_dim: int = 0  # 0 -> 2 * dim
    nq: int = 20
    split: int = 3
    tau: float = 0.5
    mode: str = "prose"
    top_select: int = 4
    topk_save: int = 3
    mask_threshold: float = 0.5
    classifier: str = "binary"
    lt_init: str = "zero"
    use_pe: bool = True
    align_temperature: float = 0.1
    # component toggles
    use_lp_rs: bool = True
    use_lad: bool = True
    use_lqm: bool = True
    use_topk_save: bool = True
    loss_mean: bool = True
    loss_weight: bool = True
    loss_median: bool = True
    # objective
    lambda_sal: float = 1.0
    lambda_alig: float = 0.3
    lambda_lencl: float = 1.0
    # optimization
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.split not in (2, 3, 4):
            raise ConfigError(f"split must be 2, 3 or 4, got {self.split}")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.mode not in RS_MODES:
            raise ConfigError(f"mode must be one of {RS_MODES}, got {self.mode!r}")
        if self.length_rule not in LENGTH_RULES:
            raise ConfigError(f"unknown length_rule {self.length_rule!r}")
        if self.nq < self.split:
            raise ConfigError(f"nq={self.nq} cannot cover {self.split} length groups")
        if self.top_select < 1 or self.topk_save < 0:
            raise ConfigError("top_select must be >= 1 and topk_save >= 0")
        for name in ("lambda_sal", "lambda_alig", "lambda_lencl"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.use_lp_rs:
            for dep in ("use_lad", "use_lqm", "use_topk_save"):
                if getattr(self, dep):
                    raise ConfigError(f"{dep} needs use_lp_rs: there is no suppression to refine, mask or save")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        return self

    @property
    def rule(self) -> LengthRule:
        return LENGTH_RULES[self.length_rule]

    def with_ablation(self, row: str) -> "RunConfig":
        lp, lad, lqm, ts = ABLATION_ROWS[row]
        return dataclasses.replace(self, use_lp_rs=lp, use_lad=lad, use_lqm=lqm, use_topk_save=ts)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(k, v) for k, v in d.items()})


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None
    return str(value)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value.strip("\"'")
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(values).validate()


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {json.dumps(v) if isinstance(v, str) else v}\n" for k, v in cfg.to_dict().items())
