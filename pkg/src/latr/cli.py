"""Command-line entry point: ``latr {generate-data,train,eval,ablate,analyze}``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ABLATION_ROWS, RunConfig, dump_config, load_config
from .data import ConfigError, DatasetParseError, ValidationError, category_counts, load_dataset, save_dataset
from .metrics import MetricsReport
from .training import (
    TrainingAborted,
    all_concentrations,
    evaluate_model,
    eval_samples,
    load_checkpoint,
    load_or_generate,
    train,
)

log = logging.getLogger("latr")

# config keys with a dedicated flag; anything else goes through --set
OVERRIDE_FLAGS = ("seed", "tau", "nq", "topk_save", "top_select", "mode", "split", "epochs")


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _echo_config(out_dir: Path, cfg: RunConfig) -> None:
    (out_dir / "config.txt").write_text(dump_config(cfg))


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve_config(args) -> RunConfig:
    overrides = _parse_set(args.set)
    for key in OVERRIDE_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _out_dir(args) -> Path:
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- commands

def cmd_generate_data(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    train_set, eval_set = load_or_generate(dataclasses.replace(cfg, train_path="", eval_path=""))
    save_dataset(train_set, out / "train.jsonl")
    save_dataset(eval_set, out / "eval.jsonl")
    _echo_config(out, cfg)
    rows = []
    for name, samples in (("train", train_set), ("eval", eval_set)):
        for cat, n in category_counts(samples).items():
            rows.append((name, cat, n))
    _write_csv(out / "category_counts.csv", ["split", "category", "count"], rows)
    print("split,category,count")
    for r in rows:
        print(",".join(map(str, r)))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    train_set, _ = load_or_generate(cfg)
    _echo_config(out, cfg)
    result = train(cfg, train_set, out_dir=out, resume=args.resume, progress=True)
    print(f"trained {len(result.history)} epochs, step {result.step}, final loss {result.final_loss:.6f}")
    print(f"checkpoint: {out / 'checkpoint.npz'}")
    return 0


def _eval_samples(cfg: RunConfig, data: str | None):
    return load_dataset(data) if data else eval_samples(cfg)


def write_report(out: Path, report: MetricsReport, cfg: RunConfig, stem: str = "metrics") -> None:
    report.to_json(out / f"{stem}.json", extra={"config": cfg.to_dict()})
    report.to_csv(out / f"{stem}.csv")


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.model.cfg
    out = _out_dir(args)
    samples = _eval_samples(cfg, args.data)
    report = evaluate_model(ck.model, ck.layout, samples)
    write_report(out, report, cfg)
    _echo_config(out, cfg)
    print(",".join(report.flat()))
    print(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in report.flat().values()))
    return 0


ABLATION_HEADER = ["row", "use_lp_rs", "use_lad", "use_lqm", "use_topk_save"]


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    out = _out_dir(args)
    train_set, eval_set = load_or_generate(base)
    _echo_config(out, base)
    rows, header = [], None
    for name in ABLATION_ROWS:
        cfg = base.with_ablation(name).validate()
        result = train(cfg, train_set)
        report = evaluate_model(result.model, result.layout, eval_set)
        flat = report.flat()
        flat.setdefault("length_acc", float("nan"))
        header = header or ABLATION_HEADER + list(flat)
        rows.append([name, *(int(x) for x in ABLATION_ROWS[name]), *flat.values()])
        log.info("row %s R1@0.5 %.4f", name, report.r1[0.5])
    _write_csv(out / "ablation.csv", header, rows)
    print(",".join(header))
    for r in rows:
        print(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in r))
    return 0


def cmd_analyze(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.model.cfg
    out = _out_dir(args)
    samples = _eval_samples(cfg, args.data)
    conc, idx = all_concentrations(ck.model, samples, n=args.n, seed=cfg.seed)
    anchors, roles = ck.layout.anchors, ck.layout.roles
    _write_csv(
        out / "query_std.csv",
        ["query", "anchor_center", "anchor_length", "role", "n", "std"],
        [(c.query, anchors[c.query, 0], anchors[c.query, 1], roles[c.query], len(c.lengths), c.std) for c in conc],
    )
    _write_csv(
        out / "query_hist.csv",
        ["query", "bin_lo", "bin_hi", "count"],
        [(c.query, c.edges[b], c.edges[b + 1], int(c.counts[b])) for c in conc for b in range(len(c.counts))],
    )
    _write_csv(
        out / "query_scatter.csv",
        ["sample_index", "sample_id", "query", "length"],
        [(int(i), samples[i].id, c.query, c.lengths[j]) for c in conc for j, i in enumerate(idx)],
    )
    _echo_config(out, cfg)
    print("query,std")
    for c in conc:
        print(f"{c.query},{c.std:.6f}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out-dir", default="runs", help="output directory (default: runs)")
    common.add_argument("--seed", type=int)
    common.add_argument("--tau", type=float)
    common.add_argument("--nq", type=int)
    common.add_argument("--topk-save", dest="topk_save", type=int)
    common.add_argument("--top-select", dest="top_select", type=int)
    common.add_argument("--mode", choices=["prose", "literal"])
    common.add_argument("--split", type=int, choices=[2, 3, 4])
    common.add_argument("--epochs", type=int)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="latr", description="Length-aware temporal sentence grounding.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="write seeded synthetic train/eval JSONL")
    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--resume", help="checkpoint to continue from")
    for name, helptext in (("eval", "evaluate a checkpoint"), ("analyze", "per-query length concentration")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", help="JSONL dataset (default: the checkpoint config's eval set)")
        if name == "analyze":
            e.add_argument("--n", type=int, default=50, help="number of sampled eval items")
    sub.add_parser("ablate", parents=[common], help="train and evaluate component rows a-f")
    return p


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
}

EXPECTED_ERRORS = (
    ConfigError,
    DatasetParseError,
    ValidationError,
    TrainingAborted,
    FileNotFoundError,
    OSError,
    ValueError,
    KeyError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except EXPECTED_ERRORS as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"latr {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
