import csv
import hashlib
import json

import numpy as np
import pytest

from latr.cli import main
from latr.config import ABLATION_ROWS, RunConfig, dump_config, load_config, parse_config_text
from latr.data import ConfigError, load_dataset
from latr.training import load_checkpoint, load_or_generate, train

TINY = """\
# tiny smoke configuration
n_train = 24
n_eval = 12
clip_min = 6
clip_max = 9
word_min = 3
word_max = 5
d_v = 5
d_t = 4
dim = 8
nq = 4
enc_cross_layers = 1
enc_self_layers = 1
dec_layers = 2
top_select = 1
topk_save = 1
batch_size = 8
epochs = 1
lr = 1e-3
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config


def test_defaults_are_valid_and_follow_reference_hyperparameters():
    cfg = RunConfig().validate()
    assert (cfg.dim, cfg.nq, cfg.tau, cfg.lr, cfg.weight_decay, cfg.batch_size) == (256, 20, 0.5, 1e-4, 1e-4, 32)
    assert (cfg.lambda_sal, cfg.lambda_alig, cfg.lambda_lencl) == (1.0, 0.3, 1.0)


def test_config_text_parsing_and_overrides(tiny_config):
    cfg = load_config(tiny_config, {"tau": "0.3", "mode": "literal", "use_lqm": "off"})
    assert (cfg.dim, cfg.nq, cfg.tau, cfg.mode, cfg.use_lqm) == (8, 4, 0.3, "literal", False)


def test_dump_round_trips():
    cfg = RunConfig(dim=16, mode="literal", train_path="a b.jsonl", use_lqm=False)
    back = RunConfig.from_dict(parse_config_text(dump_config(cfg)))
    assert back == cfg


@pytest.mark.parametrize(
    "overrides,fragment",
    [
        ({"use_lp_rs": "false"}, "use_lad needs use_lp_rs"),
        ({"use_lp_rs": "false", "use_lad": "false", "use_lqm": "false", "use_topk_save": "true"}, "use_topk_save"),
        ({"split": "5"}, "split"),
        ({"tau": "1.0"}, "tau"),
        ({"mode": "strict"}, "mode"),
        ({"nq": "2"}, "nq"),
        ({"lambda_alig": "-1"}, "lambda_alig"),
        ({"epochs": "x"}, "expected int"),
        ({"use_lqm": "maybe"}, "boolean"),
        ({"colour": "red"}, "unknown config keys"),
    ],
)
def test_invalid_configurations_explain_themselves(overrides, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(None, overrides)


def test_malformed_config_line(tmp_path):
    (tmp_path / "bad.cfg").write_text("dim = 8\njust words\n")
    with pytest.raises(ConfigError, match="line 2"):
        load_config(tmp_path / "bad.cfg")


def test_ablation_rows_grid():
    assert list(ABLATION_ROWS) == list("abcdef")
    assert ABLATION_ROWS["a"] == (False,) * 4 and ABLATION_ROWS["f"] == (True,) * 4
    for row in ABLATION_ROWS:
        RunConfig().with_ablation(row).validate()


# ---------------------------------------------------------------- commands


def test_generate_data_is_seeded_and_byte_stable(tiny_config, tmp_path, capsys):
    for d in ("g1", "g2"):
        assert run("generate-data", "--config", tiny_config, "--out-dir", tmp_path / d) == 0
    h = [hashlib.sha256((tmp_path / d / "train.jsonl").read_bytes()).hexdigest() for d in ("g1", "g2")]
    assert h[0] == h[1]
    counts = read_csv(tmp_path / "g1" / "category_counts.csv")
    assert sum(int(r["count"]) for r in counts if r["split"] == "train") == 24
    assert len(load_dataset(tmp_path / "g1" / "eval.jsonl")) == 12
    assert "split,category,count" in capsys.readouterr().out


def test_default_priors_balanced_via_cli(tmp_path):
    assert run("generate-data", "--set", "n_train=300", "--set", "n_eval=3", "--out-dir", tmp_path) == 0
    for r in read_csv(tmp_path / "category_counts.csv"):
        if r["split"] == "train":
            assert abs(int(r["count"]) - 100) <= 10


def test_train_eval_analyze_round_trip(tiny_config, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--config", tiny_config, "--out-dir", out, "--epochs", 2) == 0
    log_rows = read_csv(out / "train_log.csv")
    assert [int(r["epoch"]) for r in log_rows] == [1, 2]
    for r in log_rows:
        assert float(r["total"]) > 0
    assert load_config(out / "config.txt").epochs == 2

    assert run("eval", "--checkpoint", out / "checkpoint.npz", "--out-dir", tmp_path / "ev1") == 0
    assert run("eval", "--checkpoint", out / "checkpoint.npz", "--out-dir", tmp_path / "ev2") == 0
    m1 = json.loads((tmp_path / "ev1" / "metrics.json").read_text())
    m2 = json.loads((tmp_path / "ev2" / "metrics.json").read_text())
    assert m1 == m2
    for key in ("R1@0.3", "R1@0.5", "R1@0.7", "mAP@0.5", "mAP@0.75", "mAP_avg", "mIoU", "length_acc"):
        assert key in m1["metrics"]
    assert m1["config"]["dim"] == 8
    assert len(m1["query_length_std"]) == 4

    assert run("analyze", "--checkpoint", out / "checkpoint.npz", "--out-dir", tmp_path / "an", "--n", 50) == 0
    stds = read_csv(tmp_path / "an" / "query_std.csv")
    assert len(stds) == 4
    # n clamps to the 12 eval samples
    assert {int(r["n"]) for r in stds} == {12}
    hist = read_csv(tmp_path / "an" / "query_hist.csv")
    assert sum(int(r["count"]) for r in hist) == 4 * 12
    assert len(read_csv(tmp_path / "an" / "query_scatter.csv")) == 4 * 12
    np.testing.assert_allclose([float(r["std"]) for r in stds], m1["query_length_std"], atol=1e-12)


def test_analyze_is_reproducible(tiny_config, tmp_path):
    run("train", "--config", tiny_config, "--out-dir", tmp_path / "r")
    for d in ("a1", "a2"):
        run("analyze", "--checkpoint", tmp_path / "r" / "checkpoint.npz", "--out-dir", tmp_path / d, "--n", 5)
    assert (tmp_path / "a1" / "query_scatter.csv").read_bytes() == (tmp_path / "a2" / "query_scatter.csv").read_bytes()


def test_training_is_deterministic(tiny_config, tmp_path):
    for d in ("t1", "t2"):
        assert run("train", "--config", tiny_config, "--out-dir", tmp_path / d, "--seed", 7) == 0
    assert (tmp_path / "t1" / "train_log.csv").read_bytes() == (tmp_path / "t2" / "train_log.csv").read_bytes()


def test_resume_continues_step_counter(tiny_config, tmp_path):
    cfg = load_config(tiny_config, {"epochs": 1})
    train_set, _ = load_or_generate(cfg)
    first = train(cfg, train_set, out_dir=tmp_path / "r")
    cfg2 = load_config(tiny_config, {"epochs": 2})
    resumed = train(cfg2, train_set, out_dir=tmp_path / "r", resume=tmp_path / "r" / "checkpoint.npz")
    straight = train(cfg2, train_set)
    assert resumed.step == 2 * first.step == straight.step
    assert resumed.final_loss == straight.final_loss
    assert load_checkpoint(tmp_path / "r" / "checkpoint.npz").epoch == 2
    assert [int(r["epoch"]) for r in read_csv(tmp_path / "r" / "train_log.csv")] == [1, 2]


def test_ablate_emits_six_rows(tiny_config, tmp_path):
    assert run("ablate", "--config", tiny_config, "--out-dir", tmp_path) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert [r["row"] for r in rows] == list("abcdef")
    assert rows[0]["length_acc"] == "nan"
    assert [r["use_lp_rs"] for r in rows] == ["0", "1", "1", "1", "1", "1"]
    assert (tmp_path / "config.txt").exists()


# ---------------------------------------------------------------- failures


def test_missing_checkpoint_is_a_clear_error(tmp_path, capsys):
    assert run("eval", "--checkpoint", tmp_path / "nope.npz", "--out-dir", tmp_path) != 0
    err = capsys.readouterr().err.strip()
    assert err.startswith("latr eval: error:") and "nope.npz" in err
    assert len(err.splitlines()) == 1


def test_bad_output_path_exits_nonzero(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("generate-data", "--set", "n_train=3", "--set", "n_eval=3", "--out-dir", blocker / "sub") != 0
    assert "error" in capsys.readouterr().err


def test_invalid_combination_via_cli(tmp_path, capsys):
    assert run("train", "--set", "use_lp_rs=false", "--out-dir", tmp_path) == 2
    assert "needs use_lp_rs" in capsys.readouterr().err


def test_bad_dataset_path_via_cli(tiny_config, tmp_path, capsys):
    (tmp_path / "broken.jsonl").write_text("{oops\n")
    code = run("train", "--config", tiny_config, "--set", f"train_path={tmp_path / 'broken.jsonl'}", "--out-dir", tmp_path)
    assert code == 2
    assert "line 1" in capsys.readouterr().err
