import csv
import json

import pytest

from autocdsr.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, main

SUBCOMMANDS = ["generate", "train", "evaluate", "strata", "trajectory", "sweep", "bench"]

SYNTH_TOML = """\
scenario = "complementary"
num_users = 60
items_per_domain = 40
num_interests = 4
mean_seq_len = 8.0
seed = 2
"""

TRAIN_TOML = """\
method = "{method}"
learning_rate = 0.01
warmup_steps = 2
max_steps = 6
batch_size = 16
validation_interval = 3
patience_steps = 6

[model]
max_seq_len = 10
embed_dim = 8
num_layers = 1
num_heads = 2
"""


def error_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture
def configs(tmp_path):
    synth = tmp_path / "synth.toml"
    synth.write_text(SYNTH_TOML)

    def train_cfg(method="autocdsr", extra=""):
        p = tmp_path / f"train-{method}.toml"
        p.write_text(TRAIN_TOML.format(method=method) + extra)
        return p

    return synth, train_cfg


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_exits_zero(sub, capsys):
    assert main([sub, "--help"]) == EXIT_OK
    assert "usage" in capsys.readouterr().out


def test_unknown_flag_exits_two(capsys):
    assert main(["generate", "--out", "x", "--bogus"]) == EXIT_USAGE
    assert error_line(capsys)["error"] == "usage"
    assert main(["frobnicate"]) == EXIT_USAGE


def test_config_error_names_the_field(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("num_users = 10\ndomain_mix = 2.0\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert error_line(capsys)["field"] == "domain_mix"
    bad.write_text("num_userz = 10\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert error_line(capsys)["field"] == "num_userz"


def test_nested_config_error_path(tmp_path, configs, capsys):
    synth, train_cfg = configs
    run = tmp_path / "run"
    assert main(["generate", "--config", str(synth), "--out", str(run)]) == EXIT_OK
    cfg = tmp_path / "t.toml"
    cfg.write_text("[model]\nembed_dim = 9\nnum_heads = 2\n")
    assert main(["train", "--config", str(cfg), "--data", str(run)]) == EXIT_CONFIG
    assert error_line(capsys)["field"].startswith("model")


def test_runtime_failure_exits_one(tmp_path, capsys):
    assert main(["evaluate", "--run", str(tmp_path / "missing")]) == EXIT_RUNTIME
    assert error_line(capsys)["error"] == "runtime"


def test_existing_run_needs_force(tmp_path, configs, capsys):
    synth, train_cfg = configs
    run = tmp_path / "run"
    assert main(["generate", "--config", str(synth), "--out", str(run)]) == EXIT_OK
    assert main(["generate", "--config", str(synth), "--out", str(run)]) == EXIT_CONFIG
    assert error_line(capsys)["error"] == "exists"
    cfg = str(train_cfg())
    assert main(["train", "--config", cfg, "--data", str(run)]) == EXIT_OK
    assert main(["train", "--config", cfg, "--data", str(run)]) == EXIT_CONFIG
    assert main(["train", "--config", cfg, "--data", str(run), "--force"]) == EXIT_OK


def test_generate_train_evaluate_pipeline(tmp_path, configs):
    synth, train_cfg = configs
    run = tmp_path / "run"
    assert main(["generate", "--config", str(synth), "--out", str(run)]) == EXIT_OK
    assert (run / "data" / "interactions.tsv").exists() and (run / "data" / "manifest.json").exists()
    assert main(["train", "--config", str(train_cfg()), "--data", str(run)]) == EXIT_OK
    assert (run / "checkpoints" / "best.json").exists()
    assert (run / "logs" / "steps.csv").exists()
    assert main(["evaluate", "--run", str(run), "--threads", "2"]) == EXIT_OK
    rep = json.loads((run / "reports" / "eval.json").read_text())
    assert 0.0 <= rep["overall"]["recall@10"] <= 1.0
    resolved = json.loads((run / "config.resolved.json").read_text())
    assert set(resolved) == {"generate", "train", "evaluate"}
    assert resolved["train"]["model"]["vocab_size"] == 80


def test_single_domain_runs_and_strata(tmp_path, configs):
    synth, train_cfg = configs
    data = tmp_path / "data"
    assert main(["generate", "--config", str(synth), "--out", str(data)]) == EXIT_OK
    single, cross = tmp_path / "single", tmp_path / "cross"
    assert main(["train", "--config", str(train_cfg("single-domain")), "--data", str(data),
                 "--out", str(single)]) == EXIT_OK
    assert sorted(p.name for p in (single / "checkpoints").iterdir()) == ["domain-0.json", "domain-1.json"]
    assert main(["train", "--config", str(train_cfg("autocdsr")), "--data", str(data), "--out", str(cross)]) == EXIT_OK
    assert main(["evaluate", "--run", str(single)]) == EXIT_OK
    assert main(["strata", "--single", str(single), "--cross", str(cross)]) == EXIT_OK
    rows = list(csv.DictReader((cross / "reports" / "strata.csv").open()))
    assert len(rows) == 4


def test_trajectory_sweep_and_bench(tmp_path, configs):
    synth, train_cfg = configs
    data = tmp_path / "data"
    assert main(["generate", "--config", str(synth), "--out", str(data)]) == EXIT_OK
    runs = []
    for rate in (0.0, 0.5):
        out = tmp_path / f"r{rate}"
        cfg = tmp_path / f"train-{rate}.toml"
        # top-level keys must precede the [model] table
        cfg.write_text(f"corruption_rate = {rate}\n" + TRAIN_TOML.format(method="autocdsr"))
        assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == EXIT_OK
        runs.append(str(out))
    traj = tmp_path / "traj"
    assert main(["trajectory", "--runs", *runs, "--out", str(traj), "--config", str(_json(tmp_path, {"window": 2}))]) == 0
    rows = list(csv.DictReader((traj / "trajectory_summary.csv").open()))
    assert len(rows) == 2

    sweep_cfg = _json(tmp_path, {"grid": [[1.0, 0.0], [0.5, 0.5]], "num_negatives": 20,
                                 "train": {"max_steps": 3, "validation_interval": 3, "patience_steps": 3,
                                           "batch_size": 16, "model": {"embed_dim": 8, "num_layers": 1,
                                                                       "num_heads": 2, "max_seq_len": 10}}})
    sweep = tmp_path / "sweep"
    assert main(["sweep", "--config", str(sweep_cfg), "--data", str(data), "--out", str(sweep)]) == EXIT_OK
    rows = list(csv.DictReader((sweep / "reports" / "sweep.csv").open()))
    assert {(r["alpha1"], r["alpha2"]) for r in rows} == {("1.0", "0.0"), ("0.5", "0.5")}

    bench_cfg = _json(tmp_path, {"steps": 200, "warmup": 2,
                                 "train": {"batch_size": 8, "model": {"embed_dim": 8, "num_layers": 1,
                                                                      "num_heads": 2, "max_seq_len": 10}}})
    bench = tmp_path / "bench"
    assert main(["bench", "--config", str(bench_cfg), "--data", str(data), "--out", str(bench)]) == EXIT_OK
    rows = list(csv.DictReader((bench / "reports" / "overhead.csv").open()))
    assert [r["configuration"] for r in rows] == ["naive-cross-domain", "autocdsr"]
    assert float(rows[0]["throughput_drop_percent"]) == 0.0


def _json(tmp_path, doc, _n=[0]):
    _n[0] += 1
    p = tmp_path / f"cfg{_n[0]}.json"
    p.write_text(json.dumps(doc))
    return p


def test_pipeline_is_deterministic(tmp_path, configs):
    synth, train_cfg = configs
    cfg = str(train_cfg())
    outputs = []
    for tag in ("a", "b"):
        run = tmp_path / tag / "run"  # reports carry the run name
        assert main(["generate", "--config", str(synth), "--out", str(run)]) == EXIT_OK
        assert main(["train", "--config", cfg, "--data", str(run)]) == EXIT_OK
        assert main(["evaluate", "--run", str(run)]) == EXIT_OK
        outputs.append([(run / p).read_bytes() for p in (
            "data/interactions.tsv", "checkpoints/best.json", "logs/steps.csv", "reports/eval.json")])
    assert outputs[0] == outputs[1]


def test_seed_override_changes_data(tmp_path, configs):
    synth, _ = configs
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--config", str(synth), "--out", str(a)]) == EXIT_OK
    assert main(["generate", "--config", str(synth), "--out", str(b), "--seed", "7"]) == EXIT_OK
    assert (a / "data" / "interactions.tsv").read_bytes() != (b / "data" / "interactions.tsv").read_bytes()
    assert json.loads((b / "config.resolved.json").read_text())["generate"]["seed"] == 7


def test_parser_lists_every_subcommand():
    text = build_parser().format_help()
    assert all(s in text for s in SUBCOMMANDS)
