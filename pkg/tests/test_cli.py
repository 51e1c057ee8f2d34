from __future__ import annotations

import json

import numpy as np
import pytest

from subgoal_planner.checkpoint import load_checkpoint
from subgoal_planner.cli import (
    CONFIG_ENV,
    EXIT_DATA,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    RESOLVED_NAME,
    load_corpus,
    main,
    parse_config_text,
)
from subgoal_planner.config import TrainConfig
from subgoal_planner.dataset import read_episodes
from subgoal_planner.trainer import (
    CHECKPOINT_NAME,
    TRACE_NAME,
    build_vocab,
    evaluate,
    model_from_checkpoint,
    new_model,
    read_trace,
)

TINY = ["--set", "model.d=16", "--set", "model.heads=2", "--set", "model.depth_visual=1",
        "--set", "model.depth_text=1", "--set", "model.max_len=16"]
GEN = ["--scenes", "3", "--unseen", "1", "--episodes-per-scene", "4", "--set", "corpus.valid_seen_per_scene=1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--seed", "7", "--out", str(out), *GEN]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--seed", "3", *TINY]) == EXIT_OK
    return out


def test_gen_data_is_byte_identical(data, tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--seed", 7, "--out", tmp_path, *GEN)
    assert code == EXIT_OK and json.loads(out)["episodes"] == {"train": 6, "valid_seen": 2, "valid_unseen": 4}
    for split in ("train", "valid_seen", "valid_unseen"):
        assert (tmp_path / f"{split}.jsonl").read_bytes() == (data / f"{split}.jsonl").read_bytes()
        assert read_episodes(tmp_path / f"{split}.jsonl")
    assert "corpus.seed = 7" in (tmp_path / RESOLVED_NAME).read_text()


def test_usage_and_data_errors(tmp_path, capsys):
    assert run(capsys, "gen-data", "--seed", 1)[0] == EXIT_USAGE
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE
    assert run(capsys, "gen-data", "--out", tmp_path, "--set", "model.nope=1")[0] == EXIT_USAGE
    code, _, err = run(capsys, "train", "--data", tmp_path / "missing", "--out", tmp_path / "o")
    assert code == EXIT_DATA and "data error" in err
    code, _, _ = run(capsys, "gen-data", "--out", tmp_path, "--scenes", 2, "--unseen", 1, "--episodes-per-scene", 2)
    assert code == EXIT_DATA  # default valid_seen_per_scene leaves no training episodes


def test_train_zero_epochs_saves_initial_weights(data, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--data", data, "--out", tmp_path, "--epochs", 0, "--seed", 3, *TINY)
    assert code == EXIT_OK
    ckpt = load_checkpoint(tmp_path / CHECKPOINT_NAME)
    config = TrainConfig.from_dict(ckpt.meta["train_config"])
    assert config.seed == 3
    init = new_model(config, build_vocab(load_corpus(data, ("train",))))
    for name, arr in init.state_dict().items():
        np.testing.assert_array_equal(ckpt.model_params[name], arr.astype(np.float32))


def test_eval_matches_in_process(data, trained, capsys):
    code, out, _ = run(capsys, "eval", "--data", data, "--checkpoint", trained / CHECKPOINT_NAME)
    assert code == EXIT_OK
    corpus = load_corpus(data)
    model = model_from_checkpoint(load_checkpoint(trained / CHECKPOINT_NAME))
    rows = [line.split("\t") for line in out.strip().splitlines()[1:]]
    for row in rows:
        rep = evaluate(model, corpus, row[0])
        assert row[2:] == [f"{rep.accuracy(h):.2f}" for h in ("action", "object", "receptacle", "total")]


def test_eval_oracle_reports_100(data, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--data", data, "--oracle", "--out", tmp_path)
    assert code == EXIT_OK
    for line in out.strip().splitlines()[1:]:
        assert line.split("\t")[2:] == ["100.00"] * 4
    assert json.loads((tmp_path / "eval.json").read_text())[0]["accuracy"]["total"] == 100.0


def test_resume_continues_trace(data, tmp_path, capsys):
    base = ["train", "--data", data, "--out", tmp_path, "--seed", 3, *TINY]
    assert run(capsys, *base, "--epochs", 1)[0] == EXIT_OK
    n1 = len(read_trace(tmp_path / TRACE_NAME))
    code, out, _ = run(capsys, *base, "--epochs", 2, "--resume")
    assert code == EXIT_OK and json.loads(out)["epochs_done"] == 2
    steps = [s for s, _ in read_trace(tmp_path / TRACE_NAME)]
    assert len(steps) > n1 and steps == list(range(1, len(steps) + 1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(data, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", data, "--out", tmp_path, "--epochs", 3, "--lr", "1e300", *TINY)
    assert code == EXIT_NUMERIC and "step" in err


def test_ablate_schema(data, tmp_path, capsys):
    code, out, _ = run(capsys, "ablate", "--data", data, "--rows", "full,no_history", "--epochs", 1,
                       "--out", tmp_path, *TINY)
    assert code == EXIT_OK
    lines = out.strip().splitlines()
    assert [line.split("\t")[0] for line in lines] == ["row", "full", "no_history"]
    assert all(len(line.split("\t")) == 1 + 6 + 4 * 2 for line in lines)
    assert (tmp_path / "ablation.tsv").read_text() == out
    assert [r["mask"]["use_S_hist"] for r in json.loads((tmp_path / "ablation.json").read_text())] == [True, False]
    assert run(capsys, "ablate", "--data", data, "--rows", "nope")[0] == EXIT_USAGE


def test_simulate_is_reproducible(data, trained, tmp_path, capsys):
    args = ["simulate", "--data", data, "--inject", "navigation_error@2", "--seed", 5]
    a = run(capsys, *args, "--policy", "recovery", "--runs", 2, "--out", tmp_path / "a")
    b = run(capsys, *args, "--policy", "recovery", "--runs", 2, "--out", tmp_path / "b")
    assert a[0] == EXIT_OK and a[1] == b[1] and "recovery_rate=1.0000" in a[1]
    assert (tmp_path / "a/trajectories.jsonl").read_bytes() == (tmp_path / "b/trajectories.jsonl").read_bytes()
    m1 = run(capsys, *args, "--checkpoint", trained / CHECKPOINT_NAME, "--split", "valid_unseen", "--runs", 3)
    m2 = run(capsys, *args, "--checkpoint", trained / CHECKPOINT_NAME, "--split", "valid_unseen", "--runs", 3)
    assert m1[0] == EXIT_OK and m1[1] == m2[1] and m1[1].count("failures_injected=") == 3
    assert run(capsys, "simulate", "--data", data, "--policy", "model")[0] == EXIT_USAGE


def test_inspect_checkpoint(trained, capsys):
    code, out, _ = run(capsys, "inspect-checkpoint", trained / CHECKPOINT_NAME, "--params")
    info = json.loads(out)
    assert code == EXIT_OK and info["has_optimizer"] and info["meta"]["epoch"] == 1
    assert info["config"]["d"] == 16 and len(info["params"]) > info["n_tensors"]


def test_config_file_env_and_flag_precedence(data, tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nepochs = 0\nlr = 0.5\nmodel.d = 16\nmodel.heads = 2\nmask = no_bbox\n")
    monkeypatch.setenv(CONFIG_ENV, str(cfg))
    out = tmp_path / "o"
    assert run(capsys, "train", "--data", data, "--out", out, "--lr", "0.25", "--set", "model.max_len=16")[0] == 0
    text = (out / RESOLVED_NAME).read_text()
    assert "train.lr = 0.25" in text and "train.epochs = 0" in text and "train.model.d = 16" in text
    assert "train.mask.use_B_n = false" in text
    assert parse_config_text("a = 1 # c\n\n b.c=x") == {"a": "1", "b.c": "x"}
    cfg.write_text("nonsense line\n")
    assert run(capsys, "train", "--data", data, "--out", out)[0] == EXIT_USAGE
