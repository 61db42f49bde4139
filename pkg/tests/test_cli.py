import csv

import pytest

from vsdn.cli import EXIT_INPUT, EXIT_OK, EXIT_VERIFY, main
from vsdn.datasets import load_sporadic_csv

SMALL = """
[model]
d1 = 2
d_h = 4
mlp_hidden = 6
activation = tanh
max_dt = 0.1
K = 2
prediction_samples = 3

[train]
epochs = 2
batch_size = 4
learning_rate = 0.01
eval_samples = 3

[data]
n_seq = 12
horizon = 1.0
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return str(p)


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_simulate_is_byte_identical(tmp_path, config):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert main(["simulate-ou", "--config", config, "--seed", "3", "--out", str(out), "--sporadic"]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert len(load_sporadic_csv(a)) == 12
    c = tmp_path / "c.csv"
    main(["simulate-ou", "--config", config, "--seed", "4", "--out", str(c), "--sporadic"])
    assert c.read_bytes() != a.read_bytes()


def test_sporadify_thins_data(tmp_path, config):
    dense = tmp_path / "dense.csv"
    main(["simulate-ou", "--config", config, "--out", str(dense)])
    thin = tmp_path / "thin.csv"
    assert main(["sporadify", "--config", config, "--data", str(dense), "--out", str(thin)]) == EXIT_OK
    n_dense = sum(s.n for s in load_sporadic_csv(dense))
    assert sum(s.n for s in load_sporadic_csv(thin)) < n_dense


def test_input_errors(tmp_path, capsys, config):
    missing = tmp_path / "nope.ini"
    assert main(["train", "--config", str(missing), "--out", str(tmp_path)]) == EXIT_INPUT
    assert "nope.ini" in capsys.readouterr().err
    assert main(["frobnicate"]) == EXIT_INPUT
    assert main(["verify", "kl-oracle"]) == EXIT_INPUT
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nd1 = two\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_INPUT
    bad.write_text("[model]\nwidth = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["evaluate", "--config", config, "--checkpoint", str(tmp_path / "x.npz"),
                 "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["verify", "bound-ordering", "--out", str(tmp_path)]) == EXIT_INPUT


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "simulate-ou" in capsys.readouterr().out


def test_train_evaluate_interpolate_roundtrip(tmp_path, config):
    out = tmp_path / "run"
    assert main(["train", "--config", config, "--out", str(out)]) == EXIT_OK
    for name in ("config.ini", "history.csv", "checkpoint.npz", "history.png"):
        assert (out / name).is_file()
    assert len(_rows(out / "history.csv")) == 1 + 2 * 2
    ck = str(out / "checkpoint.npz")
    assert main(["evaluate", "--config", config, "--checkpoint", ck, "--out", str(out)]) == EXIT_OK
    metrics = _rows(out / "metrics_prediction.csv")
    assert metrics[0][:3] == ["task", "nll_per_frame", "mse"] and metrics[1][0] == "prediction"
    assert (out / "frames_prediction.png").is_file()
    assert main(["interpolate", "--config", config, "--checkpoint", ck, "--out", str(out)]) == EXIT_OK
    assert _rows(out / "metrics_interpolation.csv")[1][0] == "interpolation"
    assert main(["verify", "bound-ordering", "--config", config, "--checkpoint", ck, "--samples", "100",
                 "--n-series", "1", "--out", str(out)]) in (EXIT_OK, EXIT_VERIFY)
    assert len(_rows(out / "bound_ordering.csv")) == 1 + 6


def test_train_history_reproducible(tmp_path, config):
    hist = []
    for name in ("a", "b"):
        assert main(["train", "--config", config, "--epochs", "1", "--out", str(tmp_path / name)]) == EXIT_OK
        hist.append([r[:-1] for r in _rows(tmp_path / name / "history.csv")])
    assert hist[0] == hist[1]


@pytest.mark.parametrize("check", ["logw-identity", "noise-injection"])
def test_verify_exit_codes(tmp_path, check):
    assert main(["verify", check, "--out", str(tmp_path)]) == EXIT_OK
    assert any(tmp_path.glob("*.csv"))


def test_normalized_run_writes_stats(tmp_path, config):
    text = open(config).read().replace("[data]", "[data]\nnormalize = true")
    cfg = tmp_path / "norm.ini"
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert _rows(tmp_path / "norm_stats.csv")[0] == ["dim", "mean", "std"]
