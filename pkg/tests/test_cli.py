import json

import numpy as np
import pytest

from bpmf.cli import main
from bpmf.data import load_model, save_ratings_mm, synthetic_ratings
from bpmf.rng import Side, StreamKey, stream_for


@pytest.fixture
def train_file(tmp_path):
    gen = stream_for(StreamKey(5, 3, Side.NOISE, 0))
    users, movies, values, _, _ = synthetic_ratings(24, 16, 3, 0.5, 0.1, gen)
    path = tmp_path / "train.mm"
    save_ratings_mm(str(path), 24, 16, users, movies, values)
    return str(path)


BASE = ["--k", "3", "--iters", "3", "--burnin", "1", "--seed", "5"]


@pytest.mark.parametrize(
    "argv",
    [
        [],  # --train is required
        ["--train", "t.mm", "--iters", "50", "--burnin", "60"],
        ["--train", "t.mm", "--p", "4", "--node-id", "4"],
        ["--train", "t.mm", "--p", "2"],  # no hostfile
        ["--train", "t.mm", "--wat"],
        ["--train", "t.mm", "--k", "0"],
        ["--train", "t.mm", "--clamp", "5:1"],
        ["--train", "t.mm", "--test", "x.mm", "--holdout", "0.3"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "error:" in capsys.readouterr().err


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    assert "--train" in capsys.readouterr().out


def test_missing_train_file_exits_2(tmp_path, capsys):
    assert main(["--train", str(tmp_path / "nope.mm"), *BASE]) == 2
    assert "data error:" in capsys.readouterr().err


def test_corrupt_train_file_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.mm"
    bad.write_text("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 5.0\n")
    assert main(["--train", str(bad), *BASE]) == 2
    assert "data error:" in capsys.readouterr().err


def test_oversized_test_set_exits_2(tmp_path, train_file, capsys):
    test = tmp_path / "test.mm"
    save_ratings_mm(str(test), 99, 16, [98], [0], [1.0])
    assert main(["--train", train_file, "--test", str(test), *BASE]) == 2
    assert "test set indexes" in capsys.readouterr().err


def run_cli(tmp_path, train_file, tag, extra=()):
    metrics = tmp_path / f"metrics-{tag}.txt"
    model = tmp_path / f"model-{tag}"
    code = main(
        ["--train", train_file, *BASE, "--holdout", "0.25",
         "--metrics", str(metrics), "--model-out", str(model), *extra]
    )
    return code, metrics, model


def test_end_to_end_run(tmp_path, train_file, capsys):
    code, metrics, model = run_cli(tmp_path, train_file, "a")
    assert code == 0
    out, err = capsys.readouterr()

    progress = [line for line in out.splitlines() if line.startswith("iter=")]
    assert len(progress) == 3
    assert progress[0].startswith("iter=0 rmse_sample=")

    lines = metrics.read_text().splitlines()
    assert lines == progress  # file mirrors stdout exactly

    sidecar = json.loads((tmp_path / "metrics-a.json").read_text())
    assert len(sidecar["records"]) == 3
    assert sidecar["config"]["k"] == 3
    assert sidecar["records"][0]["wall_seconds"] > 0

    u, v, meta = load_model(str(model))
    assert u.shape == (24, 3) and v.shape == (16, 3)
    assert meta["format"] == "bpmf-model/1"
    assert meta["samples_in_mean"] == 2  # 3 iterations, burn-in 1

    assert "final rmse_avg=" in err


def test_reruns_are_byte_identical(tmp_path, train_file, capsys):
    _, metrics_a, model_a = run_cli(tmp_path, train_file, "a")
    _, metrics_b, model_b = run_cli(tmp_path, train_file, "b")
    capsys.readouterr()
    assert metrics_a.read_bytes() == metrics_b.read_bytes()
    for side in ("U", "V"):
        assert (
            tmp_path.joinpath(f"model-a-{side}.mm").read_bytes()
            == tmp_path.joinpath(f"model-b-{side}.mm").read_bytes()
        )


def test_thread_count_does_not_change_the_metrics(tmp_path, train_file, capsys):
    _, metrics_a, _ = run_cli(tmp_path, train_file, "t1", ["--threads", "1"])
    _, metrics_b, _ = run_cli(tmp_path, train_file, "t2", ["--threads", "2"])
    capsys.readouterr()
    assert metrics_a.read_bytes() == metrics_b.read_bytes()


def test_explicit_test_file_and_clamp(tmp_path, train_file, capsys):
    test = tmp_path / "test.mm"
    save_ratings_mm(str(test), 24, 16, [0, 1], [0, 1], [0.5, -0.5])
    code = main(
        ["--train", train_file, "--test", str(test), *BASE, "--clamp=-1:1"]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert len([l for l in out.splitlines() if l.startswith("iter=")]) == 3


def test_zero_holdout_runs_without_scores(tmp_path, train_file, capsys):
    code = main(["--train", train_file, *BASE, "--holdout", "0"])
    assert code == 0
    out = capsys.readouterr().out
    assert "rmse_sample=0.0 " in out  # no test set -> zero scores
