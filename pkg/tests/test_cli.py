"""End-to-end runs of every CLI subcommand through main()."""

import json
import math

import numpy as np
import pytest

from deep_rkhm import algebra, cli, harness, kernels
from deep_rkhm import model as model_mod
from deep_rkhm import pfnorm


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _kernel_json(d=3, c=0.5):
    return kernels.kernel_to_json(kernels.MatrixKernel(
        "separable", kernels.ScalarKernel("laplacian", c),
        algebra.identity(algebra.full(d))))


def test_gram_subcommand(tmp_path, capsys):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(4, 3, 3))
    cfgp = _write(tmp_path / "gram.json",
                  {"kernel": _kernel_json(), "points": pts.tolist()})
    outp = tmp_path / "g.json"
    assert cli.main(["gram", "--config", cfgp, "--out", str(outp)]) == 0
    got = kernels.gram_from_json(json.loads(outp.read_text()))
    kern = kernels.kernel_from_json(_kernel_json())
    want = kernels.gram(kern, pts)
    assert got.storage == "separable"
    assert np.array_equal(got.dense(), want.dense())
    # stdout mode and force_dense
    cfgp2 = _write(tmp_path / "gram2.json",
                   {"kernel": _kernel_json(), "points": pts.tolist(),
                    "force_dense": True})
    assert cli.main(["gram", "--config", cfgp2]) == 0
    obj = json.loads(capsys.readouterr().out)
    assert obj["storage"] == "dense"
    assert np.allclose(np.asarray(obj["matrix"]), want.dense())


def test_pf_norm_subcommand(tmp_path, capsys):
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(4, 3, 3))
    kern = kernels.kernel_from_json(_kernel_json())
    g1 = kernels.gram(kern, pts)
    gl = kernels.gram(kern, pts * 2.0)
    p1 = _write(tmp_path / "g1.json", kernels.gram_to_json(g1))
    pl = _write(tmp_path / "gl.json", kernels.gram_to_json(gl))
    assert cli.main(["pf-norm", "--g1", p1, "--gl", pl,
                     "--eta", "0.1", "--lambda1", "2.0"]) == 0
    got = json.loads(capsys.readouterr().out)
    want = pfnorm.pf_report(g1, gl, eta=0.1, lambda1=2.0)
    assert got["exact"] == pytest.approx(want.exact, rel=1e-12)
    assert got["bound"] == pytest.approx(want.bound, rel=1e-12)
    assert got["regularizer"] == pytest.approx(want.regularizer, rel=1e-12)


def test_bound_subcommand(tmp_path, capsys):
    cfgp = _write(tmp_path / "b.json",
                  {"D": 1.0, "B": [1.0], "E": 1.0, "delta": 0.5,
                   "n": 4, "trace_sum": 1.0, "empirical": 0.0})
    assert cli.main(["bound", "--config", cfgp]) == 0
    got = json.loads(capsys.readouterr().out)
    assert got["K_tilde"] == pytest.approx(8.0 * math.sqrt(2.0), abs=1e-12)
    assert got["M_tilde"] == pytest.approx(24.0, abs=1e-12)
    assert got["total"] == pytest.approx(
        got["term_empirical"] + got["term_complexity"]
        + got["term_confidence"], abs=1e-12)


def test_train_subcommand(tmp_path, capsys):
    cfgp = _write(tmp_path / "cfg.json",
                  {"which": "benign", "n": 12, "epochs": 3,
                   "test_set_size": 10})
    out = tmp_path / "run"
    code = cli.main(["train", "--config", cfgp, "--seed", "0",
                     "--out", str(out), "--arm", "lambda1_100"])
    assert code == 0
    lines = (out / "train_log.csv").read_text().strip().split("\n")
    assert lines[0] == "epoch,loss,reg_pf,reg_norm,total,grad_norm,wall_ms"
    assert len(lines) == 5  # epochs 0..3 inclusive
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[2]) > 0.0  # regularizer active
    summary = json.loads((out / "train_summary.json").read_text())
    assert summary["arm"] == "lambda1_100"
    assert summary["epochs_run"] == 3
    assert summary["final"]["total"] == float(lines[-1].split(",")[4])
    # checkpoint restores a working model
    mdl = model_mod.load_checkpoint(out / "checkpoint.json")
    data, _ = harness.dataset_for(harness.config_from_json(
        json.loads((tmp_path / "cfg.json").read_text()), seed=0))
    preds = model_mod.model_forward(mdl, data.test_x)
    assert preds.shape == data.test_y.shape
    assert np.all(np.isfinite(preds))


def test_train_mnist_head_artifacts(tmp_path):
    cfgp = _write(tmp_path / "cfg.json",
                  {"which": "mnist", "n": 20, "epochs": 2,
                   "test_set_size": 30, "head_hidden": 8,
                   "output_dir": str(tmp_path)})
    out = tmp_path / "run"
    code = cli.main(["train", "--config", cfgp, "--seed", "0",
                     "--out", str(out)])
    assert code == 0
    with np.load(out / "head.npz") as head:
        assert head["w1"].shape == (784, 8)
        assert head["w2"].shape == (8, 10)
    summary = json.loads((out / "train_summary.json").read_text())
    assert summary["arm"] == "lambda1_0"
    assert summary["data_source"] == "digits-fallback"


def test_experiment_subcommand(tmp_path, capsys):
    code = cli.main(["experiment", "benign", "--seed", "3",
                     "--out", str(tmp_path), "--n", "10", "--epochs", "2",
                     "--test-set-size", "8", "--eval-every", "1",
                     "--lambda1-values", "0,7"])
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    assert set(printed) == {"lambda1_0", "lambda1_7"}
    log = harness.read_metrics(tmp_path / "benign_seed3_lambda1_7.csv")
    assert [row[0] for row in log.rows] == [0, 1, 2]
    assert log.summary["seed"] == 3


def test_experiment_multi_seed(tmp_path, capsys):
    code = cli.main(["experiment", "benign", "--seed", "0", "--seeds", "0,1",
                     "--out", str(tmp_path), "--n", "8", "--epochs", "1",
                     "--test-set-size", "6"])
    assert code == 0
    summary = json.loads((tmp_path / "benign_summary.json").read_text())
    assert summary["seeds"] == [0, 1]
    assert set(summary["arms"]) == {"lambda1_0", "lambda1_100"}
    for entry in summary["arms"].values():
        assert len(entry["gaps"]) == 2


def test_cli_errors(tmp_path, capsys):
    bad = _write(tmp_path / "bad.json", {"D": 1.0})
    assert cli.main(["bound", "--config", bad]) == 2
    assert "error:" in capsys.readouterr().err
    assert cli.main(["pf-norm", "--g1", str(tmp_path / "nope.json"),
                     "--gl", str(tmp_path / "nope.json")]) == 2
    cfg = _write(tmp_path / "nw.json", {"n": 5})
    assert cli.main(["train", "--config", cfg, "--seed", "0",
                     "--out", str(tmp_path / "o")]) == 2
    assert "which" in capsys.readouterr().err
    # --seed is mandatory for runs
    with pytest.raises(SystemExit) as exc:
        cli.main(["experiment", "benign", "--out", str(tmp_path)])
    assert exc.value.code == 2
    # bad arm name
    good = _write(tmp_path / "g.json", {"which": "benign", "n": 6,
                                        "epochs": 1, "test_set_size": 4})
    assert cli.main(["train", "--config", good, "--seed", "0",
                     "--out", str(tmp_path / "o2"), "--arm", "nope"]) == 2
