import json
import re
import struct

import numpy as np
import pytest

from uwmmse.channels import read_dataset
from uwmmse.cli import main
from uwmmse.experiments import read_results
from uwmmse.neural import init_params
from uwmmse.training import load_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture
def datasets(tmp_path, capsys):
    tr, va = tmp_path / "tr.bin", tmp_path / "va.bin"
    assert run(capsys, "generate", "--m", 3, "--t", 2, "--r", 2, "--n", 24, "--seed", 1, "--out", tr)[0] == 0
    assert run(capsys, "generate", "--m", 3, "--t", 2, "--r", 2, "--n", 6, "--seed", 2, "--out", va)[0] == 0
    return tr, va


def test_generate_header(tmp_path, capsys):
    out_path = tmp_path / "d.bin"
    code, out, _ = run(capsys, "generate", "--family", "rayleigh", "--m", 20, "--t", 5, "--r", 3, "--n", 64, "--seed", 7, "--out", out_path)
    assert code == 0 and "n=64" in out and "seed=7" in out
    raw = out_path.read_bytes()
    assert raw[:4] == b"UWMD"
    assert struct.unpack_from("<IIIIQ", raw, 4) == (1, 20, 3, 5, 64)


def test_generate_deterministic(tmp_path, capsys):
    args = ["generate", "--family", "geometric", "--m", 4, "--t", 2, "--r", 2, "--n", 5, "--seed", 3]
    run(capsys, *args, "--out", tmp_path / "a.bin")
    run(capsys, *args, "--out", tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_usage_errors(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--m", 2, "--t", 1, "--r", 1, "--n", 1)
    assert code == 2 and error_line(err)["exit_code"] == 2 and "--out" in error_line(err)["error"]
    code, _, err = run(capsys, "generate", "--m", 0, "--t", 1, "--r", 1, "--n", 1, "--out", tmp_path / "x.bin")
    assert code == 2 and error_line(err)["kind"] == "ConfigurationError"
    code, _, _ = run(capsys, "frobnicate")
    assert code == 2
    code, _, _ = run(capsys, "generate", "--family", "weibull", "--m", 2, "--t", 1, "--r", 1, "--n", 1, "--out", tmp_path / "x.bin")
    assert code == 2


def test_config_file_and_overrides(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"m": 3, "t": 1, "r": 2, "n": 2, "seed": 5, "out": str(tmp_path / "cfg.bin")}))
    assert run(capsys, "generate", "--config", cfg, "--n", 4)[0] == 0
    dims, data = read_dataset(tmp_path / "cfg.bin")
    assert dims == (3, 2, 1) and len(data) == 4  # flag beats file
    monkeypatch.setenv("UWMMSE_OUT", str(tmp_path / "env.bin"))
    assert run(capsys, "generate", "--config", cfg)[0] == 0
    assert (tmp_path / "env.bin").exists()  # environment beats file for paths
    cfg.write_text(json.dumps({"m": 3, "colour": "red"}))
    code, _, err = run(capsys, "generate", "--config", cfg)
    assert code == 2 and "colour" in error_line(err)["error"]


def test_train_defaults_echo(capsys):
    code, out, _ = run(capsys, "train", "--train-data", "a", "--val-data", "b", "--out", "c", "--dry-run")
    assert code == 0
    for token in ("K=4", "hidden=5", "batch_size=64", "lr=0.01", "max_iters=15000", "sigma=2.6e-05", "p_max=1"):
        assert token in out


def test_train_zero_iterations_keeps_init(tmp_path, capsys, datasets):
    tr, va = datasets
    ck = tmp_path / "ck.json"
    code, _, _ = run(capsys, "train", "--train-data", tr, "--val-data", va, "--out", ck, "--max-iters", 0, "--init-seed", 4)
    assert code == 0
    state = load_checkpoint(ck)
    np.testing.assert_array_equal(state.best_params.to_vector(), init_params(2, 2, seed=4).to_vector())


def test_train_gradient_methods_agree(tmp_path, capsys, datasets):
    tr, va = datasets
    losses = {}
    for method in ("analytic", "fd"):
        hist = tmp_path / f"{method}.csv"
        code, _, err = run(
            capsys, "train", "--train-data", tr, "--val-data", va, "--out", tmp_path / f"{method}.json",
            "--history", hist, "--max-iters", 10, "--eval-every", 5, "--batch-size", 4,
            "--sigma", 0.3, "--interference-mode", "include-self", "--gradient-method", method,
        )
        assert code == 0, err
        losses[method] = np.loadtxt(hist, delimiter=",", skiprows=1)[:, 1]
    np.testing.assert_allclose(losses["fd"], losses["analytic"], rtol=1e-3)


def test_eval_outputs(tmp_path, capsys, datasets):
    tr, va = datasets
    ck = tmp_path / "ck.json"
    run(capsys, "train", "--train-data", tr, "--val-data", va, "--out", ck, "--max-iters", 5, "--batch-size", 4, "--sigma", 0.1)
    res, summ = tmp_path / "r.csv", tmp_path / "s.csv"
    code, out, _ = run(capsys, "eval", "--checkpoint", ck, "--data", va, "--results", res, "--summary", summ, "--family", "rayleigh")
    assert code == 0
    rows = read_results(res)
    assert len(rows) == 3 * 6
    times = {m: np.mean([r["wall_time_s"] for r in rows if r["method"] == m]) for m in ("WMMSE", "UWMMSE")}
    printed = float(re.search(r"speedup WMMSE/UWMMSE=(\S+)", out).group(1))
    assert printed == pytest.approx(times["WMMSE"] / times["UWMMSE"], rel=1e-3)
    for line in summ.read_text().splitlines()[1:]:
        method, mean = line.split(",")[:2]
        assert float(mean) == pytest.approx(np.mean([r["sum_rate_bits"] for r in rows if r["method"] == method]), rel=1e-12)
        assert re.search(rf"{method}\s+mean_sum_rate=", out)


def test_eval_dimension_mismatch(tmp_path, capsys, datasets):
    _, va = datasets
    other = tmp_path / "o.bin"
    run(capsys, "generate", "--m", 3, "--t", 3, "--r", 1, "--n", 2, "--out", other)
    ck = tmp_path / "ck.json"
    run(capsys, "train", "--train-data", va, "--val-data", va, "--out", ck, "--max-iters", 0)
    code, _, err = run(capsys, "eval", "--checkpoint", ck, "--data", other, "--results", tmp_path / "r.csv", "--summary", tmp_path / "s.csv")
    line = error_line(err)
    assert code == 1 and "(2, 2)" in line["error"] and "(1, 3)" in line["error"]


def test_runtime_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope")
    code, _, err = run(capsys, "train", "--train-data", bad, "--val-data", bad, "--out", tmp_path / "c.json")
    assert code == 1 and error_line(err)["kind"] == "BadMagicError"


def test_bench(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--m", 3, "--t", 2, "--r", 2, "--d", 1, "--n", 2, "--results", tmp_path / "b.csv")
    assert code == 0 and "speedup" in out
    assert len(read_results(tmp_path / "b.csv")) == 6


def test_robustness(tmp_path, capsys):
    for fam, seed in (("rayleigh", 1), ("rician", 2)):
        run(capsys, "generate", "--family", fam, "--m", 3, "--t", 2, "--r", 2, "--n", 2, "--seed", seed, "--out", tmp_path / f"{fam}.bin")
        run(capsys, "train", "--train-data", tmp_path / f"{fam}.bin", "--val-data", tmp_path / f"{fam}.bin",
            "--out", tmp_path / f"{fam}.json", "--max-iters", 0)
    sweep = {
        "problem": {"d": 1, "sigma": 0.1},
        "wmmse_iters": 20,
        "cross": {
            "models": {"rayleigh": "rayleigh.json", "rician": "rician.json"},
            "test_data": {"rayleigh": "rayleigh.bin", "rician": "rician.bin"},
        },
        "size_sweep": {"models": {"rayleigh": "rayleigh.json"}, "sizes": [10, 11, 12, 13, 14], "T": 2, "R": 2, "n_samples": 1},
    }
    (tmp_path / "sweep.json").write_text(json.dumps(sweep))
    out_dir = tmp_path / "out"
    code, out, err = run(capsys, "robustness", "--sweep-config", tmp_path / "sweep.json", "--out-dir", out_dir)
    assert code == 0, err
    assert len(list(out_dir.glob("cross_*_results.csv"))) == 4
    assert len(list(out_dir.glob("size_*_results.csv"))) == 5
    assert out.count("cross model=") == 4 and out.count("size model=") == 5
    (tmp_path / "sweep.json").write_text(json.dumps({"typo": 1}))
    assert run(capsys, "robustness", "--sweep-config", tmp_path / "sweep.json", "--out-dir", out_dir)[0] == 2
