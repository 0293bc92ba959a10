"""End-to-end tests of the mano command line: exit codes and artifacts."""

import numpy as np
import pandas as pd

import config
import store
from cli import main

SMALL_MODEL = ["--dim", "8", "--depth", "1", "--heads", "2", "--d-head", "4", "--mlp-dim", "8"]


def _gen(tmp_path, name="d.bin", count=4, n=8, seed=0):
    path = tmp_path / name
    code = main(["gen-data", "--n", str(n), "--count", str(count), "--seed", str(seed), "--out", str(path)])
    assert code == config.EXIT_OK
    return path


def test_gen_data_twice_is_identical(tmp_path, capsys):
    """Two runs with one seed write the same bytes and echo the resolved config."""
    first = _gen(tmp_path, "a.bin")
    second = _gen(tmp_path, "b.bin")
    assert first.read_bytes() == second.read_bytes()
    assert "count=4 n=8" in capsys.readouterr().out
    resolved = (tmp_path / config.RESOLVED_CONFIG_NAME).read_text()
    assert "seed=0" in resolved and "n=8" in resolved


def test_gen_data_rejects_zero_low(tmp_path):
    """A non-positive permeability is a configuration error."""
    code = main(["gen-data", "--n", "8", "--count", "1", "--low", "0", "--out", str(tmp_path / "x.bin")])
    assert code == config.EXIT_CONFIG
    assert not (tmp_path / "x.bin").exists()


def test_unknown_config_key(tmp_path):
    """Config-file typos stop the command before any work."""
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("cuont=3\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x.bin")]) == config.EXIT_CONFIG


def test_train_then_eval(tmp_path, capsys):
    """A one-epoch run writes checkpoints and metrics; eval reads them back."""
    data = _gen(tmp_path)
    out = tmp_path / "run"
    code = main(["train", "--data", str(data), "--out", str(out), *SMALL_MODEL,
                 "--epochs", "1", "--batch-size", "2", "--attention", "multipole"])
    assert code == config.EXIT_OK
    assert "best_val_rel_mse=" in capsys.readouterr().out
    assert (out / "best.ckpt").exists()
    assert len(store.read_metrics(out / "metrics.csv")) == 1
    assert "attention_kind=multipole" in (out / config.RESOLVED_CONFIG_NAME).read_text()

    code = main(["eval", "--data", str(data), "--ckpt", str(out / "best.ckpt")])
    assert code == config.EXIT_OK
    assert "count=1" in capsys.readouterr().out
    assert list(pd.read_csv(out / "eval.csv").columns) == store.EVAL_COLUMNS


def test_eval_needs_two_samples(tmp_path):
    """A one-sample dataset has no held-out split."""
    data = _gen(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), *SMALL_MODEL, "--epochs", "1"]) == config.EXIT_OK
    single = tmp_path / "single.bin"
    store.save_dataset(single, np.full((1, 8, 8), 3.0), np.ones((1, 8, 8)))
    assert main(["eval", "--data", str(single), "--ckpt", str(out / "best.ckpt")]) == config.EXIT_CONFIG


def test_eval_on_corrupt_checkpoint(tmp_path):
    """A damaged checkpoint maps to the I/O exit code."""
    data = _gen(tmp_path)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"MNOC\x01\x00")
    assert main(["eval", "--data", str(data), "--ckpt", str(bad)]) == config.EXIT_IO


def test_grad_check_pass_and_corrupted(tmp_path, capsys):
    """The tiny model passes; a mis-scaled matmul rule is caught."""
    common = ["grad-check", "--out", str(tmp_path), "--depth", "1", "--max-samples", "4"]
    assert main(common) == config.EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert main([*common, "--corrupt-op", "matmul"]) == config.EXIT_VERIFY
    assert "FAIL" in capsys.readouterr().out


def test_grad_check_levels_must_fit(tmp_path):
    """Requesting more levels than the grid allows is a configuration error."""
    assert main(["grad-check", "--out", str(tmp_path), "--levels", "3"]) == config.EXIT_CONFIG


def test_verify_solver(tmp_path):
    """The default refinement passes and writes its table."""
    assert main(["verify-solver", "--out", str(tmp_path), "--sizes", "16,32,64"]) == config.EXIT_OK
    table = pd.read_csv(tmp_path / "verify_solver.csv")
    assert list(table["n"]) == [16, 32, 64]


def test_verify_solver_bad_sizes(tmp_path):
    """Non-numeric or decreasing sizes exit with the config code."""
    assert main(["verify-solver", "--out", str(tmp_path), "--sizes", "16,x"]) == config.EXIT_CONFIG
    assert main(["verify-solver", "--out", str(tmp_path), "--sizes", "32,16"]) == config.EXIT_CONFIG


def test_bench_appends_run_blocks(tmp_path, capsys):
    """Each invocation adds one run block to bench.csv and prints slopes."""
    args = ["bench", "--out", str(tmp_path), "--variants", "windowed,multipole", "--sizes", "8,16,32",
            "--dim", "8", "--heads", "2", "--repeats", "1", "--warmup", "0"]
    assert main(args) == config.EXIT_OK
    assert "slope[flops] windowed=1.000" in capsys.readouterr().out
    assert main([*args, "--seed", "1"]) == config.EXIT_OK
    runs = store.read_bench_csv(tmp_path / "bench.csv")
    assert len(runs) == 2
    assert all(len(frame) == 6 for frame in runs.values())


def test_grad_check_default_model(tmp_path, capsys):
    """The stock configuration (n=8, d=8, depth 2, two levels) passes in full."""
    assert main(["grad-check", "--out", str(tmp_path)]) == config.EXIT_OK
    assert "PASS" in capsys.readouterr().out
    resolved = (tmp_path / config.RESOLVED_CONFIG_NAME).read_text().splitlines()
    assert {"n=8", "dim=8", "depth=2", "levels=2"} <= set(resolved)


def test_none_rejected_for_numeric_flag(tmp_path):
    """'none' only means automatic for keys that have an automatic value."""
    data = _gen(tmp_path)
    code = main(["train", "--data", str(data), "--out", str(tmp_path / "run"), *SMALL_MODEL, "--epochs", "none"])
    assert code == config.EXIT_CONFIG
