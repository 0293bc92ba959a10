"""MANO Darcy benchmark: command-line entry point.

    mano gen-data     --n 16 --count 500 --seed 0 --out runs/darcy16.bin
    mano train        --data runs/darcy16.bin --out runs/mano --dim 32 --depth 2 --heads 2 --d-head 16
    mano eval         --data runs/darcy16.bin --ckpt runs/mano/best.ckpt
    mano grad-check
    mano verify-solver --sizes 16,32,64
    mano bench        --variants dense,windowed,multipole --sizes 16,32,64,128

Settings resolve as defaults ← --config file ← flags and are echoed to
<out>/config.resolved before any work starts.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

import config
import store
from config import ConfigError
from engine import bench, darcy, training
from engine import tensors as T
from engine.attention import WindowSpec
from engine.model import ModelConfig, OperatorModel, apply
from engine.tensors import ContractError, DimensionError, grad_check

log = logging.getLogger("mano.cli")

GEN_DEFAULTS = {
    "n": config.DATA_N,
    "count": config.DATA_COUNT,
    "seed": 0,
    "low": config.COEFF_LOW,
    "high": config.COEFF_HIGH,
    "workers": 1,
    "face_mean": config.FACE_MEAN,
    "cg_tol": config.CG_TOL,
}

MODEL_KEYS = [f.name for f in fields(ModelConfig)]
TRAIN_KEYS = [f.name for f in fields(training.TrainConfig)]
TRAIN_DEFAULTS = {
    **{f.name: getattr(ModelConfig(), f.name) for f in fields(ModelConfig)},
    **{f.name: getattr(training.TrainConfig(), f.name) for f in fields(training.TrainConfig)},
}

GRAD_CHECK_DEFAULTS = {
    "n": 8,
    "dim": 8,
    "depth": 2,
    "heads": 2,
    "d_head": 4,
    "mlp_dim": 8,
    "levels": 2,
    "window": 2,
    "window_stride": 1,
    "attention_kind": "multipole",
    "sampler_mode": config.SAMPLER_MODE,
    "seed": 0,
    "step": config.GRAD_CHECK_STEP,
    "tolerance": config.GRAD_CHECK_TOL,
    "max_samples": config.GRAD_CHECK_MAX_SAMPLES,
    "corrupt_op": (),
}

VERIFY_DEFAULTS = {
    "sizes": config.MMS_SIZES,
    "cg_tol": config.CG_TOL,
}

BENCH_DEFAULTS = {
    "variants": config.BENCH_VARIANTS,
    "sizes": config.BENCH_SIZES,
    "dim": config.BENCH_DIM,
    "heads": config.BENCH_HEADS,
    "repeats": config.BENCH_REPEATS,
    "warmup": config.BENCH_WARMUP,
    "dense_cap": config.DENSE_SIZE_CAP,
    "window": config.WINDOW,
    "window_stride": config.WINDOW_STRIDE,
    "seed": 0,
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_flags(parser: argparse.ArgumentParser, defaults: dict, aliases: dict | None = None) -> None:
    """One string flag per config key; values are coerced during resolution."""
    for key, default in defaults.items():
        names = [_flag(key)] + list((aliases or {}).get(key, ()))
        if isinstance(default, bool):
            parser.add_argument(*names, dest=key, nargs="?", const="true", default=None, metavar="BOOL")
        else:
            parser.add_argument(*names, dest=key, default=None, metavar=key.upper())


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    file_values = config.load_config_file(args.config) if args.config else {}
    flags = {key: getattr(args, key) for key in defaults if getattr(args, key, None) is not None}
    return config.resolve(defaults, file_values, flags)


def _parse_sizes(values) -> list[int]:
    sizes = []
    for v in values:
        try:
            sizes.append(int(v))
        except (TypeError, ValueError):
            raise ConfigError(f"invalid size {v!r}") from None
    return sizes


# ── Commands ──────────────────────────────────────────────────────────────

def cmd_gen_data(args: argparse.Namespace) -> int:
    values = _resolve(args, GEN_DEFAULTS)
    out = Path(args.out) if args.out else Path(config.MANO_OUTDIR) / f"darcy_n{values['n']}.bin"
    config.write_resolved(out.parent, {**values, "out": str(out)})
    summary = darcy.generate_dataset(
        n=values["n"], count=values["count"], seed=values["seed"], path=out,
        low=values["low"], high=values["high"], workers=values["workers"],
        tol=values["cg_tol"], face_mean=values["face_mean"],
    )
    print(summary.line())
    return config.EXIT_OK


def _model_and_train_config(values: dict) -> tuple[ModelConfig, training.TrainConfig]:
    return (ModelConfig(**{k: values[k] for k in MODEL_KEYS}),
            training.TrainConfig(**{k: values[k] for k in TRAIN_KEYS}))


def cmd_train(args: argparse.Namespace) -> int:
    values = _resolve(args, TRAIN_DEFAULTS)
    outdir = Path(args.out or config.MANO_OUTDIR)
    config.write_resolved(outdir, {**values, "data": args.data})
    model_cfg, train_cfg = _model_and_train_config(values)

    a, u = store.load_dataset(args.data)
    model = OperatorModel(model_cfg)
    log.info("Model: %r", model)
    try:
        run = training.train(model, a, u, train_cfg, outdir, resume=args.resume)
    except training.NonFiniteLossError as e:
        log.error("%s", e)
        return config.EXIT_NUMERICAL

    train_idx, val_idx = training.split_dataset(len(a), train_cfg.val_fraction)
    baseline = training.mean_field_baseline(u[train_idx], u[val_idx])
    print(f"params={model.count_params()} best_epoch={run.best_epoch} "
          f"best_val_rel_mse={run.best_val_rel_mse:.6e} final_val_rel_mse={run.final_val_rel_mse:.6e} "
          f"mean_field_baseline={baseline:.6e}")
    return config.EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = store.load_checkpoint(args.ckpt)
    stored_fraction = ckpt.config.get("train.val_fraction", config.format_value(config.VAL_FRACTION))
    file_values = config.load_config_file(args.config) if args.config else None
    values = config.resolve({"val_fraction": float(stored_fraction)}, file_values,
                            {"val_fraction": args.val_fraction})
    outdir = Path(args.out) if args.out else Path(args.ckpt).parent
    config.write_resolved(outdir, {**values, "data": args.data, "ckpt": args.ckpt})

    model = training.load_model(args.ckpt)
    a, u = store.load_dataset(args.data)
    _, val_idx = training.split_dataset(len(a), values["val_fraction"])
    errors = training.evaluate(model, a[val_idx], u[val_idx])
    if errors.size == 0:
        raise ConfigError("the held-out split is empty")
    path = store.write_eval_csv(outdir / "eval.csv", errors)
    print(f"count={errors.size} mean_rel_mse={errors.mean():.12e} median_rel_mse={np.median(errors):.12e}")
    log.info("Per-sample errors written to %s", path)
    return config.EXIT_OK


def cmd_grad_check(args: argparse.Namespace) -> int:
    values = _resolve(args, GRAD_CHECK_DEFAULTS)
    outdir = Path(args.out or config.MANO_OUTDIR)
    config.write_resolved(outdir, values)
    model_cfg = ModelConfig(
        dim=values["dim"], depth=values["depth"], heads=values["heads"], d_head=values["d_head"],
        mlp_dim=values["mlp_dim"], levels=values["levels"], window=values["window"],
        window_stride=values["window_stride"], attention_kind=values["attention_kind"],
        sampler_mode=values["sampler_mode"], emb_dropout=0.0, att_dropout=0.0, seed=values["seed"],
    )
    n = values["n"]
    levels = model_cfg.multipole_for(n).levels
    if model_cfg.attention_kind == "multipole" and model_cfg.levels is not None and levels != model_cfg.levels:
        raise ConfigError(f"{model_cfg.levels} levels do not fit an {n}×{n} grid (at most {levels})")
    model = OperatorModel(model_cfg)
    a = darcy.sample_coefficient(n, config.sub_seed(values["seed"], "grad_check:a"))
    target = np.random.default_rng(config.sub_seed(values["seed"], "grad_check:u")).standard_normal((n, n))

    def loss_fn(graph, bound):
        return T.mse(apply(model, bound, a), target)

    report = grad_check(loss_fn, model.params, step=values["step"], tolerance=values["tolerance"],
                        max_samples=values["max_samples"], seed=values["seed"],
                        corrupt_ops=values["corrupt_op"])
    table = pd.DataFrame([vars(p) for p in report.params], columns=["name", "checked", "max_rel_error", "worst_index"])
    print(table.to_string(index=False))
    print(f"max_rel_error={report.max_rel_error:.3e} tolerance={report.tolerance:.1e} "
          f"{'PASS' if report.passed else 'FAIL'}")
    if not report.passed:
        log.error("Gradient check failed for %d parameter(s)", len(report.failures()))
        return config.EXIT_VERIFY
    return config.EXIT_OK


def cmd_verify_solver(args: argparse.Namespace) -> int:
    values = _resolve(args, VERIFY_DEFAULTS)
    outdir = Path(args.out or config.MANO_OUTDIR)
    config.write_resolved(outdir, values)
    table = darcy.manufactured_solution_errors(_parse_sizes(values["sizes"]), tol=values["cg_tol"])
    table.to_csv(outdir / "verify_solver.csv", index=False, float_format=store.FLOAT_FORMAT)
    print(table.to_string(index=False))
    lo, hi = config.MMS_RATIO_RANGE
    ratios = table["ratio"].dropna()
    if ratios.empty or not ratios.between(lo, hi).all():
        log.error("Convergence ratios %s outside [%.1f, %.1f]", ratios.round(3).tolist(), lo, hi)
        return config.EXIT_VERIFY
    return config.EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    values = _resolve(args, BENCH_DEFAULTS)
    outdir = Path(args.out or config.MANO_OUTDIR)
    config.write_resolved(outdir, values)
    window = WindowSpec(window=values["window"], stride=values["window_stride"])
    run = bench.run_scaling(
        variants=values["variants"], sizes=_parse_sizes(values["sizes"]), d=values["dim"],
        heads=values["heads"], repeats=values["repeats"], seed=values["seed"],
        warmup=values["warmup"], dense_cap=values["dense_cap"], window=window,
    )
    frame = run.frame()
    run_id = f"{datetime.now(timezone.utc).strftime('%Y%m%dT%H%M%SZ')}-seed{values['seed']}"
    path = store.write_bench_csv(outdir / "bench.csv", frame, run_id, run.notes)
    print(frame.to_string(index=False))
    for column in ("flops", "score_flops", "wall_ns_median"):
        for variant, slope in bench.fit_scaling_exponent(frame, column).items():
            print(f"slope[{column}] {variant}={slope:.3f}")
    log.info("Bench run %s appended to %s", run_id, path)
    return config.EXIT_OK


# ── Parser ────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mano", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file; flags override it")
        p.set_defaults(handler=handler)
        return p

    p = command("gen-data", cmd_gen_data, "generate a Darcy dataset file")
    p.add_argument("--out", help="dataset file path")
    _add_flags(p, GEN_DEFAULTS)

    p = command("train", cmd_train, "train an operator model")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", help="output directory (metrics.csv, *.ckpt)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    _add_flags(p, TRAIN_DEFAULTS, aliases={"attention_kind": ("--attention",)})

    p = command("eval", cmd_eval, "relative MSE of a checkpoint on the held-out split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="output directory (default: the checkpoint's)")
    p.add_argument("--val-fraction", dest="val_fraction", default=None)

    p = command("grad-check", cmd_grad_check, "finite-difference check of a tiny full model")
    p.add_argument("--out")
    _add_flags(p, {k: v for k, v in GRAD_CHECK_DEFAULTS.items() if k != "corrupt_op"},
               aliases={"attention_kind": ("--attention",)})
    p.add_argument("--corrupt-op", dest="corrupt_op", action="append", default=None, metavar="OP",
                   help="scale this op's backward rule (negative control)")

    p = command("verify-solver", cmd_verify_solver, "manufactured-solution convergence table")
    p.add_argument("--out")
    _add_flags(p, VERIFY_DEFAULTS)

    p = command("bench", cmd_bench, "attention scaling benchmark")
    p.add_argument("--out")
    _add_flags(p, BENCH_DEFAULTS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.handler(args)
    except ConfigError as e:
        log.error("Configuration error: %s", e)
        return config.EXIT_CONFIG
    except store.FormatError as e:
        log.error("Bad input file: %s", e)
        return config.EXIT_IO
    except (DimensionError, ContractError) as e:
        log.error("Invalid arguments: %s", e)
        return config.EXIT_CONFIG
    except (darcy.SolverError, training.NonFiniteLossError) as e:
        log.error("Numerical failure: %s", e)
        return config.EXIT_NUMERICAL
    except OSError as e:
        log.error("I/O error: %s", e)
        return config.EXIT_IO
    except Exception:
        log.exception("Unexpected failure in %s", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
