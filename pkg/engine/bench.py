"""Scaling benchmark: wall time, analytic flops and tape bytes of one attention forward.

Each variant is timed on a fixed random H×W×d input. Flop counts come from the
closed-form cost models only, never from timers.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

import config
from config import ConfigError
from engine.attention import (
    AttentionParams,
    WindowSpec,
    dense_attention_flops,
    dense_score_flops,
    full_attention,
    windowed_attention,
)
from engine.multipole import (
    MultipoleConfig,
    MultipoleParams,
    init_multipole,
    max_levels,
    multipole_attention,
    multipole_flops,
    with_levels,
)
from engine.tensors import Graph

log = logging.getLogger(__name__)


@dataclass
class BenchRecord:
    variant: str
    n: int
    N: int
    wall_ns_median: int
    flops: int
    peak_bytes: int
    score_flops: int = 0


@dataclass
class BenchRun:
    records: list[BenchRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records],
                            columns=["variant", "n", "N", "wall_ns_median", "flops", "peak_bytes", "score_flops"])


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def _variant_config(variant: str, n: int, window: WindowSpec) -> MultipoleConfig:
    base = MultipoleConfig(window=window)
    if variant == "multipole":
        return with_levels(base, max_levels(n, n, base))
    return base


def _forward(variant: str, graph: Graph, x: np.ndarray, params: dict[str, np.ndarray], cfg: MultipoleConfig):
    bound = graph.bind(params, lambda _: False)
    xv = graph.constant(x)
    if variant == "dense":
        return full_attention(xv, AttentionParams.from_vars(bound))
    if variant == "windowed":
        return windowed_attention(xv, AttentionParams.from_vars(bound), cfg.window)
    return multipole_attention(xv, MultipoleParams.from_vars(bound), cfg)


def _flops(variant: str, n: int, d: int, heads: int, cfg: MultipoleConfig) -> int:
    if variant == "dense":
        return dense_attention_flops(n * n, d, heads)
    # the windowed variant is the L=0 hierarchy
    return multipole_flops(n, n, d, heads, cfg)


def run_scaling(variants=config.BENCH_VARIANTS, sizes=config.BENCH_SIZES, d: int = config.BENCH_DIM,
                heads: int = config.BENCH_HEADS, repeats: int = config.BENCH_REPEATS, seed: int = 0,
                warmup: int = config.BENCH_WARMUP, dense_cap: int = config.DENSE_SIZE_CAP,
                window: WindowSpec | None = None, timed: bool = True) -> BenchRun:
    """One record per (variant, n), sorted by (variant, n).

    Dense forwards above ``dense_cap`` are skipped with a note, as are all
    forwards with timed=False; such records carry the analytic flops with
    wall time and peak bytes 0.
    """
    window = window or WindowSpec()
    sizes = sorted(int(s) for s in sizes)
    for v in variants:
        if v not in config.BENCH_VARIANTS:
            raise ConfigError(f"unknown bench variant {v!r}; choose from {config.BENCH_VARIANTS}")
    if not sizes or any(not _is_power_of_two(s) for s in sizes):
        raise ConfigError(f"bench sizes must be powers of two, got {sizes}")
    window.check_grid(sizes[0], sizes[0])
    if repeats < 1 or d < 1 or heads < 1 or d % heads:
        raise ConfigError(f"bench needs repeats >= 1 and d divisible by heads, got repeats={repeats} d={d} heads={heads}")

    run = BenchRun()
    d_head = d // heads
    for variant in sorted(variants):
        for n in sizes:
            run_forward = timed
            if variant == "dense" and n > dense_cap:
                note = f"dense timing skipped at n={n} (cap {dense_cap}); analytic columns only"
                run.notes.append(note)
                log.info(note)
                run_forward = False
            cfg = _variant_config(variant, n, window)
            flops = _flops(variant, n, d, heads, cfg)
            score = dense_score_flops(n * n, d, heads) if variant == "dense" else 0
            wall, peak = 0, 0
            if run_forward:
                rng = np.random.default_rng(config.sub_seed(seed, f"bench:{variant}", n))
                params = init_multipole(rng, heads, d_head, cfg)
                x = rng.standard_normal((n, n, d))
                samples = []
                for i in range(warmup + repeats):
                    g = Graph()
                    start = time.perf_counter_ns()
                    _forward(variant, g, x, params, cfg)
                    elapsed = time.perf_counter_ns() - start
                    if i >= warmup:
                        samples.append(elapsed)
                    peak = g.peak_bytes
                wall = int(statistics.median(samples))
            record = BenchRecord(variant=variant, n=n, N=n * n, wall_ns_median=wall, flops=flops,
                                 peak_bytes=peak, score_flops=score)
            run.records.append(record)
            log.info("bench %s n=%d flops=%d wall=%.3fms peak=%dB levels=%d",
                     variant, n, flops, wall / 1e6, peak, cfg.levels)
    return run


def fit_scaling_exponent(records: pd.DataFrame | list[BenchRecord], column: str = "flops") -> dict[str, float]:
    """Least-squares slope of log(column) against log(N), per variant.

    Variants with fewer than three sizes are left out.
    """
    frame = records if isinstance(records, pd.DataFrame) else pd.DataFrame([asdict(r) for r in records])
    slopes: dict[str, float] = {}
    for variant, group in frame.groupby("variant", sort=True):
        group = group[group[column] > 0]
        if group["N"].nunique() < 3:
            continue
        slope, _ = np.polyfit(np.log(group["N"].astype(float)), np.log(group[column].astype(float)), 1)
        slopes[str(variant)] = float(slope)
    return slopes
