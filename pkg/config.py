"""MANO Darcy benchmark: all constants, defaults, and configuration."""

import os
import zlib
from pathlib import Path

# ── Model (Darcy hyperparameter table) ────────────────────────────────────────
DIM = 128
DEPTH = 8
HEADS = 4
D_HEAD = 32
MLP_DIM = 128
IN_CHANNELS = 3                     # (x, y, a) per grid point, patch size 1
EMB_DROPOUT = 0.1
ATT_DROPOUT = 0.1
ATTENTION_KIND = "multipole"        # multipole | windowed | dense
ATTENTION_KINDS = ("multipole", "windowed", "dense")
USE_BIAS = True                     # b_q, b_k, b_v
LN_EPS = 1e-5
DECODE_INIT_STD = 1e-3              # decoder starts near zero output

# ── Multipole Hierarchy ───────────────────────────────────────────────────────
WINDOW = 2                          # tokens per axis, M = WINDOW**2
WINDOW_STRIDE = 1                   # local attention stride; < WINDOW overlaps
SAMPLING_RATE = 2                   # k: kernel size of D and U
SAMPLER_PADDING = 0
LEVELS = None                       # None → deepest hierarchy with coarsest grid >= window
SAMPLER_MODE = "learned_conv"       # learned_conv | average_pool
SAMPLER_MODES = ("learned_conv", "average_pool")
SHARE_DU = False                    # one kernel for both down- and up-sampling
KERNEL_INIT_NOISE = 0.01            # std added to the pooling/replication init

# ── Training ──────────────────────────────────────────────────────────────────
EPOCHS = 50
BATCH_SIZE = 16
LR = 3e-4
LR_MIN = 1e-6
WEIGHT_DECAY = 0.01
BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
VAL_FRACTION = 0.1                  # 90/10 train/val split
FREEZE_ATTENTION = False            # train only the sampler kernels

# ── Darcy Data ────────────────────────────────────────────────────────────────
DATA_N = 16
DATA_COUNT = 500
COEFF_LOW = 3.0
COEFF_HIGH = 12.0
GRF_ALPHA = 2.0
GRF_TAU = 3.0
FACE_MEAN = "harmonic"              # harmonic | arithmetic
CG_TOL = 1e-10
RESIDUAL_TOL = 1e-8                 # stored samples must satisfy ||A u - f|| / ||f|| below this
MMS_SIZES = (16, 32, 64)
MMS_RATIO_RANGE = (3.5, 4.5)

# ── Gradient Check ────────────────────────────────────────────────────────────
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_TOL = 1e-4
GRAD_CHECK_MAX_SAMPLES = 64         # scalars per tensor above which a seeded subsample is used
GRAD_CHECK_FLOOR = 1e-5             # denominator floor for relative error

# ── Benchmark ─────────────────────────────────────────────────────────────────
BENCH_VARIANTS = ("dense", "windowed", "multipole")
BENCH_SIZES = (16, 32, 64, 128)
BENCH_DIM = 32
BENCH_HEADS = 2
BENCH_REPEATS = 5
BENCH_WARMUP = 1
DENSE_SIZE_CAP = 32                 # dense attention is skipped above this grid side

# ── Output ────────────────────────────────────────────────────────────────────
MANO_OUTDIR = os.environ.get("MANO_OUTDIR", "runs")
RESOLVED_CONFIG_NAME = "config.resolved"

# ── Exit Codes ────────────────────────────────────────────────────────────────
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
EXIT_VERIFY = 5

_MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Invalid configuration: unknown keys, bad values, or a grid the model cannot run on."""


def splitmix64(x: int) -> int:
    """One splitmix64 step; maps any integer to a well-mixed 64-bit value."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sub_seed(seed: int, name: str, *extra: int) -> int:
    """Derive a named sub-seed from the global seed.

    sub_seed(0, "data", 7) is the seed of sample 7; the same (seed, name, extra)
    always yields the same value regardless of call order.
    """
    x = splitmix64(int(seed) & _MASK64)
    x = splitmix64(x ^ zlib.crc32(name.encode()))
    for e in extra:
        x = splitmix64(x ^ (int(e) & _MASK64))
    return x


def load_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Parse a key=value config file. Blank lines and '#' comments are ignored."""
    values: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value.strip()
    return values


def _coerce(key: str, value, default):
    """Coerce a config value to the type of its default."""
    if not isinstance(value, str):
        return value
    text = value.strip()
    if text.lower() in ("none", "auto", "null"):
        if default is None:
            return None
        raise ConfigError(f"{key} has no automatic value, got {value!r}")
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(p) if p.strip().lstrip("-").isdigit() else p.strip()
                         for p in text.split(",") if p.strip())
        if default is None:
            return int(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {value!r}") from None
    return text


def resolve(defaults: dict, file_values: dict | None = None, flag_values: dict | None = None) -> dict:
    """Merge defaults ← config file ← flags. Unknown keys are hard errors.

    Flag values of None mean "not given" and do not override.
    """
    resolved = dict(defaults)
    for source in (file_values or {}, flag_values or {}):
        unknown = sorted(set(source) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for key, value in source.items():
            if value is None:
                continue
            resolved[key] = _coerce(key, value, defaults[key])
    return resolved


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def write_resolved(outdir: str | os.PathLike, values: dict) -> Path:
    """Echo the effective config to <outdir>/config.resolved before work begins."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_CONFIG_NAME
    lines = [f"{k}={format_value(values[k])}" for k in sorted(values)]
    path.write_text("\n".join(lines) + "\n")
    return path
