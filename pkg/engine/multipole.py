"""Multipole attention: windowed attention over a hierarchy of resolutions.

X_0 is the input grid and X_ℓ = D(X_ℓ−1). Each level is layer-normalized and
passed through the same windowed attention; level ℓ is brought back to full
resolution by ℓ applications of U and all levels are summed. U is linear,
so the sum is accumulated coarse-to-fine (one upsample per level).

D and U are one kernel pair per head, reused at every level, so the
parameter count does not depend on the number of levels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

import config
from config import ConfigError
from engine import tensors as T
from engine.attention import (
    AttentionParams,
    WindowSpec,
    attention_flops,
    init_attention,
    windowed_attention,
)
from engine.tensors import Var

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MultipoleConfig:
    levels: int = 0
    sampling_rate: int = config.SAMPLING_RATE      # k, kernel size of D and U
    window: WindowSpec = field(default_factory=WindowSpec)
    down_stride: int | None = None                 # defaults to k
    padding: int = config.SAMPLER_PADDING
    sampler_mode: str = config.SAMPLER_MODE
    share_du: bool = config.SHARE_DU
    ln_eps: float = config.LN_EPS

    def __post_init__(self):
        if self.levels < 0:
            raise ConfigError(f"levels must be >= 0, got {self.levels}")
        if self.sampling_rate < 2:
            raise ConfigError(f"sampling rate must be >= 2, got {self.sampling_rate}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError(f"sampler stride {self.stride} / padding {self.padding} invalid")
        if self.sampler_mode not in config.SAMPLER_MODES:
            raise ConfigError(f"sampler_mode must be one of {config.SAMPLER_MODES}, got {self.sampler_mode!r}")
        if self.sampler_mode == "average_pool" and (self.stride != self.sampling_rate or self.padding):
            raise ConfigError("average_pool sampling needs stride == sampling rate and no padding")

    @property
    def stride(self) -> int:
        return self.sampling_rate if self.down_stride is None else self.down_stride


def _down_side(side: int, cfg: MultipoleConfig, axis: str) -> int:
    k, s, p = cfg.sampling_rate, cfg.stride, cfg.padding
    if side + 2 * p < k:
        raise ConfigError(f"{axis} {side} is smaller than the sampling kernel {k}")
    if s == k and p == 0 and side % k:
        raise ConfigError(f"{axis} {side} is not divisible by the sampling rate {k}")
    return (side + 2 * p - k) // s + 1


def _up_side(side: int, cfg: MultipoleConfig) -> int:
    return (side - 1) * cfg.stride + cfg.sampling_rate - 2 * cfg.padding


def plan_levels(h: int, w: int, cfg: MultipoleConfig) -> list[tuple[int, int]]:
    """Grid side of every level, validated before any compute.

    Raises ConfigError when a level cannot be formed, when U does not map a
    level back onto the shape of the finer one, or when the window does not
    fit the coarsest level.
    """
    sides = [(h, w)]
    for level in range(1, cfg.levels + 1):
        ph, pw = sides[-1]
        nh, nw = _down_side(ph, cfg, "height"), _down_side(pw, cfg, "width")
        if (_up_side(nh, cfg), _up_side(nw, cfg)) != (ph, pw):
            raise ConfigError(f"level {level}: upsampling {nh}×{nw} does not return to {ph}×{pw}")
        sides.append((nh, nw))
    coarse_h, coarse_w = sides[-1]
    try:
        cfg.window.check_grid(coarse_h, coarse_w)
    except ConfigError as e:
        raise ConfigError(f"{cfg.levels} levels on a {h}×{w} grid: coarsest level {coarse_h}×{coarse_w}: {e}") from None
    return sides


def max_levels(h: int, w: int, cfg: MultipoleConfig) -> int:
    """Deepest hierarchy whose coarsest level still holds the window."""
    best = 0
    for levels in range(1, 64):
        try:
            plan_levels(h, w, with_levels(cfg, levels))
        except ConfigError:
            break
        best = levels
    return best


def with_levels(cfg: MultipoleConfig, levels: int) -> MultipoleConfig:
    return replace(cfg, levels=levels)


# ── Parameters ──────────────────────────────────────────────────────────────

@dataclass
class MultipoleParams:
    """Attention block, per-head kernels, and the level norm shared by all levels."""
    attention: AttentionParams
    norm_gamma: Var
    norm_beta: Var
    down: Var | None = None          # (heads, k, k, d_head, d_head)
    up: Var | None = None

    @classmethod
    def from_vars(cls, bound: dict[str, Var], prefix: str = "") -> MultipoleParams:
        return cls(
            attention=AttentionParams.from_vars(bound, prefix),
            norm_gamma=bound[f"{prefix}level_norm.gamma"],
            norm_beta=bound[f"{prefix}level_norm.beta"],
            down=bound.get(f"{prefix}down"),
            up=bound.get(f"{prefix}up", bound.get(f"{prefix}down")),
        )


def init_multipole(rng: np.random.Generator, heads: int, d_head: int, cfg: MultipoleConfig,
                   use_bias: bool = config.USE_BIAS,
                   noise: float = config.KERNEL_INIT_NOISE) -> dict[str, np.ndarray]:
    """Attention projections, level norm and (learned_conv only) the D/U kernels.

    D starts as average pooling and U as nearest replication, plus N(0, noise²).
    """
    params = init_attention(rng, heads, d_head, use_bias)
    d = heads * d_head
    params["level_norm.gamma"] = np.ones(d)
    params["level_norm.beta"] = np.zeros(d)
    if cfg.sampler_mode == "learned_conv":
        k = cfg.sampling_rate
        eye = np.broadcast_to(np.eye(d_head), (heads, k, k, d_head, d_head))
        params["down"] = eye / (k * k) + rng.normal(0.0, noise, size=eye.shape)
        if not cfg.share_du:
            params["up"] = eye + rng.normal(0.0, noise, size=eye.shape)
    return params


def param_count(params: dict[str, np.ndarray]) -> int:
    """Exact number of trainable scalars."""
    return int(sum(np.asarray(v).size for v in params.values()))


# ── Sampling ────────────────────────────────────────────────────────────────

def _per_head(x: Var, kernel: Var, op) -> Var:
    heads, d_head = kernel.shape[0], kernel.shape[-1]
    if x.shape[-1] != heads * d_head:
        raise T.DimensionError(f"feature width {x.shape[-1]} != {heads} heads × {d_head}")
    parts = []
    for i in range(heads):
        xi = x if heads == 1 else T.slice_last(x, i * d_head, (i + 1) * d_head)
        parts.append(op(xi, T.gather_rows(kernel, np.array(i))))
    return parts[0] if heads == 1 else T.concat_last(parts)


def downsample(x: Var, params: MultipoleParams, cfg: MultipoleConfig) -> Var:
    """One level coarser: per-head strided conv (learned_conv) or k×k mean pooling."""
    h, w, _ = x.shape
    _down_side(h, cfg, "height")
    _down_side(w, cfg, "width")
    if cfg.sampler_mode == "average_pool":
        return T.avg_pool2d(x, cfg.sampling_rate)
    return _per_head(x, params.down, lambda xi, ki: T.conv2d(xi, ki, stride=cfg.stride, padding=cfg.padding))


def upsample(x: Var, params: MultipoleParams, cfg: MultipoleConfig) -> Var:
    """One level finer: per-head transposed conv (learned_conv) or replication."""
    if cfg.sampler_mode == "average_pool":
        return T.repeat2d(x, cfg.sampling_rate)
    return _per_head(x, params.up, lambda xi, ki: T.conv_transpose2d(xi, ki, stride=cfg.stride, padding=cfg.padding))


def multipole_attention(x: Var, params: MultipoleParams, cfg: MultipoleConfig) -> Var:
    """Σ_ℓ U^ℓ(Attn(norm(X_ℓ))) at the resolution of x."""
    h, w, _ = x.shape
    plan_levels(h, w, cfg)

    grids = [x]
    for _ in range(cfg.levels):
        grids.append(downsample(grids[-1], params, cfg))

    outputs = [
        windowed_attention(T.layer_norm(g, params.norm_gamma, params.norm_beta, cfg.ln_eps),
                           params.attention, cfg.window)
        for g in grids
    ]
    acc = outputs[-1]
    for level in range(cfg.levels - 1, -1, -1):
        acc = T.add(upsample(acc, params, cfg), outputs[level])
    return acc


# ── Cost model ──────────────────────────────────────────────────────────────
#
# Σ over levels of attention_flops(N_ℓ, M, d, heads) with ⌈N_ℓ/M⌉ windows at any
# window stride, plus for every level ℓ >= 1:
#   learned_conv   down + up: 2 · N_ℓ · k² · d_head · d
#   average_pool   pooling:   N_ℓ · k² · d      (replication is free)
#   summation into level ℓ−1: N_ℓ−1 · d
# Layer norms are not counted.

def multipole_flops(h: int, w: int, d: int, heads: int, cfg: MultipoleConfig) -> int:
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    sides = plan_levels(h, w, cfg)
    m = cfg.window.tokens
    k = cfg.sampling_rate
    d_head = d // heads
    total = 0
    for level, (lh, lw) in enumerate(sides):
        n_level = lh * lw
        total += attention_flops(n_level, m, d, heads, windows=math.ceil(n_level / m))
        if level == 0:
            continue
        if cfg.sampler_mode == "learned_conv":
            total += 2 * n_level * k * k * d_head * d
        else:
            total += n_level * k * k * d
        ph, pw = sides[level - 1]
        total += ph * pw * d
    return total
