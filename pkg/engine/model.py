"""Darcy operator network: point-wise lift, pre-norm transformer blocks, point-wise decode.

The network sees one (x, y, a) triple per grid cell and keeps full resolution
throughout, so the same parameters run on any admissible grid side.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

import config
import store
from config import ConfigError
from engine import tensors as T
from engine.attention import AttentionParams, WindowSpec, full_attention
from engine.multipole import (
    MultipoleConfig,
    MultipoleParams,
    init_multipole,
    max_levels,
    multipole_attention,
    param_count,
    with_levels,
)
from engine.tensors import Graph, Var

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = config.DIM
    depth: int = config.DEPTH
    heads: int = config.HEADS
    d_head: int = config.D_HEAD
    mlp_dim: int = config.MLP_DIM
    window: int = config.WINDOW
    window_stride: int = config.WINDOW_STRIDE
    levels: int | None = config.LEVELS
    sampling_rate: int = config.SAMPLING_RATE
    sampler_stride: int | None = None
    sampler_padding: int = config.SAMPLER_PADDING
    sampler_mode: str = config.SAMPLER_MODE
    share_du: bool = config.SHARE_DU
    attention_kind: str = config.ATTENTION_KIND
    use_bias: bool = config.USE_BIAS
    emb_dropout: float = config.EMB_DROPOUT
    att_dropout: float = config.ATT_DROPOUT
    ln_eps: float = config.LN_EPS
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.mlp_dim < 1:
            raise ConfigError(f"dim and mlp_dim must be >= 1, got {self.dim}, {self.mlp_dim}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.heads < 1 or self.d_head < 1:
            raise ConfigError(f"heads and d_head must be >= 1, got {self.heads}, {self.d_head}")
        if self.attention_kind not in config.ATTENTION_KINDS:
            raise ConfigError(f"attention_kind must be one of {config.ATTENTION_KINDS}, got {self.attention_kind!r}")
        for name in ("emb_dropout", "att_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {p}")
        self.multipole()  # validates window and sampler settings

    @property
    def inner(self) -> int:
        return self.heads * self.d_head

    def window_spec(self) -> WindowSpec:
        return WindowSpec(window=self.window, stride=self.window_stride)

    def multipole(self, levels: int = 0) -> MultipoleConfig:
        return MultipoleConfig(levels=levels, sampling_rate=self.sampling_rate, window=self.window_spec(),
                               down_stride=self.sampler_stride, padding=self.sampler_padding,
                               sampler_mode=self.sampler_mode, share_du=self.share_du, ln_eps=self.ln_eps)

    def multipole_for(self, side: int) -> MultipoleConfig:
        """Hierarchy for an side×side grid: requested levels clamped to the deepest admissible."""
        if side < 2:
            raise ConfigError(f"grid side must be >= 2, got {side}")
        if self.attention_kind == "dense":
            return self.multipole(0)
        base = self.multipole(0)
        base.window.check_grid(side, side)
        if self.attention_kind == "windowed":
            return base
        deepest = max_levels(side, side, base)
        levels = deepest if self.levels is None else min(self.levels, deepest)
        return with_levels(base, levels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> ModelConfig:
        defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
        return cls(**config.resolve(defaults, values))


# ── Parameters ──────────────────────────────────────────────────────────────

def _linear(rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True) -> dict[str, np.ndarray]:
    params = {"w": rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))}
    if bias:
        params["b"] = np.zeros(fan_out)
    return params


def _norm(d: int) -> dict[str, np.ndarray]:
    return {"gamma": np.ones(d), "beta": np.zeros(d)}


def _prefixed(prefix: str, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in params.items()}


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Parameters in canonical declaration order.

    Each component draws from its own sub-seed, so configs that share a
    component (e.g. dense vs multipole attention) share its initial values.
    """
    def rng(component: str) -> np.random.Generator:
        return np.random.default_rng(config.sub_seed(cfg.seed, f"init:{component}"))

    d, inner = cfg.dim, cfg.inner
    params: dict[str, np.ndarray] = {}
    params.update(_prefixed("embed.", _linear(rng("embed"), config.IN_CHANNELS, d)))
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        params.update(_prefixed(f"{p}norm1.", _norm(d)))
        if inner != d:
            params[f"{p}attn.w_in"] = _linear(rng(f"{p}attn.w_in"), d, inner, bias=False)["w"]
        attn = init_multipole(rng(f"{p}attn"), cfg.heads, cfg.d_head, cfg.multipole(0), cfg.use_bias)
        if cfg.attention_kind != "multipole":
            attn = {k: v for k, v in attn.items() if k not in ("down", "up")}
        params.update(_prefixed(f"{p}attn.", attn))
        out = _linear(rng(f"{p}attn.out"), inner, d)
        params[f"{p}attn.w_o"], params[f"{p}attn.b_o"] = out["w"], out["b"]
        params.update(_prefixed(f"{p}norm2.", _norm(d)))
        params.update(_prefixed(f"{p}mlp.", {
            **{f"{k}1": v for k, v in _linear(rng(f"{p}mlp.1"), d, cfg.mlp_dim).items()},
            **{f"{k}2": v for k, v in _linear(rng(f"{p}mlp.2"), cfg.mlp_dim, d).items()},
        }))
    params["decode.w"] = rng("decode").normal(0.0, config.DECODE_INIT_STD, size=(d, 1))
    params["decode.b"] = np.zeros(1)
    return params


def is_sampler_param(name: str) -> bool:
    """True for the down/up sampling kernels (the only weights trained when attention is frozen)."""
    return name.endswith(".attn.down") or name.endswith(".attn.up")


class OperatorModel:
    """A ModelConfig plus its parameter arrays."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = cfg
        expected = init_params(cfg)
        if params is None:
            params = expected
        else:
            store.check_shapes(expected, params)
        self.params = {name: np.array(params[name], dtype=np.float64) for name in expected}

    def count_params(self) -> int:
        return param_count(self.params)

    def __repr__(self):
        c = self.config
        return (f"OperatorModel(kind={c.attention_kind}, dim={c.dim}, depth={c.depth}, "
                f"heads={c.heads}, params={self.count_params()})")


def count_params(model: OperatorModel) -> int:
    return model.count_params()


# ── Forward ─────────────────────────────────────────────────────────────────

def input_channels(a: np.ndarray) -> np.ndarray:
    """(x_i, y_j, a_ij) at cell centres (i + ½)/n of the unit square, shape (n, n, 3)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError(f"coefficient field must be n×n, got shape {a.shape}")
    n = a.shape[0]
    if n < 2:
        raise ConfigError(f"grid side must be >= 2, got {n}")
    centres = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(centres, centres, indexing="ij")
    return np.stack([xs, ys, a], axis=-1)


def embed_input(bound: dict[str, Var], a: np.ndarray, cfg: ModelConfig,
                rng: np.random.Generator | None = None) -> Var:
    g = bound["embed.w"].graph
    x = T.add(T.matmul(g.constant(input_channels(a)), bound["embed.w"]), bound["embed.b"])
    return T.dropout(x, cfg.emb_dropout, rng)


def _attention_sublayer(h: Var, bound: dict[str, Var], prefix: str, cfg: ModelConfig,
                        mp: MultipoleConfig) -> Var:
    if f"{prefix}w_in" in bound:
        h = T.matmul(h, bound[f"{prefix}w_in"])
    if cfg.attention_kind == "dense":
        normed = T.layer_norm(h, bound[f"{prefix}level_norm.gamma"], bound[f"{prefix}level_norm.beta"], cfg.ln_eps)
        h = full_attention(normed, AttentionParams.from_vars(bound, prefix))
    else:
        h = multipole_attention(h, MultipoleParams.from_vars(bound, prefix), mp)
    return T.add(T.matmul(h, bound[f"{prefix}w_o"]), bound[f"{prefix}b_o"])


def apply(model: OperatorModel, bound: dict[str, Var], a: np.ndarray,
          rng: np.random.Generator | None = None) -> Var:
    """Graph-level forward; dropout is active iff ``rng`` is given."""
    cfg = model.config
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    mp = cfg.multipole_for(n)

    x = embed_input(bound, a, cfg, rng)
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        h = T.layer_norm(x, bound[f"{p}norm1.gamma"], bound[f"{p}norm1.beta"], cfg.ln_eps)
        h = T.dropout(_attention_sublayer(h, bound, f"{p}attn.", cfg, mp), cfg.att_dropout, rng)
        x = T.add(x, h)
        h = T.layer_norm(x, bound[f"{p}norm2.gamma"], bound[f"{p}norm2.beta"], cfg.ln_eps)
        h = T.gelu(T.add(T.matmul(h, bound[f"{p}mlp.w1"]), bound[f"{p}mlp.b1"]))
        x = T.add(x, T.add(T.matmul(h, bound[f"{p}mlp.w2"]), bound[f"{p}mlp.b2"]))
    out = T.add(T.matmul(x, bound["decode.w"]), bound["decode.b"])
    return T.reshape(out, (n, n))


def forward(model: OperatorModel, a: np.ndarray, train: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Predict u on the grid of ``a``. Deterministic unless train=True with dropout."""
    if train and rng is None:
        rng = np.random.default_rng(config.sub_seed(model.config.seed, "dropout"))
    g = Graph()
    out = apply(model, g.bind(model.params), a, rng if train else None)
    return np.array(out.value)
