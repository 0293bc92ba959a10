"""Dense and overlapping-window multi-head attention on 2-D token grids.

Every head owns d_head×d_head projections acting on its own slice of the
channels. Scores are scaled by √d_head. Overlapping window outputs are
merged by averaging over the number of windows covering each position.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

import config
from config import ConfigError
from engine import tensors as T
from engine.tensors import Var

log = logging.getLogger(__name__)

PROJECTIONS = ("q", "k", "v")


@dataclass(frozen=True)
class WindowSpec:
    """w×w windows placed every ``stride`` cells; stride < window overlaps."""
    window: int = config.WINDOW
    stride: int = config.WINDOW_STRIDE
    normalize_coverage: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if not 1 <= self.stride <= self.window:
            raise ConfigError(f"window stride must satisfy 1 <= stride <= window, got stride={self.stride} window={self.window}")

    @property
    def tokens(self) -> int:
        return self.window * self.window

    def check_grid(self, h: int, w: int) -> None:
        if self.window > min(h, w):
            raise ConfigError(
                f"window {self.window} does not fit a {h}×{w} grid; shrink the window or use a larger grid")
        if (h - self.window) % self.stride or (w - self.window) % self.stride:
            raise ConfigError(
                f"window {self.window} at stride {self.stride} leaves uncovered cells on a {h}×{w} grid")


@dataclass
class AttentionParams:
    """One projection set per head; biases present iff use_bias."""
    w_q: Var
    w_k: Var
    w_v: Var
    b_q: Var | None = None
    b_k: Var | None = None
    b_v: Var | None = None

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[-1]

    @property
    def use_bias(self) -> bool:
        return self.b_q is not None

    @classmethod
    def from_vars(cls, bound: dict[str, Var], prefix: str = "") -> AttentionParams:
        def get(key):
            return bound.get(f"{prefix}{key}")
        return cls(w_q=get("w_q"), w_k=get("w_k"), w_v=get("w_v"),
                   b_q=get("b_q"), b_k=get("b_k"), b_v=get("b_v"))


def init_attention(rng: np.random.Generator, heads: int, d_head: int,
                   use_bias: bool = config.USE_BIAS) -> dict[str, np.ndarray]:
    """Projections ~ N(0, 1/d_head); biases zero."""
    if heads < 1 or d_head < 1:
        raise ConfigError(f"attention needs heads >= 1 and d_head >= 1, got heads={heads} d_head={d_head}")
    std = 1.0 / math.sqrt(d_head)
    params = {f"w_{p}": rng.normal(0.0, std, size=(heads, d_head, d_head)) for p in PROJECTIONS}
    if use_bias:
        params.update({f"b_{p}": np.zeros((heads, d_head)) for p in PROJECTIONS})
    return params


# ── Window geometry ─────────────────────────────────────────────────────────

@lru_cache(maxsize=128)
def _window_index(h: int, w: int, window: int, stride: int) -> np.ndarray:
    rows = range(0, h - window + 1, stride)
    cols = range(0, w - window + 1, stride)
    offsets = (np.arange(window)[:, None] * w + np.arange(window)[None, :]).reshape(-1)
    starts = np.array([r * w + c for r in rows for c in cols], dtype=np.intp)
    index = starts[:, None] + offsets[None, :]
    index.flags.writeable = False
    return index


def window_index(h: int, w: int, spec: WindowSpec) -> np.ndarray:
    """Flat token ids of every window, shape (n_windows, M), windows in row-major order."""
    spec.check_grid(h, w)
    return _window_index(h, w, spec.window, spec.stride)


def coverage_map(h: int, w: int, spec: WindowSpec) -> np.ndarray:
    """Number of windows containing each grid position, shape (h, w)."""
    counts = np.zeros(h * w)
    np.add.at(counts, window_index(h, w, spec), 1.0)
    return counts.reshape(h, w)


# ── Attention ───────────────────────────────────────────────────────────────

def _check_width(x: Var, p: AttentionParams) -> tuple[int, int, int]:
    if x.value.ndim != 3:
        raise T.DimensionError(f"attention input must be H×W×d, got {x.shape}")
    h, w, d = x.shape
    if d != p.heads * p.d_head:
        raise T.DimensionError(f"attention width {d} != heads {p.heads} × d_head {p.d_head}")
    return h, w, d


def _project(x: Var, p: AttentionParams) -> tuple[Var, Var, Var]:
    """Per-head Q, K, V with shape (heads, N, d_head)."""
    h, w, _ = x.shape
    heads, dh = p.heads, p.d_head
    tokens = T.transpose(T.reshape(x, (h * w, heads, dh)), (1, 0, 2))
    out = []
    for wm, b in ((p.w_q, p.b_q), (p.w_k, p.b_k), (p.w_v, p.b_v)):
        y = T.matmul(tokens, wm)
        if b is not None:
            y = T.add(y, T.reshape(b, (heads, 1, dh)))
        out.append(y)
    return out[0], out[1], out[2]


def _attend(q: Var, k: Var, v: Var) -> Var:
    """softmax(Q Kᵀ/√d_head) V over batches of shape (B, M, d_head)."""
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(q.shape[-1]))
    return T.matmul(T.softmax_rows(scores), v)


def full_attention(x: Var, p: AttentionParams) -> Var:
    """Dense attention over all H·W tokens of the grid."""
    h, w, d = _check_width(x, p)
    q, k, v = _project(x, p)
    out = _attend(q, k, v)                                   # (heads, N, dh)
    return T.reshape(T.transpose(out, (1, 0, 2)), (h, w, d))


def windowed_attention(x: Var, p: AttentionParams, spec: WindowSpec) -> Var:
    """Exact attention inside every window, merged by coverage averaging.

    Windows sit at valid positions only; no padded tokens enter a softmax.
    """
    h, w, d = _check_width(x, p)
    index = window_index(h, w, spec)
    n_windows, m = index.shape
    heads, dh = p.heads, p.d_head

    def windows(t: Var) -> Var:
        rows = T.gather_rows(T.transpose(t, (1, 0, 2)), index)          # (nw, M, heads, dh)
        return T.reshape(T.transpose(rows, (2, 0, 1, 3)), (heads * n_windows, m, dh))

    q, k, v = (windows(t) for t in _project(x, p))
    out = T.reshape(_attend(q, k, v), (heads, n_windows, m, dh))
    merged = T.scatter_rows(T.transpose(out, (1, 2, 0, 3)), index, h * w)  # (N, heads, dh)
    merged = T.reshape(merged, (h * w, d))
    if spec.normalize_coverage:
        inv = 1.0 / coverage_map(h, w, spec).reshape(h * w, 1)
        merged = T.mul(merged, x.graph.constant(inv))
    return T.reshape(merged, (h, w, d))


# ── Cost model ──────────────────────────────────────────────────────────────
#
# Multiply-adds, one flop each; every exponential of the softmax counts as 1.
#   projections   3 · N · d · d_head   (per-head d_head×d_head maps, so 3·N·d² only when heads = 1)
#   scores        windows · M² · d_head · heads
#   mixing (A·V)  windows · M² · d_head · heads
#   softmax       windows · M² · heads
# windows defaults to N / M, the non-overlapping partition. Overlapping strides are
# charged the same N / M windows, not the (n − w)/s + 1 squared windows actually visited.

def attention_flops(n: int, m: int, d: int, heads: int, windows: int | None = None) -> int:
    if min(n, m, d, heads) < 1:
        raise ConfigError(f"attention_flops needs positive arguments, got N={n} M={m} d={d} heads={heads}")
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    if windows is None:
        if n % m:
            raise ConfigError(f"{n} tokens do not partition into windows of {m}")
        windows = n // m
    d_head = d // heads
    projections = 3 * n * d * d_head
    scores = windows * m * m * d_head * heads
    softmax = windows * m * m * heads
    return projections + 2 * scores + softmax


def dense_attention_flops(n: int, d: int, heads: int) -> int:
    return attention_flops(n, n, d, heads, windows=1)


def dense_score_flops(n: int, d: int, heads: int) -> int:
    """The quadratic Q·Kᵀ term of dense attention alone."""
    return n * n * (d // heads) * heads
