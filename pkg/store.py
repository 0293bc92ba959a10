"""MANO Darcy benchmark: binary persistence for datasets and checkpoints, CSV artifacts."""

from __future__ import annotations

import io
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

import config

log = logging.getLogger(__name__)

DATASET_MAGIC = b"MNO1"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"MNOC"
CHECKPOINT_VERSION = 1

_DATASET_HEADER = struct.Struct("<4sIIII")      # magic, version, count, n, reserved
_CKPT_HEADER = struct.Struct("<4sI")            # magic, version
_U32 = struct.Struct("<I")
_F64 = np.dtype("<f8")

METRICS_COLUMNS = ["epoch", "lr", "train_mse", "val_rel_mse", "seconds"]
EVAL_COLUMNS = ["index", "rel_mse"]
BENCH_COLUMNS = ["variant", "n", "N", "wall_ns_median", "flops", "peak_bytes"]
FLOAT_FORMAT = "%.17g"


class FormatError(ValueError):
    """A dataset or checkpoint file is malformed, truncated, or of another version."""


class ShapeMismatchError(FormatError):
    """A stored tensor does not match the shape the model config expects."""

    def __init__(self, param: str, stored: tuple, expected: tuple):
        super().__init__(f"parameter {param}: stored shape {stored} does not match expected {expected}")
        self.param = param
        self.stored = stored
        self.expected = expected


def _write_atomic(path: str | os.PathLike, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


# ── Dataset ────────────────────────────────────────────────────────────────

def encode_dataset(a: np.ndarray, u: np.ndarray) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if a.ndim != 3 or a.shape != u.shape or a.shape[1] != a.shape[2]:
        raise FormatError(f"dataset arrays must both be count×n×n, got a{a.shape} u{u.shape}")
    count, n = a.shape[0], a.shape[1]
    body = np.stack([a, u], axis=1).astype(_F64, copy=False)     # per sample: a then u
    return _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, count, n, 0) + body.tobytes(order="C")


def decode_dataset(payload: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(payload) < _DATASET_HEADER.size:
        raise FormatError(f"{source}: truncated dataset header")
    magic, version, count, n, _ = _DATASET_HEADER.unpack_from(payload)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{source}: unsupported dataset version {version}")
    expected = _DATASET_HEADER.size + count * 2 * n * n * _F64.itemsize
    if len(payload) != expected:
        raise FormatError(f"{source}: {len(payload)} bytes, header (count={count}, n={n}) implies {expected}")
    body = np.frombuffer(payload, dtype=_F64, offset=_DATASET_HEADER.size).reshape(count, 2, n, n)
    return np.array(body[:, 0], dtype=np.float64), np.array(body[:, 1], dtype=np.float64)


def save_dataset(path: str | os.PathLike, a: np.ndarray, u: np.ndarray) -> Path:
    out = _write_atomic(path, encode_dataset(a, u))
    log.debug("Wrote dataset %s (%d samples)", out, len(a))
    return out


def load_dataset(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """(a, u), each count×n×n float64."""
    return decode_dataset(Path(path).read_bytes(), str(path))


def read_dataset_header(path: str | os.PathLike) -> tuple[int, int]:
    """(count, n) without reading the body."""
    with open(path, "rb") as fh:
        head = fh.read(_DATASET_HEADER.size)
    if len(head) < _DATASET_HEADER.size:
        raise FormatError(f"{path}: truncated dataset header")
    magic, version, count, n, _ = _DATASET_HEADER.unpack(head)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise FormatError(f"{path}: not a version-{DATASET_VERSION} dataset file")
    return count, n


# ── Checkpoint ─────────────────────────────────────────────────────────────

@dataclass
class Checkpoint:
    """Config key=value pairs plus named tensors, both in file order."""
    config: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    text = "".join(f"{k}={config.format_value(v)}\n" for k, v in ckpt.config.items()).encode()
    parts = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION), _U32.pack(len(text)), text,
             _U32.pack(len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        arr = np.ascontiguousarray(value, dtype=_F64)
        raw = name.encode()
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.pos = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.payload):
            raise FormatError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        chunk = self.payload[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(payload, source)
    magic, version = _CKPT_HEADER.unpack(r.take(_CKPT_HEADER.size))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")

    values: dict[str, str] = {}
    for line in r.take(r.u32()).decode().splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{source}: bad config line {line!r}")
        values[key] = value

    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(count * _F64.itemsize), dtype=_F64)
        tensors[name] = np.array(data, dtype=np.float64).reshape(shape)
    if r.pos != len(payload):
        raise FormatError(f"{source}: {len(payload) - r.pos} trailing bytes")
    return Checkpoint(config=values, tensors=tensors)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> Path:
    out = _write_atomic(path, encode_checkpoint(ckpt))
    log.debug("Wrote checkpoint %s (%d tensors)", out, len(ckpt.tensors))
    return out


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))


def check_shapes(expected: dict[str, np.ndarray], tensors: dict[str, np.ndarray]) -> None:
    """Every expected name present with the same shape; raises naming the first offender."""
    for name, ref in expected.items():
        if name not in tensors:
            raise FormatError(f"missing parameter {name}")
        stored = tuple(np.shape(tensors[name]))
        if stored != tuple(np.shape(ref)):
            raise ShapeMismatchError(name, stored, tuple(np.shape(ref)))
    extra = [name for name in tensors if name not in expected]
    if extra:
        raise FormatError(f"unexpected parameter(s): {', '.join(extra)}")


# ── CSV artifacts ──────────────────────────────────────────────────────────

def append_metrics(path: str | os.PathLike, row: dict) -> None:
    """Append one epoch row; the header is written with the first row. Closed (flushed) per call."""
    path = Path(path)
    frame = pd.DataFrame([row], columns=METRICS_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists() or path.stat().st_size == 0,
                 index=False, float_format=FLOAT_FORMAT)


def read_metrics(path: str | os.PathLike) -> pd.DataFrame:
    return pd.read_csv(path)


def truncate_metrics(path: str | os.PathLike, last_epoch: int) -> None:
    """Drop rows after ``last_epoch`` (a resumed run rewrites them)."""
    path = Path(path)
    if not path.exists():
        return
    frame = read_metrics(path)
    frame = frame[frame["epoch"] <= last_epoch]
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_eval_csv(path: str | os.PathLike, rel_mse: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"index": np.arange(len(rel_mse)), "rel_mse": np.asarray(rel_mse, dtype=np.float64)},
                         columns=EVAL_COLUMNS)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_bench_csv(path: str | os.PathLike, records: pd.DataFrame, run_id: str,
                    notes: list[str] | None = None) -> Path:
    """Append one run block: ``# run_id=...``, optional ``# note:`` lines, header, rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# run_id={run_id}\n")
    for note in notes or ():
        buf.write(f"# note: {note}\n")
    records.to_csv(buf, columns=BENCH_COLUMNS, index=False, float_format=FLOAT_FORMAT)
    with open(path, "a") as fh:
        fh.write(buf.getvalue())
    return path


def read_bench_csv(path: str | os.PathLike) -> dict[str, pd.DataFrame]:
    """Run blocks keyed by run id, in file order."""
    runs: dict[str, pd.DataFrame] = {}
    run_id, lines = None, []

    def flush():
        if run_id is not None:
            runs[run_id] = pd.read_csv(io.StringIO("".join(lines))) if lines else pd.DataFrame(columns=BENCH_COLUMNS)

    for line in Path(path).read_text().splitlines(keepends=True):
        if line.startswith("# run_id="):
            flush()
            run_id, lines = line[len("# run_id="):].strip(), []
        elif not line.startswith("#"):
            lines.append(line)
    flush()
    return runs
