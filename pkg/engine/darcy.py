"""Darcy flow ground truth: binary GRF coefficients and a cell-centred finite-volume solver.

Solves −∇·(a ∇u) = f on (0,1)² with u = 0 on the boundary, f ≡ 1.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np
import pandas as pd
import scipy.sparse as sp

import config
import store
from config import ConfigError

log = logging.getLogger(__name__)

FACE_MEANS = ("harmonic", "arithmetic")


class SolverError(RuntimeError):
    """CG did not reach the requested relative residual."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass
class DarcySample:
    a: np.ndarray
    u: np.ndarray

    @property
    def n(self) -> int:
        return self.a.shape[0]


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float


@dataclass
class DatasetSummary:
    path: str
    count: int
    n: int
    u_mean: float
    u_std: float
    max_residual: float

    def line(self) -> str:
        return (f"count={self.count} n={self.n} u_mean={self.u_mean:.6e} "
                f"u_std={self.u_std:.6e} max_residual={self.max_residual:.3e}")


# ── Coefficient sampling ────────────────────────────────────────────────────

def grf(n: int, rng: np.random.Generator, alpha: float = config.GRF_ALPHA,
        tau: float = config.GRF_TAU) -> np.ndarray:
    """Zero-mean Gaussian random field on an n×n periodic grid by spectral synthesis.

    Covariance (−Δ + τ²)^(−α) on the unit square: mode amplitudes scale as
    (4π²|k|² + τ²)^(−α/2), so the power spectrum decays as (4π²|k|² + τ²)^(−α).
    σ = τ^(α − 1) keeps fields at O(1) amplitude; the zero mode is removed.
    """
    sigma = tau ** (0.5 * (2.0 * alpha - 2.0))
    k = np.fft.fftfreq(n, d=1.0 / n)
    kx, ky = np.meshgrid(k, k, indexing="ij")
    sqrt_eig = (n * n) * math.sqrt(2.0) * sigma * (4.0 * math.pi ** 2 * (kx ** 2 + ky ** 2) + tau ** 2) ** (-alpha / 2.0)
    sqrt_eig[0, 0] = 0.0
    coeff = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return np.fft.ifft2(sqrt_eig * coeff).real


def sample_coefficient(n: int, seed: int, low: float = config.COEFF_LOW, high: float = config.COEFF_HIGH,
                       alpha: float = config.GRF_ALPHA, tau: float = config.GRF_TAU) -> np.ndarray:
    """Binary permeability: ``high`` where the GRF is >= 0, ``low`` elsewhere."""
    if n < 2:
        raise ConfigError(f"grid side must be >= 2, got {n}")
    if low <= 0:
        raise ConfigError(f"coefficient low={low} must be > 0: a zero or negative permeability makes the PDE degenerate")
    if high <= low:
        raise ConfigError(f"coefficient high={high} must exceed low={low}")
    field = grf(n, np.random.default_rng(seed), alpha, tau)
    return np.where(field >= 0.0, float(high), float(low))


# ── Discretization ──────────────────────────────────────────────────────────

def _face(a: np.ndarray, b: np.ndarray, face_mean: str) -> np.ndarray:
    if face_mean == "harmonic":
        return 2.0 * a * b / (a + b)
    return 0.5 * (a + b)


def assemble_stencil(a: np.ndarray, face_mean: str = config.FACE_MEAN) -> tuple[sp.csr_matrix, np.ndarray]:
    """Five-point finite-volume operator A_h (CSR) and right-hand side f ≡ 1.

    Cell (i, j) has unknown index i·n + j. Dirichlet faces are eliminated with a
    ghost value −u_ij, which adds 2·a_ij/h² to the diagonal.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError(f"coefficient field must be n×n, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ConfigError("coefficient field must be finite and strictly positive")
    if face_mean not in FACE_MEANS:
        raise ConfigError(f"face_mean must be one of {FACE_MEANS}, got {face_mean!r}")

    n = a.shape[0]
    inv_h2 = float(n * n)
    idx = np.arange(n * n).reshape(n, n)
    diag = np.zeros((n, n))

    rows, cols, vals = [], [], []
    for lo, hi, coef in (
        (idx[:-1, :], idx[1:, :], _face(a[:-1, :], a[1:, :], face_mean) * inv_h2),   # i faces
        (idx[:, :-1], idx[:, 1:], _face(a[:, :-1], a[:, 1:], face_mean) * inv_h2),   # j faces
    ):
        rows += [lo.ravel(), hi.ravel()]
        cols += [hi.ravel(), lo.ravel()]
        vals += [-coef.ravel(), -coef.ravel()]
        np.add.at(diag, np.unravel_index(lo.ravel(), (n, n)), coef.ravel())
        np.add.at(diag, np.unravel_index(hi.ravel(), (n, n)), coef.ravel())

    boundary = 2.0 * a * inv_h2
    diag[0, :] += boundary[0, :]
    diag[-1, :] += boundary[-1, :]
    diag[:, 0] += boundary[:, 0]
    diag[:, -1] += boundary[:, -1]

    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n * n, n * n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A, np.ones(n * n)


def relative_residual(A, x: np.ndarray, f: np.ndarray) -> float:
    norm_f = np.linalg.norm(f)
    r = np.linalg.norm(A @ x - f)
    return float(r / norm_f) if norm_f > 0 else float(r)


# ── Solver ──────────────────────────────────────────────────────────────────

def cg_solve(A, f: np.ndarray, tol: float = config.CG_TOL, max_iter: int | None = None,
             x0: np.ndarray | None = None) -> CGResult:
    """Jacobi-preconditioned conjugate gradient for SPD ``A``.

    Stops when ‖r‖/‖f‖ < tol. Raises SolverError after ``max_iter`` iterations
    (default 10·size) without convergence.
    """
    f = np.asarray(f, dtype=np.float64)
    size = f.shape[0]
    max_iter = 10 * size if max_iter is None else max_iter
    inv_diag = 1.0 / np.asarray(A.diagonal(), dtype=np.float64)
    if not np.all(np.isfinite(inv_diag)) or np.any(inv_diag <= 0):
        raise ConfigError("CG needs a positive diagonal")

    norm_f = np.linalg.norm(f)
    x = np.zeros(size) if x0 is None else np.array(x0, dtype=np.float64)
    if norm_f == 0.0:
        return CGResult(x=np.zeros(size), iterations=0, residual=0.0)

    r = f - A @ x
    residual = np.linalg.norm(r) / norm_f
    if residual < tol:
        return CGResult(x=x, iterations=0, residual=float(residual))
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        residual = np.linalg.norm(r) / norm_f
        if residual < tol:
            log.debug("cg converged in %d iterations, residual %.3e", it, residual)
            return CGResult(x=x, iterations=it, residual=float(residual))
        z = inv_diag * r
        rz_next = r @ z
        p = z + (rz_next / rz) * p
        rz = rz_next
    raise SolverError(f"CG did not converge in {max_iter} iterations (residual {residual:.3e}, tol {tol:.1e})",
                      residual=float(residual), iterations=max_iter)


def solve_darcy(a: np.ndarray, tol: float = config.CG_TOL,
                face_mean: str = config.FACE_MEAN) -> tuple[np.ndarray, CGResult]:
    """Pressure u on the grid of ``a`` and the solver record."""
    A, f = assemble_stencil(a, face_mean)
    result = cg_solve(A, f, tol=tol)
    return result.x.reshape(a.shape), result


def sample_residual(sample: DarcySample, face_mean: str = config.FACE_MEAN) -> float:
    A, f = assemble_stencil(sample.a, face_mean)
    return relative_residual(A, sample.u.reshape(-1), f)


# ── Manufactured solution ───────────────────────────────────────────────────

def manufactured_solution_errors(sizes=config.MMS_SIZES, tol: float = config.CG_TOL) -> pd.DataFrame:
    """Max-norm error of the a ≡ 1 solve against u* = sin(πx)·sin(πy).

    One row per size with columns n, max_error, ratio (error of the previous
    size divided by this one), iterations. Sizes must be increasing.
    """
    sizes = [int(s) for s in sizes]
    if not sizes or any(s < 2 for s in sizes) or sorted(set(sizes)) != sizes:
        raise ConfigError(f"manufactured-solution sizes must be increasing integers >= 2, got {sizes}")
    rows = []
    for n in sizes:
        centres = (np.arange(n) + 0.5) / n
        xs, ys = np.meshgrid(centres, centres, indexing="ij")
        exact = np.sin(np.pi * xs) * np.sin(np.pi * ys)
        A, _ = assemble_stencil(np.ones((n, n)))
        result = cg_solve(A, (2.0 * np.pi ** 2 * exact).ravel(), tol=tol)
        error = float(np.max(np.abs(result.x.reshape(n, n) - exact)))
        ratio = rows[-1]["max_error"] / error if rows else float("nan")
        rows.append({"n": n, "max_error": error, "ratio": ratio, "iterations": result.iterations})
        log.info("mms n=%d max_error=%.3e ratio=%.3f iterations=%d", n, error, ratio, result.iterations)
    return pd.DataFrame(rows, columns=["n", "max_error", "ratio", "iterations"])


# ── Dataset ─────────────────────────────────────────────────────────────────

def generate_sample(index: int, n: int, seed: int, low: float = config.COEFF_LOW,
                    high: float = config.COEFF_HIGH, tol: float = config.CG_TOL,
                    face_mean: str = config.FACE_MEAN) -> DarcySample:
    a = sample_coefficient(n, config.sub_seed(seed, "data", index), low, high)
    u, result = solve_darcy(a, tol=tol, face_mean=face_mean)
    log.debug("sample %d: %d cg iterations", index, result.iterations)
    return DarcySample(a=a, u=u)


def dataset_summary(a: np.ndarray, u: np.ndarray, path: str | os.PathLike = "",
                    face_mean: str = config.FACE_MEAN) -> DatasetSummary:
    residuals = [sample_residual(DarcySample(ai, ui), face_mean) for ai, ui in zip(a, u)]
    return DatasetSummary(
        path=str(path), count=int(a.shape[0]), n=int(a.shape[1]),
        u_mean=float(u.mean()), u_std=float(u.std()),
        max_residual=float(max(residuals, default=0.0)),
    )


def generate_dataset(n: int, count: int, seed: int, path: str | os.PathLike,
                     low: float = config.COEFF_LOW, high: float = config.COEFF_HIGH,
                     workers: int = 1, tol: float = config.CG_TOL,
                     face_mean: str = config.FACE_MEAN) -> DatasetSummary:
    """Generate ``count`` samples and write them to ``path`` in index order.

    Sample i depends only on (seed, i), so the file is the same for any
    number of workers.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    # validate before spawning workers
    sample_coefficient(n, seed, low, high)

    job = partial(generate_sample, n=n, seed=seed, low=low, high=high, tol=tol, face_mean=face_mean)
    log.info("Generating %d Darcy samples at n=%d (seed=%d, workers=%d)", count, n, seed, workers)
    samples: list[DarcySample] = []
    step = max(1, count // 10)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for sample in pool.map(job, range(count), chunksize=max(1, count // (4 * workers))):
                samples.append(sample)
                if len(samples) % step == 0:
                    log.info("  %d/%d samples", len(samples), count)
    else:
        for i in range(count):
            samples.append(job(i))
            if (i + 1) % step == 0:
                log.info("  %d/%d samples", i + 1, count)

    a = np.stack([s.a for s in samples])
    u = np.stack([s.u for s in samples])
    summary = dataset_summary(a, u, path, face_mean)
    if summary.max_residual >= config.RESIDUAL_TOL:
        raise SolverError(f"samples exceed the residual bound {config.RESIDUAL_TOL:.0e}",
                          residual=summary.max_residual, iterations=0)
    store.save_dataset(path, a, u)
    log.info("Dataset written to %s: %s", path, summary.line())
    return summary
