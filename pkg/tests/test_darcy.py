"""Tests for coefficient sampling, the finite-volume operator, CG and dataset generation."""

import math

import numpy as np
import pytest
import scipy.sparse as sp

import config
import store
from config import ConfigError
from engine.darcy import (
    DarcySample,
    SolverError,
    assemble_stencil,
    cg_solve,
    generate_dataset,
    generate_sample,
    grf,
    manufactured_solution_errors,
    relative_residual,
    sample_coefficient,
    sample_residual,
    solve_darcy,
)


# ── coefficients ───────────────────────────────────────────────────────────

def test_coefficient_is_binary():
    """Every cell holds exactly low or high."""
    a = sample_coefficient(16, seed=0)
    assert set(np.unique(a)) <= {3.0, 12.0}
    assert a.shape == (16, 16)


def test_coefficient_is_deterministic():
    """Same seed, same field; other seeds differ."""
    assert np.array_equal(sample_coefficient(16, 5), sample_coefficient(16, 5))
    assert not np.array_equal(sample_coefficient(16, 5), sample_coefficient(16, 6))


def test_high_fraction_is_balanced():
    """The zero-mean GRF puts about half the cells at the high value."""
    fractions = [np.mean(sample_coefficient(16, seed) == 12.0) for seed in range(1000)]
    assert 0.40 <= np.mean(fractions) <= 0.60


def test_grf_power_spectrum_decay():
    """Mean Fourier power at |k| = 2 vs |k| = 1 follows (4π²|k|² + τ²)^(−α)."""
    n = 16
    power = np.zeros((n, n))
    for seed in range(500):
        power += np.abs(np.fft.fft2(grf(n, np.random.default_rng(seed)))) ** 2
    measured = (power[1, 0] + power[0, 1]) / (power[2, 0] + power[0, 2])
    expected = ((4 * math.pi ** 2 * 4 + 9.0) / (4 * math.pi ** 2 + 9.0)) ** 2
    assert measured == pytest.approx(expected, rel=0.2)
    assert power[0, 0] < 1e-12 * power[1, 0]


def test_bad_coefficient_range():
    """low must be positive and high must exceed it."""
    with pytest.raises(ConfigError, match="low=0"):
        sample_coefficient(8, 0, low=0.0)
    with pytest.raises(ConfigError):
        sample_coefficient(8, 0, low=5.0, high=5.0)
    with pytest.raises(ConfigError):
        sample_coefficient(1, 0)


# ── operator ───────────────────────────────────────────────────────────────

def test_unit_coefficient_stencil():
    """a ≡ 1: interior rows are (4, −1, −1, −1, −1)·n², a corner cell gets two ghost faces."""
    n = 4
    A, f = assemble_stencil(np.ones((n, n)))
    dense = A.toarray()
    row = dense[1 * n + 1]
    assert row[1 * n + 1] == 4 * n * n
    assert sorted(row[row != 0])[:4] == [-n * n] * 4
    assert np.count_nonzero(row) == 5
    assert dense[0, 0] == 6 * n * n
    assert np.array_equal(f, np.ones(n * n))


def test_harmonic_face_mean():
    """A 3 | 12 interface uses 2·3·12/15 = 4.8."""
    A, _ = assemble_stencil(np.array([[3.0, 12.0], [3.0, 12.0]]))
    assert A[0, 1] == pytest.approx(-4.8 * 4, rel=1e-15)
    A_arith, _ = assemble_stencil(np.array([[3.0, 12.0], [3.0, 12.0]]), face_mean="arithmetic")
    assert A_arith[0, 1] == pytest.approx(-7.5 * 4, rel=1e-15)


def test_operator_is_symmetric_positive_definite():
    """Symmetric to the bit and all eigenvalues positive."""
    A, _ = assemble_stencil(sample_coefficient(8, 1))
    assert (A - A.T).count_nonzero() == 0
    assert np.linalg.eigvalsh(A.toarray()).min() > 0


def test_non_positive_coefficient_rejected():
    """Zero, negative and NaN permeabilities are refused."""
    for bad in (0.0, -1.0, np.nan):
        a = np.ones((4, 4))
        a[2, 2] = bad
        with pytest.raises(ConfigError):
            assemble_stencil(a)


# ── solver ─────────────────────────────────────────────────────────────────

def test_cg_identity_one_iteration():
    """On A = I the first step is exact."""
    f = np.arange(1.0, 6.0)
    result = cg_solve(sp.identity(5, format="csr"), f)
    assert result.iterations == 1
    assert np.allclose(result.x, f, rtol=0, atol=1e-15)


def test_cg_zero_rhs():
    """f = 0 returns zero without iterating."""
    result = cg_solve(sp.identity(3, format="csr"), np.zeros(3))
    assert result.iterations == 0
    assert np.array_equal(result.x, np.zeros(3))


def test_cg_budget_exhausted():
    """Too few iterations raises SolverError carrying the residual."""
    A, f = assemble_stencil(sample_coefficient(16, 2))
    with pytest.raises(SolverError) as err:
        cg_solve(A, f, max_iter=2)
    assert err.value.iterations == 2
    assert err.value.residual > config.CG_TOL


def test_solution_residual():
    """Recomputed residual stays far under the dataset bound."""
    a = sample_coefficient(16, 3)
    u, result = solve_darcy(a)
    assert result.residual < config.CG_TOL
    A, f = assemble_stencil(a)
    assert relative_residual(A, u.ravel(), f) < config.RESIDUAL_TOL


def test_maximum_principle():
    """With f ≥ 0 and zero boundary values the pressure is positive."""
    u, _ = solve_darcy(sample_coefficient(16, 4))
    assert u.min() > 0


def test_coefficient_scaling():
    """Doubling a halves u."""
    a = sample_coefficient(16, 5)
    u1, _ = solve_darcy(a)
    u2, _ = solve_darcy(2.0 * a)
    assert np.max(np.abs(u2 - 0.5 * u1)) <= 1e-8 * np.max(np.abs(u1))


def test_manufactured_solution_second_order():
    """Max error against sin(πx)sin(πy) drops about 4× per refinement."""
    table = manufactured_solution_errors((16, 32, 64))
    assert list(table["n"]) == [16, 32, 64]
    lo, hi = config.MMS_RATIO_RANGE
    for ratio in table["ratio"].iloc[1:]:
        assert lo <= ratio <= hi
    assert table["max_error"].is_monotonic_decreasing


def test_manufactured_sizes_must_increase():
    """Unsorted or tiny sizes are configuration errors."""
    with pytest.raises(ConfigError):
        manufactured_solution_errors((32, 16))
    with pytest.raises(ConfigError):
        manufactured_solution_errors((1, 4))


# ── dataset ────────────────────────────────────────────────────────────────

def test_sample_depends_only_on_seed_and_index():
    """generate_sample is a pure function of (index, n, seed)."""
    a, b = generate_sample(3, 8, seed=1), generate_sample(3, 8, seed=1)
    assert np.array_equal(a.a, b.a) and np.array_equal(a.u, b.u)
    assert not np.array_equal(a.a, generate_sample(4, 8, seed=1).a)


def test_dataset_is_reproducible(tmp_path):
    """Two runs with one seed write byte-identical files."""
    first = generate_dataset(8, 4, seed=7, path=tmp_path / "a.bin")
    generate_dataset(8, 4, seed=7, path=tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert first.count == 4 and first.n == 8
    assert first.max_residual < config.RESIDUAL_TOL


def test_dataset_independent_of_workers(tmp_path):
    """A process pool produces the same file as the serial loop."""
    generate_dataset(8, 6, seed=2, path=tmp_path / "serial.bin", workers=1)
    generate_dataset(8, 6, seed=2, path=tmp_path / "pool.bin", workers=2)
    assert (tmp_path / "serial.bin").read_bytes() == (tmp_path / "pool.bin").read_bytes()


def test_reloaded_samples_satisfy_the_pde(tmp_path):
    """Every stored (a, u) pair still has a residual under the bound."""
    path = tmp_path / "d.bin"
    generate_dataset(8, 3, seed=9, path=path)
    a, u = store.load_dataset(path)
    assert a.shape == u.shape == (3, 8, 8)
    for ai, ui in zip(a, u):
        assert sample_residual(DarcySample(ai, ui)) < config.RESIDUAL_TOL


def test_dataset_rejects_zero_count(tmp_path):
    """count must be positive."""
    with pytest.raises(ConfigError):
        generate_dataset(8, 0, seed=0, path=tmp_path / "x.bin")


def test_failed_residual_check_writes_nothing(tmp_path, monkeypatch):
    """Samples above the residual bound raise before the file is created."""
    monkeypatch.setattr(config, "RESIDUAL_TOL", 0.0)
    path = tmp_path / "d.bin"
    with pytest.raises(SolverError, match="residual bound"):
        generate_dataset(n=8, count=2, seed=0, path=path)
    assert not path.exists()
