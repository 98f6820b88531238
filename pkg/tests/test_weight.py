import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qwork.errors import InvalidState, OffLatticeShift
from qwork.weight import (
    GridLedger,
    PointCell,
    WeightLedger,
    cells_to_ledger,
    convolve,
    discretization_error_bound,
    ledger_from_csv,
    ledger_to_csv,
    mean_energy,
    merge_and_prune,
    shift,
    snap_to_lattice,
    variance,
)

P_EQ = 1 / (1 + math.e)


def random_ledger(rng, n=6, spread=3.0):
    x = np.sort(rng.uniform(-spread, spread, n))
    m = rng.dirichlet(np.ones(n))
    return WeightLedger(x, m)


def test_point_and_moments():
    led = WeightLedger.point()
    assert (mean_energy(led), variance(led)) == (0.0, 0.0)
    sym = WeightLedger([-1, 1], [0.5, 0.5])
    assert mean_energy(sym) == 0.0
    assert variance(sym) == pytest.approx(1.0)


def test_two_peak_ledger_mean():
    lo, hi = math.log(0.7 / (1 - P_EQ)), math.log(0.3 / P_EQ)
    led = WeightLedger([lo, hi], [0.7, 0.3])
    d = 0.3 * math.log(0.3 / P_EQ) + 0.7 * math.log(0.7 / (1 - P_EQ))
    assert mean_energy(led) == pytest.approx(d, abs=1e-15)
    assert lo == pytest.approx(-0.0434133, abs=1e-7)
    assert hi == pytest.approx(0.1092889, abs=1e-7)


def test_invariants_enforced():
    with pytest.raises(InvalidState):
        WeightLedger([0, 1], [0.5, 0.4])
    with pytest.raises(InvalidState):
        WeightLedger([0, 1e-12], [0.5, 0.5])
    with pytest.raises(OffLatticeShift):
        WeightLedger([0.05], [1.0], spacing=0.1)
    led = WeightLedger([0.3, 0.1], [0.25, 0.75], spacing=0.1)
    assert list(led.index) == [1, 3]


def test_shift():
    led = WeightLedger.point()
    assert list(shift(led, 0.7)) == [(0.7, 1.0)]
    assert list(shift(led, 0.0)) == list(led)
    lat = WeightLedger([0.0, 0.2], [0.5, 0.5], spacing=0.1)
    assert np.allclose(shift(lat, 0.3).offsets, [0.3, 0.5])
    with pytest.raises(OffLatticeShift, match="off-lattice shift"):
        shift(lat, 0.05)


@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_shift_moves_mean(seed, a):
    led = random_ledger(np.random.default_rng(seed))
    moved = shift(led, a)
    assert mean_energy(moved) == pytest.approx(mean_energy(led) + a, abs=1e-12)
    assert np.array_equal(moved.masses, led.masses)


def test_merge_and_prune():
    led = WeightLedger([0, 1, 2], [0.2, 0.3, 0.5], merge_tol=0)
    same = merge_and_prune(led, 0.0, 0.0)
    assert np.array_equal(same.offsets, led.offsets) and np.array_equal(same.masses, led.masses)
    close = WeightLedger([0, 1e-15], [0.5, 0.5], merge_tol=0)
    merged = merge_and_prune(close, 1e-12)
    assert len(merged) == 1 and merged.masses[0] == pytest.approx(1.0)
    assert merged.offsets[0] == pytest.approx(0.5e-15, abs=1e-16)


def test_pruning_moves_mass_to_truncated():
    led = WeightLedger([-5.0, 0.0, 7.0], [1e-16, 1 - 2e-16, 1e-16], merge_tol=0)
    pruned = merge_and_prune(led, 0.0, 1e-15)
    assert len(pruned) == 1
    assert pruned.truncated_mass == pytest.approx(2e-16)
    assert abs(mean_energy(pruned) - mean_energy(led)) <= 2e-16 * 7


@given(st.integers(0, 2**32 - 1), st.floats(0, 0.5))
def test_merge_drift_bound(seed, tol):
    rng = np.random.default_rng(seed)
    led = random_ledger(rng, n=12, spread=1.0)
    merged = merge_and_prune(led.replace(merge_tol=0.0), tol)
    assert merged.masses.sum() == pytest.approx(1.0, abs=1e-12)
    assert abs(mean_energy(merged) - mean_energy(led)) <= 1e-12


def test_snap_examples():
    s = snap_to_lattice(0.34, 0.1)
    assert s.m == 3 and s.epsilon == pytest.approx(-0.04)
    assert snap_to_lattice(0.3, 0.1).epsilon == pytest.approx(0.0, abs=1e-15)
    tie = snap_to_lattice(0.25, 0.5)
    assert tie.m == 1 and tie.epsilon == pytest.approx(0.25)
    tie = snap_to_lattice(-0.25, 0.5)
    assert tie.m == 0 and tie.epsilon == pytest.approx(0.25)


def test_snap_random_gaps():
    rng = np.random.default_rng(3)
    for g in rng.uniform(-10, 10, 10_000):
        s = snap_to_lattice(g, 0.01)
        assert abs(s.epsilon) <= 0.005 + 1e-15
        assert abs(s.gap_in + s.epsilon - s.m * 0.01) <= 1e-12


def test_discretization_bound():
    assert discretization_error_bound(0.0, 10, 0.3, P_EQ) == 0.0
    b = discretization_error_bound(1e-6, 1000, 0.3, 0.268941)
    assert b == pytest.approx(5.68972e-4, rel=1e-5)
    assert discretization_error_bound(5e-7, 1000, 0.3, 0.268941) == pytest.approx(b / 2)
    # spacing scaled as 1/N^2 makes the bound fall like 1/N
    vals = [discretization_error_bound(1e-2 / n**2, n, 0.3, P_EQ) * n for n in (10, 100, 1000)]
    assert max(vals) / min(vals) < 1.01


def test_csv_round_trip(tmp_path):
    led = WeightLedger([-0.1234567890123456789, 2.5, 1 / 3], [0.1, 0.6, 0.3])
    text = ledger_to_csv(led)
    assert text.startswith("offset,mass\n") and "\r" not in text
    rows = text.strip().split("\n")[1:]
    assert [float(r.split(",")[0]) for r in rows] == sorted(led.offsets.tolist())
    back = ledger_from_csv(text)
    assert np.array_equal(back.offsets, led.offsets) and np.array_equal(back.masses, led.masses)
    path = tmp_path / "l.csv"
    ledger_to_csv(led, path)
    assert np.array_equal(ledger_from_csv(path).offsets, led.offsets)


@given(st.integers(0, 2**32 - 1))
def test_convolution_adds_moments(seed):
    rng = np.random.default_rng(seed)
    a, b = random_ledger(rng), random_ledger(rng)
    c = convolve(a, b, merge_tol=0.0)
    assert c.masses.sum() == pytest.approx(1.0, abs=1e-12)
    assert mean_energy(c) == pytest.approx(mean_energy(a) + mean_energy(b), abs=1e-12)
    assert variance(c) == pytest.approx(variance(a) + variance(b), abs=1e-10)


def test_lattice_convolution_stays_on_lattice():
    a = WeightLedger([0.0, 0.3], [0.5, 0.5], spacing=0.1)
    c = convolve(a, a)
    assert list(c.index) == [0, 3, 6]
    assert np.allclose(c.masses, [0.25, 0.5, 0.25])


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_grid_shift_conserves_mass_and_mean(seed, h):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, 5)
    m = rng.dirichlet(np.ones(5))
    g = GridLedger.from_points(x, m, h, origin=-2.0)
    m0, m1, m2 = g.moments()
    assert m0 == pytest.approx(1.0, abs=1e-12)
    assert m1 == pytest.approx(float(m @ x), abs=1e-12)
    var_in = float(m @ x**2) - float(m @ x) ** 2
    assert var_in - 1e-12 <= m2 - m1**2 <= var_in + h * h / 4 + 1e-12
    d = rng.uniform(-3, 3)
    s0, s1, s2 = g.shifted(d).moments()
    assert s0 == pytest.approx(m0, abs=1e-12)
    assert s1 == pytest.approx(m1 + d * m0, abs=1e-10)
    assert (m2 - m1**2) - 1e-10 <= s2 - s1**2 <= (m2 - m1**2) + h * h / 4 + 1e-10


def test_grid_lattice_mode():
    g = GridLedger.from_points([0.0, 0.2], [0.5, 0.5], 0.1, lattice=True)
    assert np.allclose(g.shifted(0.3).positions()[g.shifted(0.3).mass > 0], [0.3, 0.5])
    with pytest.raises(OffLatticeShift):
        g.shifted(0.05)


def test_point_cell_and_assembly():
    a = PointCell([0.0, 1.0], [0.25, 0.25])
    b = PointCell([1.0, 2.0], [0.25, 0.25])
    s = a.plus(b, 0.0)
    assert np.allclose(s.offsets, [0, 1, 2]) and np.allclose(s.masses, [0.25, 0.5, 0.25])
    kept, lost = s.pruned(0.3)
    assert lost == pytest.approx(0.5) and kept.total() == pytest.approx(0.5)
    led = cells_to_ledger([kept], spacing=None, merge_tol=1e-9, truncated_mass=lost)
    assert led.truncated_mass == pytest.approx(0.5)
    cond = cells_to_ledger([a], spacing=None, merge_tol=1e-9, truncated_mass=0.0, normaliser=0.5)
    assert np.allclose(cond.masses, [0.5, 0.5])
