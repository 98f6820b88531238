import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qwork.errors import DimensionMismatch, OffLatticeShift, WeightWindowTooSmall
from qwork.protocol import DiagonalState, LedgerOptions, SwapStep, qubit_schedule, run_qubit_protocol, run_schedule
from qwork.qcore import diag_state, random_density
from qwork.thermo import ThermalContext, binary_entropy_double_prime, binary_entropy_prime
from qwork.verify import (
    PermutationProtocol,
    TruncatedWeight,
    build_unitary,
    commutator_error,
    exhaustive_max_work,
    expansion_check,
    is_unitary_sparse,
    marginal_bath_states,
    oracle_run,
    quadratic_coefficients,
    random_permutation,
    second_law_sampler,
    thermal_product,
    translation_commutator_error,
    weight_independence_test,
    window_size,
    work_formula,
)
from qwork.weight import WeightLedger, discretization_error_bound, mean_energy

P_EQ = 1 / (1 + math.e)


def swap_protocol(gap_s, gap_b):
    return PermutationProtocol.from_swap_step(SwapStep(0, 1, 0.3, gap_b), [0.0, gap_s])


def test_identity_unitary():
    proto = PermutationProtocol.identity([0.0, 0.5, 1.0])
    w = TruncatedWeight(3, 0.1)
    assert np.array_equal(build_unitary(proto, w), np.eye(3 * 7))
    assert work_formula(proto, diag_state([0.2, 0.3, 0.5])) == 0.0


def test_resonant_swap_has_no_translation():
    proto = swap_protocol(1.0, 1.0)
    assert np.all(proto.translations == 0.0)
    u = build_unitary(proto, TruncatedWeight(2, 0.1))
    assert is_unitary_sparse(u)
    assert np.array_equal(np.abs(u), np.kron(np.eye(4)[proto.perm][:, :].T, np.eye(5)) @ np.eye(20))


def test_detuned_swap_moves_weight_one_unit():
    proto, eps = swap_protocol(1.0, 0.9).snapped(0.1)
    w = TruncatedWeight(4, 0.1)
    assert proto.lattice_steps(0.1)[2] == 1 and proto.lattice_steps(0.1)[1] == -1
    assert np.max(np.abs(eps)) < 1e-12
    u = build_unitary(proto, w, sparse=True)
    assert is_unitary_sparse(u)
    assert np.max(np.abs(u.toarray() @ u.toarray().conj().T - np.eye(u.shape[0]))) < 1e-10
    assert commutator_error(u, proto, w) <= 1e-9
    assert translation_commutator_error(u, proto, w) <= 1e-12


def test_off_lattice_translation_rejected():
    with pytest.raises(OffLatticeShift):
        build_unitary(swap_protocol(1.0, 0.93), TruncatedWeight(4, 0.1))


def test_protocol_validation():
    with pytest.raises(ValueError):
        PermutationProtocol([0.0, 1.0], [0, 0])
    with pytest.raises(DimensionMismatch):
        PermutationProtocol([0.0, 1.0], [1, 0], translations=[0.0])
    with pytest.raises(DimensionMismatch):
        work_formula(PermutationProtocol.identity([0, 1]), diag_state([1, 0, 0]))
    with pytest.raises(WeightWindowTooSmall, match="weight window too small"):
        TruncatedWeight(2, 0.1).index(3)


def test_swap_work_formula_value():
    step = SwapStep(0, 1, 0.29, math.log(0.71 / 0.29))
    proto = PermutationProtocol.from_swap_step(step, [0.0, 1.0])
    rho_sb = np.kron([0.7, 0.3], [0.71, 0.29])
    assert work_formula(proto, rho_sb) == pytest.approx(0.01 * (1 - math.log(0.71 / 0.29)), rel=1e-12)
    assert work_formula(proto, rho_sb) == pytest.approx(1.04616e-3, abs=1e-8)


def dense_weight_work(proto, rho_sb, rho_w, weight):
    """Weight energy gain from U (rho_sb (x) rho_w) U^dag with a dense unitary."""
    u = build_unitary(proto, weight)
    joint = u @ np.kron(rho_sb, rho_w) @ u.conj().T
    dsb = proto.dim
    red = np.einsum("aiaj->ij", joint.reshape(dsb, weight.dim, dsb, weight.dim))
    return float(np.real(np.trace(red @ np.diag(weight.energies)) - np.trace(rho_w @ np.diag(weight.energies))))


def test_work_formula_matches_dense_evolution():
    rng = np.random.default_rng(17)
    spacing = 0.25
    for _ in range(50):
        d = int(rng.integers(2, 5))
        levels = rng.integers(0, 5, d) * spacing
        perm = rng.permutation(d)
        proto = PermutationProtocol(levels, perm)
        reach = int(np.max(np.abs(proto.lattice_steps(spacing))))
        weight = TruncatedWeight(reach + 3, spacing)
        core = random_density(3, rng).matrix
        rho_w = np.zeros((weight.dim, weight.dim), dtype=complex)
        mid = weight.M - 1
        rho_w[mid:mid + 3, mid:mid + 3] = core
        rho_sb = random_density(d, rng).matrix
        assert dense_weight_work(proto, rho_sb, rho_w, weight) == pytest.approx(
            work_formula(proto, rho_sb), abs=1e-10)


def test_oracle_single_step(ctx):
    step = SwapStep.thermal(0, 1, 0.29, ctx)
    res = oracle_run([0.7, 0.3], [0.0, 1.0], [step], 1e-4)
    exact = 0.01 * (1 - math.log(0.71 / 0.29))
    bound = discretization_error_bound(1e-4, 1, 0.3, 0.29)
    assert abs(res.work - exact) <= bound + 1e-9
    assert res.work == pytest.approx(1.04616e-3, abs=5e-5)
    assert np.allclose(np.real(np.diag(res.rho_system)), [0.71, 0.29], atol=1e-14)
    assert abs(res.work - res.lattice_steps[0] * 1e-4 * (0.3 * 0.71 - 0.7 * 0.29)) < 1e-15


def test_oracle_fixed_point(ctx):
    steps = qubit_schedule(P_EQ, P_EQ, 3, ctx)
    res = oracle_run([1 - P_EQ, P_EQ], [0.0, 1.0], steps, 1e-3)
    assert res.work == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("n,spacing", [(1, 1e-3), (2, 1e-4), (3, 1e-4), (4, 1e-3)])
def test_oracle_matches_engine_within_bound(n, spacing):
    ctx = ThermalContext(1.0)
    steps = qubit_schedule(0.3, P_EQ, n, ctx)
    res = oracle_run([0.7, 0.3], [0.0, 1.0], steps, spacing)
    engine = run_qubit_protocol(0.3, 1.0, 1.0, n, LedgerOptions(resolution=None))
    assert abs(res.work - engine.work) <= discretization_error_bound(spacing, n, 0.3, P_EQ) + 1e-9
    assert np.allclose(np.real(np.diag(res.rho_system)), engine.final_probs, atol=1e-12)
    led = res.weight_ledger()
    assert mean_energy(led) == pytest.approx(res.work, abs=1e-12)


def test_oracle_lattice_engine_agree_exactly():
    ctx = ThermalContext(1.0)
    steps = qubit_schedule(0.3, P_EQ, 3, ctx)
    res = oracle_run([0.7, 0.3], [0.0, 1.0], steps, 1e-3)
    engine = run_qubit_protocol(0.3, 1.0, 1.0, 3, LedgerOptions(resolution=None, lattice_spacing=1e-3))
    assert res.work == pytest.approx(engine.work, abs=1e-12)
    led = res.weight_ledger()
    ref = engine.final_ledger
    assert np.allclose(led.offsets, ref.offsets, atol=1e-12)
    assert np.allclose(led.masses, ref.masses, atol=1e-12)


def test_oracle_weight_start_independence(ctx):
    steps = qubit_schedule(0.3, P_EQ, 2, ctx)
    spacing = 1e-3
    m = window_size(steps, [0.0, 1.0], spacing, 5)
    weight = TruncatedWeight(m, spacing)

    def run(offset):
        level = int(round(offset / spacing))
        r = oracle_run([0.7, 0.3], [0.0, 1.0], steps, spacing, weight=weight, initial_level=level)
        return r.work, r.weight_ledger()

    rep = weight_independence_test(run, [0.0, 5 * spacing, -3 * spacing])
    assert rep and rep.max_work_spread <= 1e-12


def test_oracle_coherent_weight_start(ctx):
    steps = qubit_schedule(0.3, P_EQ, 2, ctx)
    weight = TruncatedWeight(window_size(steps, [0.0, 1.0], 1e-3, 2), 1e-3)
    rho_w = np.zeros((weight.dim, weight.dim), dtype=complex)
    psi = np.zeros(weight.dim, dtype=complex)
    psi[weight.M - 2:weight.M + 3] = np.array([1, 1j, -1, 0.5, 0.3]) / np.linalg.norm([1, 1j, -1, 0.5, 0.3])
    rho_w = np.outer(psi, psi.conj())
    base = oracle_run([0.7, 0.3], [0.0, 1.0], steps, 1e-3, weight=weight)
    coh = oracle_run([0.7, 0.3], [0.0, 1.0], steps, 1e-3, weight=weight, initial_weight=rho_w)
    assert coh.work == pytest.approx(base.work, abs=1e-12)


def test_oracle_window_too_small(ctx):
    steps = qubit_schedule(0.3, P_EQ, 2, ctx)
    with pytest.raises(WeightWindowTooSmall):
        oracle_run([0.7, 0.3], [0.0, 1.0], steps, 1e-3, weight=TruncatedWeight(5, 1e-3))


def test_thermal_fixed_point_marginals(ctx):
    r = P_EQ
    step = SwapStep.thermal(0, 1, r, ctx)
    res = oracle_run([1 - r, r], [0.0, 1.0], [step], 1e-3, keep_baths=True)
    bath = marginal_bath_states(res)[0]
    assert np.allclose(bath, np.diag([1 - r, r]), atol=1e-14)
    assert np.allclose(res.rho_system, np.diag([1 - r, r]), atol=1e-14)


def test_bath_marginals_barely_move(ctx):
    steps = qubit_schedule(0.3, P_EQ, 3, ctx)
    res = oracle_run([0.7, 0.3], [0.0, 1.0], steps, 1e-3, keep_baths=True)
    engine = run_schedule(DiagonalState.qubit(0.3, 1.0), steps, ctx, LedgerOptions(resolution=None))
    for rho_b, expected in zip(marginal_bath_states(res), engine.bath_after):
        assert rho_b[1, 1].real == pytest.approx(expected, abs=1e-12)
        assert abs(rho_b[0, 1]) < 1e-14


def test_thermal_product_and_exhaustive(ctx):
    e, p = thermal_product([1.0, (3, [0.0, 0.5, 1.0])], ctx)
    assert e.size == 6 and p.sum() == pytest.approx(1.0)
    assert exhaustive_max_work([1.0], ctx) <= 0.0
    assert exhaustive_max_work([1.0], ctx) == 0.0
    assert exhaustive_max_work([1.0, 0.5], ctx) <= 1e-15
    e2, p2 = thermal_product([0.7, 0.7], ctx)
    proto = PermutationProtocol(e2, [0, 2, 1, 3])
    assert work_formula(proto, p2) == pytest.approx(0.0, abs=1e-16)


def test_second_law_sampler(ctx):
    rep = second_law_sampler([1.0, 0.5, 0.25], ctx, 1000, seed=42)
    assert rep.passed and rep.max_work <= 1e-12
    j = rep.to_json()
    assert set(j) >= {"test", "trials", "seed", "max_violation", "pass"}
    again = second_law_sampler([1.0, 0.5, 0.25], ctx, 1000, seed=42)
    assert again.max_work == rep.max_work
    swaps = second_law_sampler([1.0, 0.5, 0.25], ctx, 200, seed=1, two_cycles=True)
    assert swaps.passed
    with pytest.raises(ValueError):
        second_law_sampler([1.0], ctx, 0, seed=1)


@given(st.integers(0, 2**32 - 1), st.floats(0.2, 5.0))
def test_second_law_random_temperatures(seed, temp):
    ctx = ThermalContext(temp)
    rng = np.random.default_rng(seed)
    gaps = list(rng.uniform(0, 2, 3))
    assert second_law_sampler(gaps, ctx, 30, seed=seed).max_work <= 1e-12


def test_random_permutation_respects_blocks():
    rng = np.random.default_rng(0)
    blocks = [[0, 3], [1, 2, 4]]
    for _ in range(20):
        perm = random_permutation(rng, 5, blocks)
        assert set(perm[[0, 3]]) == {0, 3} and set(perm[[1, 2, 4]]) == {1, 2, 4}
        inv = random_permutation(rng, 6, two_cycles=True)
        assert np.array_equal(inv[inv], np.arange(6))


def test_weight_independence_trivial_and_qubit():
    rep = weight_independence_test(lambda o: (1.0, WeightLedger.point(o)), [0.0])
    assert rep.passed

    def run(offset):
        t = run_qubit_protocol(0.3, 1.0, 1.0, 100, initial_ledger=WeightLedger.point(offset))
        return t.work, t.final_ledger

    assert weight_independence_test(run, [0.0, 1.7, -3.2])
    bad = weight_independence_test(lambda o: (o, WeightLedger.point(o)), [0.0, 1.0])
    assert not bad


def test_expansion_check():
    ctx = ThermalContext(1.0)
    d_f, d_e = expansion_check(0.3, 1e-9, 1.0, ctx)
    assert abs(d_f) < 1e-8 and abs(d_e) < 1e-8
    for dp in (1e-2, 5e-3, 2.5e-3, 1e-3):
        d_f, d_e = expansion_check(0.3, dp, 1.0, ctx)
        assert d_e <= d_f
        lin = dp * (1.0 - binary_entropy_prime(0.3))
        assert d_f - lin == pytest.approx(dp**2 * binary_entropy_double_prime(0.3) / 2, rel=0.05)
        assert d_e - lin == pytest.approx(dp**2 * binary_entropy_double_prime(0.3), rel=0.05)
    c_f, c_e = quadratic_coefficients(0.3, 1.0, ctx)
    assert 1.9 <= c_e / c_f <= 2.1
    c_f, c_e = quadratic_coefficients(0.3, 1.0, ctx, (1e-3, 5e-4, 2.5e-4))
    assert c_e / c_f == pytest.approx(2.0, rel=0.05)
    with pytest.raises(ValueError):
        expansion_check(0.3, 0.4, 1.0, ctx)
