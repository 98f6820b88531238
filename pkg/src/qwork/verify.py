"""Ground-truth checks: a Hilbert-space oracle with a truncated weight ladder,
random energy-conserving permutations, and weight-start independence.

The oracle keeps the full system (x) bath (x) weight density matrix, stored
sparse because permutation unitaries keep it sparse. Bath qubits are traced
out after each step unless ``keep_baths`` is set, in which case the whole
joint state of system, every bath qubit and the weight is carried along.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionCapExceeded, DimensionMismatch, OffLatticeShift, WeightWindowTooSmall
from .protocol import SwapStep
from .qcore import DEFAULT_DIM_CAP, DensityOperator
from .thermo import (
    ThermalContext,
    binary_entropy,
    binary_entropy_prime,
    excitation_from_gap,
    thermal_probabilities,
)
from .weight import WeightLedger, snap_to_lattice

LATTICE_TOL = 1e-9


@dataclass(frozen=True)
class PermutationProtocol:
    """Energy-conserving permutation on a system (x) bath basis.

    ``perm[j]`` is the image of basis state j. Energy released by the move
    ``j -> perm[j]`` goes to the weight, so translations are
    ``E_j - E_perm[j]`` unless explicit (snapped) ones are supplied.
    """

    energies: np.ndarray
    perm: np.ndarray
    translations: np.ndarray | None = None

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float)
        perm = np.asarray(self.perm, dtype=np.int64)
        if perm.shape != e.shape or not np.array_equal(np.sort(perm), np.arange(e.size)):
            raise ValueError("perm must be a bijection on the basis")
        t = e - e[perm] if self.translations is None else np.asarray(self.translations, dtype=float)
        if t.shape != e.shape:
            raise DimensionMismatch("dimension mismatch: translations")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "translations", t)

    @property
    def dim(self) -> int:
        return self.energies.size

    @classmethod
    def identity(cls, energies) -> "PermutationProtocol":
        e = np.asarray(energies, dtype=float)
        return cls(e, np.arange(e.size))

    @classmethod
    def from_swap_step(cls, step: SwapStep, system_energies) -> "PermutationProtocol":
        """Swap |high, 0> with |low, 1> on system (x) bath qubit, bath index last."""
        es = np.asarray(system_energies, dtype=float)
        d = es.size
        energies = (es[:, None] + np.array([0.0, step.bath_gap])[None, :]).ravel()
        perm = np.arange(2 * d)
        a, b = 2 * step.high, 2 * step.low + 1
        perm[a], perm[b] = b, a
        return cls(energies, perm)

    def snapped(self, spacing: float) -> tuple["PermutationProtocol", np.ndarray]:
        """Copy with translations rounded to the lattice, plus the rounding errors."""
        snaps = [snap_to_lattice(t, spacing) for t in self.translations]
        t = np.array([s.snapped for s in snaps])
        return PermutationProtocol(self.energies, self.perm, t), np.array([s.epsilon for s in snaps])

    def lattice_steps(self, spacing: float) -> np.ndarray:
        u = self.translations / spacing
        k = np.rint(u)
        if np.any(np.abs(u - k) > LATTICE_TOL):
            raise OffLatticeShift(f"off-lattice shift: translations {self.translations} for spacing {spacing}")
        return k.astype(np.int64)


@dataclass(frozen=True)
class TruncatedWeight:
    M: int
    spacing: float

    def __post_init__(self):
        if self.M < 0 or not self.spacing > 0:
            raise ValueError("need M >= 0 and positive spacing")

    @property
    def dim(self) -> int:
        return 2 * self.M + 1

    @property
    def levels(self) -> np.ndarray:
        return np.arange(-self.M, self.M + 1)

    @property
    def energies(self) -> np.ndarray:
        return self.levels * self.spacing

    def index(self, level: int) -> int:
        if abs(level) > self.M:
            raise WeightWindowTooSmall(f"weight window too small: level {level} outside +-{self.M}")
        return level + self.M


def _as_sparse(a) -> sp.csr_matrix:
    return a.tocsr() if sp.issparse(a) else sp.csr_matrix(np.asarray(a, dtype=complex))


def build_unitary(protocol: PermutationProtocol, weight: TruncatedWeight, sparse: bool = False):
    """sum_j |perm(j)><j| (x) Gamma_{t_j} on system (x) bath (x) weight.

    The weight shift wraps cyclically at the window edge so the matrix stays
    unitary; rows fed by the wrap are the boundary rows.
    """
    k = protocol.lattice_steps(weight.spacing)
    dw = weight.dim
    dsb = protocol.dim
    src = (np.arange(dsb)[:, None] * dw + np.arange(dw)[None, :]).ravel()
    dst = (protocol.perm[:, None] * dw + (np.arange(dw)[None, :] + k[:, None]) % dw).ravel()
    u = sp.csr_matrix((np.ones(src.size, dtype=complex), (dst, src)), shape=(dsb * dw, dsb * dw))
    return u if sparse else u.toarray()


def total_hamiltonian_diag(protocol: PermutationProtocol, weight: TruncatedWeight) -> np.ndarray:
    """Diagonal of H_SB + H_w, with the system (x) bath energies implied by the translations."""
    return (protocol.energies[:, None] + weight.energies[None, :]).ravel()


def interior_mask(protocol: PermutationProtocol, weight: TruncatedWeight) -> np.ndarray:
    """Basis states whose image does not wrap around the weight window."""
    k = protocol.lattice_steps(weight.spacing)
    lv = weight.levels
    ok = (np.abs(lv[None, :] + k[:, None]) <= weight.M) & (np.abs(lv[None, :]) <= weight.M)
    return ok.ravel()


def commutator_error(u, protocol: PermutationProtocol, weight: TruncatedWeight,
                     energies: np.ndarray | None = None) -> float:
    """max |[U, H]| over interior columns; ``energies`` overrides the system (x) bath energies."""
    u = _as_sparse(u)
    e_sb = protocol.energies if energies is None else np.asarray(energies, dtype=float)
    h = (e_sb[:, None] + weight.energies[None, :]).ravel()
    comm = (u @ sp.diags(h) - sp.diags(h) @ u).tocsc()
    cols = np.flatnonzero(interior_mask(protocol, weight))
    sub = comm[:, cols]
    return float(np.max(np.abs(sub.data), initial=0.0))


def translation_commutator_error(u, protocol: PermutationProtocol, weight: TruncatedWeight) -> float:
    """max |[U, 1 (x) Gamma_1]| on columns away from the window edge."""
    u = _as_sparse(u)
    dw = weight.dim
    shift = sp.csr_matrix((np.ones(dw), ((np.arange(dw) + 1) % dw, np.arange(dw))), shape=(dw, dw))
    g = sp.kron(sp.identity(protocol.dim), shift, format="csr")
    comm = (u @ g - g @ u).tocsc()
    k = protocol.lattice_steps(weight.spacing)
    lv = weight.levels
    reach = np.abs(k).max(initial=0) + 1
    ok = np.broadcast_to(np.abs(lv)[None, :] + reach <= weight.M, (protocol.dim, dw)).ravel()
    sub = comm[:, np.flatnonzero(ok)]
    return float(np.max(np.abs(sub.data), initial=0.0))


def is_unitary_sparse(u, tol: float = 1e-10) -> bool:
    u = _as_sparse(u)
    d = (u.conj().T @ u - sp.identity(u.shape[0], format="csr"))
    return float(np.max(np.abs(d.data), initial=0.0)) <= tol


def work_formula(protocol: PermutationProtocol, rho_sb) -> float:
    """Mean work of a permutation protocol: sum_j <j|rho|j> t_j."""
    m = rho_sb.matrix if isinstance(rho_sb, DensityOperator) else np.asarray(rho_sb)
    diag = np.real(np.diag(m)) if m.ndim == 2 else np.asarray(m, dtype=float)
    if diag.size != protocol.dim:
        raise DimensionMismatch(f"dimension mismatch: state {diag.size} vs protocol {protocol.dim}")
    return float(diag @ protocol.translations)


# the oracle

def _permute_factors(mat: sp.csr_matrix, dims: Sequence[int], order: Sequence[int]) -> sp.csr_matrix:
    """Reorder tensor factors of a sparse operator; ``order`` lists old factor positions."""
    dims = list(dims)
    n = int(np.prod(dims))
    idx = np.arange(n)
    multi = np.unravel_index(idx, dims)
    new_dims = [dims[o] for o in order]
    new_idx = np.ravel_multi_index([multi[o] for o in order], new_dims)
    p = sp.csr_matrix((np.ones(n), (new_idx, idx)), shape=(n, n))
    return (p @ mat @ p.T).tocsr()


def _trace_last(mat: sp.csr_matrix, d_last: int) -> sp.csr_matrix:
    out = None
    for b in range(d_last):
        block = mat[b::d_last, b::d_last]
        out = block if out is None else out + block
    return out.tocsr()


def _trace_first(mat: sp.csr_matrix, d_first: int) -> sp.csr_matrix:
    n = mat.shape[0] // d_first
    out = None
    for b in range(d_first):
        block = mat[b * n:(b + 1) * n, b * n:(b + 1) * n]
        out = block if out is None else out + block
    return out.tocsr()


@dataclass
class OracleResult:
    work: float
    rho_system: np.ndarray
    rho_weight: sp.csr_matrix
    weight: TruncatedWeight
    lattice_steps: list[int]
    epsilons: list[float]
    bath_excitations: list[float]
    joint: sp.csr_matrix | None = None

    def weight_ledger(self) -> WeightLedger:
        diag = np.real(self.rho_weight.diagonal())
        keep = diag > 0
        lv = self.weight.levels[keep]
        return WeightLedger(lv * self.weight.spacing, diag[keep] / diag[keep].sum(), spacing=self.weight.spacing)


def window_size(schedule: Sequence[SwapStep], system_energies, spacing: float, initial_level: int = 0) -> int:
    """M with every cumulative translation at most M * spacing / 2 around the start level."""
    total = 0
    for s in schedule:
        total += abs(snap_to_lattice(s.translation(system_energies), spacing).m)
    return 2 * total + abs(initial_level) + 1


def oracle_run(rho_system, system_energies, schedule: Sequence[SwapStep], spacing: float, *,
               weight: TruncatedWeight | None = None, initial_level: int = 0,
               initial_weight: np.ndarray | None = None, rethermalize: bool = False,
               keep_baths: bool = False, temperature: float | None = None,
               cap: int = DEFAULT_DIM_CAP) -> OracleResult:
    """Run a swap-step schedule on the full Hilbert space.

    Translations are snapped to the lattice and each bath qubit keeps its
    population ``r``. With ``rethermalize`` the bath population is instead
    recomputed from the snapped gap at ``temperature``.
    ``initial_weight`` optionally gives a full weight density matrix.
    """
    es = np.asarray(system_energies, dtype=float)
    ds = es.size
    rho_s = rho_system.matrix if isinstance(rho_system, DensityOperator) else np.asarray(rho_system, dtype=complex)
    if rho_s.ndim == 1:
        rho_s = np.diag(rho_s)
    if rho_s.shape != (ds, ds):
        raise DimensionMismatch(f"dimension mismatch: system state {rho_s.shape} vs {ds} levels")
    if weight is None:
        weight = TruncatedWeight(window_size(schedule, es, spacing, initial_level), spacing)
    dw = weight.dim
    n_kept = len(schedule) if keep_baths else 0
    if ds * dw * 2 ** (n_kept + 1) > cap:
        raise DimensionCapExceeded(ds * dw * 2 ** (n_kept + 1), cap)

    if initial_weight is None:
        w0 = sp.csr_matrix(([1.0 + 0j], ([weight.index(initial_level)], [weight.index(initial_level)])),
                           shape=(dw, dw))
    else:
        w0 = _as_sparse(initial_weight)
        if w0.shape != (dw, dw):
            raise DimensionMismatch("dimension mismatch: initial weight state")
    state = sp.kron(_as_sparse(rho_s), w0, format="csr")  # system (x) weight
    baths_dim = 1
    h_w = weight.energies
    e_initial = _weight_energy(state, baths_dim, dw, h_w)

    steps, eps, bath_exc = [], [], []
    for step in schedule:
        proto, e = PermutationProtocol.from_swap_step(step, es).snapped(spacing)
        k = proto.lattice_steps(spacing)
        steps.append(int(k[2 * step.high]))
        eps.append(float(e[2 * step.high]))
        r = step.bath_excitation
        if rethermalize:
            snapped_gap = float(es[step.high] - es[step.low]) - k[2 * step.high] * spacing
            r = excitation_from_gap(snapped_gap, ThermalContext(temperature or 1.0))
        bath_exc.append(r)
        _check_window(state, baths_dim, ds, dw, int(np.abs(k).max()), weight)

        tau = sp.csr_matrix(np.diag([1.0 - r, r]).astype(complex))
        # factors: [baths..] system weight bath_new
        joint = sp.kron(state, tau, format="csr")
        u = build_unitary(proto, weight, sparse=True)  # system bath weight
        u = _permute_factors(u, [ds, 2, dw], [0, 2, 1])  # -> system weight bath
        u_full = sp.kron(sp.identity(baths_dim, format="csr"), u, format="csr")
        joint = (u_full @ joint @ u_full.conj().T).tocsr()
        if keep_baths:
            dims = [baths_dim, ds * dw, 2]
            state = _permute_factors(joint, dims, [0, 2, 1])  # baths, new bath, system-weight
            baths_dim *= 2
        else:
            state = _trace_last(joint, 2)

    sw = _trace_first(state, baths_dim) if baths_dim > 1 else state
    rho_w = sw[0:dw, 0:dw]
    for s in range(1, ds):
        rho_w = rho_w + sw[s * dw:(s + 1) * dw, s * dw:(s + 1) * dw]
    rho_sys = np.array([[_block_trace(sw, a, b, dw) for b in range(ds)] for a in range(ds)])
    work = _weight_energy(state, baths_dim, dw, h_w) - e_initial
    return OracleResult(work, rho_sys, rho_w.tocsr(), weight, steps, eps, bath_exc,
                        joint=state if keep_baths else None)


def _block_trace(sw: sp.csr_matrix, a: int, b: int, dw: int) -> complex:
    return complex(sw[a * dw:(a + 1) * dw, b * dw:(b + 1) * dw].diagonal().sum())


def _weight_energy(state: sp.csr_matrix, baths_dim: int, dw: int, h_w: np.ndarray) -> float:
    diag = np.real(state.diagonal())
    return float(diag.reshape(-1, dw).sum(axis=0) @ h_w)


def _check_window(state, baths_dim, ds, dw, reach, weight):
    rows = np.unique(np.concatenate([state.nonzero()[0], state.nonzero()[1]]))
    levels = rows % dw - weight.M
    if levels.size and (levels.max() + reach > weight.M or levels.min() - reach < -weight.M):
        raise WeightWindowTooSmall(
            f"weight window too small: occupied levels [{levels.min()}, {levels.max()}] "
            f"with reach {reach} exceed +-{weight.M}")


def marginal_bath_states(result: OracleResult) -> list[np.ndarray]:
    """Reduced 2x2 states of every bath qubit (requires ``keep_baths``)."""
    if result.joint is None:
        raise ValueError("run the oracle with keep_baths=True")
    n = len(result.lattice_steps)
    rest = result.joint.shape[0] // 2**n
    dims = [2] * n + [rest]
    coo = result.joint.tocoo()
    rows = np.unravel_index(coo.row, dims)
    cols = np.unravel_index(coo.col, dims)
    out = []
    # baths are stored oldest first, ahead of system and weight
    for q in range(n):
        same = np.ones(coo.nnz, dtype=bool)
        for f in range(len(dims)):
            if f != q:
                same &= rows[f] == cols[f]
        red = np.zeros((2, 2), dtype=complex)
        np.add.at(red, (rows[q][same], cols[q][same]), coo.data[same])
        out.append(red)
    return out


# randomised second-law search

@dataclass(frozen=True)
class SecondLawReport:
    test: str
    trials: int
    seed: int
    max_work: float
    max_violation: float
    passed: bool
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"test": self.test, "trials": self.trials, "seed": self.seed,
                "max_violation": self.max_violation, "max_work": self.max_work,
                "pass": self.passed, "config": self.config}


def thermal_product(bath_spec: Sequence, ctx: ThermalContext) -> tuple[np.ndarray, np.ndarray]:
    """Energies and thermal probabilities of a product of systems.

    ``bath_spec`` items are either a qubit gap or a (dim, energies) pair.
    """
    energies = np.zeros(1)
    probs = np.ones(1)
    for item in bath_spec:
        if np.isscalar(item):
            levels = np.array([0.0, float(item)])
        else:
            dim, levels = item
            levels = np.asarray(levels, dtype=float)
            if levels.ndim == 2:
                levels = np.real(np.diag(levels))
            if levels.size != dim:
                raise DimensionMismatch(f"dimension mismatch: {dim} levels expected")
        energies = (energies[:, None] + levels[None, :]).ravel()
        probs = (probs[:, None] * thermal_probabilities(levels, ctx)[None, :]).ravel()
    return energies, probs


def _random_involution(rng: np.random.Generator, idx: np.ndarray) -> np.ndarray:
    shuffled = rng.permutation(idx)
    perm = {int(i): int(i) for i in idx}
    for a, b in zip(shuffled[0::2], shuffled[1::2]):
        if rng.random() < 0.5:
            perm[int(a)], perm[int(b)] = int(b), int(a)
    return np.array([perm[int(i)] for i in idx])


def random_permutation(rng: np.random.Generator, dim: int, blocks: Sequence[Sequence[int]] | None = None,
                       two_cycles: bool = False) -> np.ndarray:
    """Uniform permutation within each block (or a random product of disjoint swaps)."""
    blocks = [np.arange(dim)] if blocks is None else [np.asarray(b, dtype=np.int64) for b in blocks]
    perm = np.arange(dim)
    for b in blocks:
        perm[b] = _random_involution(rng, b) if two_cycles else rng.permutation(b)
    return perm


def second_law_sampler(bath_spec: Sequence, ctx: ThermalContext, trials: int, seed: int, *,
                       blocks: Sequence[Sequence[int]] | None = None, two_cycles: bool = False,
                       tol: float = 1e-12) -> SecondLawReport:
    """Largest mean work over random permutations acting on thermal inputs.

    Trial t draws from ``default_rng(SeedSequence(seed).spawn(trials)[t])``,
    so any single trial can be replayed independently.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    energies, probs = thermal_product(bath_spec, ctx)
    children = np.random.SeedSequence(seed).spawn(trials)
    best = -math.inf
    for child in children:
        perm = random_permutation(np.random.default_rng(child), energies.size, blocks, two_cycles)
        best = max(best, work_formula(PermutationProtocol(energies, perm), probs))
    config = {"bath_spec": [float(x) if np.isscalar(x) else [int(x[0]), list(map(float, np.ravel(x[1])))]
                            for x in bath_spec],
              "temperature": ctx.temperature, "two_cycles": two_cycles}
    return SecondLawReport("second_law", trials, seed, best, max(best, 0.0), best <= tol, config)


def exhaustive_max_work(bath_spec: Sequence, ctx: ThermalContext) -> float:
    """Maximum over every permutation; only for tiny dimensions."""
    import itertools

    energies, probs = thermal_product(bath_spec, ctx)
    if energies.size > 8:
        raise DimensionCapExceeded(energies.size, 8)
    return max(work_formula(PermutationProtocol(energies, np.array(p)), probs)
               for p in itertools.permutations(range(energies.size)))


# weight-start independence

@dataclass(frozen=True)
class IndependenceReport:
    passed: bool
    works: tuple[float, ...]
    max_work_spread: float
    max_ledger_error: float

    def __bool__(self):
        return self.passed


def weight_independence_test(run: Callable[[float], tuple[float, WeightLedger]], offsets: Iterable[float],
                             tol: float = 1e-12, ledger_tol: float = 1e-9) -> IndependenceReport:
    """Run ``run(offset)`` for each offset and compare works and shifted ledgers."""
    offsets = [float(o) for o in offsets]
    results = [run(o) for o in offsets]
    works = tuple(float(w) for w, _ in results)
    spread = max(works) - min(works)
    base_off, (_, base) = offsets[0], results[0]
    ledger_err = 0.0
    for off, (_, led) in zip(offsets[1:], results[1:]):
        if len(led.offsets) != len(base.offsets):
            ledger_err = math.inf
            break
        ledger_err = max(ledger_err,
                         float(np.max(np.abs((led.offsets - off) - (base.offsets - base_off)), initial=0.0)),
                         float(np.max(np.abs(led.masses - base.masses), initial=0.0)))
    return IndependenceReport(spread <= tol and ledger_err <= ledger_tol, works, spread, ledger_err)


# second-order expansion of a single step

def expansion_check(p: float, dp: float, gap: float, ctx: ThermalContext) -> tuple[float, float]:
    """Exact (free-energy drop, weight-energy gain) when one step moves p to p - dp."""
    if not (0.0 < p < 1.0 and 0.0 < p - dp < 1.0):
        raise ValueError(f"p={p}, dp={dp} leave (0, 1)")
    t = ctx.temperature
    r = p - dp
    d_f = dp * gap - t * (binary_entropy(p) - binary_entropy(r))
    d_e = dp * (gap - t * binary_entropy_prime(r))
    return d_f, d_e


def quadratic_coefficients(p: float, gap: float, ctx: ThermalContext,
                           deltas: Sequence[float] = (1e-2, 5e-3, 2.5e-3)) -> tuple[float, float]:
    """Second-order coefficients of the free-energy drop and the weight gain.

    Fits (X - first-order term) / dp^2 = c2 + c3 dp by least squares and
    returns (c2 for free energy, c2 for work).
    """
    lin = gap - ctx.temperature * binary_entropy_prime(p)
    dps = np.asarray(deltas, dtype=float)
    ys_f, ys_e = [], []
    for dp in dps:
        d_f, d_e = expansion_check(p, float(dp), gap, ctx)
        ys_f.append((d_f - lin * dp) / dp**2)
        ys_e.append((d_e - lin * dp) / dp**2)
    a = np.stack([np.ones_like(dps), dps], axis=1)
    c_f = np.linalg.lstsq(a, np.array(ys_f), rcond=None)[0]
    c_e = np.linalg.lstsq(a, np.array(ys_e), rcond=None)[0]
    return float(c_f[0]), float(c_e[0])
