"""Work from states with coherence between energy levels.

n copies of a single-copy state are collectively dephased onto blocks of
equal total energy. This costs entropy but no energy. Each block is then
expanded isothermally inside its degenerate subspace, and the remaining
diagonal state is handled copy by copy with the diagonal protocol.

Blocks are assembled straight from products of single-copy matrix elements
in the energy eigenbasis. The dense d^n x d^n state is never formed unless
a check explicitly asks for it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionCapExceeded, DimensionMismatch, IncompatibleDecomposition
from .protocol import DiagonalState, LedgerOptions, run_isothermal, run_qudit_protocol, run_state_to_state
from .qcore import (
    DEFAULT_DIM_CAP,
    DensityOperator,
    HermitianOperator,
    maximally_mixed,
    partial_trace,
    tensor_all,
    von_neumann_entropy,
)
from .thermo import ThermalContext, free_energy, gibbs_state

GROUP_TOL = 1e-9
NEGLIGIBLE_BLOCK = 1e-250


@dataclass(frozen=True)
class CoherentInput:
    rho: DensityOperator
    H: HermitianOperator
    n_copies: int
    cap: int = DEFAULT_DIM_CAP

    def __post_init__(self):
        if self.rho.dim != self.H.dim:
            raise DimensionMismatch(f"dimension mismatch: rho {self.rho.dim} vs H {self.H.dim}")
        if self.n_copies < 1:
            raise ValueError("n_copies must be >= 1")
        if self.total_dim > self.cap:
            raise DimensionCapExceeded(self.total_dim, self.cap)

    @property
    def d(self) -> int:
        return self.rho.dim

    @property
    def total_dim(self) -> int:
        return self.d ** self.n_copies

    def energy_basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Single-copy level energies and rho written in the eigenbasis of H."""
        energies, vecs = self.H.eigh()
        rho_e = vecs.conj().T @ self.rho.matrix @ vecs
        return energies, (rho_e + rho_e.conj().T) / 2


@dataclass(frozen=True)
class Block:
    energy: float
    rank: int
    probability: float
    state: DensityOperator
    indices: np.ndarray
    label: tuple = ()

    def entropy(self) -> float:
        return von_neumann_entropy(self.state)


@dataclass(frozen=True)
class BlockDecomposition:
    blocks: tuple[Block, ...]
    d: int
    n_copies: int
    grouping: str

    def __post_init__(self):
        q = sum(b.probability for b in self.blocks)
        if abs(q - 1.0) > 1e-12:
            raise IncompatibleDecomposition(f"incompatible decomposition: probabilities sum to {q}")
        if sum(b.rank for b in self.blocks) != self.d ** self.n_copies:
            raise IncompatibleDecomposition("incompatible decomposition: ranks do not cover the space")

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def entropy(self) -> float:
        """Entropy of the block-diagonal state sum_k q_k block_k."""
        return sum(_weighted_entropy(b) for b in self.blocks)

    def to_dense(self) -> np.ndarray:
        dim = self.d ** self.n_copies
        out = np.zeros((dim, dim), dtype=complex)
        for b in self.blocks:
            out[np.ix_(b.indices, b.indices)] = b.probability * b.state.matrix
        return out

    def table(self) -> list[dict]:
        return [{"energy": b.energy, "rank": b.rank, "probability": b.probability,
                 "entropy": b.entropy()} for b in self.blocks]


def _weighted_entropy(b: Block) -> float:
    q = b.probability
    if q <= 0:
        return 0.0
    return q * b.entropy() - q * math.log(q)


def _digits(dim_single: int, n: int) -> np.ndarray:
    """Per-copy level of every product basis index, most significant copy first."""
    return np.array(list(itertools.product(range(dim_single), repeat=n)), dtype=np.int64).reshape(-1, n)


def _group_keys(digits: np.ndarray, energies: np.ndarray, grouping: str):
    totals = energies[digits].sum(axis=1)
    d = energies.size
    if grouping == "type":
        counts = np.stack([(digits == l).sum(axis=1) for l in range(d)], axis=1)
        uniq, inv = np.unique(counts, axis=0, return_inverse=True)
        labels = [tuple(int(c) for c in u) for u in uniq]
        block_energy = [float(np.mean(totals[inv.ravel() == k])) for k in range(len(uniq))]
        return inv.ravel(), labels, block_energy
    if grouping != "energy":
        raise ValueError(f"unknown grouping {grouping!r}")
    scale = max(float(np.max(np.abs(totals))), 1.0)
    order = np.argsort(totals, kind="stable")
    inv = np.empty(totals.size, dtype=np.int64)
    starts = [0]
    sorted_t = totals[order]
    for idx in range(1, sorted_t.size):
        if sorted_t[idx] - sorted_t[starts[-1]] > GROUP_TOL * scale:
            starts.append(idx)
    bounds = starts + [sorted_t.size]
    block_energy = []
    for k, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        inv[order[a:b]] = k
        block_energy.append(float(np.mean(sorted_t[a:b])))
    labels = [(e,) for e in block_energy]
    return inv, labels, block_energy


def collective_dephase(inp: CoherentInput, grouping: str = "energy") -> BlockDecomposition:
    """Project n copies of rho onto blocks of equal total energy.

    ``grouping="type"`` splits further by occupation numbers, which differs
    from energy grouping only when distinct occupations share a total energy.
    """
    energies, rho_e = inp.energy_basis()
    n = inp.n_copies
    digits = _digits(inp.d, n)
    inv, labels, block_energy = _group_keys(digits, energies, grouping)
    blocks = []
    for k, label in enumerate(labels):
        idx = np.flatnonzero(inv == k)
        dig = digits[idx]
        sub = np.ones((idx.size, idx.size), dtype=complex)
        for c in range(n):
            sub *= rho_e[dig[:, c][:, None], dig[:, c][None, :]]
        sub = (sub + sub.conj().T) / 2
        q = float(np.real(np.trace(sub)))
        if q > NEGLIGIBLE_BLOCK:
            state = DensityOperator(sub / q, validate=False)
        else:
            q = max(q, 0.0)
            state = maximally_mixed(idx.size)
        blocks.append(Block(block_energy[k], int(idx.size), q, state, idx, label))
    total = sum(b.probability for b in blocks)
    blocks = [Block(b.energy, b.rank, b.probability / total, b.state, b.indices, b.label) for b in blocks]
    return BlockDecomposition(tuple(blocks), inp.d, n, grouping)


def dephase(rho: DensityOperator, H: HermitianOperator, tol: float = GROUP_TOL) -> DensityOperator:
    """Sum of P rho P over the eigenspaces P of H."""
    energies, vecs = H.eigh()
    scale = max(float(np.max(np.abs(energies))), 1.0)
    out = np.zeros_like(rho.matrix)
    start = 0
    for idx in range(1, energies.size + 1):
        if idx == energies.size or energies[idx] - energies[start] > tol * scale:
            v = vecs[:, start:idx]
            proj = v @ v.conj().T
            out += proj @ rho.matrix @ proj
            start = idx
    return DensityOperator((out + out.conj().T) / 2, validate=False)


def dephasing_entropy_increase(inp: CoherentInput, grouping: str = "energy") -> tuple[float, float]:
    """(S(dephased) - n S(rho), (d - 1) ln(n + 1))."""
    dec = collective_dephase(inp, grouping)
    delta = dec.entropy() - inp.n_copies * von_neumann_entropy(inp.rho)
    return max(delta, 0.0) if delta > -1e-12 else delta, (inp.d - 1) * math.log(inp.n_copies + 1)


def maximally_mixed_target(dec: BlockDecomposition) -> BlockDecomposition:
    """Full expansion: every block replaced by the maximally mixed state on it."""
    blocks = tuple(Block(b.energy, b.rank, b.probability, maximally_mixed(b.rank), b.indices, b.label)
                   for b in dec.blocks)
    return BlockDecomposition(blocks, dec.d, dec.n_copies, dec.grouping)


def product_target(dec: BlockDecomposition) -> BlockDecomposition:
    """The n-fold product of the single-copy dephased state, restricted to each block.

    In the energy basis this is the diagonal of each block, so block
    probabilities are unchanged.
    """
    blocks = []
    for b in dec.blocks:
        diag = np.clip(np.real(np.diag(b.state.matrix)), 0.0, None)
        diag = diag / diag.sum()
        blocks.append(Block(b.energy, b.rank, b.probability, DensityOperator(np.diag(diag), validate=False),
                            b.indices, b.label))
    return BlockDecomposition(tuple(blocks), dec.d, dec.n_copies, dec.grouping)


def _check_compatible(a: BlockDecomposition, b: BlockDecomposition):
    if len(a) != len(b):
        raise IncompatibleDecomposition(f"incompatible decomposition: {len(a)} vs {len(b)} blocks")
    for x, y in zip(a.blocks, b.blocks):
        if (x.rank != y.rank or abs(x.probability - y.probability) > 1e-12
                or abs(x.energy - y.energy) > GROUP_TOL * max(abs(x.energy), 1.0)):
            raise IncompatibleDecomposition("incompatible decomposition: block energies, ranks or weights differ")


def block_expansion_work(blocks: BlockDecomposition, target: BlockDecomposition, ctx: ThermalContext) -> float:
    """T sum_k q_k (S(target_k) - S(block_k)); mean energy is untouched."""
    _check_compatible(blocks, target)
    return ctx.temperature * sum(
        b.probability * (t.entropy() - b.entropy()) for b, t in zip(blocks.blocks, target.blocks))


def simulate_block_expansion(blocks: BlockDecomposition, target: BlockDecomposition, ctx: ThermalContext,
                             n_steps: int, options: LedgerOptions | None = None) -> float:
    """Run each block's expansion through the diagonal engine on a degenerate ladder.

    Inside a block every unitary is free, so only the spectra matter: the
    block spectrum is transformed into the target spectrum, both sorted.
    """
    _check_compatible(blocks, target)
    total = 0.0
    for b, t in zip(blocks.blocks, target.blocks):
        if b.rank == 1 or b.probability == 0.0:
            continue
        src = np.clip(np.sort(b.state.eigenvalues())[::-1], 0.0, None)
        dst = np.clip(np.sort(t.state.eigenvalues())[::-1], 0.0, None)
        src, dst = src / src.sum(), dst / dst.sum()
        if np.max(np.abs(src - dst)) <= 1e-14:
            continue
        zeros = np.zeros(b.rank)
        trace = run_state_to_state(DiagonalState(src, zeros), DiagonalState(dst, zeros), ctx, n_steps,
                                   options=options)
        total += b.probability * trace.work
    return total


def isothermal_block_check(ctx: ThermalContext, n_steps: int, options: LedgerOptions | None = None) -> tuple[float, float]:
    """Rank-2 pure block expanded via the block route and via the isothermal qubit run."""
    zeros = np.zeros(2)
    via_blocks = run_state_to_state(DiagonalState([1.0, 0.0], zeros), DiagonalState([0.5, 0.5], zeros),
                                    ctx, n_steps, options=options).work
    via_iso = run_isothermal(ctx.temperature, n_steps, options).work
    return via_blocks, via_iso


class PerCopyWork(NamedTuple):
    work_per_copy: float
    lower_bound: float


def _single_copy_dephased(inp: CoherentInput) -> tuple[np.ndarray, np.ndarray]:
    energies, rho_e = inp.energy_basis()
    return np.clip(np.real(np.diag(rho_e)), 0.0, None), energies


def per_copy_work(inp: CoherentInput, ctx: ThermalContext, n_steps: int | None = None,
                  grouping: str = "energy", options: LedgerOptions | None = None) -> PerCopyWork:
    """Work per copy for dephase, expand inside blocks, then thermalise each copy.

    With ``n_steps=None`` the final diagonal stage uses its asymptotic value
    F(omega) - F(tau); otherwise it is run through the diagonal engine.
    """
    dec = collective_dephase(inp, grouping)
    expand = block_expansion_work(dec, product_target(dec), ctx)
    probs, energies = _single_copy_dephased(inp)
    omega = DiagonalState(probs / probs.sum(), energies)
    tau = DiagonalState.thermal(energies, ctx)
    if n_steps is None:
        diag_work = omega.free_energy(ctx) - tau.free_energy(ctx)
    else:
        diag_work = run_qudit_protocol(omega, ctx, n_steps, options=options).work
    n = inp.n_copies
    bound = (_free_energy(inp, ctx) - tau.free_energy(ctx)
             - ctx.temperature * (inp.d - 1) * math.log(n + 1) / n)
    return PerCopyWork(expand / n + diag_work, bound)


def _free_energy(inp: CoherentInput, ctx: ThermalContext) -> float:
    return free_energy(inp.rho, inp.H, ctx)


def single_copy_optimum(rho: DensityOperator, H: HermitianOperator, ctx: ThermalContext) -> float:
    """F(dephased rho) - F(thermal state): all a single copy can yield."""
    return free_energy(dephase(rho, H), H, ctx) - free_energy(gibbs_state(H, ctx), H, ctx)


def ancilla_dephasing_check(inp: CoherentInput, grouping: str = "energy", cap: int = 4096) -> dict:
    """Dephase by coupling to a block-counting ancilla and compare with the direct route.

    V = sum_k P_k (x) X^k acting on rho^n (x) |0><0| leaves rho' on the system
    and an ancilla whose entropy bounds the entropy increase.
    """
    dec = collective_dephase(inp, grouping)
    k_blocks = len(dec)
    dim = inp.total_dim
    if dim * k_blocks > cap:
        raise DimensionCapExceeded(dim * k_blocks, cap)
    energies, rho_e = inp.energy_basis()
    single = DensityOperator(rho_e, validate=False)
    rho_n = tensor_all([single] * inp.n_copies).matrix
    v = np.zeros((dim * k_blocks, dim * k_blocks), dtype=complex)
    for k, b in enumerate(dec.blocks):
        proj = np.zeros((dim, dim))
        proj[b.indices, b.indices] = 1.0
        shift = np.roll(np.eye(k_blocks), k, axis=0)
        v += np.kron(proj, shift)
    anc0 = np.zeros((k_blocks, k_blocks))
    anc0[0, 0] = 1.0
    joint = v @ np.kron(rho_n, anc0) @ v.conj().T
    joint_op = DensityOperator((joint + joint.conj().T) / 2, validate=False)
    sys = partial_trace(joint_op, [dim, k_blocks], [0])
    anc = partial_trace(joint_op, [dim, k_blocks], [1])
    s_before = inp.n_copies * von_neumann_entropy(inp.rho)
    s_after = von_neumann_entropy(sys)
    return {
        "unitary_error": float(np.max(np.abs(v.conj().T @ v - np.eye(v.shape[0])))),
        "reduced_state_error": float(np.max(np.abs(sys.matrix - dec.to_dense()))),
        "delta_S": s_after - s_before,
        "ancilla_entropy": von_neumann_entropy(anc),
        "log_blocks": math.log(k_blocks),
        "bound": (inp.d - 1) * math.log(inp.n_copies + 1),
    }


def coherence_report(inp: CoherentInput, ctx: ThermalContext, grouping: str = "energy",
                     n_steps: int | None = None) -> dict:
    dec = collective_dephase(inp, grouping)
    delta_s, bound = dephasing_entropy_increase(inp, grouping)
    expand_full = block_expansion_work(dec, maximally_mixed_target(dec), ctx)
    pcw = per_copy_work(inp, ctx, n_steps, grouping)
    probs, energies = _single_copy_dephased(inp)
    tau = DiagonalState.thermal(energies, ctx)
    return {
        "n": inp.n_copies,
        "d": inp.d,
        "grouping": grouping,
        "blocks": dec.table(),
        "delta_S": delta_s,
        "bound": bound,
        "block_expansion_work": expand_full,
        "work_per_copy": pcw.work_per_copy,
        "lower_bound": pcw.lower_bound,
        "free_energy_target": _free_energy(inp, ctx) - tau.free_energy(ctx),
        "single_copy_optimum": single_copy_optimum(inp.rho, inp.H, ctx),
    }


def coherent_qubit(p: float) -> DensityOperator:
    """|psi> = sqrt(1 - p)|0> + sqrt(p)|1>."""
    v = np.array([math.sqrt(1.0 - p), math.sqrt(p)], dtype=complex)
    return DensityOperator(np.outer(v, v.conj()), validate=False)

