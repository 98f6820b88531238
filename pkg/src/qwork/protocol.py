"""Work extraction from states diagonal in the energy basis.

The engine never builds the system/bath/weight Hilbert space. Each step
swaps a pair of system levels (i, j) with a fresh thermal qubit and
translates the weight by the energy mismatch. On diagonal inputs that acts as a
stochastic map on joint (initial level, current level, weight offset)
configurations, which is what :class:`JointClassicalState` stores.

Reported work is accumulated from the exact per-step increment
``(P_j (1 - r) - P_i r) * translation``, so binning the weight distribution
never biases it. The binned ledgers keep their first moment exactly as well.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DomainError, InvalidState
from .thermo import (
    ThermalContext,
    binary_entropy_prime,
    diagonal_free_energy,
    excitation_from_gap,
    relative_binary_entropy,
    thermal_probabilities,
)
from .weight import (
    DEFAULT_MASS_FLOOR,
    GridLedger,
    PointCell,
    WeightLedger,
    cells_to_ledger,
    convolve,
    mean_energy,
    snap_to_lattice,
)

PROB_TOL = 1e-12
R_CLAMP = 1e-12
EXACT_STEP_LIMIT = 12


@dataclass(frozen=True)
class DiagonalState:
    probs: np.ndarray
    energies: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        e = np.array(self.energies, dtype=float)
        if p.ndim != 1 or p.shape != e.shape or p.size == 0:
            raise InvalidState("probabilities and energies must be 1-d and of equal length")
        if np.any(p < -PROB_TOL) or abs(p.sum() - 1.0) > PROB_TOL:
            raise InvalidState(f"not a probability vector: {p}")
        if not np.all(np.isfinite(e)):
            raise InvalidState("energies must be finite")
        p = np.clip(p, 0.0, None)
        p.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "energies", e)

    @classmethod
    def qubit(cls, p: float, gap: float) -> "DiagonalState":
        return cls([1.0 - p, p], [0.0, gap])

    @classmethod
    def thermal(cls, energies, ctx: ThermalContext) -> "DiagonalState":
        return cls(thermal_probabilities(energies, ctx), energies)

    @property
    def dim(self) -> int:
        return self.probs.size

    def mean_energy(self) -> float:
        return float(self.probs @ self.energies)

    def free_energy(self, ctx: ThermalContext) -> float:
        return diagonal_free_energy(self.probs, self.energies, ctx)

    def with_probs(self, probs) -> "DiagonalState":
        return DiagonalState(probs, self.energies)


@dataclass(frozen=True)
class SwapStep:
    """Swap of system levels (low, high) with a thermal qubit.

    ``low``/``high`` label the pair; the bath qubit's excited state pairs with
    ``low`` and its ground state with ``high``, so after the step the share of
    ``high`` inside the pair equals ``bath_excitation``.
    """

    low: int
    high: int
    bath_excitation: float
    bath_gap: float

    def __post_init__(self):
        if self.low == self.high:
            raise DomainError("domain error: swap step needs two distinct levels")
        if not 0.0 <= self.bath_excitation <= 1.0:
            raise DomainError(f"domain error: bath excitation {self.bath_excitation}")

    @classmethod
    def thermal(cls, low: int, high: int, r: float, ctx: ThermalContext) -> "SwapStep":
        rc = min(max(r, R_CLAMP), 1.0 - R_CLAMP)
        return cls(low, high, float(r), ctx.temperature * binary_entropy_prime(rc))

    def translation(self, energies) -> float:
        """Weight displacement for the high -> low transition."""
        return float(energies[self.high] - energies[self.low]) - self.bath_gap

    def is_thermal(self, ctx: ThermalContext, tol: float = 1e-12) -> bool:
        return abs(excitation_from_gap(self.bath_gap, ctx) - self.bath_excitation) <= tol


@dataclass(frozen=True)
class LedgerOptions:
    """How the engine stores the weight distribution.

    resolution: grid spacing for the continuous binned ledger; ``"auto"`` picks
        one from the schedule, ``None`` keeps exact point masses (only viable
        for short schedules).
    lattice_spacing: run on the discrete weight ladder; bath gaps are adjusted
        so every translation is a multiple of the spacing.
    """

    resolution: float | str | None = "auto"
    lattice_spacing: float | None = None
    merge_tol: float | None = None
    mass_floor: float = DEFAULT_MASS_FLOOR
    snapshot_every: int = 0


class JointClassicalState:
    """Joint distribution over (initial level, current level, weight offset)."""

    def __init__(self, energies, initial_probs, probs, cells, truncated: float,
                 spacing: float | None, merge_tol: float, mass_floor: float):
        self.energies = np.asarray(energies, dtype=float)
        self.initial_probs = np.asarray(initial_probs, dtype=float)
        self.probs = np.asarray(probs, dtype=float)
        self.cells = cells
        self.truncated = truncated
        self.spacing = spacing
        self.merge_tol = merge_tol
        self.mass_floor = mass_floor

    @classmethod
    def start(cls, state: DiagonalState, ledger: WeightLedger, *, resolution: float | None,
              lattice_spacing: float | None, merge_tol: float,
              mass_floor: float = DEFAULT_MASS_FLOOR) -> "JointClassicalState":
        cells = {}
        for a in np.flatnonzero(state.probs > 0):
            pa = float(state.probs[a])
            if lattice_spacing is not None:
                cell = GridLedger.from_points(ledger.offsets, ledger.masses * pa, lattice_spacing, lattice=True)
            elif resolution is not None:
                cell = GridLedger.from_points(ledger.offsets, ledger.masses * pa, resolution,
                                              origin=float(ledger.offsets.min()))
            else:
                cell = PointCell(ledger.offsets.copy(), ledger.masses * pa)
            cells[(int(a), int(a))] = cell
        return cls(state.energies, state.probs, state.probs.copy(), cells,
                   ledger.truncated_mass, lattice_spacing, merge_tol, mass_floor)

    @property
    def dim(self) -> int:
        return self.energies.size

    def marginal(self) -> np.ndarray:
        return self.probs.copy()

    def entries(self) -> Iterator[tuple[int, int, float, float]]:
        for (a, c), cell in sorted(self.cells.items()):
            x, m = cell.points()
            for xi, mi in zip(x.tolist(), m.tolist()):
                yield a, c, xi, mi

    def total_mass(self) -> float:
        return sum(c.total() for c in self.cells.values()) + self.truncated

    def ledger(self) -> WeightLedger:
        return cells_to_ledger(self.cells.values(), spacing=self.spacing, merge_tol=self.merge_tol,
                               truncated_mass=self.truncated)

    def conditional_ledger(self, initial_level: int) -> WeightLedger:
        pa = float(self.initial_probs[initial_level])
        if pa <= 0:
            raise DomainError(f"domain error: initial level {initial_level} has zero probability")
        cells = [c for (a, _), c in self.cells.items() if a == initial_level]
        own = sum(c.total() for c in cells)
        return cells_to_ledger(cells, spacing=self.spacing, merge_tol=self.merge_tol,
                               truncated_mass=max(pa - own, 0.0), normaliser=pa)

    def cell_moments(self, initial_level: int | None = None) -> tuple[float, float, float]:
        m0 = m1 = m2 = 0.0
        for (a, _), c in self.cells.items():
            if initial_level is None or a == initial_level:
                a0, a1, a2 = c.moments()
                m0, m1, m2 = m0 + a0, m1 + a1, m2 + a2
        return m0, m1, m2


def apply_swap_step(state: JointClassicalState, step: SwapStep) -> tuple[JointClassicalState, float]:
    """Apply one swap step; returns the new state and the mean work it deposits."""
    i, j, r = step.low, step.high, step.bath_excitation
    if not (0 <= i < state.dim and 0 <= j < state.dim):
        raise DomainError(f"domain error: levels ({i}, {j}) outside dimension {state.dim}")
    delta = step.translation(state.energies)
    p = state.probs
    work = (p[j] * (1.0 - r) - p[i] * r) * delta
    new_probs = p.copy()
    pair = p[i] + p[j]
    new_probs[i] = (1.0 - r) * pair
    new_probs[j] = r * pair

    cells = dict(state.cells)
    truncated = state.truncated
    for a in {a for a, _ in state.cells}:
        ci = state.cells.get((a, i))
        cj = state.cells.get((a, j))
        if ci is None and cj is None:
            continue
        parts_i, parts_j = [], []
        if ci is not None:
            parts_i.append(ci.scaled(1.0 - r))
            parts_j.append(ci.shifted(-delta).scaled(r))
        if cj is not None:
            parts_j.append(cj.scaled(r))
            parts_i.append(cj.shifted(delta).scaled(1.0 - r))
        for level, parts in ((i, parts_i), (j, parts_j)):
            cell = parts[0]
            for extra in parts[1:]:
                cell = cell.plus(extra, state.merge_tol)
            cell, lost = cell.pruned(state.mass_floor)
            truncated += lost
            if cell.total() > 0:
                cells[(a, level)] = cell
            else:
                cells.pop((a, level), None)
    out = JointClassicalState(state.energies, state.initial_probs, new_probs, cells, truncated,
                              state.spacing, state.merge_tol, state.mass_floor)
    return out, float(work)


@dataclass
class ProtocolTrace:
    energies: np.ndarray
    initial_probs: np.ndarray
    temperature: float
    k: np.ndarray
    pairs: np.ndarray
    r: np.ndarray
    bath_gap: np.ndarray
    translation: np.ndarray
    work_increment: np.ndarray
    cumulative_work: np.ndarray
    system_probs: np.ndarray
    bath_after: np.ndarray
    initial_ledger: WeightLedger
    final_ledger: WeightLedger
    conditional_ledgers: dict[int, WeightLedger]
    snapshots: list[tuple[int, WeightLedger]] = field(default_factory=list)
    resolution: float | None = None

    @property
    def work(self) -> float:
        return float(self.cumulative_work[-1]) if self.cumulative_work.size else 0.0

    @property
    def n_steps(self) -> int:
        return int(self.k.size)

    @property
    def final_probs(self) -> np.ndarray:
        return self.system_probs[-1] if self.n_steps else self.initial_probs

    def ledger_discrepancy(self) -> float:
        """|work - (mean(final ledger) - mean(initial ledger))|."""
        return abs(self.work - (mean_energy(self.final_ledger) - mean_energy(self.initial_ledger)))

    def steps(self) -> Iterator[tuple]:
        for n in range(self.n_steps):
            yield (int(self.k[n]), float(self.r[n]), float(self.bath_gap[n]),
                   float(self.work_increment[n]), float(self.cumulative_work[n]), self.system_probs[n])

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "r_k", "E_B_k", "work_increment", "cumulative_work"])
        for k, r, gap, dw, cw, _ in self.steps():
            w.writerow([k, f"{r:.17g}", f"{gap:.17g}", f"{dw:.17g}", f"{cw:.17g}"])
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def _auto_resolution(translations: np.ndarray, pairs: np.ndarray, temperature: float) -> float:
    same = np.all(pairs[1:] == pairs[:-1], axis=1)
    d = np.abs(np.diff(translations))[same]
    d = d[d > 1e-14 * temperature]
    if d.size == 0:
        return 1e-6 * temperature
    return max(0.2 * float(np.median(d)), 1e-12 * temperature)


def snap_schedule(schedule: Sequence[SwapStep], energies, spacing: float) -> list[SwapStep]:
    """Adjust bath gaps so each translation is a multiple of ``spacing``; excitations are kept."""
    out = []
    for s in schedule:
        snap = snap_to_lattice(s.translation(energies), spacing)
        gap = float(energies[s.high] - energies[s.low]) - snap.snapped
        out.append(SwapStep(s.low, s.high, s.bath_excitation, gap))
    return out


def run_schedule(initial: DiagonalState, schedule: Sequence[SwapStep], ctx: ThermalContext,
                 options: LedgerOptions | None = None,
                 initial_ledger: WeightLedger | None = None) -> ProtocolTrace:
    """Run a list of swap steps from ``initial`` and record the trace."""
    opts = options or LedgerOptions()
    merge_tol = 1e-9 * ctx.temperature if opts.merge_tol is None else opts.merge_tol
    spacing = opts.lattice_spacing
    if spacing is not None:
        schedule = snap_schedule(schedule, initial.energies, spacing)
    if initial_ledger is None:
        initial_ledger = WeightLedger.point(0.0, spacing=spacing, merge_tol=merge_tol)
    n = len(schedule)
    pairs = np.array([(s.low, s.high) for s in schedule], dtype=np.int64).reshape(n, 2)
    trans = np.array([s.translation(initial.energies) for s in schedule])

    resolution = opts.resolution
    if spacing is not None:
        resolution = spacing
    elif resolution == "auto":
        resolution = None if n <= EXACT_STEP_LIMIT else _auto_resolution(trans, pairs, ctx.temperature)
    state = JointClassicalState.start(initial, initial_ledger, resolution=resolution,
                                      lattice_spacing=spacing, merge_tol=merge_tol,
                                      mass_floor=opts.mass_floor)

    work = np.zeros(n)
    probs = np.zeros((n, initial.dim))
    bath_after = np.zeros(n)
    snapshots = []
    for k, step in enumerate(schedule):
        before = state.probs
        others = 1.0 - before[step.low] - before[step.high]
        state, work[k] = apply_swap_step(state, step)
        probs[k] = state.probs
        bath_after[k] = before[step.high] + others * step.bath_excitation
        if opts.snapshot_every and (k + 1) % opts.snapshot_every == 0:
            snapshots.append((k + 1, state.ledger()))

    conditional = {int(a): state.conditional_ledger(int(a)) for a in np.flatnonzero(initial.probs > 0)}
    return ProtocolTrace(
        energies=initial.energies,
        initial_probs=initial.probs,
        temperature=ctx.temperature,
        k=np.arange(1, n + 1),
        pairs=pairs,
        r=np.array([s.bath_excitation for s in schedule]),
        bath_gap=np.array([s.bath_gap for s in schedule]),
        translation=trans if spacing is None else np.array([s.translation(initial.energies) for s in schedule]),
        work_increment=work,
        cumulative_work=np.cumsum(work),
        system_probs=probs,
        bath_after=bath_after,
        initial_ledger=initial_ledger,
        final_ledger=state.ledger(),
        conditional_ledgers=conditional,
        snapshots=snapshots,
        resolution=resolution,
    )


# qubit protocol

def qubit_schedule(p: float, p_eq: float, n_steps: int, ctx: ThermalContext) -> list[SwapStep]:
    """Bath excitations moving linearly from p to p_eq in ``n_steps`` steps."""
    if n_steps < 1:
        raise DomainError("empty schedule")
    if not (0.0 <= p <= 1.0 and 0.0 < p_eq < 1.0):
        raise DomainError(f"invalid parameters: p={p}, p_eq={p_eq}")
    k = np.arange(1, n_steps + 1)
    r = p + (k / n_steps) * (p_eq - p)
    r[-1] = p_eq
    return [SwapStep.thermal(0, 1, float(rk), ctx) for rk in r]


def _check_qubit_params(p, gap, temperature, n_steps):
    if not (0.0 <= p <= 1.0) or not math.isfinite(gap) or not temperature > 0 or n_steps < 1:
        raise DomainError(f"invalid parameters: p={p}, E_S={gap}, T={temperature}, N={n_steps}")


def run_qubit_protocol(p: float, gap: float, temperature: float, n_steps: int,
                       options: LedgerOptions | None = None,
                       initial_ledger: WeightLedger | None = None) -> ProtocolTrace:
    """Thermalise a qubit with excited population ``p`` and gap ``gap`` using ``n_steps`` bath qubits."""
    _check_qubit_params(p, gap, temperature, n_steps)
    ctx = ThermalContext(temperature)
    p_eq = excitation_from_gap(gap, ctx)
    return run_schedule(DiagonalState.qubit(p, gap), qubit_schedule(p, p_eq, n_steps, ctx), ctx,
                        options, initial_ledger)


def run_isothermal(temperature: float, n_steps: int, options: LedgerOptions | None = None,
                   initial_ledger: WeightLedger | None = None) -> ProtocolTrace:
    """Degenerate qubit known to be in |0>, expanded to the maximally mixed state."""
    return run_qubit_protocol(0.0, 0.0, temperature, n_steps, options, initial_ledger)


def asymptotic_weight_distribution(p: float, p_eq: float, temperature: float) -> WeightLedger:
    """Infinite-N weight distribution: one peak per initial level of the qubit."""
    if not (0.0 <= p <= 1.0 and 0.0 < p_eq < 1.0):
        raise DomainError(f"domain error: p={p}, p_eq={p_eq}")
    x, m = [], []
    if p < 1.0:
        x.append(temperature * (math.log1p(-p) - math.log1p(-p_eq)))
        m.append(1.0 - p)
    if p > 0.0:
        x.append(temperature * math.log(p / p_eq))
        m.append(p)
    if len(x) == 2 and x[0] == x[1]:
        x, m = [x[0]], [1.0]
    return WeightLedger(x, m, merge_tol=0.0)


def finite_n_mean_corrections(p: float, p_eq: float, temperature: float, n_steps: int) -> tuple[float, float]:
    """Conditional weight means to first order in 1/N, for initial levels 0 and 1."""
    if not (0.0 < p < 1.0 and 0.0 < p_eq < 1.0) or n_steps < 1:
        raise DomainError(f"domain error: p={p}, p_eq={p_eq}, N={n_steps}")
    t, a = temperature, p_eq - p
    half = 0.5 * (binary_entropy_prime(p_eq) - binary_entropy_prime(p))
    e0 = t * (math.log1p(-p) - math.log1p(-p_eq)) + t * a * (half - 1.0 / (1.0 - p)) / n_steps
    e1 = t * math.log(p / p_eq) + t * a * (half + 1.0 / p) / n_steps
    return e0, e1


def finite_n_variance(p: float, p_eq: float, temperature: float, n_steps: int) -> float:
    """Leading-order spread of each conditional weight peak."""
    if not (0.0 < p < 1.0 and 0.0 < p_eq < 1.0) or n_steps < 1:
        raise DomainError(f"domain error: p={p}, p_eq={p_eq}, N={n_steps}")
    return temperature**2 * (p_eq - p) * (binary_entropy_prime(p) - binary_entropy_prime(p_eq)) / n_steps


# qudits

def run_qudit_pair_step(state: DiagonalState, pair: tuple[int, int], target_probs,
                        ctx: ThermalContext) -> tuple[DiagonalState, float]:
    """Move probability inside ``pair`` so the system reaches ``target_probs``."""
    i, j = pair
    target = np.asarray(target_probs, dtype=float)
    if target.shape != state.probs.shape:
        raise InvalidState("target has wrong dimension")
    others = np.ones(state.dim, dtype=bool)
    others[[i, j]] = False
    if np.any(np.abs(target[others] - state.probs[others]) > PROB_TOL) or \
            abs(target[i] + target[j] - state.probs[i] - state.probs[j]) > PROB_TOL:
        raise InvalidState("target changes levels outside the pair")
    total = target[i] + target[j]
    if total <= 0:
        raise DomainError("empty pair support")
    r = target[j] / total
    if not 0.0 < r < 1.0:
        raise DomainError(f"domain error: renormalised excitation {r} outside (0, 1)")
    step = SwapStep.thermal(i, j, r, ctx)
    p = state.probs
    work = (p[j] * (1.0 - r) - p[i] * r) * step.translation(state.energies)
    new = p.copy()
    pair_mass = p[i] + p[j]
    new[i], new[j] = (1.0 - r) * pair_mass, r * pair_mass
    return state.with_probs(new), float(work)


def two_phase_path(rho, sigma, hub: int = 0) -> list[np.ndarray]:
    """Waypoints: first drain surplus levels into ``hub``, then fill deficit levels from it."""
    rho = np.asarray(rho, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    points = [rho.copy()]
    cur = rho.copy()
    others = [l for l in range(rho.size) if l != hub]
    for l in others:
        if cur[l] > sigma[l] + PROB_TOL:
            nxt = cur.copy()
            nxt[hub] += cur[l] - sigma[l]
            nxt[l] = sigma[l]
            points.append(nxt)
            cur = nxt
    for l in others:
        if cur[l] < sigma[l] - PROB_TOL:
            nxt = cur.copy()
            nxt[hub] -= sigma[l] - cur[l]
            nxt[l] = sigma[l]
            points.append(nxt)
            cur = nxt
    points[-1] = sigma.copy() if len(points) > 1 else points[-1]
    return points


def _leg_pair(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    diff = np.flatnonzero(np.abs(a - b) > PROB_TOL)
    if diff.size != 2:
        raise InvalidState(f"path leg must change exactly two levels, changes {diff.tolist()}")
    return int(diff[0]), int(diff[1])


def path_schedule(path: Sequence[np.ndarray], n_steps: int, ctx: ThermalContext) -> list[SwapStep]:
    """Swap steps following ``path``, N split evenly over the legs (remainder to the last)."""
    legs = [(np.asarray(a, float), np.asarray(b, float)) for a, b in zip(path[:-1], path[1:])
            if np.any(np.abs(np.asarray(a) - np.asarray(b)) > PROB_TOL)]
    if not legs:
        return []
    if n_steps < len(legs):
        raise DomainError(f"domain error: {n_steps} steps cannot cover {len(legs)} legs")
    base, extra = divmod(n_steps, len(legs))
    schedule = []
    for n_leg, (a, b) in zip([base] * (len(legs) - 1) + [base + extra], legs):
        i, j = _leg_pair(a, b)
        for k in range(1, n_leg + 1):
            frac = k / n_leg
            pi = a[i] + frac * (b[i] - a[i])
            pj = a[j] + frac * (b[j] - a[j])
            r = pj / (pi + pj)
            if not 0.0 < r < 1.0:
                raise DomainError("unreachable target: waypoint leaves a pair level empty")
            schedule.append(SwapStep.thermal(i, j, float(r), ctx))
    return schedule


def run_state_to_state(rho: DiagonalState, sigma: DiagonalState, ctx: ThermalContext, n_steps: int,
                       path: Sequence[np.ndarray] | None = None, hub: int = 0,
                       options: LedgerOptions | None = None,
                       initial_ledger: WeightLedger | None = None) -> ProtocolTrace:
    """Transform diagonal ``rho`` into ``sigma`` with pairwise swap steps."""
    if rho.dim != sigma.dim or np.any(np.abs(rho.energies - sigma.energies) > 0):
        raise InvalidState("states must share the same energy levels")
    if np.any(sigma.probs <= 0):
        raise DomainError("unreachable target: target has empty levels")
    if path is None:
        path = two_phase_path(rho.probs, sigma.probs, hub)
    else:
        path = [np.asarray(w, dtype=float) for w in path]
        if np.any(np.abs(path[0] - rho.probs) > PROB_TOL) or np.any(np.abs(path[-1] - sigma.probs) > PROB_TOL):
            raise InvalidState("path must start at rho and end at sigma")
    schedule = path_schedule(path, n_steps, ctx)
    return run_schedule(rho, schedule, ctx, options, initial_ledger)


def run_qudit_protocol(rho: DiagonalState, ctx: ThermalContext, n_steps: int, **kw) -> ProtocolTrace:
    """Thermalise a diagonal qudit state."""
    return run_state_to_state(rho, DiagonalState.thermal(rho.energies, ctx), ctx, n_steps, **kw)


def n_copy_convolution(ledger: WeightLedger, n: int) -> WeightLedger:
    """Weight distribution after running the same protocol on ``n`` independent copies."""
    if n < 1:
        raise DomainError("domain error: n must be >= 1")
    result, base = None, ledger
    while n:
        if n & 1:
            result = base if result is None else convolve(result, base)
        n >>= 1
        if n:
            base = convolve(base, base)
    return result


def optimality_gap(protocol_work: float, rho: DiagonalState, sigma: DiagonalState, ctx: ThermalContext) -> float:
    """F(rho) - F(sigma) - work; never negative for an allowed protocol."""
    return rho.free_energy(ctx) - sigma.free_energy(ctx) - protocol_work


def qubit_reference_work(p: float, gap: float, temperature: float) -> float:
    """T D(p || p_eq), the infinite-N work for the qubit protocol."""
    ctx = ThermalContext(temperature)
    return temperature * relative_binary_entropy(p, excitation_from_gap(gap, ctx))
