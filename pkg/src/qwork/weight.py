"""The work-storage weight as a ledger of point masses over energy offsets.

With H_w = x (mg = 1) an offset is directly an amount of stored work. Every
protocol unitary is a permutation of system/bath levels combined with a
translation of the weight, so a weight that starts as a mixture of point masses
stays one. Two modes exist: continuous offsets, and a lattice of spacing
``spacing`` on which offsets are integer multiples.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DomainError, InvalidState, OffLatticeShift

DEFAULT_MERGE_TOL = 1e-9
DEFAULT_MASS_FLOOR = 1e-15
MASS_TOL = 1e-12
LATTICE_TOL = 1e-12


def _lattice_index(offsets: np.ndarray, spacing: float) -> np.ndarray:
    idx = np.rint(offsets / spacing)
    err = np.abs(offsets - idx * spacing)
    tol = np.maximum(LATTICE_TOL * spacing, 4 * np.finfo(float).eps * np.abs(offsets))
    if np.any(err > tol):
        bad = offsets[np.argmax(err - tol)]
        raise OffLatticeShift(f"off-lattice offset {bad!r} for spacing {spacing!r}")
    return idx.astype(np.int64)


def _coalesce(offsets: np.ndarray, masses: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Sort, then merge runs whose span is at most ``tol`` into their centre of mass."""
    if offsets.size == 0:
        return offsets, masses
    order = np.argsort(offsets, kind="stable")
    x, m = offsets[order], masses[order]
    if tol <= 0:
        ux, inv = np.unique(x, return_inverse=True)
        if ux.size == x.size:
            return x, m
        return ux, np.bincount(inv, weights=m)
    while x.size > 1 and not np.all(np.diff(x) > tol):
        x, m = _merge_runs(x, m, tol)
    return x, m


def _merge_runs(x: np.ndarray, m: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    # centres of neighbouring runs can still fall within tol; the caller repeats
    group = np.empty(x.size, dtype=np.int64)
    g, anchor = 0, x[0]
    for k in range(x.size):
        if x[k] - anchor > tol:
            g += 1
            anchor = x[k]
        group[k] = g
    mass = np.bincount(group, weights=m)
    moment = np.bincount(group, weights=m * x)
    safe = np.where(mass > 0, mass, 1.0)
    centre = np.where(mass > 0, moment / safe, np.bincount(group, weights=x) / np.bincount(group))
    return centre, mass


class WeightLedger:
    """Normalised distribution of the weight over energy offsets.

    ``truncated_mass`` records mass dropped by pruning, so that
    ``sum(masses) + truncated_mass == 1``.
    """

    __slots__ = ("offsets", "masses", "spacing", "merge_tol", "truncated_mass", "index")

    def __init__(self, offsets, masses, *, spacing: float | None = None,
                 merge_tol: float = DEFAULT_MERGE_TOL, truncated_mass: float = 0.0,
                 validate: bool = True):
        x = np.atleast_1d(np.asarray(offsets, dtype=float))
        m = np.atleast_1d(np.asarray(masses, dtype=float))
        if x.shape != m.shape:
            raise InvalidState("offsets and masses differ in length")
        if spacing is not None:
            spacing = float(spacing)
            if not spacing > 0:
                raise DomainError(f"domain error: lattice spacing must be positive, got {spacing}")
        if merge_tol < 0 or truncated_mass < -MASS_TOL:
            raise DomainError("domain error: negative merge tolerance or truncated mass")
        keep = m != 0
        x, m = x[keep], m[keep]
        order = np.argsort(x, kind="stable")
        x, m = x[order], m[order]
        index = None
        if spacing is not None:
            index = _lattice_index(x, spacing)
            x = index * spacing
        if validate:
            if np.any(~np.isfinite(x)):
                raise InvalidState("non-finite offset")
            if np.any(m < 0) or np.any(m > 1 + MASS_TOL):
                raise InvalidState("masses must lie in (0, 1]")
            total = float(m.sum()) + truncated_mass
            if abs(total - 1.0) > MASS_TOL:
                raise InvalidState(f"total mass {total!r} differs from 1")
            gaps = np.diff(index) if index is not None else np.diff(x)
            if index is not None and np.any(gaps == 0):
                raise InvalidState("repeated lattice site")
            if index is None and np.any(gaps <= merge_tol) and gaps.size:
                raise InvalidState("offsets closer than merge tolerance")
        x.setflags(write=False)
        m.setflags(write=False)
        self.offsets = x
        self.masses = m
        self.spacing = spacing
        self.merge_tol = float(merge_tol)
        self.truncated_mass = max(float(truncated_mass), 0.0)
        self.index = index

    @classmethod
    def point(cls, offset: float = 0.0, *, spacing: float | None = None,
              merge_tol: float = DEFAULT_MERGE_TOL) -> "WeightLedger":
        return cls([offset], [1.0], spacing=spacing, merge_tol=merge_tol)

    @property
    def is_lattice(self) -> bool:
        return self.spacing is not None

    def __len__(self):
        return self.offsets.size

    def __iter__(self):
        return iter(zip(self.offsets.tolist(), self.masses.tolist()))

    def __repr__(self):
        mode = f"lattice({self.spacing})" if self.is_lattice else "continuous"
        return f"WeightLedger({len(self)} points, {mode}, mean={mean_energy(self):.6g})"

    def replace(self, offsets=None, masses=None, **kw) -> "WeightLedger":
        args = dict(spacing=self.spacing, merge_tol=self.merge_tol, truncated_mass=self.truncated_mass)
        args.update(kw)
        return WeightLedger(self.offsets if offsets is None else offsets,
                            self.masses if masses is None else masses, **args)


@dataclass(frozen=True)
class LatticeSnap:
    """``gap_in + epsilon == m * spacing`` with the smallest |epsilon|."""

    gap_in: float
    m: int
    epsilon: float
    spacing: float

    @property
    def snapped(self) -> float:
        return self.m * self.spacing


def shift(ledger: WeightLedger, a: float) -> WeightLedger:
    if ledger.is_lattice:
        k = a / ledger.spacing
        if abs(k - round(k)) > 1e-9:
            raise OffLatticeShift(f"off-lattice shift {a!r} for spacing {ledger.spacing!r}")
        idx = ledger.index + int(round(k))
        return ledger.replace(offsets=idx * ledger.spacing)
    return ledger.replace(offsets=ledger.offsets + a)


def mean_energy(ledger: WeightLedger) -> float:
    return float(ledger.masses @ ledger.offsets)


def variance(ledger: WeightLedger) -> float:
    # centred form of sum(m x^2) - mean^2, stable for large offsets
    mu = mean_energy(ledger)
    missing = 1.0 - float(ledger.masses.sum())
    return float(ledger.masses @ (ledger.offsets - mu) ** 2 + missing * mu * mu)


def merge_and_prune(ledger: WeightLedger, merge_tol: float | None = None,
                    mass_floor: float = 0.0) -> WeightLedger:
    """Coalesce points closer than ``merge_tol`` and move masses below ``mass_floor`` to the truncated pool."""
    tol = ledger.merge_tol if merge_tol is None else float(merge_tol)
    if tol < 0 or mass_floor < 0:
        raise DomainError("domain error: negative tolerance")
    if ledger.is_lattice:
        x, m = ledger.offsets, ledger.masses
    else:
        x, m = _coalesce(np.asarray(ledger.offsets), np.asarray(ledger.masses), tol)
    drop = m < mass_floor
    trunc = ledger.truncated_mass + float(m[drop].sum())
    return WeightLedger(x[~drop], m[~drop], spacing=ledger.spacing, merge_tol=tol,
                        truncated_mass=trunc)


def convolve(a: WeightLedger, b: WeightLedger, *, merge_tol: float | None = None) -> WeightLedger:
    """Distribution of the sum of two independent weight displacements."""
    if a.spacing != b.spacing:
        raise DomainError("domain error: ledgers on different lattices")
    tol = max(a.merge_tol, b.merge_tol) if merge_tol is None else merge_tol
    x = (a.offsets[:, None] + b.offsets[None, :]).ravel()
    m = (a.masses[:, None] * b.masses[None, :]).ravel()
    if a.is_lattice:
        idx = (a.index[:, None] + b.index[None, :]).ravel()
        uidx, inv = np.unique(idx, return_inverse=True)
        x, m = uidx * a.spacing, np.bincount(inv, weights=m)
    else:
        x, m = _coalesce(x, m, tol)
    trunc = 1.0 - (1.0 - a.truncated_mass) * (1.0 - b.truncated_mass)
    return WeightLedger(x, m, spacing=a.spacing, merge_tol=tol, truncated_mass=trunc)


def snap_to_lattice(gap: float, spacing: float) -> LatticeSnap:
    """Nearest lattice multiple of ``gap``; exact ties round up (epsilon >= 0)."""
    if not spacing > 0:
        raise DomainError(f"domain error: spacing must be positive, got {spacing}")
    m = math.floor(gap / spacing + 0.5)
    return LatticeSnap(float(gap), int(m), m * spacing - gap, float(spacing))


def discretization_error_bound(spacing: float, n_steps: int, p: float, p_eq: float) -> float:
    """Bound on the conditional mean-work error from a weight lattice of the given spacing."""
    if spacing < 0 or n_steps < 1:
        raise DomainError("domain error: spacing >= 0 and N >= 1 required")
    return max(spacing * ((p + p_eq) * n_steps + (p - p_eq)), 0.0)


# serialisation

def ledger_to_csv(ledger: WeightLedger, dest=None) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["offset", "mass"])
    for x, m in ledger:
        w.writerow([f"{x:.17g}", f"{m:.17g}"])
    text = buf.getvalue()
    if dest is not None:
        Path(dest).write_text(text, encoding="utf-8", newline="")
    return text


def ledger_from_csv(source, *, spacing: float | None = None,
                    merge_tol: float = DEFAULT_MERGE_TOL) -> WeightLedger:
    if isinstance(source, str) and source.startswith("offset,"):
        text = source
    else:
        text = Path(source).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["offset", "mass"]:
        raise InvalidState("ledger CSV must start with header 'offset,mass'")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=float).reshape(-1, 2)
    trunc = max(1.0 - float(data[:, 1].sum()), 0.0)
    return WeightLedger(data[:, 0], data[:, 1], spacing=spacing, merge_tol=merge_tol,
                        truncated_mass=trunc)


# working cells for the protocol engine (unnormalised)

class PointCell:
    """Exact unnormalised point masses; grows with every branching."""

    __slots__ = ("offsets", "masses")

    def __init__(self, offsets, masses):
        self.offsets = np.asarray(offsets, dtype=float)
        self.masses = np.asarray(masses, dtype=float)

    @classmethod
    def empty(cls):
        return cls(np.empty(0), np.empty(0))

    def scaled(self, c: float) -> "PointCell":
        return PointCell(self.offsets, self.masses * c)

    def shifted(self, delta: float) -> "PointCell":
        return PointCell(self.offsets + delta, self.masses)

    def plus(self, other: "PointCell", merge_tol: float = 0.0) -> "PointCell":
        x, m = _coalesce(np.concatenate([self.offsets, other.offsets]),
                         np.concatenate([self.masses, other.masses]), merge_tol)
        return PointCell(x, m)

    def pruned(self, floor: float) -> tuple["PointCell", float]:
        keep = self.masses >= floor
        return PointCell(self.offsets[keep], self.masses[keep]), float(self.masses[~keep].sum())

    def total(self) -> float:
        return float(self.masses.sum())

    def moments(self) -> tuple[float, float, float]:
        m, x = self.masses, self.offsets
        return float(m.sum()), float(m @ x), float(m @ (x * x))

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        keep = self.masses > 0
        return self.offsets[keep], self.masses[keep]


class GridLedger:
    """Unnormalised masses on the grid ``origin + spacing * (start + i)``.

    Fractional shifts deposit each bin's mass linearly on its two neighbouring
    bins, which keeps total mass and first moment exact and adds at most
    ``spacing**2 / 4`` of variance per shift. In lattice mode only integer
    shifts are allowed and the representation is exact.
    """

    __slots__ = ("origin", "spacing", "start", "mass", "lattice")

    def __init__(self, origin: float, spacing: float, start: int, mass, lattice: bool = False):
        self.origin = float(origin)
        self.spacing = float(spacing)
        self.start = int(start)
        self.mass = np.asarray(mass, dtype=float)
        self.lattice = lattice

    @classmethod
    def from_points(cls, offsets, masses, spacing: float, origin: float | None = None,
                    lattice: bool = False) -> "GridLedger":
        x = np.asarray(offsets, dtype=float)
        m = np.asarray(masses, dtype=float)
        if origin is None:
            origin = 0.0 if lattice else float(x.min())
        t = (x - origin) / spacing
        if lattice:
            base = np.rint(t).astype(np.int64)
            if np.any(np.abs(t - base) > 1e-9):
                raise OffLatticeShift("off-lattice offset in lattice grid")
            frac = np.zeros_like(t)
        else:
            base = np.floor(t).astype(np.int64)
            frac = t - base
        lo = int(base.min())
        arr = np.zeros(int(base.max()) - lo + 2)
        np.add.at(arr, base - lo, m * (1 - frac))
        np.add.at(arr, base - lo + 1, m * frac)
        g = cls(origin, spacing, lo, arr, lattice)
        return g.pruned(0.0)[0]

    def empty_like(self) -> "GridLedger":
        return GridLedger(self.origin, self.spacing, 0, np.zeros(0), self.lattice)

    def scaled(self, c: float) -> "GridLedger":
        return GridLedger(self.origin, self.spacing, self.start, self.mass * c, self.lattice)

    def shifted(self, delta: float) -> "GridLedger":
        t = delta / self.spacing
        n = math.floor(t)
        f = t - n
        if self.lattice:
            k = round(t)
            if abs(t - k) > 1e-6:
                raise OffLatticeShift(f"off-lattice shift {delta!r} for spacing {self.spacing!r}")
            return GridLedger(self.origin, self.spacing, self.start + k, self.mass, True)
        if f < 1e-12 or self.mass.size == 0:
            return GridLedger(self.origin, self.spacing, self.start + n, self.mass)
        if f > 1 - 1e-12:
            return GridLedger(self.origin, self.spacing, self.start + n + 1, self.mass)
        out = np.empty(self.mass.size + 1)
        out[:-1] = self.mass * (1 - f)
        out[-1] = 0.0
        out[1:] += self.mass * f
        return GridLedger(self.origin, self.spacing, self.start + n, out)

    def plus(self, other: "GridLedger", merge_tol: float = 0.0) -> "GridLedger":
        if other.mass.size == 0:
            return self
        if self.mass.size == 0:
            return other
        lo = min(self.start, other.start)
        hi = max(self.start + self.mass.size, other.start + other.mass.size)
        out = np.zeros(hi - lo)
        out[self.start - lo:self.start - lo + self.mass.size] += self.mass
        out[other.start - lo:other.start - lo + other.mass.size] += other.mass
        return GridLedger(self.origin, self.spacing, lo, out, self.lattice)

    def pruned(self, floor: float) -> tuple["GridLedger", float]:
        """Trim each edge by at most ``floor`` of mass; returns the trimmed cell and removed mass.

        Capping the cumulative tail (not each bin) bounds the removed mass per
        call by ``2 * floor`` however many sparse bins the tails hold.
        """
        m = self.mass
        if m.size == 0:
            return self, 0.0
        if m.sum() <= floor:
            return GridLedger(self.origin, self.spacing, 0, np.zeros(0), self.lattice), float(m.sum())
        if floor > 0:
            a = int(np.searchsorted(np.cumsum(m), floor, side="right"))
            b = m.size - int(np.searchsorted(np.cumsum(m[::-1]), floor, side="right"))
        else:
            nz = np.flatnonzero(m != 0)
            a, b = int(nz[0]), int(nz[-1]) + 1
        if a >= b:
            return self, 0.0
        if a == 0 and b == m.size:
            return self, 0.0
        removed = float(m[:a].sum() + m[b:].sum())
        return GridLedger(self.origin, self.spacing, self.start + a, m[a:b], self.lattice), removed

    def positions(self) -> np.ndarray:
        return self.origin + self.spacing * (self.start + np.arange(self.mass.size))

    def total(self) -> float:
        return float(self.mass.sum())

    def moments(self) -> tuple[float, float, float]:
        # moments about the origin keep the large common offset out of the sums
        k = self.start + np.arange(self.mass.size)
        m = self.mass
        m0 = float(m.sum())
        m1 = float(m @ k) * self.spacing
        m2 = float(m @ (k * k.astype(float))) * self.spacing**2
        o = self.origin
        return m0, m1 + o * m0, m2 + 2 * o * m1 + o * o * m0

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        keep = self.mass > 0
        return self.positions()[keep], self.mass[keep]


def cells_to_ledger(cells: Iterable, *, spacing: float | None, merge_tol: float,
                    truncated_mass: float, normaliser: float = 1.0) -> WeightLedger:
    """Sum engine cells into one normalised ledger."""
    xs, ms = [], []
    for c in cells:
        x, m = c.points()
        xs.append(x)
        ms.append(m)
    x = np.concatenate(xs) if xs else np.empty(0)
    m = np.concatenate(ms) / normaliser if ms else np.empty(0)
    if spacing is not None:
        idx = np.rint(x / spacing).astype(np.int64)
        uidx, inv = np.unique(idx, return_inverse=True)
        x, m = uidx * spacing, np.bincount(inv, weights=m)
    else:
        x, m = _coalesce(x, m, merge_tol)
    total = float(m.sum())
    trunc = truncated_mass / normaliser
    # rounding accumulated over many steps is folded back so the ledger stays normalised
    if abs(total + trunc - 1.0) <= 1e-9:
        m = m / (total + trunc)
        trunc = trunc / (total + trunc)
    return WeightLedger(x, m, spacing=spacing, merge_tol=merge_tol, truncated_mass=trunc)
