"""Finite-dimensional state algebra.

Operators are stored densely as complex numpy arrays and are read-only once
constructed. All entropies are in nats.
"""

from __future__ import annotations

from functools import reduce
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionCapExceeded, DimensionMismatch, InvalidState, NotUnitary

DEFAULT_DIM_CAP = 2**20

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = 1e-10
UNITARY_TOL = 1e-10
ENTROPY_CUTOFF = 1e-14


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


class HermitianOperator:
    """A Hermitian matrix on a ``dim``-dimensional space."""

    __slots__ = ("matrix",)

    def __init__(self, matrix, *, validate: bool = True):
        m = _frozen(matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionMismatch(f"dimension mismatch: expected square matrix, got shape {m.shape}")
        if validate:
            scale = (float(np.max(np.abs(m))) if m.size else 0.0) or 1.0
            if np.max(np.abs(m - m.conj().T), initial=0.0) > HERMITIAN_TOL * scale:
                raise InvalidState("operator is not Hermitian")
        self.matrix = m

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def eigh(self):
        return np.linalg.eigh(self.matrix)

    def expectation(self, rho: "DensityOperator") -> float:
        if rho.dim != self.dim:
            raise DimensionMismatch(f"dimension mismatch: {rho.dim} vs {self.dim}")
        return float(np.real(np.trace(self.matrix @ rho.matrix)))

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"


class DensityOperator(HermitianOperator):
    """Hermitian, unit-trace, positive-semidefinite matrix."""

    __slots__ = ()

    def __init__(self, matrix, *, validate: bool = True):
        super().__init__(matrix, validate=validate)
        if validate:
            tr = np.trace(self.matrix)
            if abs(tr - 1.0) > TRACE_TOL:
                raise InvalidState(f"trace {tr.real:.3e} differs from 1")
            lam_min = np.linalg.eigvalsh(self.matrix)[0]
            if lam_min < -PSD_TOL:
                raise InvalidState(f"negative eigenvalue {lam_min:.3e}")

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def diagonal(self) -> np.ndarray:
        return np.real(np.diag(self.matrix)).copy()


# constructors

def identity(dim: int) -> HermitianOperator:
    return HermitianOperator(np.eye(dim), validate=False)


def diagonal_operator(values: Sequence[float]) -> HermitianOperator:
    return HermitianOperator(np.diag(np.asarray(values, dtype=float)), validate=False)


def diag_state(probs: Sequence[float]) -> DensityOperator:
    return DensityOperator(np.diag(np.asarray(probs, dtype=float)))


def maximally_mixed(dim: int) -> DensityOperator:
    return DensityOperator(np.eye(dim) / dim, validate=False)


def ket(index: int, dim: int) -> np.ndarray:
    v = np.zeros(dim, dtype=complex)
    v[index] = 1.0
    return v


def pure_state(vector) -> DensityOperator:
    v = np.asarray(vector, dtype=complex)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise InvalidState("zero vector")
    v = v / norm
    return DensityOperator(np.outer(v, v.conj()))


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> DensityOperator:
    """Random state from the induced (Ginibre) measure."""
    k = dim if rank is None else rank
    g = rng.normal(size=(dim, k)) + 1j * rng.normal(size=(dim, k))
    rho = g @ g.conj().T
    rho /= np.trace(rho)
    return DensityOperator((rho + rho.conj().T) / 2)


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    z = (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


# operations

def tensor(a: HermitianOperator, b: HermitianOperator, *, cap: int = DEFAULT_DIM_CAP) -> HermitianOperator:
    """Kronecker product; a DensityOperator when both factors are states."""
    dim = a.dim * b.dim
    if dim > cap:
        raise DimensionCapExceeded(dim, cap)
    m = np.kron(a.matrix, b.matrix)
    if isinstance(a, DensityOperator) and isinstance(b, DensityOperator):
        return DensityOperator(m, validate=False)
    return HermitianOperator(m, validate=False)


def tensor_all(ops: Iterable[HermitianOperator], *, cap: int = DEFAULT_DIM_CAP) -> HermitianOperator:
    return reduce(lambda x, y: tensor(x, y, cap=cap), ops)


def partial_trace(rho: DensityOperator, dims: Sequence[int], keep: Iterable[int]) -> DensityOperator:
    """Reduced state on the factors listed in ``keep`` (kept in ascending order)."""
    dims = [int(d) for d in dims]
    if any(d < 1 for d in dims) or int(np.prod(dims)) != rho.dim:
        raise DimensionMismatch(f"dimension mismatch: factors {dims} do not multiply to {rho.dim}")
    keep = sorted(set(int(k) for k in keep))
    if not keep or keep[0] < 0 or keep[-1] >= len(dims):
        raise DimensionMismatch(f"dimension mismatch: invalid keep set {keep} for {len(dims)} factors")
    n = len(dims)
    t = rho.matrix.reshape(dims + dims)
    letters = "abcdefghijklmnopqrstuvwxyz"
    if n > len(letters):
        raise DimensionMismatch("dimension mismatch: too many factors")
    row = [letters[i] for i in range(n)]
    col = [letters[i].upper() for i in range(n)]
    for i in range(n):
        if i not in keep:
            col[i] = row[i]
    out = "".join(row[i] for i in keep) + "".join(col[i] for i in keep)
    red = np.einsum("".join(row) + "".join(col) + "->" + out, t)
    d = int(np.prod([dims[i] for i in keep]))
    return DensityOperator(red.reshape(d, d), validate=False)


def entropy_of_spectrum(eigenvalues) -> float:
    lam = np.asarray(eigenvalues, dtype=float)
    if np.any(lam < -PSD_TOL):
        raise InvalidState(f"negative eigenvalue {lam.min():.3e}")
    lam = lam[lam > ENTROPY_CUTOFF]
    return float(-np.sum(lam * np.log(lam))) + 0.0


def shannon_entropy(probs) -> float:
    """-sum p ln p with 0 ln 0 = 0."""
    return entropy_of_spectrum(probs)


def von_neumann_entropy(rho: DensityOperator) -> float:
    return entropy_of_spectrum(np.linalg.eigvalsh(rho.matrix))


def is_unitary(u, tol: float = UNITARY_TOL) -> bool:
    u = np.asarray(u)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        return False
    return bool(np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0])), initial=0.0) <= tol)


def apply_unitary(rho: DensityOperator, u) -> DensityOperator:
    u = np.asarray(u, dtype=complex)
    if u.shape != (rho.dim, rho.dim):
        raise DimensionMismatch(f"dimension mismatch: unitary {u.shape} on state of dim {rho.dim}")
    if not is_unitary(u):
        raise NotUnitary("not unitary")
    out = u @ rho.matrix @ u.conj().T
    return DensityOperator((out + out.conj().T) / 2, validate=False)


def swap_operator(d1: int, d2: int) -> np.ndarray:
    """Permutation taking a (x) b to b (x) a."""
    s = np.zeros((d1 * d2, d1 * d2))
    for i in range(d1):
        for j in range(d2):
            s[j * d1 + i, i * d2 + j] = 1.0
    return s
