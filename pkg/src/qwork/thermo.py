"""Thermal states, free energy and the binary-entropy calculus.

Units: k_B = 1, temperatures are energies, logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, DivergentError, DomainError
from .qcore import DensityOperator, HermitianOperator, von_neumann_entropy


@dataclass(frozen=True)
class ThermalContext:
    temperature: float

    def __post_init__(self):
        t = float(self.temperature)
        if not (t > 0 and math.isfinite(t)):
            raise DomainError(f"domain error: temperature must be positive and finite, got {t}")
        object.__setattr__(self, "temperature", t)

    @property
    def beta(self) -> float:
        return 1.0 / self.temperature

    @classmethod
    def from_beta(cls, beta: float) -> "ThermalContext":
        return cls(1.0 / beta)


@dataclass(frozen=True)
class QubitGap:
    """A thermal qubit: gap ``E`` and excited population ``r``."""

    gap: float
    excitation: float

    @classmethod
    def from_excitation(cls, r: float, ctx: ThermalContext) -> "QubitGap":
        return cls(gap_from_excitation(r, ctx), float(r))

    @classmethod
    def from_gap(cls, gap: float, ctx: ThermalContext) -> "QubitGap":
        return cls(float(gap), excitation_from_gap(gap, ctx))


def _as_matrix(h) -> np.ndarray:
    return h.matrix if isinstance(h, HermitianOperator) else np.asarray(h, dtype=complex)


def thermal_probabilities(energies, ctx: ThermalContext) -> np.ndarray:
    e = np.asarray(energies, dtype=float)
    w = np.exp(-ctx.beta * (e - e.min()))
    return w / w.sum()


def gibbs_state(h: HermitianOperator, ctx: ThermalContext) -> DensityOperator:
    """exp(-beta H) / Z, evaluated in the eigenbasis of H."""
    energies, vecs = np.linalg.eigh(_as_matrix(h))
    p = thermal_probabilities(energies, ctx)
    rho = (vecs * p) @ vecs.conj().T
    return DensityOperator((rho + rho.conj().T) / 2, validate=False)


def mean_energy(rho: DensityOperator, h: HermitianOperator) -> float:
    hm = _as_matrix(h)
    if hm.shape != rho.matrix.shape:
        raise DimensionMismatch(f"dimension mismatch: H {hm.shape} vs rho {rho.matrix.shape}")
    return float(np.real(np.trace(hm @ rho.matrix)))


def free_energy(rho: DensityOperator, h: HermitianOperator, ctx: ThermalContext) -> float:
    """F = <E> - T S."""
    return mean_energy(rho, h) - ctx.temperature * von_neumann_entropy(rho)


def diagonal_free_energy(probs, energies, ctx: ThermalContext) -> float:
    p = np.asarray(probs, dtype=float)
    e = np.asarray(energies, dtype=float)
    nz = p > 0
    return float(p @ e + ctx.temperature * np.sum(p[nz] * np.log(p[nz])))


def relative_entropy(p, q) -> float:
    """Classical D(p||q) in nats; infinite support mismatch raises."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    nz = p > 0
    if np.any(q[nz] <= 0):
        raise DivergentError("divergent: p not absolutely continuous w.r.t. q")
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def quantum_relative_entropy(rho: DensityOperator, sigma: DensityOperator) -> float:
    """tr rho (ln rho - ln sigma); sigma must be full rank."""
    ls, vs = np.linalg.eigh(sigma.matrix)
    if ls.min() <= 0:
        raise DivergentError("divergent: sigma is singular")
    log_sigma = (vs * np.log(ls)) @ vs.conj().T
    lr = np.linalg.eigvalsh(rho.matrix)
    lr = lr[lr > 1e-14]
    return float(np.sum(lr * np.log(lr)) - np.real(np.trace(rho.matrix @ log_sigma)))


# binary entropy family

def _check_open(q: float) -> float:
    q = float(q)
    if not 0.0 < q < 1.0:
        raise DomainError(f"domain error: {q} outside (0, 1)")
    return q


def binary_entropy(q: float) -> float:
    q = float(q)
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"domain error: {q} outside [0, 1]")
    if q in (0.0, 1.0):
        return 0.0
    return -q * math.log(q) - (1 - q) * math.log1p(-q)


def binary_entropy_prime(q: float) -> float:
    q = _check_open(q)
    return math.log1p(-q) - math.log(q)


def binary_entropy_double_prime(q: float) -> float:
    q = _check_open(q)
    return -1.0 / (1.0 - q) - 1.0 / q


def relative_binary_entropy(p: float, q: float) -> float:
    """p ln(p/q) + (1-p) ln((1-p)/(1-q)), with 0 ln 0 = 0."""
    p, q = float(p), float(q)
    if not 0.0 <= p <= 1.0 or not 0.0 <= q <= 1.0:
        raise DomainError(f"domain error: ({p}, {q})")
    total = 0.0
    for a, b in ((p, q), (1.0 - p, 1.0 - q)):
        if a == 0.0:
            continue
        if b == 0.0:
            raise DivergentError(f"divergent: D({p}||{q})")
        total += a * math.log(a / b)
    return max(total, 0.0)


def gap_from_excitation(r: float, ctx: ThermalContext) -> float:
    """Gap of the thermal qubit whose excited population is r."""
    return ctx.temperature * binary_entropy_prime(r)


def excitation_from_gap(gap: float, ctx: ThermalContext) -> float:
    gap = float(gap)
    if not math.isfinite(gap):
        raise DomainError(f"domain error: non-finite gap {gap}")
    return float(expit(-ctx.beta * gap))


def virtual_beta(e1: float, beta1: float, e2: float, beta2: float) -> float:
    """Inverse virtual temperature of the transition pairing two qubits."""
    if e1 == e2:
        raise DomainError("degenerate transition")
    return (e1 * beta1 - e2 * beta2) / (e1 - e2)


def fannes_entropy_bound(trace_distance: float, dim_sq: float) -> float:
    """D ln(d^2 / D) for a trace distance D on a space of dimension d^2."""
    d = float(trace_distance)
    if d == 0.0:
        return 0.0
    if not 0.0 < d <= 1.0:
        raise DomainError(f"domain error: trace distance {d} outside (0, 1]")
    if dim_sq <= 0:
        raise DomainError(f"domain error: dimension {dim_sq}")
    return d * math.log(dim_sq / d)


def wavepacket_distance_bound(max_gap: float, half_width: float) -> float:
    """sqrt(a/L): trace distance of a flat packet of half-width L from its translates."""
    if max_gap <= 0 or half_width <= 0:
        raise DomainError("domain error: gap and half-width must be positive")
    return math.sqrt(max_gap / half_width)
