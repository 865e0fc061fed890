"""Dense state-vector and operator arithmetic over the 2^N occupation basis.

Basis convention: index ``k`` corresponds to the bitstring ``b0 b1 ... b_{N-1}``
with atom 0 as the most significant bit, and bit value 1 meaning the atom is in
the Rydberg state.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
N_OP = np.array([[0, 0], [0, 1]], dtype=complex)
RAISE = np.array([[0, 0], [1, 0]], dtype=complex)  # |1><0|

HERMITIAN_TOL = 1e-12
NORM_TOL = 1e-8


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class StateVector:
    n_atoms: int
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.ndim != 1 or amps.shape[0] != 2**self.n_atoms:
            raise DimensionError(
                f"expected {2**self.n_atoms} amplitudes for {self.n_atoms} atoms, got {amps.shape}"
            )
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def ground(cls, n_atoms: int) -> "StateVector":
        """All atoms in |0>."""
        amps = np.zeros(2**n_atoms, dtype=complex)
        amps[0] = 1.0
        return cls(n_atoms, amps)

    @classmethod
    def from_bitstring(cls, bits: str) -> "StateVector":
        amps = np.zeros(2 ** len(bits), dtype=complex)
        amps[int(bits, 2)] = 1.0
        return cls(len(bits), amps)

    @property
    def dimension(self) -> int:
        return self.amplitudes.shape[0]

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalize(self) -> "StateVector":
        nrm = self.norm()
        if nrm == 0:
            raise ValueError("cannot normalize the zero vector")
        return StateVector(self.n_atoms, self.amplitudes / nrm)

    def probabilities(self) -> np.ndarray:
        return as_distribution(np.abs(self.amplitudes) ** 2)


@dataclass(frozen=True)
class Operator:
    """Dense D x D matrix; ``hermitian=True`` is checked at construction."""

    matrix: np.ndarray = field(repr=False)
    hermitian: bool = False

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=complex)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise DimensionError(f"operator must be square, got {mat.shape}")
        if self.hermitian and np.max(np.abs(mat - mat.conj().T), initial=0.0) >= HERMITIAN_TOL:
            raise ValueError("matrix flagged Hermitian is not Hermitian")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def __matmul__(self, other: "Operator") -> "Operator":
        return Operator(self.matrix @ other.matrix)


def is_hermitian(mat: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    return bool(np.max(np.abs(mat - mat.conj().T), initial=0.0) < tol)


def as_distribution(probs, tol: float = 1e-10) -> np.ndarray:
    """Validate a probability vector (entries in [0, 1], sum 1)."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1:
        raise ValueError("probabilities must be a vector")
    if np.any(p < -tol) or np.any(p > 1 + tol):
        raise ValueError("probabilities must lie in [0, 1]")
    if abs(p.sum() - 1.0) > tol:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return np.clip(p, 0.0, 1.0)


def embed_local(op, site: int, n_atoms: int) -> Operator:
    """Return I x ... x op x ... x I with ``op`` acting on ``site`` (site 0 = leftmost factor)."""
    if not 0 <= site < n_atoms:
        raise IndexError(f"site {site} out of range for {n_atoms} atoms")
    op = op.matrix if isinstance(op, Operator) else np.asarray(op, dtype=complex)
    if op.shape != (2, 2):
        raise DimensionError("local operator must be 2x2")
    factors = [op if k == site else I2 for k in range(n_atoms)]
    mat = reduce(np.kron, factors)
    return Operator(mat, hermitian=is_hermitian(op))


def occupation_diagonals(n_atoms: int) -> np.ndarray:
    """Array of shape (N, D) whose row ``j`` is the diagonal of n_j."""
    idx = np.arange(2**n_atoms)
    shifts = n_atoms - 1 - np.arange(n_atoms)
    return ((idx[None, :] >> shifts[:, None]) & 1).astype(float)


def flip_indices(n_atoms: int, site: int) -> np.ndarray:
    """Basis permutation implementing X on ``site``."""
    return np.arange(2**n_atoms) ^ (1 << (n_atoms - 1 - site))


def sum_x(n_atoms: int, weights: Sequence[float] | None = None) -> np.ndarray:
    """Dense matrix of sum_j w_j X_j, built by index arithmetic."""
    dim = 2**n_atoms
    out = np.zeros((dim, dim), dtype=complex)
    rows = np.arange(dim)
    for j in range(n_atoms):
        w = 1.0 if weights is None else weights[j]
        out[rows, flip_indices(n_atoms, j)] += w
    return out


def expectation(state: StateVector, obs) -> float:
    mat = obs.matrix if isinstance(obs, Operator) else np.asarray(obs, dtype=complex)
    if mat.shape != (state.dimension, state.dimension):
        raise DimensionError(f"observable shape {mat.shape} does not match dimension {state.dimension}")
    if not is_hermitian(mat):
        raise ValueError("observable is not Hermitian")
    psi = state.amplitudes
    val = np.vdot(psi, mat @ psi)
    if abs(val.imag) >= 1e-10:
        raise ValueError(f"expectation has imaginary residue {val.imag:.3e}")
    return float(val.real)


def _check_normalized(state: StateVector) -> np.ndarray:
    probs = np.abs(state.amplitudes) ** 2
    if abs(probs.sum() - 1.0) > NORM_TOL:
        raise ValueError(f"state is not normalized (norm^2 = {probs.sum():.12f})")
    return probs / probs.sum()


def sample_shots(state: StateVector, n_shots: int, rng) -> list[str]:
    """Draw projective measurement outcomes as bitstrings.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    probs = _check_normalized(state)
    gen = np.random.default_rng(rng)
    outcomes = gen.choice(state.dimension, size=n_shots, p=probs)
    return [format(int(k), f"0{state.n_atoms}b") for k in outcomes]


def shots_to_array(shots: Sequence[str]) -> np.ndarray:
    if len(shots) == 0:
        raise ValueError("no shots")
    width = len(shots[0])
    if any(len(s) != width for s in shots):
        raise ValueError("ragged bitstring lengths")
    return np.array([[c == "1" for c in s] for s in shots], dtype=float)


def occupancy_estimates(shots: Sequence[str]) -> np.ndarray:
    """Per-site mean of the measured bits."""
    return shots_to_array(shots).mean(axis=0)


def outcome_counts(shots: Sequence[str]) -> Counter:
    return Counter(shots)
