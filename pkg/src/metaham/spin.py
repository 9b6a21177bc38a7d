"""Exact small-system simulation of qubit Hamiltonians built from Pauli strings.

Basis convention: computational basis states are ordered lexicographically
with qubit 1 as the most significant bit, so index ``k`` of a state vector
corresponds to the bit string ``format(k, f"0{n}b")``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

PAULI_LETTERS = frozenset("IXYZ")

# cap on dense simulation; dim = 2**n
MAX_QUBITS = 12


class ModelKind(str, Enum):
    TFIM = "TFIM"
    ALL_TO_ALL_ISING = "AllToAllIsing"
    XY = "XY"
    CUSTOM = "Custom"


class InitialState(str, Enum):
    ALL_PLUS_X = "AllPlusX"
    ALL_ZERO_Z = "AllZeroZ"


DEFAULT_INITIAL_STATES = (InitialState.ALL_PLUS_X, InitialState.ALL_ZERO_Z)


@dataclass(frozen=True)
class PauliString:
    """A tensor product of single-qubit Paulis, e.g. ``PauliString("XXII")``.

    The operator acts on basis state ``|l>`` as ``P|l> = phase[k] |k>`` with
    ``k = l ^ x_mask``; :attr:`action` exposes that sparse form.
    """

    letters: str

    def __post_init__(self):
        if not isinstance(self.letters, str) or not self.letters:
            raise ValueError(f"Pauli string must be a non-empty str, got {self.letters!r}")
        bad = set(self.letters) - PAULI_LETTERS
        if bad:
            raise ValueError(f"invalid Pauli letters {sorted(bad)} in {self.letters!r}")

    @classmethod
    def from_sites(cls, n_qubits: int, ops: dict[int, str]) -> "PauliString":
        """Build from a ``{site: letter}`` map with 1-based sites."""
        letters = ["I"] * n_qubits
        for site, op in ops.items():
            if not 1 <= site <= n_qubits:
                raise ValueError(f"site {site} out of range for {n_qubits} qubits")
            letters[site - 1] = op
        return cls("".join(letters))

    @property
    def n_qubits(self) -> int:
        return len(self.letters)

    @property
    def is_identity(self) -> bool:
        return set(self.letters) == {"I"}

    def __str__(self):
        return self.letters

    @cached_property
    def action(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(cols, phases)`` with ``P[k, cols[k]] = phases[k]``, all other entries 0."""
        n = self.n_qubits
        k = np.arange(2**n)
        x_mask = 0
        phases = np.ones(2**n, dtype=complex)
        for q, letter in enumerate(self.letters):
            shift = n - 1 - q
            bit = (k >> shift) & 1
            if letter in "XY":
                x_mask |= 1 << shift
            if letter == "Z":
                phases *= 1 - 2 * bit
            elif letter == "Y":
                # <0|Y|1> = -i, <1|Y|0> = +i
                phases *= np.where(bit == 1, 1j, -1j)
        return k ^ x_mask, phases

    def dense(self) -> np.ndarray:
        cols, phases = self.action
        dim = len(cols)
        out = np.zeros((dim, dim), dtype=complex)
        out[np.arange(dim), cols] = phases
        return out


@dataclass(frozen=True)
class ModelSpec:
    """Parameterized Hamiltonian ``H(theta) = sum_a theta_a P_a + sum c_b Q_b``."""

    n_qubits: int
    parameterized_terms: tuple[PauliString, ...]
    fixed_terms: tuple[tuple[PauliString, float], ...] = ()
    model_kind: ModelKind = ModelKind.CUSTOM

    def __post_init__(self):
        if self.n_qubits < 1 or self.n_qubits > MAX_QUBITS:
            raise ValueError(f"n_qubits must be in [1, {MAX_QUBITS}], got {self.n_qubits}")
        seen = set()
        for p in self.parameterized_terms:
            if p.n_qubits != self.n_qubits:
                raise ValueError(f"term {p} has length {p.n_qubits}, expected {self.n_qubits}")
            if p.letters in seen:
                raise ValueError(f"duplicate parameterized term {p}")
            seen.add(p.letters)
        for p, _ in self.fixed_terms:
            if p.n_qubits != self.n_qubits:
                raise ValueError(f"fixed term {p} has length {p.n_qubits}, expected {self.n_qubits}")

    @property
    def n_params(self) -> int:
        return len(self.parameterized_terms)

    @property
    def dim(self) -> int:
        return 2**self.n_qubits

    def labels(self) -> list[str]:
        return [p.letters for p in self.parameterized_terms]


def build_model(kind: ModelKind | str, n_qubits: int) -> ModelSpec:
    """Construct one of the named spin models.

    TFIM: ``sum_i J_i X_i X_{i+1} + sum_i B_i Z_i`` with periodic boundary,
    parameters ordered ``(J_1..J_N, B_1..B_N)``.
    AllToAllIsing: ``sum_{i>j} J_ij X_i X_j + sum_i B_i Z_i``.
    XY: ``sum_i Jx_i X_i X_{i+1} + Jy_i Y_i Y_{i+1} + sum_i Z_i``, the Z field
    being fixed at unit strength; parameters ordered ``(Jx_1..Jx_N, Jy_1..Jy_N)``.
    """
    try:
        kind = ModelKind(kind)
    except ValueError:
        raise ValueError(f"unknown model kind {kind!r}") from None
    if kind is ModelKind.CUSTOM:
        raise ValueError("Custom models are constructed directly via ModelSpec")
    n = int(n_qubits)
    minimum = 2 if kind is ModelKind.ALL_TO_ALL_ISING else 3
    if n < minimum:
        raise ValueError(f"{kind.value} needs at least {minimum} qubits, got {n}")

    def bond(a, b, op):
        return PauliString.from_sites(n, {a: op, b: op})

    fields = [PauliString.from_sites(n, {i: "Z"}) for i in range(1, n + 1)]
    fixed: tuple = ()
    if kind is ModelKind.TFIM:
        terms = [bond(i, i % n + 1, "X") for i in range(1, n + 1)] + fields
    elif kind is ModelKind.ALL_TO_ALL_ISING:
        # pairs (i, j) with i > j, enumerated by i then j
        terms = [bond(i, j, "X") for i in range(2, n + 1) for j in range(1, i)] + fields
    else:
        terms = [bond(i, i % n + 1, "X") for i in range(1, n + 1)]
        terms += [bond(i, i % n + 1, "Y") for i in range(1, n + 1)]
        fixed = tuple((z, 1.0) for z in fields)
    return ModelSpec(n, tuple(terms), fixed, kind)


def assemble_hamiltonian(spec: ModelSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.n_params,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({spec.n_params},)")
    dim = spec.dim
    rows = np.arange(dim)
    h = np.zeros((dim, dim), dtype=complex)
    for coeff, p in zip(theta, spec.parameterized_terms):
        cols, phases = p.action
        h[rows, cols] += coeff * phases
    for p, coeff in spec.fixed_terms:
        cols, phases = p.action
        h[rows, cols] += coeff * phases
    return h


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @classmethod
    def of(cls, h: np.ndarray) -> "SpectralDecomposition":
        # numpy raises LinAlgError if eigh fails to converge
        lam, v = np.linalg.eigh(h)
        return cls(lam, v)

    def propagator(self, t: float) -> np.ndarray:
        v = self.eigenvectors
        return (v * np.exp(-1j * self.eigenvalues * t)) @ v.conj().T

    def to_eigenbasis(self, op: np.ndarray) -> np.ndarray:
        v = self.eigenvectors
        return v.conj().T @ op @ v


def diagonalize(spec: ModelSpec, theta) -> SpectralDecomposition:
    return SpectralDecomposition.of(assemble_hamiltonian(spec, theta))


def initial_state(kind: InitialState | str, n_qubits: int) -> np.ndarray:
    kind = InitialState(kind)
    if n_qubits < 1:
        raise ValueError(f"n_qubits must be >= 1, got {n_qubits}")
    dim = 2**n_qubits
    if kind is InitialState.ALL_ZERO_Z:
        psi = np.zeros(dim, dtype=complex)
        psi[0] = 1.0
        return psi
    return np.full(dim, 2.0 ** (-n_qubits / 2), dtype=complex)


def evolve_amplitudes(decomp: SpectralDecomposition, state0, times) -> np.ndarray:
    """Amplitudes ``e^{-iHt}|psi0>`` for every time, shape ``(n_times, dim)``."""
    v = decomp.eigenvectors
    c = v.conj().T @ np.asarray(state0, dtype=complex)
    phases = np.exp(-1j * np.outer(np.asarray(times, dtype=float), decomp.eigenvalues))
    return (phases * c) @ v.T


def evolve_populations(spec: ModelSpec, theta, state0, times) -> np.ndarray:
    state0 = np.asarray(state0, dtype=complex)
    if state0.shape != (spec.dim,):
        raise ValueError(f"state has shape {state0.shape}, expected ({spec.dim},)")
    amps = evolve_amplitudes(diagonalize(spec, theta), state0, times)
    return np.abs(amps) ** 2


def divided_difference_kernel(eigenvalues, t: float) -> np.ndarray:
    """``K[m, n] = (e^{-i l_m t} - e^{-i l_n t}) / (l_m - l_n)``, with the limit ``-it e^{-i l_m t}`` on ties.

    Written as ``-it exp(-i(l_m + l_n)t/2) sinc((l_m - l_n)t / 2pi)``, which equals the
    divided difference away from ties and is continuous through them, so no
    degeneracy threshold is needed.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    diff = lam[:, None] - lam[None, :]
    mean = 0.5 * (lam[:, None] + lam[None, :])
    return -1j * t * np.exp(-1j * mean * t) * np.sinc(diff * t / (2 * np.pi))


def kernel_stack(eigenvalues, times) -> np.ndarray:
    """:func:`divided_difference_kernel` for every time, shape ``(n_times, dim, dim)``."""
    lam = np.asarray(eigenvalues, dtype=float)
    t = np.asarray(times, dtype=float)[:, None, None]
    diff = lam[:, None] - lam[None, :]
    mean = 0.5 * (lam[:, None] + lam[None, :])
    return -1j * t * np.exp(-1j * mean * t) * np.sinc(diff * t / (2 * np.pi))


def propagator_derivative(decomp: SpectralDecomposition, term: PauliString | np.ndarray, t: float) -> np.ndarray:
    """Exact ``d e^{-iH t} / d theta_a`` for ``dH/dtheta_a = term``."""
    op = term.dense() if isinstance(term, PauliString) else np.asarray(term)
    v = decomp.eigenvectors
    if op.shape != v.shape:
        raise ValueError(f"operator shape {op.shape} does not match Hamiltonian {v.shape}")
    k = divided_difference_kernel(decomp.eigenvalues, t)
    return v @ (k * decomp.to_eigenbasis(op)) @ v.conj().T
