"""Dense statevector simulator for small circuits.

Basis ordering is little-endian: qubit ``q`` is bit ``q`` of the basis index,
so ``|q2 q1 q0> = |011>`` has index 3.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import GateError

MAX_QUBITS = 12
ROTATIONS = ("RX", "RY", "RZ")
KINDS = ROTATIONS + ("CNOT", "CRY")


@dataclass(frozen=True)
class GateOp:
    kind: str
    target: int
    angle: float | None = None
    control: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GateError(f"unknown gate kind {self.kind!r}")
        controlled = self.kind in ("CNOT", "CRY")
        if controlled and self.control is None:
            raise GateError(f"{self.kind} needs a control qubit")
        if not controlled and self.control is not None:
            raise GateError(f"{self.kind} takes no control qubit")
        if self.kind != "CNOT" and self.angle is None:
            raise GateError(f"{self.kind} needs an angle")
        if controlled and self.control == self.target:
            raise GateError("control and target must differ")

    def qubits(self) -> tuple[int, ...]:
        return (self.target,) if self.control is None else (self.control, self.target)


def RX(q: int, theta: float) -> GateOp:
    return GateOp("RX", q, float(theta))


def RY(q: int, theta: float) -> GateOp:
    return GateOp("RY", q, float(theta))


def RZ(q: int, theta: float) -> GateOp:
    return GateOp("RZ", q, float(theta))


def CNOT(control: int, target: int) -> GateOp:
    return GateOp("CNOT", target, None, control)


def CRY(control: int, target: int, theta: float) -> GateOp:
    return GateOp("CRY", target, float(theta), control)


def gate_matrix_2x2(kind: str, theta: float | None) -> np.ndarray:
    """2x2 unitary acting on the target (for controlled kinds, the controlled block)."""
    if kind == "CNOT":
        return np.array([[0, 1], [1, 0]], dtype=complex)
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    if kind == "RX":
        return np.array([[c, -1j * s], [-1j * s, c]])
    if kind in ("RY", "CRY"):
        return np.array([[c, -s], [s, c]], dtype=complex)
    if kind == "RZ":
        return np.array([[complex(c, -s), 0], [0, complex(c, s)]])
    raise GateError(f"unknown gate kind {kind!r}")


@dataclass
class QuantumState:
    n_qubits: int
    amplitudes: np.ndarray

    @classmethod
    def zero(cls, n_qubits: int) -> "QuantumState":
        return cls.basis(n_qubits, 0)

    @classmethod
    def basis(cls, n_qubits: int, index: int) -> "QuantumState":
        if not 1 <= n_qubits <= MAX_QUBITS:
            raise ValueError(f"n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits}")
        amps = np.zeros(2 ** n_qubits, dtype=complex)
        amps[index] = 1.0
        return cls(n_qubits, amps)

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.probabilities())))

    def copy(self) -> "QuantumState":
        return QuantumState(self.n_qubits, self.amplitudes.copy())


@lru_cache(maxsize=512)
def _pair_indices(n: int, target: int, control: int) -> tuple[np.ndarray, np.ndarray]:
    """Basis indices with target bit 0 (and control bit 1 if control >= 0), and partners."""
    idx = np.arange(2 ** n)
    sel = ((idx >> target) & 1) == 0
    if control >= 0:
        sel &= ((idx >> control) & 1) == 1
    i0 = idx[sel]
    return i0, i0 | (1 << target)


def _check(gate: GateOp, n: int) -> None:
    for q in gate.qubits():
        if not 0 <= q < n:
            raise GateError(f"{gate.kind} references qubit {q} outside [0, {n})")


def apply_gate_inplace(amps: np.ndarray, n: int, gate: GateOp) -> None:
    _check(gate, n)
    i0, i1 = _pair_indices(n, gate.target, -1 if gate.control is None else gate.control)
    a0, a1 = amps[i0], amps[i1]
    if gate.kind == "CNOT":
        amps[i0], amps[i1] = a1, a0
        return
    m = gate_matrix_2x2(gate.kind, gate.angle)
    amps[i0] = m[0, 0] * a0 + m[0, 1] * a1
    amps[i1] = m[1, 0] * a0 + m[1, 1] * a1


def apply_gate(state: QuantumState, gate: GateOp) -> QuantumState:
    """Return a new state with ``gate`` applied."""
    out = state.copy()
    apply_gate_inplace(out.amplitudes, out.n_qubits, gate)
    return out


def apply_circuit(state: QuantumState, gates: Iterable[GateOp]) -> QuantumState:
    out = state.copy()
    for g in gates:
        apply_gate_inplace(out.amplitudes, out.n_qubits, g)
    return out


def run_circuit(n_qubits: int, gates: Iterable[GateOp]) -> QuantumState:
    """Apply ``gates`` in order to |0...0>."""
    return apply_circuit(QuantumState.zero(n_qubits), gates)


def measure_shots(state: QuantumState, n_shots: int, rng: np.random.Generator) -> np.ndarray:
    """Sample basis indices i.i.d. from |amplitude|^2."""
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    p = state.probabilities()
    return sample_outcomes(p / p.sum(), n_shots, rng)


def sample_outcomes(probs: np.ndarray, n_shots: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs)
    u = rng.random(n_shots) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(probs) - 1)


def outcome_bits(outcomes, n_qubits: int) -> np.ndarray:
    """Bits per qubit, shape ``(..., n_qubits)``, column q holding qubit q."""
    outcomes = np.asarray(outcomes)
    return (outcomes[..., None] >> np.arange(n_qubits)) & 1


def bitstring(index: int, n_qubits: int) -> str:
    """Conventional ket label, most significant qubit first."""
    return format(int(index), f"0{n_qubits}b")


def register_value(indices, register: Sequence[int]) -> np.ndarray:
    """Unsigned integer read from ``register`` (its first qubit is the least significant bit)."""
    indices = np.asarray(indices)
    value = np.zeros_like(indices)
    for bit, q in enumerate(register):
        value |= ((indices >> q) & 1) << bit
    return value


def expectation_number(state: QuantumState, register: Sequence[int]) -> float:
    """Mean of the register read as an unsigned integer."""
    register = list(register)
    if len(set(register)) != len(register):
        raise GateError("register qubits must be distinct")
    for q in register:
        if not 0 <= q < state.n_qubits:
            raise GateError(f"register qubit {q} outside [0, {state.n_qubits})")
    values = register_value(np.arange(2 ** state.n_qubits), register)
    return float(np.dot(state.probabilities(), values))


def marginal_probabilities(state: QuantumState) -> np.ndarray:
    """P(qubit q reads 1) for each qubit."""
    bits = outcome_bits(np.arange(2 ** state.n_qubits), state.n_qubits)
    return state.probabilities() @ bits
