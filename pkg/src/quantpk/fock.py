"""Fock-encoded quantum surrogate for the linear compartment dynamics.

Four 3-qubit registers hold occupation levels 0..7 of A1, A2, AE and R
(12 qubits).  One step applies, in this order:

1. effect-site decay: a two-level rotation moving AE level 1 into level 7,
   angle 2*asin(sqrt(ke0*dt)); level 7 is reserved as a sink and read as zero;
2. effect-site loading: CRY from each A1 bit to the matching AE bit with
   angle 2*asin(sqrt(ke0*dt)); A1 is not depleted, as in the ODE;
3. A1 <-> A2 exchange: an XY-type Givens rotation on each pair of matching
   bit lines, angle 2*asin(sqrt(k12*dt));
4. elimination: the same two-level sink rotation on the A1 register with kel.

Decay runs before loading so that, like an explicit Euler step, it acts on
the effect-site content at the start of the step.

A step is unitary.  Repeating it coherently gives Rabi oscillation rather
than first-order kinetics, so multi-step propagation (``propagate``) keeps
only the diagonal of the density matrix between steps: every populated basis
state is pushed through the step circuit and the outcome probabilities are
summed.  Sink levels are emptied after each step without renormalization, so
eliminated drug stays gone and never feeds the next step's couplings.

The R register is carried but not evolved; the response is nonlinear in the
effect-site concentration and has no unitary surrogate here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import SettingsError, TruncationError
from .model import CompartmentState, IndividualParameters
from .qsim import CNOT, CRY, RX, RZ, GateOp, QuantumState, apply_circuit, register_value

REGISTERS = ("a1", "a2", "ae", "r")
SMALL_STEP_LIMIT = 0.1
SINK_LEVEL = 7


@dataclass(frozen=True)
class FockEncoding:
    scales: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    qubits_per_register: int = 3

    def __post_init__(self):
        if len(self.scales) != 4 or any(not s > 0 for s in self.scales):
            raise SettingsError("need four positive register scales")
        if self.qubits_per_register != 3:
            raise SettingsError("registers use 3 qubits (8 levels)")

    @property
    def levels(self) -> int:
        return 2 ** self.qubits_per_register

    @property
    def n_qubits(self) -> int:
        return 4 * self.qubits_per_register

    def register(self, index: int) -> list[int]:
        q = self.qubits_per_register
        return list(range(index * q, (index + 1) * q))

    @classmethod
    def for_maxima(cls, maxima: Sequence[float], top_level: int = 6) -> "FockEncoding":
        """Scales that map each register's largest amount onto ``top_level``."""
        return cls(tuple(float(m) / top_level if m > 0 else 1.0 for m in maxima))


@dataclass(frozen=True)
class FockRates:
    k12: float = 0.0
    k21: float = 0.0
    ke0: float = 0.0
    kel: float = 0.0

    @classmethod
    def from_parameters(cls, p: IndividualParameters) -> "FockRates":
        return cls(p.q / p.v1, p.q / p.v2, p.ke0, p.cl / p.v1)


def encode_amounts(y, enc: FockEncoding) -> QuantumState:
    """Nearest-level product basis state for ``y = (a1, a2, ae, r)``."""
    index = 0
    for reg, (value, scale) in enumerate(zip(y, enc.scales)):
        x = float(value) / scale
        if not -0.5 < x < enc.levels - 0.5:
            raise TruncationError(f"{REGISTERS[reg]} = {value} maps to level {x:.2f}, outside 0..{enc.levels - 1}")
        k = min(max(int(round(x)), 0), enc.levels - 1)
        if reg in (0, 2) and k == SINK_LEVEL:
            raise TruncationError(f"{REGISTERS[reg]} = {value} maps to level {SINK_LEVEL}, reserved as a sink")
        index |= k << (reg * enc.qubits_per_register)
    return QuantumState.basis(enc.n_qubits, index)


def _angle(rate_dt: float) -> float:
    return 2.0 * math.asin(math.sqrt(rate_dt))


def _crx(control: int, target: int, theta: float) -> list[GateOp]:
    return [RZ(target, math.pi / 2), CRY(control, target, theta), RZ(target, -math.pi / 2)]


def _ccry(c1: int, c2: int, target: int, theta: float) -> list[GateOp]:
    return [CRY(c2, target, theta / 2), CNOT(c1, c2), CRY(c2, target, -theta / 2),
            CNOT(c1, c2), CRY(c1, target, theta / 2)]


def _check_rates(rates: FockRates, dt: float) -> None:
    for name in ("k12", "k21", "ke0", "kel"):
        x = getattr(rates, name) * dt
        if not 0.0 <= x <= SMALL_STEP_LIMIT:
            raise SettingsError(f"{name}*dt = {x} outside the small-step regime [0, {SMALL_STEP_LIMIT}]")


def _decay_gates(rates: FockRates, dt: float, enc: FockEncoding) -> list[GateOp]:
    return _to_sink(enc.register(2), _angle(rates.ke0 * dt))


def _transfer_gates(rates: FockRates, dt: float, enc: FockEncoding) -> list[GateOp]:
    a1, a2, ae = enc.register(0), enc.register(1), enc.register(2)
    gates: list[GateOp] = []
    th = _angle(rates.ke0 * dt)
    if th:
        gates += [CRY(c, t, th) for c, t in zip(a1, ae)]
    th = _angle(rates.k12 * dt)
    if th:
        for a, b in zip(a1, a2):
            gates += [CNOT(a, b)] + _crx(b, a, th) + [CNOT(a, b)]
    gates += _to_sink(a1, _angle(rates.kel * dt))
    return gates


def step_gates(rates: FockRates, dt: float, enc: FockEncoding = FockEncoding()) -> list[GateOp]:
    """Gate list for one propagation step (see module docstring for the order).

    When AE starts populated, the loading rotations also act on population the
    decay has just moved into the AE sink; that is second order in ke0*dt.
    ``propagate`` avoids it by emptying the sinks between the two stages.
    """
    _check_rates(rates, dt)
    return _decay_gates(rates, dt, enc) + _transfer_gates(rates, dt, enc)


def _to_sink(register: Sequence[int], theta: float) -> list[GateOp]:
    """Rotate |001> <-> |111> on a 3-qubit register."""
    if not theta:
        return []
    q0, q1, q2 = register
    return [CNOT(q1, q2), RX(q2, math.pi)] + _ccry(q0, q2, q1, theta) + [RX(q2, -math.pi), CNOT(q1, q2)]


def _sink_mask(n_amplitudes: int, enc: FockEncoding) -> np.ndarray:
    idx = np.arange(n_amplitudes)
    return ((register_value(idx, enc.register(0)) == SINK_LEVEL)
            | (register_value(idx, enc.register(2)) == SINK_LEVEL))


def discard_sinks(state: QuantumState, enc: FockEncoding = FockEncoding()) -> QuantumState:
    """Zero the amplitude on the A1 and AE sink levels (not renormalized)."""
    amps = state.amplitudes.copy()
    amps[_sink_mask(len(amps), enc)] = 0.0
    return QuantumState(state.n_qubits, amps)


def propagate(state: QuantumState, rates: FockRates, dt: float, n_steps: int,
              enc: FockEncoding = FockEncoding(), floor: float = 1e-14) -> list[np.ndarray]:
    """Basis-state populations after each of ``n_steps`` dephased steps.

    Each step runs the decay stage, empties the sinks, then runs the transfer
    stage and empties the sinks again.
    """
    _check_rates(rates, dt)
    stages = [_decay_gates(rates, dt, enc), _transfer_gates(rates, dt, enc)]
    sink = _sink_mask(len(state.amplitudes), enc)
    probs = state.probabilities()
    out = []
    for _ in range(n_steps):
        for gates in stages:
            if not gates:
                continue
            nxt = np.zeros_like(probs)
            for k in np.nonzero(probs > floor)[0]:
                nxt += probs[k] * apply_circuit(QuantumState.basis(enc.n_qubits, int(k)), gates).probabilities()
            nxt[sink] = 0.0
            probs = nxt
        out.append(probs)
    return out


def evolve_step(state: QuantumState, rates: FockRates, dt: float,
                enc: FockEncoding = FockEncoding()) -> QuantumState:
    return apply_circuit(state, step_gates(rates, dt, enc))


def extract_expectations(state, enc: FockEncoding = FockEncoding()) -> CompartmentState:
    """Register number expectations in physical units; sink levels read as zero.

    ``state`` is a QuantumState or a vector of basis-state populations.
    """
    if isinstance(state, QuantumState):
        if state.n_qubits != enc.n_qubits:
            raise SettingsError(f"state has {state.n_qubits} qubits, encoding needs {enc.n_qubits}")
        probs = state.probabilities()
    else:
        probs = np.asarray(state, dtype=float)
    idx = np.arange(len(probs))
    values = []
    for reg in range(4):
        k = register_value(idx, enc.register(reg))
        if reg in (0, 2):
            k = np.where(k == SINK_LEVEL, 0, k)
        values.append(float(np.dot(probs, k)) * enc.scales[reg])
    return CompartmentState(*values)


def euler_step(y, rates: FockRates, dt: float) -> np.ndarray:
    """Explicit Euler step of the linear distribution/elimination/effect-site system."""
    a1, a2, ae, r = (float(v) for v in y)
    return np.array([
        a1 + dt * (-(rates.kel + rates.k12) * a1 + rates.k21 * a2),
        a2 + dt * (rates.k12 * a1 - rates.k21 * a2),
        ae + dt * rates.ke0 * (a1 - ae),
        r,
    ])
