"""Variational-circuit proposal engine for the SAEM E-step.

Each proposal measures the ansatz once.  Bit ``j`` of the outcome moves eta
coordinate ``j`` by ``+sigma_q`` (bit 1) or ``-sigma_q`` (bit 0), and a small
Gaussian perturbation is added on top.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SettingsError
from .qsim import CNOT, RX, RY, RZ, GateOp, outcome_bits, run_circuit, sample_outcomes


@dataclass(frozen=True)
class AnsatzSpec:
    n_qubits: int = 6
    n_layers: int = 3
    angles: tuple[float, ...] = ()

    def __post_init__(self):
        if self.n_qubits < 1 or self.n_layers < 1:
            raise SettingsError("ansatz needs at least one qubit and one layer")
        if len(self.angles) != 3 * self.n_qubits * self.n_layers:
            raise SettingsError(f"ansatz with {self.n_qubits} qubits and {self.n_layers} layers needs "
                                f"{3 * self.n_qubits * self.n_layers} angles, got {len(self.angles)}")

    @classmethod
    def random(cls, n_qubits: int, n_layers: int, rng: np.random.Generator) -> "AnsatzSpec":
        angles = rng.uniform(-math.pi / 2, math.pi / 2, 3 * n_qubits * n_layers)
        return cls(n_qubits, n_layers, tuple(angles.tolist()))

    @classmethod
    def constant(cls, n_qubits: int, n_layers: int, value: float) -> "AnsatzSpec":
        return cls(n_qubits, n_layers, (float(value),) * (3 * n_qubits * n_layers))

    def angle_array(self) -> np.ndarray:
        """Angles shaped (layer, qubit, [x, y, z])."""
        return np.asarray(self.angles, dtype=float).reshape(self.n_layers, self.n_qubits, 3)


@dataclass(frozen=True)
class ProposalSettings:
    sigma_step: float = 0.1
    sigma_q: float | None = None  # None: same as sigma_step
    shots: int = 1

    def __post_init__(self):
        if not self.sigma_step > 0 or (self.sigma_q is not None and not self.sigma_q > 0):
            raise SettingsError("proposal scales must be positive")
        if self.shots != 1:
            raise SettingsError("proposals use exactly one shot")

    @property
    def displacement(self) -> float:
        return self.sigma_step if self.sigma_q is None else self.sigma_q


def build_ansatz(spec: AnsatzSpec) -> list[GateOp]:
    """Per layer: RX, RY, RZ on each qubit, then a CNOT ring 0->1, ..., n-1->0."""
    a = spec.angle_array()
    n = spec.n_qubits
    gates: list[GateOp] = []
    for layer in range(spec.n_layers):
        for q in range(n):
            gates += [RX(q, a[layer, q, 0]), RY(q, a[layer, q, 1]), RZ(q, a[layer, q, 2])]
        if n > 1:
            gates += [CNOT(q, (q + 1) % n) for q in range(n)]
    return gates


def ansatz_probabilities(spec: AnsatzSpec) -> np.ndarray:
    p = run_circuit(spec.n_qubits, build_ansatz(spec)).probabilities()
    return p / p.sum()


def sample_eta_proposal(current, spec: AnsatzSpec | None, settings: ProposalSettings,
                        rng: np.random.Generator, probs: np.ndarray | None = None) -> np.ndarray:
    """current + sigma_q * (2b - 1) + N(0, sigma_step^2), b one measured bitstring.

    ``probs`` (outcome distribution of the circuit) may be supplied to skip
    re-simulating the ansatz.
    """
    current = np.asarray(current, dtype=float)
    if probs is None:
        probs = ansatz_probabilities(spec)
    n = int(round(math.log2(len(probs))))
    if n != current.size:
        raise SettingsError(f"circuit has {n} qubits but eta has {current.size} coordinates")
    b = outcome_bits(sample_outcomes(probs, 1, rng)[0], n)
    d = settings.displacement * (2.0 * b - 1.0)
    return current + d + rng.normal(0.0, settings.sigma_step, size=current.shape)


def adapt_angles(history, spec: AnsatzSpec, rng: np.random.Generator, sd: float = 0.05) -> AnsatzSpec:
    """Stochastic hill-climb on the ansatz angles.

    ``history`` lists ``(angles, mean_acceptance)`` for each evaluated window in
    order.  The kept base starts at the first window and moves to a later one
    whenever that window's acceptance did not decrease relative to the base.
    The next trial perturbs the kept base by N(0, sd^2), clipped to [-pi, pi].
    """
    if not history:
        return spec
    base_angles, base_acc = history[0]
    for angles, acc in history[1:]:
        if acc >= base_acc:
            base_angles, base_acc = angles, acc
    base = np.asarray(base_angles, dtype=float)
    trial = np.clip(base + rng.normal(0.0, sd, size=base.shape), -math.pi, math.pi)
    return replace(spec, angles=tuple(trial.tolist()))


@dataclass
class QuantumEngine:
    """Proposal engine backed by the variational circuit.

    The SAEM step size scales both the Gaussian perturbation and the quantum
    displacement (keeping their configured ratio).
    """
    spec: AnsatzSpec
    settings: ProposalSettings = field(default_factory=ProposalSettings)
    adapt_sd: float = 0.05
    history: list = field(default_factory=list)
    name: str = "quantum"
    _probs: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_seed(cls, seed: int, n_qubits: int = 6, n_layers: int = 3,
                  settings: ProposalSettings | None = None) -> "QuantumEngine":
        rng = np.random.default_rng([seed, 0xA5])
        return cls(AnsatzSpec.random(n_qubits, n_layers, rng), settings or ProposalSettings())

    def prepare(self) -> None:
        self._probs = ansatz_probabilities(self.spec)

    def propose(self, current, step_sd: float, rng: np.random.Generator) -> np.ndarray:
        if self._probs is None:
            self.prepare()
        ratio = self.settings.displacement / self.settings.sigma_step
        scaled = ProposalSettings(step_sd, ratio * step_sd)
        return sample_eta_proposal(current, None, scaled, rng, self._probs)

    def adapt(self, acceptance: float, rng: np.random.Generator) -> None:
        self.history.append((self.spec.angles, float(acceptance)))
        self.spec = adapt_angles(self.history, self.spec, rng, self.adapt_sd)
        self._probs = None

    def history_csv(self) -> str:
        out = io.StringIO()
        n = len(self.spec.angles)
        out.write(",".join(["window", "acceptance"] + [f"angle_{i}" for i in range(n)]) + "\n")
        for w, (angles, acc) in enumerate(self.history):
            out.write(",".join([str(w), repr(acc)] + [repr(float(a)) for a in angles]) + "\n")
        out.write(",".join(["current", ""] + [repr(float(a)) for a in self.spec.angles]) + "\n")
        return out.getvalue()
