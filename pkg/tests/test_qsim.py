import math

import numpy as np
import pytest
from scipy import stats

import oracles
from quantpk.errors import GateError
from quantpk.qsim import (CNOT, CRY, RX, RY, RZ, GateOp, QuantumState, apply_circuit, apply_gate,
                         bitstring, expectation_number, marginal_probabilities, measure_shots,
                         run_circuit)


def random_state(n, rng):
    v = rng.normal(size=2 ** n) + 1j * rng.normal(size=2 ** n)
    return QuantumState(n, v / np.linalg.norm(v))


def dense(gate, n):
    if gate.kind == "CNOT":
        return oracles.controlled(oracles.X, gate.control, gate.target, n)
    u = {"RX": oracles.rx, "RY": oracles.ry, "RZ": oracles.rz, "CRY": oracles.ry}[gate.kind](gate.angle)
    if gate.kind == "CRY":
        return oracles.controlled(u, gate.control, gate.target, n)
    return oracles.single(u, gate.target, n)


def test_examples():
    s = apply_gate(QuantumState.zero(1), RY(0, math.pi))
    assert np.allclose(np.abs(s.amplitudes), [0, 1], atol=1e-15)
    # |10>: qubit 1 set (index 2); CNOT control 1 -> target 0 gives |11> (index 3)
    s = apply_gate(QuantumState.basis(2, 2), CNOT(1, 0))
    assert s.amplitudes[3] == 1
    for k in range(4):
        s = apply_gate(QuantumState.basis(2, k), RZ(1, 0.77))
        assert np.allclose(s.probabilities(), np.eye(4)[k])


def test_gate_validation():
    with pytest.raises(GateError):
        GateOp("H", 0, None)
    with pytest.raises(GateError):
        CNOT(1, 1)
    with pytest.raises(GateError):
        GateOp("CRY", 0, 0.1)
    with pytest.raises(GateError):
        apply_gate(QuantumState.zero(2), RX(2, 0.1))


def test_run_circuit_examples():
    assert run_circuit(3, []).amplitudes[0] == 1
    gates = [RX(q, 0.0) for q in range(3)] + [CNOT(0, 1), CNOT(1, 2), CNOT(2, 0)]
    assert np.allclose(run_circuit(3, gates).amplitudes, np.eye(8)[0])
    rng = np.random.default_rng(0)
    g = [RY(int(rng.integers(4)), rng.uniform(-7, 7)) for _ in range(30)] + [CNOT(0, 3), CRY(2, 1, 1.1)]
    assert abs(run_circuit(4, g).norm() - 1) < 1e-10


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_dense_oracle_each_kind(n):
    rng = np.random.default_rng(n)
    kinds = ["RX", "RY", "RZ"] + (["CNOT", "CRY"] if n > 1 else [])
    for _ in range(100):
        kind = kinds[rng.integers(len(kinds))]
        t = int(rng.integers(n))
        if kind in ("CNOT", "CRY"):
            c = int(rng.choice([q for q in range(n) if q != t]))
            gate = CNOT(c, t) if kind == "CNOT" else CRY(c, t, rng.uniform(-2 * np.pi, 2 * np.pi))
        else:
            gate = GateOp(kind, t, rng.uniform(-2 * np.pi, 2 * np.pi))
        s = random_state(n, rng)
        assert np.max(np.abs(apply_gate(s, gate).amplitudes - dense(gate, n) @ s.amplitudes)) < 1e-10


def test_norm_drift():
    rng = np.random.default_rng(7)
    s = QuantumState.zero(5)
    gates = []
    for _ in range(10_000):
        k = rng.integers(5)
        t = int(rng.integers(5))
        c = int((t + 1 + rng.integers(4)) % 5)
        a = rng.uniform(-np.pi, np.pi)
        gates.append([RX(t, a), RY(t, a), RZ(t, a), CNOT(c, t), CRY(c, t, a)][k])
    assert abs(apply_circuit(s, gates).norm() - 1) < 1e-8


def test_involutions():
    s = random_state(3, np.random.default_rng(1))
    assert np.max(np.abs(apply_circuit(s, [CNOT(0, 2), CNOT(0, 2)]).amplitudes - s.amplitudes)) < 1e-12
    assert np.max(np.abs(apply_circuit(s, [RX(1, 0.4), RX(1, -0.4)]).amplitudes - s.amplitudes)) < 1e-12


def test_apply_gate_does_not_mutate():
    s = QuantumState.zero(1)
    apply_gate(s, RX(0, 1.0))
    assert s.amplitudes[0] == 1


def test_measure_basis_state():
    shots = measure_shots(QuantumState.basis(3, 5), 200, np.random.default_rng(0))
    assert np.all(shots == 5)
    assert bitstring(5, 3) == "101"


def test_measure_half():
    s = run_circuit(1, [RY(0, math.pi / 2)])
    p1 = np.mean(measure_shots(s, 10_000, np.random.default_rng(11)))
    assert 0.47 <= p1 <= 0.53
    a = measure_shots(s, 50, np.random.default_rng(3))
    assert np.array_equal(a, measure_shots(s, 50, np.random.default_rng(3)))


def test_chi_square_random_circuit():
    rng = np.random.default_rng(21)
    gates = [RY(q, rng.uniform(0, np.pi)) for q in range(3)] + [CNOT(0, 1), CRY(1, 2, 1.3), RX(0, 0.7)]
    u = np.eye(8, dtype=complex)
    for g in gates:
        u = dense(g, 3) @ u
    exact = np.abs(u[:, 0]) ** 2
    shots = measure_shots(run_circuit(3, gates), 20_000, np.random.default_rng(5))
    counts = np.bincount(shots, minlength=8)
    keep = exact > 0
    assert stats.chisquare(counts[keep], 20_000 * exact[keep] / exact[keep].sum()).pvalue > 0.01


def test_expectation_number():
    assert expectation_number(QuantumState.basis(3, 5), [0, 1, 2]) == 5.0
    s = run_circuit(3, [RY(0, math.pi / 2)])
    assert expectation_number(s, [0, 1, 2]) == pytest.approx(0.5)
    r = random_state(3, np.random.default_rng(4))
    brute = sum(k * abs(r.amplitudes[k]) ** 2 for k in range(8))
    assert abs(expectation_number(r, [0, 1, 2]) - brute) < 1e-12
    # a register on higher qubits reads those bits only
    assert expectation_number(QuantumState.basis(4, 0b1010), [2, 3]) == 2.0
    with pytest.raises(GateError):
        expectation_number(r, [0, 0])


def test_marginals():
    s = run_circuit(2, [RY(1, math.pi)])
    assert np.allclose(marginal_probabilities(s), [0, 1])
