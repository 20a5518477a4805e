"""Independent reference computations used by the tests.

Nothing here imports quantpk: gate matrices are built densely with Kronecker
products, and compartment solutions come from closed forms.
"""
from __future__ import annotations

import numpy as np

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
P0 = np.diag([1, 0]).astype(complex)
P1 = np.diag([0, 1]).astype(complex)


def rx(t):
    c, s = np.cos(t / 2), np.sin(t / 2)
    return np.array([[c, -1j * s], [-1j * s, c]])


def ry(t):
    c, s = np.cos(t / 2), np.sin(t / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def rz(t):
    return np.diag([np.exp(-0.5j * t), np.exp(0.5j * t)])


def embed(ops: dict, n: int) -> np.ndarray:
    """Full 2^n matrix with ``ops[q]`` on qubit q (qubit 0 least significant)."""
    m = np.array([[1.0 + 0j]])
    for q in reversed(range(n)):
        m = np.kron(m, ops.get(q, I2))
    return m


def single(u, target, n):
    return embed({target: u}, n)


def controlled(u, control, target, n):
    return embed({control: P0}, n) + embed({control: P1, target: u}, n)


def mono_exponential(a0, k, t):
    return a0 * np.exp(-k * np.asarray(t))


def bi_exponential(a10, cl, v1, q, v2, t):
    """a1(t) for a bolus into the central compartment of a linear two-compartment model."""
    k10, k12, k21 = cl / v1, q / v1, q / v2
    m = np.array([[-(k10 + k12), k21], [k12, -k21]])
    lam, vec = np.linalg.eig(m)
    c = np.linalg.solve(vec, np.array([a10, 0.0]))
    t = np.asarray(t, dtype=float)
    y = vec @ (c[:, None] * np.exp(lam[:, None] * t[None, :]))
    return y[0].real


def normal_logpdf(x, mean, sd):
    return -0.5 * np.log(2 * np.pi * sd ** 2) - 0.5 * ((x - mean) / sd) ** 2
