import math

import numpy as np
import pytest

from quantpk.errors import SettingsError, TruncationError
from quantpk.fock import (FockEncoding, FockRates, encode_amounts, euler_step, evolve_step,
                          extract_expectations, propagate)
from quantpk.qsim import QuantumState

ENC = FockEncoding()


def basis(a1, a2, ae, r):
    return QuantumState.basis(12, a1 | a2 << 3 | ae << 6 | r << 9)


def test_encoding_layout():
    assert ENC.levels == 8 and ENC.n_qubits == 12
    assert [ENC.register(i) for i in range(4)] == [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11]]
    with pytest.raises(SettingsError):
        FockEncoding((1.0, 0.0, 1.0, 1.0))


def test_encode_examples():
    assert encode_amounts((0, 0, 0, 0), ENC).amplitudes[0] == 1
    enc = FockEncoding((0.25, 1.0, 1.0, 1.0))
    s = encode_amounts((5 * 0.25, 0, 0, 0), enc)
    assert extract_expectations(s, enc).a1 == pytest.approx(5 * 0.25)
    with pytest.raises(TruncationError):
        encode_amounts((9 * 0.25, 0, 0, 0), enc)
    with pytest.raises(TruncationError):
        encode_amounts((7.0, 0, 0, 0), ENC)      # level 7 is the A1 sink


def test_for_maxima():
    enc = FockEncoding.for_maxima([12.0, 3.0, 6.0, 50.0])
    assert enc.scales == (2.0, 0.5, 1.0, 50.0 / 6)


def test_extract_examples():
    assert extract_expectations(QuantumState.zero(12), ENC) == (0, 0, 0, 0)
    assert extract_expectations(basis(2, 1, 0, 3), ENC) == (2, 1, 0, 3)
    amps = (basis(1, 0, 0, 0).amplitudes + basis(0, 1, 0, 0).amplitudes) / math.sqrt(2)
    enc = FockEncoding((3.0, 3.0, 1.0, 1.0))
    y = extract_expectations(QuantumState(12, amps), enc)
    assert np.allclose(y, (1.5, 1.5, 0, 0), atol=1e-12)
    with pytest.raises(SettingsError):
        extract_expectations(QuantumState.zero(3), ENC)


def test_zero_rates_and_zero_dt_identity():
    s = basis(3, 2, 1, 4)
    assert np.array_equal(evolve_step(s, FockRates(), 0.5, ENC).amplitudes, s.amplitudes)
    rates = FockRates(0.1, 0.1, 0.1, 0.1)
    assert np.array_equal(evolve_step(s, rates, 0.0, ENC).amplitudes, s.amplitudes)


def test_transfer_probability():
    s = evolve_step(basis(1, 0, 0, 0), FockRates(k12=0.04, k21=0.04), 1.0, ENC)
    p = s.probabilities()
    assert abs(p[1 << 3] - 0.04) < 1e-3
    assert abs(p[1] - 0.96) < 1e-3


def test_small_step_regime_enforced():
    with pytest.raises(SettingsError):
        evolve_step(basis(1, 0, 0, 0), FockRates(kel=0.5), 1.0, ENC)
    with pytest.raises(SettingsError):
        evolve_step(basis(1, 0, 0, 0), FockRates(kel=-0.01), 1.0, ENC)


def test_norm_preserved():
    rng = np.random.default_rng(0)
    v = rng.normal(size=4096) + 1j * rng.normal(size=4096)
    s = QuantumState(12, v / np.linalg.norm(v))
    out = evolve_step(s, FockRates(0.05, 0.05, 0.08, 0.03), 1.0, ENC)
    assert abs(out.norm() - 1) < 1e-10


def test_symmetric_exchange():
    amps = (basis(1, 0, 0, 0).amplitudes + basis(0, 1, 0, 0).amplitudes) / math.sqrt(2)
    out = evolve_step(QuantumState(12, amps), FockRates(k12=0.05, k21=0.05), 1.0, ENC)
    y = extract_expectations(out, ENC)
    assert abs(y.a1 - y.a2) < 1e-10
    y = extract_expectations(evolve_step(basis(2, 2, 0, 0), FockRates(0.03, 0.03), 1.0, ENC), ENC)
    assert abs(y.a1 - y.a2) < 1e-10


@pytest.mark.parametrize("rates", [FockRates(k12=0.05, k21=0.05), FockRates(k12=0.02, k21=0.02, kel=0.03),
                                   FockRates(ke0=0.05), FockRates(kel=0.05)])
def test_euler_limit(rates):
    y0 = np.array([1.0, 0.0, 0.0, 0.0])
    q = np.array(extract_expectations(evolve_step(basis(1, 0, 0, 0), rates, 1.0, ENC), ENC))
    c = euler_step(y0, rates, 1.0)
    for i in range(3):
        if c[i] != 0:
            assert abs(q[i] / c[i] - 1) < 0.05, (i, q, c)
        else:
            assert abs(q[i]) < 1e-12


def test_propagate_tracks_first_order_kinetics():
    rates = FockRates(k12=0.05, k21=0.05, kel=0.02)
    traj = propagate(basis(1, 0, 0, 0), rates, 1.0, 20, ENC)
    assert len(traj) == 20
    y = np.array([1.0, 0, 0, 0])
    for probs in traj:
        y = euler_step(y, rates, 1.0)
    final = extract_expectations(traj[-1], ENC)
    assert final.a1 == pytest.approx(y[0], rel=0.05)
    assert final.a2 == pytest.approx(y[1], rel=0.10)
    # elimination leaves the register: total population decreases, never above 1
    assert 0 < traj[-1].sum() < 1
