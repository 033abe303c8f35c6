import copy
import json
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from nnes.model import (ConfigError, CouplingSchedule, CouplingTerm, Envelope, ReservoirSpec, bump,
                        build_scenario, coupling_at, default_config, energy_current, load_scenario,
                        minimal_config, reservoir_coupling, site_pauli, smootherstep, xx_local)
from nnes.opcore import PAULI, NotHermitianError, op_norm

X, Y, Z = PAULI["X"], PAULI["Y"], PAULI["Z"]


def test_minimal_config_dimension(minimal):
    assert minimal.layout.total_dim == 4
    assert minimal.coupling.is_zero


def test_default_dimension():
    sc = build_scenario(default_config())
    assert sc.layout.total_dim == 2 * 2 ** 4 * 2 ** 4 == 512
    assert sc.betas == (0.5, 1.0)


def test_bulk_coupling_rejected():
    cfg = minimal_config()
    cfg["reservoirs"][0]["length"] = 2
    cfg["coupling"]["terms"] = [{"site_support": [[0, 0], [1, 1]],
                                 "matrix": np.kron(X, X).real.tolist()}]
    with pytest.raises(ConfigError, match="bulk"):
        build_scenario(cfg)


@pytest.mark.parametrize("mutate", [
    lambda c: c["reservoirs"][0].update(beta=-1.0),
    lambda c: c["reservoirs"][0].update(model="Hubbard"),
    lambda c: c.update(extra=1),
    lambda c: c["sigma"].pop("dim"),
    lambda c: c.update(numerics={"dt": 0}),
])
def test_schema_violations(mutate):
    cfg = minimal_config()
    mutate(cfg)
    with pytest.raises(ConfigError):
        build_scenario(cfg)


def test_non_hermitian_rejected():
    cfg = minimal_config()
    cfg["sigma"]["hamiltonian"] = [[0, 1], [0, 0]]
    with pytest.raises(NotHermitianError):
        build_scenario(cfg)
    cfg = minimal_config()
    cfg["coupling"]["terms"] = [{"site_support": [[0, 0], [1, 0]],
                                 "matrix": [[0, [0, 1], 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]}]
    with pytest.raises(ConfigError, match="self-adjoint"):
        build_scenario(cfg)


def test_complex_entries_parse():
    cfg = minimal_config()
    cfg["coupling"]["terms"] = [{"site_support": [[0, 0], [1, 0]],
                                 "matrix": np.kron(Y, Y).real.tolist()}]
    cfg["sigma"]["hamiltonian"] = [[0, [0, -0.5]], [[0, 0.5], 0]]
    sc = build_scenario(cfg)
    assert np.allclose(sc.sigma_hamiltonian, 0.5 * Y)


def test_load_scenario(tmp_path):
    p = tmp_path / "sc.json"
    p.write_text(json.dumps(default_config(length=1)))
    sc = load_scenario(p)
    assert sc.layout.total_dim == 8
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_scenario(p)


def _schedule(envelope):
    sc = build_scenario(default_config(length=1))
    lay = sc.layout
    static = CouplingTerm(lay, xx_local(0.3), (0, 1))
    k = CouplingTerm(lay, np.kron(Z, Z), (0, 2), envelope)
    return lay, static, k, CouplingSchedule(lay, [static, k])


def test_coupling_at_examples():
    lay, static, k, sched = _schedule(Envelope("smooth_step", 1.0, start=5.0, width=1.0))
    assert np.allclose(coupling_at(sched, 0.0).matrix, static.operator.matrix)
    lay, static, k, sched = _schedule(Envelope("constant", 0.7))
    assert sched.is_static
    for t in (-3.0, 0.0, 2.5):
        assert np.allclose(coupling_at(sched, t).matrix, static.operator.matrix + 0.7 * k.operator.matrix)
    w = 1.7
    lay, static, k, sched = _schedule(Envelope("sinusoid", 0.4, frequency=w))
    assert np.allclose(coupling_at(sched, math.pi / (2 * w)).matrix,
                       static.operator.matrix + 0.4 * k.operator.matrix)


@settings(max_examples=20, deadline=None)
@given(st.floats(-20, 20), st.floats(-2, 2), st.floats(0.1, 3), st.floats(0, 6))
def test_coupling_hermitian_and_bounded(t, amp, freq, phase):
    lay, static, k, sched = _schedule(Envelope("sinusoid", amp, frequency=freq, phase=phase))
    h = coupling_at(sched, t).matrix
    assert op_norm(h - h.conj().T) < 1e-12
    assert op_norm(h) <= sched.bound + 1e-12


def test_free_hamiltonian_is_product(small):
    u = scipy.linalg.expm(-1j * 0.8 * small.h_free.matrix)
    factors = [scipy.linalg.expm(-1j * 0.8 * h) for h in small.factor_hamiltonians]
    prod = factors[0]
    for f in factors[1:]:
        prod = np.kron(prod, f)
    assert np.abs(u - prod).max() < 1e-10


def test_xy_two_sites_by_hand():
    h = ReservoirSpec("XY", 2, 1.0, params=(("J", 2.0), ("h", 1.0))).hamiltonian()
    ref = (np.kron(X, X) + np.kron(Y, Y)) + 0.5 * (np.kron(Z, np.eye(2)) + np.kron(np.eye(2), Z))
    assert np.allclose(h, ref)
    ising = ReservoirSpec("transverse-Ising", 2, 1.0).hamiltonian()
    assert np.allclose(ising, -np.kron(Z, Z) - np.kron(X, np.eye(2)) - np.kron(np.eye(2), X))
    xxz = ReservoirSpec("XXZ", 2, 1.0, site_dim=3).hamiltonian()
    assert np.allclose(xxz, xxz.conj().T) and xxz.shape == (9, 9)
    with pytest.raises(ConfigError):
        ReservoirSpec("XY", 2, 1.0, params=(("delta", 1.0),))


def test_envelopes():
    assert smootherstep(-1) == 0 and smootherstep(2) == 1 and smootherstep(0.5) == pytest.approx(0.5)
    up, down = bump(2.0, -4.0, 1.0, -2.0)
    prof = lambda t: up(t) + down(t)
    assert prof(-5) == 0 and prof(-3) == pytest.approx(2.0) and prof(0) == pytest.approx(0.0)
    with pytest.raises(ConfigError):
        Envelope("square")


def test_observables(small):
    j = energy_current(small, 1).matrix
    assert np.allclose(j, j.conj().T)
    # the current only sees the boundary bond of the reservoir
    h1 = reservoir_coupling(small, 1).matrix
    assert np.allclose(h1, small.coupling.terms[0].operator.matrix)
    z = site_pauli(small, 2, 1, "Z").matrix
    assert np.allclose(z @ z, np.eye(small.layout.total_dim))


def test_sigma0_choices():
    cfg = default_config(length=1)
    cfg["sigma0"] = {"kind": "gibbs", "beta": 2.0}
    sc = build_scenario(cfg)
    p = np.exp(-2.0 * np.array([0.5, -0.5]))
    assert np.allclose(np.diag(sc.sigma0).real, p / p.sum())
    cfg = copy.deepcopy(cfg)
    cfg["sigma0"] = {"kind": "matrix", "matrix": [[1, 0], [0, 0]]}
    assert build_scenario(cfg).sigma0[0, 0] == 1


def test_perturbed_adds_terms(small):
    k = CouplingSchedule(small.layout, [CouplingTerm(small.layout, np.kron(Z, Z), (0, 1))])
    p = small.perturbed(k, 0.1)
    diff = p.coupling.at(0.0).matrix - small.coupling.at(0.0).matrix
    assert np.allclose(diff, 0.1 * k.at(0.0).matrix)
    assert small.perturbed(k, 0.0) is small
