import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from conftest import random_matrix
from nnes.evolution import (CoupledPropagator, coupled_evolve, echo_minus, echo_minus_derivative,
                            echo_minus_integral, echo_plus, echo_plus_derivative, echo_plus_integral,
                            free_evolve, propagators)
from nnes.model import build_scenario, minimal_config, site_pauli
from nnes.opcore import PAULI, Operator, op_norm


def _observable(sc, seed):
    rng = np.random.default_rng(seed)
    a = random_matrix(rng, sc.layout.total_dim, hermitian=True)
    return Operator(sc.layout, a / op_norm(a))


@pytest.mark.parametrize("t", [0.0, 0.3, 1.0, -2.2])
def test_precession(t):
    w = 1.7
    cfg = minimal_config()
    cfg["sigma"]["hamiltonian"] = (0.5 * w * PAULI["Z"]).real.tolist()
    sc = build_scenario(cfg)
    sx, sy = (site_pauli(sc, 0, 0, p).matrix for p in "XY")
    got = free_evolve(sc, sx, t)
    assert np.abs(got - (np.cos(w * t) * sx - np.sin(w * t) * sy)).max() < 1e-12


def test_conserved_observable(small):
    h0 = small.h_free
    for t in (0.5, 4.0):
        assert np.abs(free_evolve(small, h0, t).matrix - h0.matrix).max() < 1e-10


def test_free_group_law(small):
    a = _observable(small, 0)
    lhs = free_evolve(small, free_evolve(small, a, 0.7), 1.1)
    assert np.abs(lhs.matrix - free_evolve(small, a, 1.8).matrix).max() < 1e-11


def test_uncoupled_equals_free(uncoupled):
    a = _observable(uncoupled, 1)
    for t, s in [(0.0, -2.0), (1.0, 3.5)]:
        got = coupled_evolve(uncoupled, a, t, s).matrix
        assert np.abs(got - free_evolve(uncoupled, a, s - t).matrix).max() < 1e-11
    assert coupled_evolve(uncoupled, a, 1.0, 1.0) is a


def test_static_against_dense_exponential(small):
    a = _observable(small, 2)
    h = small.h_free.matrix + small.coupling.static_part.matrix
    stepped = CoupledPropagator(small, force_stepping=True)
    for t, s in [(0.0, -10.0), (2.0, 7.5), (-1.0, -4.3)]:
        u = scipy.linalg.expm(1j * h * (s - t))
        ref = u @ a.matrix @ u.conj().T
        assert np.abs(coupled_evolve(small, a, t, s).matrix - ref).max() < 1e-8
        assert np.abs(stepped.evolve(a.matrix, t, s) - ref).max() < 1e-8


@settings(max_examples=10, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3))
def test_cocycle_and_automorphism(t, s, r):
    # the driven fixture is reconstructed here because hypothesis forbids function fixtures
    from conftest import driven as make
    sc = make.__wrapped__()
    a, b = _observable(sc, 3).matrix, _observable(sc, 4).matrix
    cp = propagators(sc)[1]
    lhs = cp.evolve(cp.evolve(a, s, r), t, s)
    assert np.abs(lhs - cp.evolve(a, t, r)).max() < 1e-9
    assert np.abs(cp.evolve(a @ b, t, s) - cp.evolve(a, t, s) @ cp.evolve(b, t, s)).max() < 1e-9
    assert abs(op_norm(cp.evolve(a, t, s)) - op_norm(a)) < 1e-9


def test_echo_trivial_cases(uncoupled, small):
    a = _observable(uncoupled, 5)
    assert np.abs(echo_plus(uncoupled, a, 0.0, -3.0).matrix - a.matrix).max() < 1e-11
    assert np.abs(echo_minus(uncoupled, a, 0.0, -3.0).matrix - a.matrix).max() < 1e-11
    b = _observable(small, 6)
    assert echo_plus(small, b, 1.0, 1.0) is b
    v, err = echo_minus_integral(small, b, 1.0, 1.0)
    assert np.array_equal(v.matrix, b.matrix) and err == 0


@pytest.mark.parametrize("t,s", [(0.0, -3.0), (1.0, 3.0)])
def test_echo_integral_identities(small, t, s):
    sc = small
    a = _observable(sc, 7)
    tol = sc.numerics.tol_quad
    v, err = echo_plus_integral(sc, a, t, s)
    assert op_norm(v.matrix - echo_plus(sc, a, t, s).matrix) < tol
    v, err = echo_minus_integral(sc, a, t, s)
    assert op_norm(v.matrix - echo_minus(sc, a, t, s).matrix) < tol
    assert err < tol


def test_driven_echo_identities_converge(driven):
    # with a time-dependent coupling the midpoint propagator carries an O(dt^2) error
    a = _observable(driven, 7)
    res = []
    for dt in (0.01, 0.005):
        sc = driven.with_numerics(dt=dt)
        plus, _ = echo_plus_integral(sc, a, 0.0, -3.0)
        minus, _ = echo_minus_integral(sc, a, 0.0, -3.0)
        res.append((op_norm(plus.matrix - echo_plus(sc, a, 0.0, -3.0).matrix),
                    op_norm(minus.matrix - echo_minus(sc, a, 0.0, -3.0).matrix)))
    for coarse, fine in zip(*res):
        assert coarse < 1e-4 and fine < coarse / 3.5


@pytest.mark.parametrize("which,tol", [("small", 1e-6), ("driven", 1e-4)])
def test_echo_derivatives(which, tol, request):
    sc = request.getfixturevalue(which)
    a = _observable(sc, 8)
    s, t, d = -1.0, 0.6, 1e-3
    fd = (echo_plus(sc, a, s, t + d).matrix - echo_plus(sc, a, s, t - d).matrix) / (2 * d)
    assert np.abs(fd - echo_plus_derivative(sc, a, s, t).matrix).max() < tol
    fd = (echo_minus(sc, a, s, t + d).matrix - echo_minus(sc, a, s, t - d).matrix) / (2 * d)
    assert np.abs(fd - echo_minus_derivative(sc, a, s, t).matrix).max() < tol
