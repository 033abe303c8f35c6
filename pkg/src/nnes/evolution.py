"""Heisenberg-picture propagators.

Conventions, with ``H(u) = H_free + h(u)`` and ``U(t, s)`` the Schrodinger
propagator from ``s`` to ``t``::

    free:     breve^t A      = e^{i H_free t} A e^{-i H_free t},   breve(t, s) = breve^{s-t}
    coupled:  alpha(t, s) A  = U(s, t)^dagger A U(s, t)

so that ``alpha(t, s) = (alpha^t)^{-1} alpha^s`` and ``alpha(t, s) alpha(s, r) =
alpha(t, r)``.  For static ``h`` the coupled family comes from one cached
eigendecomposition.  Otherwise ``U`` is a time-ordered product of midpoint
steps on the grid of :func:`nnes.quadrature.time_grid`.
"""
from __future__ import annotations

import threading
import weakref
from collections import OrderedDict

import numpy as np

from .model import Scenario
from .opcore import Operator, Spectrum, as_matrix, local_commutator
from .quadrature import StreamingSimpson, time_grid


def _like(template, m: np.ndarray, label: str = ""):
    if isinstance(template, Operator):
        return Operator(template.layout, m, label or template.label)
    return m


class FreePropagator:
    """The uncoupled group, from the blocked spectrum of ``H_free``."""

    kind = "free"

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.spectrum = Spectrum(scenario.h_free.matrix)
        self.factor_spectra = [Spectrum(h) for h in scenario.factor_hamiltonians]

    def evolve(self, a, t: float):
        """``breve^t a``."""
        if t == 0:
            return a
        return _like(a, self.spectrum.evolve(as_matrix(a), t))

    def __call__(self, a, t: float, s: float):
        """``breve(t, s) a = breve^{s - t} a``."""
        return self.evolve(a, s - t)

    def factor_unitaries(self, t: float) -> list[np.ndarray]:
        """``e^{-i H_a t}`` for every subsystem, system first."""
        return [sp.unitary(t) for sp in self.factor_spectra]

    def evolve_factor(self, x: np.ndarray, a: int, t: float) -> np.ndarray:
        """Free evolution of a matrix living on subsystem ``a`` alone."""
        return self.factor_spectra[a].evolve(x, t)

    def evolve_reservoirs(self, x: np.ndarray, t: float) -> np.ndarray:
        """``breve_>^t`` on a matrix over the reservoir factor ``A_>``."""
        from .opcore import conjugate_product

        dims = self.scenario.layout.dims[1:]
        us = [sp.unitary(-t) for sp in self.factor_spectra[1:]]
        return conjugate_product(x, us, dims)


class CoupledPropagator:
    """Two-parameter family ``alpha(t, s)`` generated by ``H_free + h(t)``.

    Parameters
    ----------
    scenario : Scenario
    force_stepping : bool
        Use midpoint stepping even when ``h`` is static (for cross-checks).
    cache_size : int
        Number of step unitaries kept.  Steps are keyed by their length and
        the drive weights at the midpoint, so stretches where ``h`` is constant
        reuse one unitary.
    """

    kind = "coupled"

    def __init__(self, scenario: Scenario, force_stepping: bool = False, cache_size: int = 64):
        self.scenario = scenario
        self.dt = scenario.numerics.dt
        self.static = scenario.coupling.is_static and not force_stepping
        self._h_free = scenario.h_free.matrix
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()
        self.spectrum = None
        if self.static:
            self.spectrum = Spectrum(self._h_free + scenario.coupling.static_part.matrix)

    def hamiltonian(self, t: float) -> np.ndarray:
        return self._h_free + self.scenario.coupling.at(t).matrix

    def step(self, u0: float, u1: float) -> np.ndarray:
        """Midpoint-rule unitary carrying states from ``u0`` to ``u1``."""
        delta = u1 - u0
        mid = 0.5 * (u0 + u1)
        key = (round(delta, 13), self.scenario.coupling.key(mid))
        with self._lock:
            u = self._cache.get(key)
            if u is not None:
                self._cache.move_to_end(key)
                return u
        u = Spectrum(self.hamiltonian(mid)).unitary(delta)
        with self._lock:
            self._cache[key] = u
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return u

    def schrodinger(self, t1: float, t0: float) -> np.ndarray:
        """``U(t1, t0)``."""
        if self.static:
            return self.spectrum.unitary(t1 - t0)
        nodes = time_grid(t0, t1, self.dt)
        u = np.eye(self._h_free.shape[0], dtype=complex)
        for a, b in zip(nodes[:-1], nodes[1:]):
            u = self.step(a, b) @ u
        return u

    def evolve(self, a, t: float, s: float):
        """``alpha(t, s) a``."""
        if t == s:
            return a
        m = as_matrix(a)
        if self.static:
            return _like(a, self.spectrum.evolve(m, s - t))
        u = self.schrodinger(s, t)
        return _like(a, u.conj().T @ m @ u)

    __call__ = evolve

    def frames(self, t: float, s: float, unitaries: bool = True):
        """Yield ``(j, u_j, W_j)`` with ``W_j = U(t, u_j)`` along ``time_grid(t, s)``.

        Then ``alpha(u_j, t) X = W^dagger X W`` and ``alpha(t, u_j) X = W X W^dagger``.
        For a static coupling with ``unitaries=False`` the frame is ``None``
        (callers then work with :attr:`spectrum` phases instead).
        """
        nodes = time_grid(t, s, self.dt)
        w = np.eye(self._h_free.shape[0], dtype=complex)
        for j, u in enumerate(nodes):
            if self.static:
                w = self.spectrum.unitary(t - u) if unitaries else None
            elif j:
                w = w @ self.step(u, nodes[j - 1])
            yield j, u, w


_PROPAGATORS: "weakref.WeakKeyDictionary[Scenario, tuple]" = weakref.WeakKeyDictionary()


def propagators(scenario: Scenario) -> tuple[FreePropagator, CoupledPropagator]:
    """Free and coupled propagators for a scenario, built once and shared."""
    pair = _PROPAGATORS.get(scenario)
    if pair is None:
        pair = (FreePropagator(scenario), CoupledPropagator(scenario))
        _PROPAGATORS[scenario] = pair
    return pair


def free_evolve(scenario: Scenario, a, t: float):
    """``breve^t a = e^{i H_free t} a e^{-i H_free t}``."""
    return propagators(scenario)[0].evolve(a, t)


def coupled_evolve(scenario: Scenario, a, t: float, s: float):
    """``alpha(t, s) a``."""
    return propagators(scenario)[1].evolve(a, t, s)


def echo_plus(scenario: Scenario, a, t: float, s: float):
    """``breve(t, s) alpha(s, t) a`` by composing the two propagators."""
    free, coupled = propagators(scenario)
    return free(coupled(a, s, t), t, s)


def echo_minus(scenario: Scenario, a, t: float, s: float):
    """``alpha(t, s) breve(s, t) a`` by composing the two propagators."""
    free, coupled = propagators(scenario)
    return coupled(free(a, s, t), t, s)


def echo_plus_integral(scenario: Scenario, a, t: float, s: float, coupled: CoupledPropagator | None = None):
    """``a + i int_s^t du breve(t, u) [h(u), alpha(u, t) a]`` by Simpson quadrature.

    This equals :func:`echo_plus`.  Returns ``(value, error_estimate)``.  The
    integral runs along the grid from ``t`` down to ``s``; integrands are
    summed in the free eigenbasis.
    """
    free, default = propagators(scenario)
    coupled = coupled or default
    m = as_matrix(a).astype(complex)
    nodes = time_grid(t, s, coupled.dt)
    n = len(nodes) - 1
    if n == 0:
        return _like(a, m.copy()), 0.0
    h = (s - t) / n
    acc = StreamingSimpson(n, h)
    fs, cs = free.spectrum, coupled.spectrum
    free_ph = fs.phase_walk(0.0, h)
    if coupled.static:
        m_eig = cs.to_eigenbasis(m)
        coupled_ph = cs.phase_walk(0.0, -h)
    for j, u, w in coupled.frames(t, s, unitaries=not coupled.static):
        if coupled.static:
            x = cs.from_eigenbasis(next(coupled_ph) * m_eig)
        else:
            x = w.conj().T @ m @ w
        c = local_commutator(scenario.coupling.kernels(u), x)
        acc.add(j, next(free_ph) * fs.to_eigenbasis(c))
    # int_s^t is minus the integral accumulated from t to s
    value = m - 1j * fs.from_eigenbasis(acc.total)
    return _like(a, value), acc.error_estimate


def echo_minus_integral(scenario: Scenario, a, t: float, s: float, coupled: CoupledPropagator | None = None):
    """``a - i int_s^t du alpha(t, u) [h(u), breve(u, t) a]`` by Simpson quadrature.

    This equals :func:`echo_minus`.  Returns ``(value, error_estimate)``.
    """
    free, default = propagators(scenario)
    coupled = coupled or default
    m = as_matrix(a).astype(complex)
    nodes = time_grid(t, s, coupled.dt)
    n = len(nodes) - 1
    if n == 0:
        return _like(a, m.copy()), 0.0
    h = (s - t) / n
    acc = StreamingSimpson(n, h)
    fs, cs = free.spectrum, coupled.spectrum
    m_free = fs.to_eigenbasis(m)
    free_ph = fs.phase_walk(0.0, -h)
    if coupled.static:
        coupled_ph = cs.phase_walk(0.0, h)
    for j, u, w in coupled.frames(t, s, unitaries=not coupled.static):
        x = fs.from_eigenbasis(next(free_ph) * m_free)
        c = local_commutator(scenario.coupling.kernels(u), x)
        if coupled.static:
            acc.add(j, next(coupled_ph) * cs.to_eigenbasis(c))
        else:
            acc.add(j, w @ c @ w.conj().T)
    total = cs.from_eigenbasis(acc.total) if coupled.static else acc.total
    value = m + 1j * total
    return _like(a, value), acc.error_estimate


def echo_plus_derivative(scenario: Scenario, a, s: float, t: float):
    """Right side of ``d/dt breve(s, t) alpha(t, s) a = -i breve(s, t)[h(t), alpha(t, s) a]``."""
    free, coupled = propagators(scenario)
    x = as_matrix(coupled(a, t, s))
    c = local_commutator(scenario.coupling.kernels(t), x)
    return _like(a, -1j * as_matrix(free(c, s, t)))


def echo_minus_derivative(scenario: Scenario, a, s: float, t: float):
    """Right side of ``d/dt alpha(s, t) breve(t, s) a = i alpha(s, t)[h(t), breve(t, s) a]``."""
    free, coupled = propagators(scenario)
    x = as_matrix(free(a, t, s))
    c = local_commutator(scenario.coupling.kernels(t), x)
    return _like(a, 1j * as_matrix(coupled(c, s, t)))
