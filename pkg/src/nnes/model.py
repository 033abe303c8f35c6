"""Scenario construction: system and reservoir Hamiltonians, couplings, numerics.

A scenario is built from a JSON-like document (see :data:`CONFIG_SCHEMA`).
Complex matrix entries may be given as plain numbers or ``[re, im]`` pairs.
The coupling may only touch the small system and the first site of each
reservoir chain.
"""
from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .opcore import (
    LayoutError,
    LocalTerm,
    Operator,
    SpaceLayout,
    check_hermitian,
    commutator,
    embed,
    op_norm,
    place,
    spin_matrices,
    PAULI,
)


class ConfigError(ValueError):
    """Raised for configuration documents that fail validation."""


_NUMBER_OR_PAIR = {
    "oneOf": [
        {"type": "number"},
        {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
    ]
}
_MATRIX = {"type": "array", "minItems": 1, "items": {"type": "array", "minItems": 1, "items": _NUMBER_OR_PAIR}}
_ENVELOPE = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["constant", "sinusoid", "smooth_step"]},
        "amplitude": {"type": "number"},
        "frequency": {"type": "number"},
        "phase": {"type": "number"},
        "start": {"type": "number"},
        "width": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["sigma", "reservoirs"],
    "properties": {
        "name": {"type": "string"},
        "sigma": {
            "type": "object",
            "required": ["dim"],
            "properties": {"dim": {"type": "integer", "minimum": 1}, "hamiltonian": _MATRIX},
            "additionalProperties": False,
        },
        "sigma0": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["maximally_mixed", "gibbs", "matrix"]},
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "matrix": _MATRIX,
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "reservoirs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["model", "length", "beta"],
                "properties": {
                    "model": {"enum": ["XY", "XXZ", "transverse-Ising"]},
                    "length": {"type": "integer", "minimum": 1},
                    "site_dim": {"type": "integer", "minimum": 2},
                    "params": {"type": "object", "additionalProperties": {"type": "number"}},
                    "beta": {"type": "number", "exclusiveMinimum": 0},
                },
                "additionalProperties": False,
            },
        },
        "coupling": {
            "type": "object",
            "properties": {
                "terms": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "site_support": {
                                "type": "array",
                                "minItems": 1,
                                "items": {
                                    "type": "array",
                                    "items": {"type": "integer", "minimum": 0},
                                    "minItems": 2,
                                    "maxItems": 2,
                                },
                            },
                            "matrix": _MATRIX,
                            "builder": {"enum": ["xx"]},
                            "reservoir": {"type": "integer", "minimum": 1},
                            "strength": {"type": "number"},
                            "envelope": _ENVELOPE,
                            "label": {"type": "string"},
                        },
                        "oneOf": [
                            {"required": ["site_support", "matrix"]},
                            {"required": ["builder", "reservoir", "strength"]},
                        ],
                        "additionalProperties": False,
                    },
                }
            },
            "additionalProperties": False,
        },
        "numerics": {
            "type": "object",
            "properties": {
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "plateau_window": {"type": "number", "exclusiveMinimum": 0},
                "tol_quad": {"type": "number", "exclusiveMinimum": 0},
                "tol_exact": {"type": "number", "exclusiveMinimum": 0},
                "tol_plateau": {"type": "number", "exclusiveMinimum": 0},
                "scan_step": {"type": "number", "exclusiveMinimum": 0},
                "recurrence_factor": {"type": "number", "exclusiveMinimum": 1},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


def parse_matrix(data) -> np.ndarray:
    """Nested lists with real or ``[re, im]`` entries -> complex array."""
    rows = []
    for row in data:
        rows.append([complex(x[0], x[1]) if isinstance(x, (list, tuple)) else complex(x) for x in row])
    m = np.array(rows, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"matrix must be square, got shape {m.shape}")
    return m


def format_matrix(m: np.ndarray) -> list:
    """Inverse of :func:`parse_matrix` (always emits ``[re, im]`` pairs)."""
    return [[[float(z.real), float(z.imag)] for z in row] for row in np.asarray(m)]


# envelopes --------------------------------------------------------------------

def smootherstep(x):
    """C^2 ramp from 0 (x <= 0) to 1 (x >= 1)."""
    x = np.clip(x, 0.0, 1.0)
    return x ** 3 * (x * (6 * x - 15) + 10)


@dataclass(frozen=True)
class Envelope:
    """Bounded continuous real drive profile.

    ``constant``: ``amplitude``; ``sinusoid``: ``amplitude * sin(frequency t + phase)``;
    ``smooth_step``: ``amplitude * S((t - start) / width)`` with a C^2 ramp ``S``.
    """

    kind: str = "constant"
    amplitude: float = 1.0
    frequency: float = 0.0
    phase: float = 0.0
    start: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "sinusoid", "smooth_step"):
            raise ConfigError(f"unknown envelope kind {self.kind!r}")
        if self.width <= 0:
            raise ConfigError("envelope width must be positive")

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return self.amplitude
        if self.kind == "sinusoid":
            return self.amplitude * math.sin(self.frequency * t + self.phase)
        return self.amplitude * float(smootherstep((t - self.start) / self.width))

    @property
    def sup(self) -> float:
        return abs(self.amplitude)

    @classmethod
    def from_config(cls, d: dict) -> "Envelope":
        return cls(**d)


def bump(amplitude: float, start: float, rise: float, stop: float) -> tuple[Envelope, Envelope]:
    """A smooth bump: ramp up on ``[start, start+rise]``, down on ``[stop, stop+rise]``.

    Returned as two smooth-step envelopes of opposite sign, to be attached to
    the same operator.
    """
    return (Envelope("smooth_step", amplitude, start=start, width=rise),
            Envelope("smooth_step", -amplitude, start=stop, width=rise))


# coupling ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CouplingTerm:
    """A local operator on flat sites, optionally multiplied by an envelope."""

    layout: SpaceLayout
    local: np.ndarray
    sites: tuple[int, ...]
    envelope: Envelope | None = None
    label: str = ""

    @functools.cached_property
    def operator(self) -> Operator:
        return place(self.local, self.sites, self.layout, self.label)

    @functools.cached_property
    def kernel(self) -> LocalTerm:
        return LocalTerm(self.local, self.sites, self.layout)

    def weight(self, t: float) -> float:
        return 1.0 if self.envelope is None else self.envelope(t)

    @property
    def is_static(self) -> bool:
        return self.envelope is None or self.envelope.kind == "constant"

    def scaled(self, c: float) -> "CouplingTerm":
        return dataclasses.replace(self, local=c * self.local)


def coupling_sites(layout: SpaceLayout) -> frozenset[int]:
    """Flat sites the coupling may touch: the system and each reservoir's first site."""
    allowed = {layout.global_site(0, i) for i in range(len(layout.site_map[0]))}
    allowed |= {layout.global_site(a, 0) for a in range(1, len(layout.dims))}
    return frozenset(allowed)


class CouplingSchedule:
    """``h(t) = static_part + sum_i envelope_i(t) K_i``.

    Parameters
    ----------
    layout : SpaceLayout
    terms : sequence of CouplingTerm
        Terms with no envelope, or a constant one, are folded into the static part.
    """

    def __init__(self, layout: SpaceLayout, terms: Sequence[CouplingTerm] = ()):
        self.layout = layout
        self.terms = tuple(terms)
        allowed = coupling_sites(layout)
        for term in self.terms:
            if term.layout != layout:
                raise LayoutError("coupling term on a different layout")
            bad = set(term.sites) - allowed
            if bad:
                raise ConfigError(f"coupling term {term.label!r} touches non-boundary sites {sorted(bad)}")
            check_hermitian(term.local, f"coupling term {term.label!r}")
        self.static_terms = tuple(t for t in self.terms if t.is_static)
        self.drive_terms = tuple(t for t in self.terms if not t.is_static)

    @functools.cached_property
    def static_part(self) -> Operator:
        m = np.zeros((self.layout.total_dim,) * 2, dtype=complex)
        for term in self.static_terms:
            m += term.weight(0.0) * term.operator.matrix
        return Operator(self.layout, m, "h_static")

    @property
    def is_static(self) -> bool:
        return not self.drive_terms

    @property
    def is_zero(self) -> bool:
        return all(not np.any(t.local) or (t.envelope is not None and t.envelope.amplitude == 0)
                   for t in self.terms)

    def at(self, t: float) -> Operator:
        m = self.static_part.matrix.copy()
        for term in self.drive_terms:
            w = term.weight(t)
            if w:
                m += w * term.operator.matrix
        return Operator(self.layout, m, f"h({t:g})")

    def kernels(self, t: float) -> list[tuple[float, LocalTerm]]:
        """Weighted local kernels of ``h(t)`` for fast commutators."""
        return [(term.weight(t), term.kernel) for term in self.terms if term.weight(t) != 0]

    def key(self, t: float) -> tuple[float, ...]:
        """Drive weights at ``t``; equal keys mean equal ``h``."""
        return tuple(float(term.weight(t)) for term in self.drive_terms)

    @functools.cached_property
    def bound(self) -> float:
        """Upper bound on ``sup_t ||h(t)||``."""
        b = op_norm(self.static_part)
        for term in self.drive_terms:
            b += term.envelope.sup * op_norm(term.local)
        return b

    def scaled(self, c: float) -> "CouplingSchedule":
        return CouplingSchedule(self.layout, [t.scaled(c) for t in self.terms])

    def __add__(self, other: "CouplingSchedule") -> "CouplingSchedule":
        if other.layout != self.layout:
            raise LayoutError("adding schedules on different layouts")
        return CouplingSchedule(self.layout, self.terms + other.terms)


def coupling_at(schedule: CouplingSchedule, t: float) -> Operator:
    """The coupling operator ``h(t)``."""
    return schedule.at(t)


def xx_local(strength: float, d: int = 2) -> np.ndarray:
    """``(g/2)(X X + Y Y)`` on a system site of dimension 2 and a reservoir site."""
    x0, y0 = PAULI["X"], PAULI["Y"]
    x1, y1, _ = spin_matrices(d)
    return strength / 2 * (np.kron(x0, x1) + np.kron(y0, y1))


# reservoirs -------------------------------------------------------------------

_DEFAULT_PARAMS = {
    "XY": {"J": 1.0, "gamma": 0.0, "h": 0.0},
    "XXZ": {"J": 1.0, "delta": 1.0, "h": 0.0},
    "transverse-Ising": {"J": 1.0, "g": 1.0},
}


def _chain_op(local: np.ndarray, site: int, d: int, length: int) -> np.ndarray:
    return np.kron(np.kron(np.eye(d ** site), local), np.eye(d ** (length - site - 1)))


@dataclass(frozen=True)
class ReservoirSpec:
    """A nearest-neighbour spin chain at inverse temperature ``beta``.

    Models (``X, Y, Z`` are twice the spin matrices, Paulis for ``site_dim=2``)::

        XY                (J/2) sum[(1+gamma) X X + (1-gamma) Y Y] + (h/2) sum Z
        XXZ               (J/2) sum[X X + Y Y + delta Z Z] + (h/2) sum Z
        transverse-Ising  -J sum Z Z - g sum X
    """

    model: str = "XY"
    length: int = 1
    beta: float = 1.0
    site_dim: int = 2
    params: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.model not in _DEFAULT_PARAMS:
            raise ConfigError(f"unknown reservoir model {self.model!r}")
        if self.length < 1:
            raise ConfigError("chain length must be at least 1")
        if not self.beta > 0:
            raise ConfigError("inverse temperature must be positive")
        unknown = set(dict(self.params)) - set(_DEFAULT_PARAMS[self.model])
        if unknown:
            raise ConfigError(f"unknown parameters {sorted(unknown)} for model {self.model}")

    @property
    def parameters(self) -> dict[str, float]:
        p = dict(_DEFAULT_PARAMS[self.model])
        p.update(dict(self.params))
        return p

    @property
    def dim(self) -> int:
        return self.site_dim ** self.length

    def hamiltonian(self) -> np.ndarray:
        p, d, n = self.parameters, self.site_dim, self.length
        x, y, z = spin_matrices(d)
        h = np.zeros((self.dim, self.dim), dtype=complex)
        ops = lambda m, i: _chain_op(m, i, d, n)
        for i in range(n - 1):
            if self.model == "XY":
                h += p["J"] / 2 * ((1 + p["gamma"]) * ops(x, i) @ ops(x, i + 1)
                                   + (1 - p["gamma"]) * ops(y, i) @ ops(y, i + 1))
            elif self.model == "XXZ":
                h += p["J"] / 2 * (ops(x, i) @ ops(x, i + 1) + ops(y, i) @ ops(y, i + 1)
                                   + p["delta"] * ops(z, i) @ ops(z, i + 1))
            else:
                h -= p["J"] * ops(z, i) @ ops(z, i + 1)
        for i in range(n):
            if self.model == "transverse-Ising":
                h -= p["g"] * ops(x, i)
            else:
                h += p["h"] / 2 * ops(z, i)
        return h


# numerics and scenario ----------------------------------------------------------

@dataclass(frozen=True)
class Numerics:
    """Grid step, truncation horizon and tolerances.

    ``tol_plateau`` is relative to ``||A||``; ``scan_step`` is the lag spacing
    of plateau and commutator-decay scans; ``recurrence_factor`` is the rebound
    ratio that declares a finite-size recurrence.
    """

    dt: float = 0.01
    horizon: float = 20.0
    plateau_window: float = 5.0
    tol_quad: float = 1e-6
    tol_exact: float = 1e-10
    tol_plateau: float = 1e-4
    scan_step: float = 0.05
    recurrence_factor: float = 3.0


@dataclass(frozen=True, eq=False)
class Scenario:
    layout: SpaceLayout
    sigma_hamiltonian: np.ndarray
    reservoirs: tuple[ReservoirSpec, ...]
    reservoir_hamiltonians: tuple[np.ndarray, ...]
    coupling: CouplingSchedule
    numerics: Numerics = field(default_factory=Numerics)
    sigma0: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        n = self.layout.sigma_dim
        check_hermitian(self.sigma_hamiltonian, "system Hamiltonian")
        if self.sigma_hamiltonian.shape != (n, n):
            raise LayoutError("system Hamiltonian does not match layout")
        for spec, h in zip(self.reservoirs, self.reservoir_hamiltonians):
            check_hermitian(h, f"{spec.model} reservoir Hamiltonian")
        if self.sigma0 is None:
            object.__setattr__(self, "sigma0", np.eye(n, dtype=complex) / n)
        elif self.sigma0.shape != (n, n):
            raise LayoutError("initial system state does not match layout")

    @property
    def betas(self) -> tuple[float, ...]:
        return tuple(r.beta for r in self.reservoirs)

    @property
    def factor_hamiltonians(self) -> list[np.ndarray]:
        """Free Hamiltonians per subsystem, system first."""
        return [self.sigma_hamiltonian, *self.reservoir_hamiltonians]

    @functools.cached_property
    def h_free(self) -> Operator:
        m = np.zeros((self.layout.total_dim,) * 2, dtype=complex)
        for a, h in enumerate(self.factor_hamiltonians):
            m += embed(h, a, self.layout).matrix
        return Operator(self.layout, m, "H_free")

    def boundary_site(self, a: int) -> int:
        """Flat index of the first site of reservoir ``a`` (1-based)."""
        return self.layout.global_site(a, 0)

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def with_numerics(self, **changes) -> "Scenario":
        return self.replace(numerics=dataclasses.replace(self.numerics, **changes))

    def perturbed(self, k: CouplingSchedule, lam: float) -> "Scenario":
        """Same scenario with coupling ``h + lam k``."""
        if lam == 0:
            return self
        return self.replace(coupling=self.coupling + k.scaled(lam))


def build_layout(sigma_dim: int, reservoirs: Sequence[ReservoirSpec]) -> SpaceLayout:
    return SpaceLayout(((sigma_dim,),) + tuple((r.site_dim,) * r.length for r in reservoirs))


def build_scenario(config: dict) -> Scenario:
    """Validate a configuration document and assemble the scenario."""
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise ConfigError(f"invalid config at '{path}': {exc.message}") from None

    sig = config["sigma"]
    n = sig["dim"]
    h_sys = parse_matrix(sig["hamiltonian"]) if "hamiltonian" in sig else np.zeros((n, n), complex)
    if h_sys.shape != (n, n):
        raise ConfigError(f"system Hamiltonian must be {n}x{n}")
    reservoirs = tuple(
        ReservoirSpec(r["model"], r["length"], r["beta"], r.get("site_dim", 2),
                      tuple(sorted(r.get("params", {}).items())))
        for r in config["reservoirs"]
    )
    layout = build_layout(n, reservoirs)
    terms = [_build_term(t, layout, i) for i, t in enumerate(config.get("coupling", {}).get("terms", []))]
    coupling = CouplingSchedule(layout, terms)
    numerics = Numerics(**config.get("numerics", {}))
    scenario = Scenario(layout, h_sys, reservoirs, tuple(r.hamiltonian() for r in reservoirs),
                        coupling, numerics, name=config.get("name", ""))
    if "sigma0" in config:
        scenario = scenario.replace(sigma0=_build_sigma0(config["sigma0"], h_sys))
    return scenario


def _build_term(t: dict, layout: SpaceLayout, index: int) -> CouplingTerm:
    env = Envelope.from_config(t["envelope"]) if "envelope" in t else None
    label = t.get("label", f"term{index}")
    if "builder" in t:
        a = t["reservoir"]
        if a >= len(layout.dims) or layout.sigma_dim != 2:
            raise ConfigError("xx builder needs a qubit system and an existing reservoir")
        d = layout.site_map[a][0]
        local = xx_local(t["strength"], d)
        sites = (layout.global_site(0, 0), layout.global_site(a, 0))
    else:
        sites = []
        for sub, site in t["site_support"]:
            if sub >= len(layout.dims) or site >= len(layout.site_map[sub]):
                raise ConfigError(f"site [{sub}, {site}] does not exist")
            if sub > 0 and site != 0:
                raise ConfigError(f"coupling term {label!r} touches bulk site {site} of reservoir {sub}")
            sites.append(layout.global_site(sub, site))
        local = parse_matrix(t["matrix"])
        sites = tuple(sites)
    try:
        check_hermitian(local, f"coupling term {label!r}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return CouplingTerm(layout, local, sites, env, label)


def _build_sigma0(d: dict, h_sys: np.ndarray) -> np.ndarray:
    n = h_sys.shape[0]
    if d["kind"] == "maximally_mixed":
        return np.eye(n, dtype=complex) / n
    if d["kind"] == "gibbs":
        from .moller import gibbs_state

        return gibbs_state(h_sys, d.get("beta", 1.0))
    return parse_matrix(d["matrix"])


def load_scenario(path: str | Path) -> Scenario:
    with open(path) as fh:
        try:
            config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return build_scenario(config)


def default_config(length: int = 4, strength: float = 0.3, betas=(0.5, 1.0), omega: float = 1.0,
                   J: float = 1.0) -> dict:
    """Two-temperature XY scenario: qubit system, two XY chains, XX boundary coupling."""
    return {
        "name": f"two-temperature XY, L={length}, g={strength}",
        "sigma": {"dim": 2, "hamiltonian": [[omega / 2, 0.0], [0.0, -omega / 2]]},
        "reservoirs": [
            {"model": "XY", "length": length, "site_dim": 2, "params": {"J": J}, "beta": b}
            for b in betas
        ],
        "coupling": {
            "terms": [
                {"builder": "xx", "reservoir": a, "strength": strength, "label": f"xx{a}"}
                for a in range(1, len(betas) + 1)
            ]
        },
        "numerics": {"dt": 0.01, "horizon": 20.0, "plateau_window": 5.0, "tol_quad": 1e-6,
                     "tol_exact": 1e-10},
    }


def minimal_config() -> dict:
    """Qubit system and one single-site reservoir with no coupling (4-dim space)."""
    return {
        "name": "minimal",
        "sigma": {"dim": 2, "hamiltonian": [[0.5, 0.0], [0.0, -0.5]]},
        "reservoirs": [{"model": "XY", "length": 1, "beta": 1.0}],
        "coupling": {"terms": []},
    }


def default_scenario(**kw) -> Scenario:
    return build_scenario(default_config(**kw))


# observables --------------------------------------------------------------------

def site_pauli(scenario: Scenario, subsystem: int, site: int, which: str) -> Operator:
    """Pauli (or twice the spin matrix) ``which`` in {X, Y, Z} on one site."""
    d = scenario.layout.site_map[subsystem][site]
    mats = dict(zip("XYZ", spin_matrices(d)))
    return embed(mats[which.upper()], subsystem, scenario.layout, site, f"{which}[{subsystem},{site}]")


def reservoir_coupling(scenario: Scenario, a: int, t: float = 0.0) -> Operator:
    """The part of ``h(t)`` acting on reservoir ``a``'s boundary site."""
    site = scenario.boundary_site(a)
    m = np.zeros((scenario.layout.total_dim,) * 2, dtype=complex)
    for term in scenario.coupling.terms:
        if site in term.sites:
            m += term.weight(t) * term.operator.matrix
    return Operator(scenario.layout, m, f"h_{a}")


def energy_current(scenario: Scenario, a: int, t: float = 0.0) -> Operator:
    """``i[H_a, h_a]``: energy flowing out of reservoir ``a`` into the coupling.

    Only the boundary bond of ``H_a`` fails to commute with ``h_a``, so this is
    the same as using the boundary part of ``H_a`` alone.
    """
    h_a = embed(scenario.reservoir_hamiltonians[a - 1], a, scenario.layout)
    return (commutator(h_a, reservoir_coupling(scenario, a, t)) * 1j).relabel(f"J_{a}")
