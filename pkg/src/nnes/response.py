"""Linear and higher-order response of the NNES to a change ``h -> h + lam k``.

With ``K_tau = alpha(t, tau) k(tau)`` and ``R_t`` the NNES density::

    d/dlam rho_t^lam(A)      = i int_{-T}^t dtau rho_t([K_tau, A])
    d^n/dlam^n rho_t^lam(A)  = i^n n! int_{tau_1 < ... < tau_n < t} rho_t([K_1, [K_2, ... [K_n, A]]])

The first-order value is computed as a scalar phase sum in the coupled
eigenbasis.  The Dyson terms go through a separate route: the nested
commutators are moved onto the density,

    P_1(tau) = int^tau [R_t, K],   P_l(tau) = int^tau [P_{l-1}, K],   D_n = i^n n! tr(P_n(t) A),

and the cumulative integrals are taken pair by pair with the three-point
rule of :func:`nnes.quadrature.cumulative_pair`.  Finite-difference oracles
rebuild the full NNES at ``h + lam k``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .evolution import propagators
from .model import CouplingSchedule, CouplingTerm, Scenario, bump
from .moller import ScanTracker, _cached_density, nnes_expect, reference_state
from .opcore import Operator, as_matrix, local_commutator, op_norm
from .quadrature import StreamingSimpson, cumulative_pair, simpson_weights, time_grid

FD_EPS_FIRST = 1e-4
FD_EPS_SECOND = 1e-2
MAX_ORDER = 3
TOL_SAFETY = 2.0


# perturbations ------------------------------------------------------------------

def _boundary_terms(scenario: Scenario, reservoir: int):
    site = scenario.boundary_site(reservoir)
    terms = [t for t in scenario.coupling.terms if site in t.sites]
    if not terms:
        raise ValueError(f"no coupling term touches reservoir {reservoir}")
    return terms


def bump_perturbation(scenario: Scenario, reservoir: int = 1, amplitude: float = 1.0,
                      start: float = -6.0, rise: float = 1.0, stop: float = -3.0) -> CouplingSchedule:
    """``k(tau) = b(tau) h_a`` with ``h_a`` the coupling of one reservoir and ``b`` a smooth bump."""
    up, down = bump(amplitude, start, rise, stop)
    terms = []
    for t in _boundary_terms(scenario, reservoir):
        terms.append(CouplingTerm(scenario.layout, t.local, t.sites, up, f"k_up_{t.label}"))
        terms.append(CouplingTerm(scenario.layout, t.local, t.sites, down, f"k_down_{t.label}"))
    return CouplingSchedule(scenario.layout, terms)


def static_perturbation(scenario: Scenario, reservoir: int = 1, amplitude: float = 1.0) -> CouplingSchedule:
    """Time-independent ``k = amplitude h_a``."""
    terms = [CouplingTerm(scenario.layout, amplitude * t.local, t.sites, None, f"k_{t.label}")
             for t in _boundary_terms(scenario, reservoir)]
    return CouplingSchedule(scenario.layout, terms)


def _components(k: CouplingSchedule):
    """``[(weight function, matrix)]`` with ``k(tau) = sum w(tau) K``."""
    out = []
    if k.static_terms:
        out.append((lambda tau: 1.0, k.static_part.matrix))
    for term in k.drive_terms:
        out.append((term.weight, term.operator.matrix))
    return out


def _k_matrix(k: CouplingSchedule, tau: float) -> np.ndarray:
    return k.at(tau).matrix


# reports ------------------------------------------------------------------------

@dataclass
class ResponseReport:
    """Formula value against its finite-difference oracle.

    ``fd_error`` is the Richardson estimate ``|fd(2 eps) - fd(eps)| / 3`` of the
    ``C1 eps^2`` truncation term.  The ``C2 tol_quad`` term is the quadrature
    estimate ``quad_error`` plus ``step_error``, the Richardson estimate
    ``|fd(2 dt) - fd(dt)| / 3`` of the time-stepping error in the oracle (zero
    when the perturbed coupling is static and the propagators are exact).  All
    are measured, and ``c1``/``c2`` report the implied constants.  Being
    asymptotic estimates, their sum is doubled in ``tol_fd`` (``TOL_SAFETY``)
    to cover higher-order remainders.
    """

    order: int
    t: float
    formula_value: complex
    fd_value: complex = complex("nan")
    epsilon: float = math.nan
    horizon: float = math.nan
    tail_bound: float = math.nan
    quad_error: float = 0.0
    fd_error: float = math.nan
    step_error: float = 0.0
    tol_quad: float = 1e-6
    flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def difference(self) -> float:
        return abs(self.formula_value - self.fd_value)

    @property
    def relative_difference(self) -> float:
        return self.difference / max(1.0, abs(self.fd_value))

    @property
    def tol_fd(self) -> float:
        fd = 0.0 if math.isnan(self.fd_error) else self.fd_error
        return TOL_SAFETY * (fd + self.quad_error + self.step_error)

    @property
    def c1(self) -> float:
        return self.fd_error / self.epsilon ** 2 if self.epsilon else math.nan

    @property
    def c2(self) -> float:
        return (self.quad_error + self.step_error) / self.tol_quad

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("formula_value", "fd_value"):
            z = complex(d.pop(key))
            d[key] = {"re": z.real, "im": z.imag}
        d.update(difference=self.difference, relative_difference=self.relative_difference,
                 tol_fd=self.tol_fd, c1=self.c1, c2=self.c2)
        return _finite(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _finite(x):
    # JSON has no inf/nan
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


# first order ----------------------------------------------------------------------

def _sparse_phase_integral(spectrum, m_eig: np.ndarray, comps, nodes, t: float, h: float):
    """``int w(tau) tr(M e^{iH(tau-t)} K e^{-iH(tau-t)}) dtau`` summed over ``comps``.

    Only eigen-index pairs where some ``M~^T * K~`` is nonzero are kept, so
    conserved sectors are exploited automatically.  Returns the Simpson total
    and its error estimate along ``nodes`` (signed step ``h``).
    """
    gs = [m_eig.T * spectrum.to_eigenbasis(kmat) for _, kmat in comps]
    scale = max((np.abs(g).max() for g in gs), default=0.0)
    if scale == 0:
        return 0j, 0.0
    keep = np.zeros(gs[0].shape, bool)
    for g in gs:
        keep |= np.abs(g) > 1e-15 * scale
    omega = spectrum.gaps[keep]
    vecs = np.array([g[keep] for g in gs])
    n = len(nodes) - 1
    acc = StreamingSimpson(n, h)
    factor = np.exp(1j * h * omega)
    for j, tau in enumerate(nodes):
        if j % 64 == 0:
            ph = np.exp(1j * (tau - t) * omega)
        else:
            ph *= factor
        ws = np.array([w(tau) for w, _ in comps])
        if not ws.any():
            acc.add(j, 0.0)
            continue
        acc.add(j, complex((ws[:, None] * vecs).sum(axis=0) @ ph))
    return complex(acc.total), acc.error_estimate


def response_formula(scenario: Scenario, a, t: float, k: CouplingSchedule,
                     horizon: float | None = None, sigma0=None):
    """``i int_{-T}^t dtau rho_t([alpha(t, tau) k(tau), A])``; returns ``(value, error)``.

    Uses ``rho_t([K, A]) = tr([A, R_t] K)``.
    """
    horizon = scenario.numerics.horizon if horizon is None else horizon
    density, dens_err = _cached_density(scenario, t, horizon, sigma0)
    am = as_matrix(a)
    m = am @ density - density @ am
    comps = _components(k)
    if not comps or k.is_zero:
        return 0j, 0.0
    free, coupled = propagators(scenario)
    nodes = time_grid(t, -horizon, coupled.dt)
    n = len(nodes) - 1
    h = (nodes[-1] - nodes[0]) / n
    if coupled.static:
        total, err = _sparse_phase_integral(coupled.spectrum, coupled.spectrum.to_eigenbasis(m),
                                            comps, nodes, t, h)
    else:
        acc = StreamingSimpson(n, h)
        for j, u, w in coupled.frames(t, -horizon):
            x = w.conj().T @ m @ w
            acc.add(j, complex(np.einsum("ij,ji->", x, _k_matrix(k, u))))
        total, err = complex(acc.total), acc.error_estimate
    # the grid runs from t down to -T
    value = -1j * total
    kb = k.bound
    err += dens_err * 2 * op_norm(am) * kb * (t + horizon)
    return value, float(err)


def linear_response(scenario: Scenario, a, t: float, k: CouplingSchedule,
                    epsilon: float = FD_EPS_FIRST, horizon: float | None = None,
                    fd: bool = True, estimate_fd_error: bool = True,
                    check_plateau: bool = False) -> ResponseReport:
    """First-order response with its central-difference oracle.

    The oracle recomputes the NNES at ``h + eps k`` and ``h - eps k``.  With
    ``check_plateau`` the unperturbed NNES is scanned for a plateau (``k``
    does not change the integrand before its support) and failures are
    flagged.
    """
    horizon = scenario.numerics.horizon if horizon is None else horizon
    value, qerr = response_formula(scenario, a, t, k, horizon)
    rep = ResponseReport(1, t, value, epsilon=epsilon, horizon=horizon, quad_error=qerr,
                         tol_quad=scenario.numerics.tol_quad)
    if k.is_zero:
        rep.fd_value = 0j
        rep.fd_error = 0.0
        return rep
    if fd:
        rep.fd_value = central_difference(scenario, a, t, k, epsilon, horizon)
        if estimate_fd_error:
            wide = central_difference(scenario, a, t, k, 2 * epsilon, horizon)
            rep.fd_error = abs(wide - rep.fd_value) / 3
            if not (scenario.coupling.is_static and k.is_static):
                coarse = scenario.with_numerics(dt=2 * scenario.numerics.dt)
                rep.step_error = abs(central_difference(coarse, a, t, k, epsilon, horizon)
                                     - rep.fd_value) / 3
    if check_plateau:
        res = nnes_expect(scenario, a, t, horizon, tail=True)
        rep.tail_bound = res.tail_bound
        rep.flags.extend(res.flags)
    return rep


def perturbed_expect(scenario: Scenario, a, t: float, k: CouplingSchedule, lam: float,
                     horizon: float | None = None) -> complex:
    """``rho_t^lam(A)`` from a full NNES run with coupling ``h + lam k``."""
    return nnes_expect(scenario.perturbed(k, lam), a, t, horizon).value


def central_difference(scenario, a, t, k, epsilon=FD_EPS_FIRST, horizon=None) -> complex:
    plus = perturbed_expect(scenario, a, t, k, epsilon, horizon)
    minus = perturbed_expect(scenario, a, t, k, -epsilon, horizon)
    return (plus - minus) / (2 * epsilon)


def second_difference(scenario, a, t, k, epsilon=FD_EPS_SECOND, horizon=None) -> complex:
    plus = perturbed_expect(scenario, a, t, k, epsilon, horizon)
    zero = perturbed_expect(scenario, a, t, k, 0.0, horizon)
    minus = perturbed_expect(scenario, a, t, k, -epsilon, horizon)
    return (plus - 2 * zero + minus) / epsilon ** 2


def steady_response(scenario: Scenario, a, k: CouplingSchedule, t: float = 0.0,
                    horizon: float | None = None) -> ResponseReport:
    """``i int_0^T ds rho([alpha^{-s} k, A])`` for time-independent ``h`` and ``k``.

    ``rho`` is the NNES at ``t``.  The tail bound extrapolates the decay of
    ``|rho([alpha^{-s} k, A])|`` along the grid (``inf`` if it does not decay
    integrably).
    """
    if not scenario.coupling.is_static or not k.is_static:
        raise ValueError("steady response needs time-independent h and k")
    horizon = scenario.numerics.horizon if horizon is None else horizon
    density, dens_err = _cached_density(scenario, t, horizon, None)
    am = as_matrix(a)
    m = am @ density - density @ am
    rep = ResponseReport(1, t, 0j, horizon=horizon, tol_quad=scenario.numerics.tol_quad)
    rep.extra["kind"] = "steady"
    if k.is_zero:
        rep.tail_bound = 0.0
        return rep
    free, coupled = propagators(scenario)
    sp = coupled.spectrum
    nodes = time_grid(0.0, horizon, coupled.dt)
    n = len(nodes) - 1
    h = nodes[1] - nodes[0]
    g = sp.to_eigenbasis(m).T * sp.to_eigenbasis(k.static_part.matrix)
    keep = np.abs(g) > 1e-15 * max(np.abs(g).max(), 1e-300)
    omega, gv = sp.gaps[keep], g[keep]
    # alpha^{-s} k = e^{-iHs} k e^{iHs}
    vals = np.empty(n + 1, complex)
    factor = np.exp(-1j * h * omega)
    for j, s in enumerate(nodes):
        ph = np.exp(-1j * s * omega) if j % 64 == 0 else ph * factor
        vals[j] = gv @ ph
    w = simpson_weights(n, h)
    acc = StreamingSimpson(n, h)
    for j, v in enumerate(vals):
        acc.add(j, v)
    rep.formula_value = 1j * complex(w @ vals)
    rep.quad_error = acc.error_estimate + dens_err * 2 * op_norm(am) * k.bound * horizon
    num = scenario.numerics
    stride = max(1, int(round(num.scan_step / h)))
    tracker = ScanTracker(0.0, stride * h, num.plateau_window, num.tol_plateau,
                          op_norm(am) * k.bound, num.recurrence_factor)
    for v in np.abs(vals[::stride]):
        tracker.add(float(v))
    scan = tracker.report()
    # ScanTracker lags are measured downwards from t = 0
    scan.s = -scan.s
    rep.tail_bound = scan.tail_estimate
    if not scan.plateau_detected:
        rep.flags.append("no-plateau")
    if scan.recurrence_onset is not None:
        rep.flags.append(f"recurrence at s={-scan.recurrence_onset:g}")
    rep.extra["scan"] = {"exponent": scan.exponent, "plateau_s": scan.plateau_s}
    return rep


def equilibrium_spot_check(scenario: Scenario, a, k: CouplingSchedule, n_points: int = 32,
                           horizon: float | None = None) -> dict:
    """Compare ``rho([alpha^{-s} k, A])`` with its value in the coupled Gibbs state.

    Meant for one reservoir with ``sigma0`` the system Gibbs state at the same
    beta.  Returns the largest deviation on ``n_points`` lags in ``[0, T]`` and
    the largest real part (zero for Hermitian ``A`` and ``k`` by antisymmetry).
    """
    if len(set(scenario.betas)) != 1:
        raise ValueError("equilibrium check needs a single common beta")
    horizon = scenario.numerics.horizon if horizon is None else horizon
    beta = scenario.betas[0]
    density, _ = _cached_density(scenario, 0.0, horizon, None)
    free, coupled = propagators(scenario)
    if not coupled.static:
        raise ValueError("equilibrium check needs a static coupling")
    sp = coupled.spectrum
    p = np.exp(-beta * (sp.energies - sp.energies.min()))
    gibbs = sp.from_eigenbasis(np.diag(p / p.sum()))
    am, km = as_matrix(a), k.static_part.matrix
    dev, real = 0.0, 0.0
    for s in np.linspace(0.0, horizon, n_points):
        x = sp.evolve(km, -s)
        c = x @ am - am @ x
        v = np.einsum("ij,ji->", density, c)
        ref = np.einsum("ij,ji->", gibbs, c)
        dev = max(dev, abs(v - ref))
        real = max(real, abs(v.real))
    return {"max_deviation": float(dev), "max_real_part": float(real), "n_points": n_points}


# lambda-derivative of the propagator -------------------------------------------

def lambda_derivative_propagator(scenario: Scenario, a, s: float, t: float, k: CouplingSchedule):
    """``i int_s^t dtau alpha(s, tau)[k(tau), alpha(tau, t) A]`` at ``lam = 0``.

    Evaluated as ``i alpha(s, t)[int_s^t alpha(t, tau) k(tau) dtau, A]``, the
    inner integral by Simpson on the propagator grid.
    """
    am = as_matrix(a)
    if s == t or k.is_zero:
        return _wrap(a, np.zeros_like(am, dtype=complex))
    free, coupled = propagators(scenario)
    nodes = time_grid(t, s, coupled.dt)
    n = len(nodes) - 1
    h = (s - t) / n
    acc = StreamingSimpson(n, h)
    if coupled.static:
        sp = coupled.spectrum
        comps = [(w, sp.to_eigenbasis(km)) for w, km in _components(k)]
        for j, u in enumerate(nodes):
            ws = [w(u) for w, _ in comps]
            x = sum(wi * km for wi, (_, km) in zip(ws, comps) if wi)
            acc.add(j, sp.phases(u - t) * x if np.ndim(x) else 0.0)
        kint = sp.from_eigenbasis(acc.total) if np.ndim(acc.total) else np.zeros_like(am)
    else:
        for j, u, w in coupled.frames(t, s):
            acc.add(j, w @ _k_matrix(k, u) @ w.conj().T)
        kint = acc.total
    # accumulated int_t^s; flip to int_s^t
    kint = -np.asarray(kint)
    c = kint @ am - am @ kint
    return _wrap(a, 1j * as_matrix(coupled.evolve(c, s, t)))


def lambda_derivative_fd(scenario: Scenario, a, s: float, t: float, k: CouplingSchedule,
                         epsilon: float = FD_EPS_FIRST):
    """``(alpha^{+eps}(s, t) A - alpha^{-eps}(s, t) A) / (2 eps)`` with rebuilt propagators."""
    am = as_matrix(a)
    plus = as_matrix(propagators(scenario.perturbed(k, epsilon))[1].evolve(am, s, t))
    minus = as_matrix(propagators(scenario.perturbed(k, -epsilon))[1].evolve(am, s, t))
    return _wrap(a, (plus - minus) / (2 * epsilon))


def _wrap(template, m):
    if isinstance(template, Operator):
        return Operator(template.layout, m, template.label)
    return m


# Dyson terms ----------------------------------------------------------------------

class _Blocks:
    """Matrices stored as their diagonal blocks over a fixed partition."""

    def __init__(self, slices):
        self.slices = slices

    def split(self, m):
        return [m[sl, sl].copy() for sl in self.slices]

    def zeros(self):
        return [np.zeros((sl.stop - sl.start,) * 2, complex) for sl in self.slices]


def _block_partition(spectrum, mats, rtol=1e-12):
    """Use the spectrum's sectors when every matrix is block diagonal there."""
    full = [slice(0, spectrum.dim)]
    if spectrum.n_blocks == 1:
        return full
    inside = np.zeros((spectrum.dim,) * 2, bool)
    for sl in spectrum.slices:
        inside[sl, sl] = True
    for m in mats:
        scale = np.abs(m).max()
        if scale and np.abs(m[~inside]).max() > rtol * scale:
            return full
    return list(spectrum.slices)


def _forward_frames(coupled, nodes):
    """``W_j = U(t, tau_j)`` for ascending ``nodes`` ending at ``t``."""
    dim = coupled._h_free.shape[0]
    fwd = [np.eye(dim, dtype=complex)]
    for a, b in zip(nodes[:-1], nodes[1:]):
        fwd.append(coupled.step(a, b) @ fwd[-1])
    total = fwd[-1]
    return [total @ f.conj().T for f in fwd]


def dyson_terms(scenario: Scenario, a, t: float, order: int, k: CouplingSchedule,
                horizon: float | None = None, sigma0=None) -> list[complex]:
    """``[D_1, ..., D_order]`` with ``D_n = d^n/dlam^n rho_t^lam(A)`` at ``lam = 0``."""
    if order not in range(1, MAX_ORDER + 1):
        raise ValueError(f"Dyson order must be in 1..{MAX_ORDER}, got {order}")
    horizon = scenario.numerics.horizon if horizon is None else horizon
    if k.is_zero:
        return [0j] * order
    density, _ = _cached_density(scenario, t, horizon, sigma0)
    am = as_matrix(a)
    free, coupled = propagators(scenario)
    nodes = time_grid(t, -horizon, coupled.dt)[::-1]
    n = len(nodes) - 1
    h = (nodes[-1] - nodes[0]) / n
    comps = _components(k)
    if coupled.static:
        sp = coupled.spectrum
        r_eig = sp.to_eigenbasis(density)
        k_eig = [sp.to_eigenbasis(km) for _, km in comps]
        parts = _block_partition(sp, [r_eig, *k_eig])
        blk = _Blocks(parts)
        r_b = blk.split(r_eig)
        k_b = [blk.split(x) for x in k_eig]
        gaps = [sp.gaps[sl, sl] for sl in parts]
        a_b = blk.split(sp.to_eigenbasis(am))

        def kernel(j):
            ws = [w(nodes[j]) for w, _ in comps]
            if not any(ws):
                return None
            out = []
            for b, g in enumerate(gaps):
                x = sum(wi * kb[b] for wi, kb in zip(ws, k_b) if wi)
                out.append(np.exp(1j * (nodes[j] - t) * g) * x)
            return out
    else:
        blk = _Blocks([slice(0, density.shape[0])])
        r_b, a_b = [density], [am]
        frames = _forward_frames(coupled, nodes)

        def kernel(j):
            km = _k_matrix(k, nodes[j])
            if not np.any(km):
                return None
            w = frames[j]
            return [w @ km @ w.conj().T]

    def comm(x, kk):
        return [xb @ kb - kb @ xb for xb, kb in zip(x, kk)]

    # P[l] is the running value of level l+1 at the current node
    P = [blk.zeros() for _ in range(order)]

    def integrands(levels_at, kk):
        # integrand of level l uses the level l-1 value at the same node
        if kk is None:
            return None
        out = [comm(r_b, kk)]
        for l in range(1, order):
            out.append(comm(levels_at[l - 1], kk))
        return out

    k0 = kernel(0)
    f0 = integrands(P, k0)
    for j0 in range(0, n, 2):
        k1, k2 = kernel(j0 + 1), kernel(j0 + 2)
        mid = [None] * order
        end = [None] * order
        f1 = [None] * order
        f2 = [None] * order
        for l in range(order):
            src_mid = r_b if l == 0 else mid[l - 1]
            src_end = r_b if l == 0 else end[l - 1]
            f1[l] = None if k1 is None else comm(src_mid, k1)
            f2[l] = None if k2 is None else comm(src_end, k2)
            fa = f0[l] if f0 is not None else None
            if fa is None and f1[l] is None and f2[l] is None:
                mid[l] = P[l]
                end[l] = P[l]
                continue
            z = [np.zeros_like(p) for p in P[l]]
            trip = [x if x is not None else z for x in (fa, f1[l], f2[l])]
            mid[l], end[l] = [], []
            for b in range(len(P[l])):
                half, full = cumulative_pair(trip[0][b], trip[1][b], trip[2][b], h)
                mid[l].append(P[l][b] + half)
                end[l].append(P[l][b] + full)
        P = end
        f0 = None if k2 is None else f2
    out = []
    for l in range(order):
        tr = sum(np.einsum("ij,ji->", pb, ab) for pb, ab in zip(P[l], a_b))
        out.append(complex((1j) ** (l + 1) * math.factorial(l + 1) * tr))
    return out


def dyson_term(scenario: Scenario, a, t: float, n: int, k: CouplingSchedule,
               horizon: float | None = None) -> complex:
    """``n``-th derivative of ``lam -> rho_t^lam(A)`` at zero, ``n`` in 1..3."""
    return dyson_terms(scenario, a, t, n, k, horizon)[n - 1]


def dyson_report(scenario: Scenario, a, t: float, n: int, k: CouplingSchedule,
                 epsilon: float | None = None, horizon: float | None = None, fd: bool = True) -> ResponseReport:
    """Dyson term with the matching finite-difference oracle (orders 1 and 2)."""
    horizon = scenario.numerics.horizon if horizon is None else horizon
    terms = dyson_terms(scenario, a, t, n, k, horizon)
    eps = epsilon if epsilon is not None else (FD_EPS_FIRST if n == 1 else FD_EPS_SECOND)
    rep = ResponseReport(n, t, terms[n - 1], epsilon=eps, horizon=horizon,
                         tol_quad=scenario.numerics.tol_quad)
    rep.extra["lower_orders"] = [{"re": z.real, "im": z.imag} for z in terms]
    if fd and n == 1:
        rep.fd_value = central_difference(scenario, a, t, k, eps, horizon)
    elif fd and n == 2:
        rep.fd_value = second_difference(scenario, a, t, k, eps, horizon)
    elif fd:
        rep.flags.append("no finite-difference oracle above second order")
    return rep


# sweeps and consistency -------------------------------------------------------------

@dataclass
class LambdaSweep:
    lambdas: np.ndarray
    values: np.ndarray

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "re_rho", "im_rho"])
        for lam, v in zip(self.lambdas, self.values):
            w.writerow([f"{lam:.10g}", f"{v.real:.15e}", f"{v.imag:.15e}"])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def lambda_sweep(scenario: Scenario, a, t: float, k: CouplingSchedule, lambdas,
                 horizon: float | None = None) -> LambdaSweep:
    lambdas = np.asarray(lambdas, float)
    vals = np.array([perturbed_expect(scenario, a, t, k, lam, horizon) for lam in lambdas])
    return LambdaSweep(lambdas, vals)


def taylor_consistency(scenario: Scenario, a, t: float, k: CouplingSchedule,
                       epsilon: float = FD_EPS_SECOND, horizon: float | None = None) -> dict:
    """Fit ``rho_t^lam(A)`` on ``lam in {-2, -1, 0, 1, 2} eps`` and compare with ``D_1``, ``D_2 / 2``.

    ``max_remainder`` is the largest ``|rho^lam - rho^0 - lam D_1 - lam^2 D_2 / 2|``
    over the sampled ``lam`` (the empirical uniformity of the expansion).
    """
    lams = epsilon * np.arange(-2, 3)
    sweep = lambda_sweep(scenario, a, t, k, lams, horizon)
    coeffs = np.polyfit(lams, sweep.values, 4)[::-1]
    d1, d2 = dyson_terms(scenario, a, t, 2, k, horizon)
    remainder = np.abs(sweep.values - sweep.values[2] - lams * d1 - lams ** 2 * d2 / 2)
    return {
        "fit_c1": complex(coeffs[1]), "fit_c2": complex(coeffs[2]),
        "dyson_1": d1, "dyson_2_half": d2 / 2,
        "diff_1": float(abs(coeffs[1] - d1)), "diff_2": float(abs(coeffs[2] - d2 / 2)),
        "max_remainder": float(remainder.max()), "sweep": sweep,
    }


def path_check(scenario: Scenario, a, t: float, k: CouplingSchedule, lam: float = FD_EPS_FIRST,
               s: float | None = None) -> dict:
    """Intermediate form ``i int_s^t dtau sigma(alpha^lam(s, tau)[k(tau), alpha(tau, t) A])``.

    At finite ``s`` it equals ``(sigma(alpha^lam(s, t) A) - sigma(alpha(s, t) A)) / lam``
    exactly; at ``s = -T`` it should approach the first-order formula as ``lam -> 0``.
    """
    s = -scenario.numerics.horizon if s is None else s
    if s >= t:
        raise ValueError("path check needs s < t")
    am = as_matrix(a)
    sigma = reference_state(scenario).density
    pert = scenario.perturbed(k, lam)
    _, cpl = propagators(pert)
    _, c0 = propagators(scenario)
    nodes = time_grid(s, t, cpl.dt)
    n = len(nodes) - 1
    h = (t - s) / n
    acc = StreamingSimpson(n, h)
    state = sigma.astype(complex)
    for j, tau in enumerate(nodes):
        if j:
            step = cpl.step(nodes[j - 1], tau)
            state = step @ state @ step.conj().T
        kt = k.kernels(tau)
        if not kt:
            acc.add(j, 0.0)
            continue
        x = as_matrix(c0.evolve(am, tau, t))
        acc.add(j, complex(np.einsum("ij,ji->", state, local_commutator(kt, x))))
    intermediate = 1j * complex(acc.total)
    u_pert = cpl.schrodinger(t, s)
    u0 = c0.schrodinger(t, s)
    finite = (np.einsum("ij,ji->", u_pert @ sigma @ u_pert.conj().T, am)
              - np.einsum("ij,ji->", u0 @ sigma @ u0.conj().T, am)) / lam
    formula, _ = response_formula(scenario, a, t, k, horizon=-s)
    return {"intermediate": intermediate, "finite_difference": complex(finite), "formula": formula,
            "exact_residual": float(abs(intermediate - finite)),
            "formula_residual": float(abs(intermediate - formula))}
