"""KMS strip functions, the factored cross norm, and modular flow.

For a Gibbs state ``sigma = e^{-beta H}/Z`` and ``H = sum_m E_m |m><m|``::

    F(z) = sigma(B breve^z A) = (1/Z) sum_{m,n} e^{-beta E_m} B_mn A_nm e^{i z (E_n - E_m)}

is entire; on the real axis it is the correlation ``sigma(B breve^t A)`` and on
``Im z = beta`` it equals ``sigma(breve^t A B)``.  The sum is evaluated as
``exp(-(beta - y) E_m - y E_n)`` with shifted energies, which never overflows
inside the strip.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .opcore import Spectrum, as_matrix, check_hermitian, op_norm

N_REAL, N_IMAG = 16, 8


@dataclass(frozen=True, eq=False)
class StripFunction:
    """``F(z) = sum_k a_k exp(-(beta - y) E_m[k] - y E_n[k]) e^{i t (E_n[k] - E_m[k])} / Z``."""

    e_m: np.ndarray
    e_n: np.ndarray
    amplitudes: np.ndarray
    beta: float
    z: float

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        t, y = z.real[..., None], z.imag[..., None]
        expo = -(self.beta - y) * self.e_m - y * self.e_n + 1j * t * (self.e_n - self.e_m)
        return (np.exp(expo) * self.amplitudes).sum(axis=-1) / self.z

    @property
    def frequencies(self) -> np.ndarray:
        return self.e_n - self.e_m


def kms_function(a, b, h, beta: float) -> StripFunction:
    """Strip function of ``t -> sigma_beta(b breve^t a)`` for one Gibbs factor."""
    if not beta > 0:
        raise ValueError("inverse temperature must be positive")
    hm = as_matrix(h)
    check_hermitian(hm, "Hamiltonian")
    w, v = np.linalg.eigh(hm)
    w = w - w.min()
    at = v.conj().T @ as_matrix(a) @ v
    bt = v.conj().T @ as_matrix(b) @ v
    amp = bt * at.T  # amp[m, n] = B_mn A_nm
    m_idx, n_idx = np.nonzero(np.abs(amp) > 0)
    z = float(np.exp(-beta * w).sum())
    return StripFunction(w[m_idx], w[n_idx], amp[m_idx, n_idx], float(beta), z)


def free_heisenberg(a, h, t: float) -> np.ndarray:
    """``e^{iHt} a e^{-iHt}`` for one factor."""
    return Spectrum(as_matrix(h)).evolve(as_matrix(a), t)


def kms_residuals(a, b, h, beta: float, ts) -> dict:
    """Compare the strip function with direct Gibbs expectations on both edges."""
    f = kms_function(a, b, h, beta)
    hm = as_matrix(h)
    w, v = np.linalg.eigh(hm)
    p = np.exp(-beta * (w - w.min()))
    rho = (v * (p / p.sum())) @ v.conj().T
    sp = Spectrum(hm)
    am, bm = as_matrix(a), as_matrix(b)
    lower, upper = [], []
    for t in ts:
        at = sp.evolve(am, t)
        lower.append(abs(f(t) - np.trace(rho @ bm @ at)))
        upper.append(abs(f(t + 1j * beta) - np.trace(rho @ at @ bm)))
    bound = op_norm(am) * op_norm(bm)
    return {"lower": float(max(lower)), "upper": float(max(upper)), "bound": bound}


# factored operators ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FactoredOperator:
    """``sum_j (x)_a B_ja`` over the reservoir factors.

    ``bound_1 = sum_j prod_a ||B_ja||`` is the cross-norm bound of this
    particular decomposition (an upper bound on the infimum).
    """

    terms: tuple

    def __post_init__(self):
        terms = tuple(tuple(np.asarray(f, dtype=complex) for f in term) for term in self.terms)
        if not terms:
            raise ValueError("need at least one term")
        shapes = [tuple(f.shape for f in term) for term in terms]
        if any(s != shapes[0] for s in shapes):
            raise ValueError("all terms need the same factor shapes")
        object.__setattr__(self, "terms", terms)

    @property
    def n_factors(self) -> int:
        return len(self.terms[0])

    @property
    def dims(self) -> tuple:
        return tuple(f.shape[0] for f in self.terms[0])

    @property
    def bound_1(self) -> float:
        return float(sum(np.prod([op_norm(f) for f in term]) for term in self.terms))

    def assembled(self) -> np.ndarray:
        out = 0
        for term in self.terms:
            k = term[0]
            for f in term[1:]:
                k = np.kron(k, f)
            out = out + k
        return out

    @property
    def norm(self) -> float:
        return op_norm(self.assembled())


def _kron_all(mats):
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out


@dataclass
class StripReport:
    max_boundary_residual: float
    max_abs: float
    bound: float
    boundary_max: float
    interior_max: float
    residuals: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    @property
    def bound_ok(self) -> bool:
        return self.max_abs <= self.bound + 1e-10

    @property
    def maximum_principle_ok(self) -> bool:
        return self.interior_max <= self.boundary_max + 1e-8

    def to_csv(self, fh=None) -> str:
        m = (len(self.rows[0]) - 3) // 2 if self.rows else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"re(z{a + 1})" for a in range(m)] + [f"im(z{a + 1})" for a in range(m)]
                   + ["abs_F", "boundary", "residual"])
        for row in self.rows:
            w.writerow([f"{x:.10g}" for x in row[:2 * m]] + [f"{row[2 * m]:.12e}", row[2 * m + 1],
                                                           f"{row[2 * m + 2]:.3e}"])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def multi_strip_check(a: FactoredOperator, b: FactoredOperator, hamiltonians, betas,
                      swap_roles: bool = False, n_real: int = N_REAL, n_imag: int = N_IMAG,
                      rows: bool = True) -> StripReport:
    """Several-variable strip function with independent times per reservoir.

    ``F(z) = sum_{i,j} prod_a F_a^{ij}(z_a)`` with ``F_a^{ij}`` the strip
    function of ``(A_ia, B_ja)``.  Checked against direct expectations

        sigma_>(B^(0)_j  hat-alpha^t A  B^(1)_j)

    for every ``eta`` in ``{0, 1}^m`` (factors with ``eta_a = 1`` moved to the
    right of ``A``), and ``|F|`` is sampled on the product strip.  The bound is
    ``||A|| bound_1(B)``, or ``bound_1(A) ||B||`` with ``swap_roles``.
    """
    if not isinstance(a, FactoredOperator) or not isinstance(b, FactoredOperator):
        raise TypeError("multi_strip_check needs FactoredOperator inputs")
    m = a.n_factors
    if b.n_factors != m or len(hamiltonians) != m or len(betas) != m:
        raise ValueError("factor counts of A, B, Hamiltonians and betas differ")
    if a.dims != b.dims:
        raise ValueError("A and B live on different factor dimensions")
    hs = [as_matrix(h) for h in hamiltonians]
    funcs = [[[kms_function(ai[k], bj[k], hs[k], betas[k]) for k in range(m)] for bj in b.terms]
             for ai in a.terms]

    def F(zs):
        # zs: list of m broadcastable complex arrays
        total = 0
        for i in range(len(a.terms)):
            for j in range(len(b.terms)):
                prod = 1
                for k in range(m):
                    prod = prod * funcs[i][j][k](zs[k])
                total = total + prod
        return total

    # direct oracle on boundary tuples
    gibbs = []
    for h, beta in zip(hs, betas):
        w, v = np.linalg.eigh(h)
        p = np.exp(-beta * (w - w.min()))
        gibbs.append((v * (p / p.sum())) @ v.conj().T)
    sigma = _kron_all(gibbs)
    spectra = [Spectrum(h) for h in hs]
    eyes = [np.eye(d) for d in a.dims]
    ts = np.linspace(-5.0, 5.0, n_real)
    residuals, point_res = {}, {}
    for eta in itertools.product((0, 1), repeat=m):
        worst = 0.0
        lefts = [_kron_all([bj[k] if eta[k] == 0 else eyes[k] for k in range(m)]) for bj in b.terms]
        rights = [_kron_all([bj[k] if eta[k] == 1 else eyes[k] for k in range(m)]) for bj in b.terms]
        for tidx in itertools.product(range(n_real), repeat=m):
            tvec = [ts[i] for i in tidx]
            at = sum(_kron_all([spectra[k].evolve(ai[k], tvec[k]) for k in range(m)]) for ai in a.terms)
            direct = sum(np.trace(sigma @ l @ at @ r) for l, r in zip(lefts, rights))
            zs = [tvec[k] + 1j * betas[k] * eta[k] for k in range(m)]
            res = float(abs(F(zs) - direct))
            point_res[tidx, eta] = res
            worst = max(worst, res)
        residuals["".join(map(str, eta))] = worst

    # sampled modulus on the product strip
    ys = [np.linspace(0.0, betas[k], n_imag) for k in range(m)]
    axes = []
    for k in range(m):
        zk = (ts[:, None] + 1j * ys[k][None, :])  # (n_real, n_imag)
        shape = [1] * (2 * m)
        shape[2 * k], shape[2 * k + 1] = n_real, n_imag
        axes.append(zk.reshape(shape))
    vals = np.abs(F(axes))
    on_edge = []
    for k in range(m):
        e = np.zeros(n_imag, bool)
        e[0] = e[-1] = True
        shape = [1] * (2 * m)
        shape[2 * k + 1] = n_imag
        on_edge.append(e.reshape(shape))
    boundary = np.logical_and.reduce(np.broadcast_arrays(*on_edge)) if m > 1 else np.broadcast_to(on_edge[0], vals.shape)
    boundary = np.broadcast_to(boundary, vals.shape)
    bound = b.bound_1 * a.norm if not swap_roles else a.bound_1 * b.norm
    report = StripReport(
        max_boundary_residual=max(residuals.values()),
        max_abs=float(vals.max()),
        bound=float(bound),
        boundary_max=float(vals[boundary].max()),
        interior_max=float(vals[~boundary].max()) if (~boundary).any() else 0.0,
        residuals=residuals,
    )
    if rows:
        for idx in np.ndindex(vals.shape):
            re = [ts[idx[2 * k]] for k in range(m)]
            im = [ys[k][idx[2 * k + 1]] for k in range(m)]
            if boundary[idx]:
                eta = "".join("1" if idx[2 * k + 1] == n_imag - 1 else "0" for k in range(m))
                flag = f"eta={eta}"
                res = point_res[tuple(idx[0::2]), tuple(int(c) for c in eta)]
            else:
                flag, res = "interior", 0.0
            report.rows.append(re + im + [float(vals[idx]), flag, res])
    return report


# modular flow ---------------------------------------------------------------------

def modular_flow(rho, a, t: float, rtol: float = 1e-14):
    """``rho^{it} a rho^{-it}`` from the eigendecomposition of a faithful density."""
    d = as_matrix(getattr(rho, "density", rho))
    check_hermitian(d, "density")
    p, v = np.linalg.eigh(d)
    if p.min() <= rtol * p.max():
        raise ValueError("modular flow needs a full-rank density")
    logp = np.log(p)
    am = as_matrix(a)
    at = v.conj().T @ am @ v
    ph = np.exp(1j * t * (logp[:, None] - logp[None, :]))
    out = v @ (ph * at) @ v.conj().T
    from .opcore import Operator

    if isinstance(a, Operator):
        return Operator(a.layout, out, a.label)
    return out
