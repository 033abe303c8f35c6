"""Dense operator algebra on a finite tensor-product space.

The space is ordered as ``(system, reservoir 1, ..., reservoir m)``. The
system slot has dimension ``n``; every reservoir slot is itself a chain of
sites, so a layout keeps the per-site dimensions of each subsystem as well as
the subsystem dimensions.

Operators are immutable: the wrapped matrix is copied on construction and
flagged read-only.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

HERMITIAN_RTOL = 1e-12


class LayoutError(ValueError):
    """Dimension or layout mismatch between operands."""


class NotHermitianError(ValueError):
    """A matrix required to be self-adjoint is not."""


@dataclass(frozen=True)
class SpaceLayout:
    """Per-subsystem site dimensions; subsystem 0 is the small system."""

    site_map: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        site_map = tuple(tuple(int(d) for d in sites) for sites in self.site_map)
        if not site_map:
            raise LayoutError("layout needs at least the system slot")
        for a, sites in enumerate(site_map):
            if not sites or any(d < 1 for d in sites):
                raise LayoutError(f"subsystem {a} has invalid site dimensions {sites}")
        object.__setattr__(self, "site_map", site_map)

    @classmethod
    def from_dims(cls, dims: Sequence[int]) -> "SpaceLayout":
        return cls(tuple((int(d),) for d in dims))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(math.prod(sites) for sites in self.site_map)

    @property
    def total_dim(self) -> int:
        return math.prod(self.dims)

    @property
    def sigma_dim(self) -> int:
        return self.dims[0]

    @property
    def reservoir_dim(self) -> int:
        return math.prod(self.dims[1:])

    @property
    def n_reservoirs(self) -> int:
        return len(self.site_map) - 1

    @property
    def flat_sites(self) -> tuple[int, ...]:
        return tuple(d for sites in self.site_map for d in sites)

    def global_site(self, subsystem: int, site: int = 0) -> int:
        """Index of ``site`` of ``subsystem`` in :attr:`flat_sites`."""
        if not 0 <= subsystem < len(self.site_map):
            raise LayoutError(f"subsystem index {subsystem} out of range")
        if not 0 <= site < len(self.site_map[subsystem]):
            raise LayoutError(f"site {site} out of range for subsystem {subsystem}")
        return sum(len(s) for s in self.site_map[:subsystem]) + site

    def locate(self, flat_index: int) -> tuple[int, int]:
        """Inverse of :meth:`global_site`."""
        for a, sites in enumerate(self.site_map):
            if flat_index < len(sites):
                return a, flat_index
            flat_index -= len(sites)
        raise LayoutError("flat site index out of range")


MatrixLike = Union["Operator", np.ndarray]


@dataclass(frozen=True, eq=False)
class Operator:
    """A dense complex matrix on the full space of ``layout``."""

    layout: SpaceLayout
    matrix: np.ndarray
    label: str = ""

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        dim = self.layout.total_dim
        if m.shape != (dim, dim):
            raise LayoutError(f"matrix shape {m.shape} does not match layout dimension {dim}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    # arithmetic keeps the layout; mixing layouts is an error
    def _other(self, other: MatrixLike) -> np.ndarray:
        if isinstance(other, Operator):
            if other.layout != self.layout:
                raise LayoutError("operands live on different layouts")
            return other.matrix
        return np.asarray(other)

    def __add__(self, other):
        return Operator(self.layout, self.matrix + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Operator(self.layout, self.matrix - self._other(other))

    def __rsub__(self, other):
        return Operator(self.layout, self._other(other) - self.matrix)

    def __neg__(self):
        return Operator(self.layout, -self.matrix, self.label)

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        return Operator(self.layout, scalar * self.matrix)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return Operator(self.layout, self.matrix / scalar)

    def __matmul__(self, other):
        return Operator(self.layout, self.matrix @ self._other(other))

    def adjoint(self) -> "Operator":
        return Operator(self.layout, self.matrix.conj().T, self.label and self.label + "*")

    @property
    def H(self) -> "Operator":
        return self.adjoint()

    def is_hermitian(self, rtol: float = HERMITIAN_RTOL) -> bool:
        return is_hermitian(self.matrix, rtol)

    def trace(self) -> complex:
        return complex(np.trace(self.matrix))

    def relabel(self, label: str) -> "Operator":
        return Operator(self.layout, self.matrix, label)

    def __repr__(self):
        return f"Operator(dim={self.layout.total_dim}, label={self.label!r})"


def as_matrix(x: MatrixLike) -> np.ndarray:
    return x.matrix if isinstance(x, Operator) else np.asarray(x)


def identity(layout: SpaceLayout) -> Operator:
    return Operator(layout, np.eye(layout.total_dim), "1")


def is_hermitian(m: np.ndarray, rtol: float = HERMITIAN_RTOL) -> bool:
    scale = max(np.abs(m).max(initial=0.0), 1.0)
    return bool(np.abs(m - m.conj().T).max(initial=0.0) <= rtol * scale)


def tensor(factors: Sequence[np.ndarray], layout: SpaceLayout, label: str = "") -> Operator:
    """Kronecker product of one factor per subsystem, in layout order."""
    if len(factors) != len(layout.dims):
        raise LayoutError(f"expected {len(layout.dims)} factors, got {len(factors)}")
    mats = [np.asarray(f, dtype=complex) for f in factors]
    for a, (m, d) in enumerate(zip(mats, layout.dims)):
        if m.shape != (d, d):
            raise LayoutError(f"factor {a} has shape {m.shape}, subsystem dimension is {d}")
    return Operator(layout, functools.reduce(np.kron, mats), label)


def embed(local: np.ndarray, subsystem: int, layout: SpaceLayout, site: int | None = None,
          label: str = "") -> Operator:
    """Place ``local`` on one subsystem (or a contiguous block of its sites).

    With ``site=None`` the local matrix must span the whole subsystem.
    Otherwise it acts on sites ``site, site+1, ...`` of that subsystem, as
    many as its dimension requires.
    """
    local = np.asarray(local, dtype=complex)
    if not 0 <= subsystem < len(layout.dims):
        raise LayoutError(f"subsystem index {subsystem} out of range")
    if site is None:
        sites = [layout.global_site(subsystem, i) for i in range(len(layout.site_map[subsystem]))]
    else:
        chain = layout.site_map[subsystem]
        dim, stop = 1, site
        while dim < local.shape[0] and stop < len(chain):
            dim *= chain[stop]
            stop += 1
        if site >= len(chain) or stop == site:
            raise LayoutError(f"site {site} out of range for subsystem {subsystem}")
        sites = [layout.global_site(subsystem, i) for i in range(site, stop)]
    return place(local, sites, layout, label)


def place(local: np.ndarray, sites: Sequence[int], layout: SpaceLayout, label: str = "") -> Operator:
    """Embed an operator acting on arbitrary flat sites (in the given order)."""
    local = np.asarray(local, dtype=complex)
    flat = layout.flat_sites
    sites = list(sites)
    if len(set(sites)) != len(sites) or any(not 0 <= s < len(flat) for s in sites):
        raise LayoutError(f"invalid site list {sites}")
    sel = [flat[s] for s in sites]
    dsel = math.prod(sel)
    if local.shape != (dsel, dsel):
        raise LayoutError(f"local operator shape {local.shape} does not match sites of dimension {dsel}")
    rest = [s for s in range(len(flat)) if s not in sites]
    drest = math.prod(flat[s] for s in rest)
    full = np.kron(local, np.eye(drest))
    order = sites + rest
    nsite = len(flat)
    shape = [flat[s] for s in order]
    full = full.reshape(shape + shape)
    inv = np.argsort(order)
    full = full.transpose(list(inv) + [nsite + i for i in inv])
    dim = layout.total_dim
    return Operator(layout, full.reshape(dim, dim), label)


def commutator(a: MatrixLike, b: MatrixLike) -> Operator | np.ndarray:
    if isinstance(a, Operator) and isinstance(b, Operator):
        if a.layout != b.layout:
            raise LayoutError("commutator of operators on different layouts")
        return Operator(a.layout, a.matrix @ b.matrix - b.matrix @ a.matrix)
    ma, mb = as_matrix(a), as_matrix(b)
    if ma.shape != mb.shape:
        raise LayoutError("commutator of matrices with different shapes")
    return ma @ mb - mb @ ma


def op_norm(a: MatrixLike) -> float:
    """Operator (largest singular value) norm.

    Self-adjoint and skew-adjoint inputs go through ``eigvalsh`` on the
    connected blocks of their sparsity pattern, which is much cheaper than a
    full SVD when a conserved charge makes the matrix block diagonal.
    """
    m = as_matrix(a)
    if m.size == 0:
        return 0.0
    scale = np.abs(m).max()
    if scale == 0.0:
        return 0.0
    if np.abs(m - m.conj().T).max() <= 1e-13 * scale:
        return _hermitian_norm(m, scale)
    if np.abs(m + m.conj().T).max() <= 1e-13 * scale:
        return _hermitian_norm(1j * m, scale)
    return float(np.linalg.norm(m, 2))


def _hermitian_norm(m: np.ndarray, scale: float) -> float:
    # entries below 1e-15 * scale shift the norm by at most dim * 1e-15 * scale
    mask = np.abs(m) > 1e-15 * scale
    ncomp, labels = connected_components(csr_matrix(mask), directed=False)
    if ncomp == 1:
        return float(np.abs(np.linalg.eigvalsh(m)).max())
    best = 0.0
    for b in range(ncomp):
        idx = np.flatnonzero(labels == b)
        best = max(best, float(np.abs(np.linalg.eigvalsh(m[np.ix_(idx, idx)])).max()))
    return best


class LocalTerm:
    """An operator given by its action on a few flat sites.

    Products with dense full-space matrices are done entry by entry: each
    nonzero element ``L[I, J]`` of the local matrix moves one strided slice of
    the tensor-shaped operand.  A term with ``nnz`` nonzeros on sites of total
    dimension ``d`` costs ``O(nnz D^2 / d)`` instead of a dense ``O(D^3)``.
    """

    def __init__(self, local: np.ndarray, sites: Sequence[int], layout: SpaceLayout):
        self.local = np.asarray(local, dtype=complex)
        self.sites = tuple(int(s) for s in sites)
        self.layout = layout
        flat = layout.flat_sites
        dims = [flat[s] for s in self.sites]
        if self.local.shape != (math.prod(dims),) * 2:
            raise LayoutError("local matrix does not match its sites")
        self._flat = list(flat)
        self.entries = []
        for i, j in zip(*np.nonzero(self.local)):
            self.entries.append((self.local[i, j], self._index(np.unravel_index(i, dims)),
                                 self._index(np.unravel_index(j, dims))))

    def _index(self, local_index):
        idx = [slice(None)] * len(self._flat)
        for site, k in zip(self.sites, local_index):
            idx[site] = int(k)
        return tuple(idx)

    def dense(self) -> np.ndarray:
        return place(self.local, self.sites, self.layout).matrix

    def left(self, x: np.ndarray) -> np.ndarray:
        """``L @ x``."""
        dim = x.shape[0]
        xt = np.asarray(x).reshape(self._flat + [dim])
        out = np.zeros(xt.shape, dtype=complex)
        for c, i, j in self.entries:
            out[i] += c * xt[j]
        return out.reshape(dim, dim)

    def right(self, x: np.ndarray) -> np.ndarray:
        """``x @ L``."""
        dim = x.shape[0]
        xt = np.asarray(x).reshape([dim] + self._flat)
        out = np.zeros(xt.shape, dtype=complex)
        for c, i, j in self.entries:
            out[(slice(None),) + j] += c * xt[(slice(None),) + i]
        return out.reshape(dim, dim)

    def commutator(self, x: np.ndarray) -> np.ndarray:
        """``[L, x]``."""
        return self.left(x) - self.right(x)


def local_commutator(terms: Sequence[tuple[complex, LocalTerm]], x: np.ndarray) -> np.ndarray:
    """``[sum_k c_k L_k, x]`` for a weighted list of local terms."""
    x = np.asarray(x)
    dim = x.shape[0]
    out = np.zeros((dim, dim), dtype=complex)
    for c, term in terms:
        if c == 0:
            continue
        xl, ol = x.reshape(term._flat + [dim]), out.reshape(term._flat + [dim])
        xr, orr = x.reshape([dim] + term._flat), out.reshape([dim] + term._flat)
        for v, i, j in term.entries:
            cv = c * v
            ol[i] += cv * xl[j]
            orr[(slice(None),) + j] -= cv * xr[(slice(None),) + i]
    return out


class Spectrum:
    """Eigendecomposition of a Hermitian matrix.

    The matrix is first split into the connected components of its sparsity
    graph (conserved-charge sectors show up this way), and each block is
    diagonalised separately. Basis changes then cost ``2 D sum(d_b^2)``
    instead of ``2 D^3``.
    """

    def __init__(self, h: np.ndarray, atol: float = 0.0):
        h = np.asarray(h, dtype=complex)
        if not is_hermitian(h):
            raise NotHermitianError("spectral decomposition needs a Hermitian matrix")
        dim = h.shape[0]
        mask = np.abs(h) > atol
        ncomp, labels = connected_components(csr_matrix(mask), directed=False)
        perm = np.argsort(labels, kind="stable")
        bounds = np.concatenate([[0], np.cumsum(np.bincount(labels, minlength=ncomp))])
        self.dim = dim
        self.perm = perm
        self.inv_perm = np.argsort(perm)
        self.slices = [slice(int(bounds[i]), int(bounds[i + 1])) for i in range(len(bounds) - 1)]
        hp = h[np.ix_(perm, perm)]
        energies = np.empty(dim)
        self.vectors = []
        for sl in self.slices:
            w, v = np.linalg.eigh(hp[sl, sl])
            energies[sl] = w
            self.vectors.append(v)
        self.energies = energies
        self.gaps = energies[:, None] - energies[None, :]

    @property
    def n_blocks(self) -> int:
        return len(self.slices)

    def to_eigenbasis(self, x: np.ndarray) -> np.ndarray:
        """``V^dagger x V`` (rows and columns in eigen-index order)."""
        xp = np.asarray(x, dtype=complex)[np.ix_(self.perm, self.perm)]
        if len(self.slices) == 1:
            v = self.vectors[0]
            return v.conj().T @ xp @ v
        for sl, v in zip(self.slices, self.vectors):
            xp[sl, :] = v.conj().T @ xp[sl, :]
        for sl, v in zip(self.slices, self.vectors):
            xp[:, sl] = xp[:, sl] @ v
        return xp

    def from_eigenbasis(self, y: np.ndarray) -> np.ndarray:
        """``V y V^dagger`` back in the original basis."""
        if len(self.slices) == 1:
            v = self.vectors[0]
            xp = v @ y @ v.conj().T
        else:
            xp = np.array(y, dtype=complex)
            for sl, v in zip(self.slices, self.vectors):
                xp[sl, :] = v @ xp[sl, :]
            for sl, v in zip(self.slices, self.vectors):
                xp[:, sl] = xp[:, sl] @ v.conj().T
        return xp[np.ix_(self.inv_perm, self.inv_perm)]

    def phases(self, t: float) -> np.ndarray:
        """Elementwise factor turning ``x~`` into the eigenbasis form of ``e^{iHt} x e^{-iHt}``."""
        return np.exp(1j * t * self.gaps)

    def phase_walk(self, t0: float, step: float, refresh: int = 64):
        """Yield ``phases(t0 + j step)`` for ``j = 0, 1, ...``.

        Consecutive tables differ by a fixed elementwise factor; exact tables
        are recomputed every ``refresh`` steps to stop round-off drift.
        """
        factor = self.phases(step)
        j = 0
        while True:
            if j % refresh == 0:
                cur = self.phases(t0 + j * step)
            else:
                cur = cur * factor
            yield cur
            j += 1

    def function(self, values: np.ndarray) -> np.ndarray:
        """``f(H)`` given ``f`` evaluated on :attr:`energies`."""
        return self.from_eigenbasis(np.diag(values))

    def unitary(self, t: float) -> np.ndarray:
        """``e^{-iHt}``."""
        return self.function(np.exp(-1j * t * self.energies))

    def evolve(self, x: np.ndarray, t: float) -> np.ndarray:
        """``e^{iHt} x e^{-iHt}``."""
        return self.from_eigenbasis(self.phases(t) * self.to_eigenbasis(x))


@functools.lru_cache(maxsize=32)
def _cached_spectrum(op: Operator) -> Spectrum:
    return Spectrum(op.matrix)


def spectrum(h: MatrixLike) -> Spectrum:
    """Spectral decomposition, cached per (immutable) :class:`Operator`."""
    if isinstance(h, Operator):
        return _cached_spectrum(h)
    return Spectrum(np.asarray(h))


def check_hermitian(h: MatrixLike, what: str = "operator") -> None:
    m = as_matrix(h)
    scale = max(op_norm(m), 1.0)
    if np.abs(m - m.conj().T).max(initial=0.0) > HERMITIAN_RTOL * scale:
        raise NotHermitianError(f"{what} is not self-adjoint")


def expm_hermitian(h: MatrixLike, t: float) -> MatrixLike:
    """Unitary ``e^{-iHt}`` from the eigendecomposition of ``H``."""
    check_hermitian(h, "generator")
    u = spectrum(h).unitary(t)
    if isinstance(h, Operator):
        return Operator(h.layout, u, f"exp(-i{t:g}H)")
    return u


class SigmaAverage(NamedTuple):
    reduced: np.ndarray
    lifted: Operator


def partial_trace_sigma(a: Operator) -> SigmaAverage:
    """Normalised partial trace over the system slot, ``(1/n) sum_i a_ii``.

    Returns the reservoir-space matrix and its re-embedding ``1_0 (x) (.)``.
    """
    n, r = a.layout.sigma_dim, a.layout.reservoir_dim
    reduced = np.einsum("iaib->ab", a.matrix.reshape(n, r, n, r)) / n
    return SigmaAverage(reduced, Operator(a.layout, np.kron(np.eye(n), reduced)))


def sigma_triviality_residual(a: Operator) -> float:
    """Distance of ``a`` from the subalgebra ``1_0 (x) A_>``."""
    return op_norm(a.matrix - partial_trace_sigma(a).lifted.matrix)


def lift_reservoir(a_res: np.ndarray, layout: SpaceLayout, label: str = "") -> Operator:
    """``1_0 (x) a_res`` for a matrix on the reservoir factor."""
    a_res = np.asarray(a_res, dtype=complex)
    r = layout.reservoir_dim
    if a_res.shape != (r, r):
        raise LayoutError(f"reservoir operator must be {r}x{r}, got {a_res.shape}")
    return Operator(layout, np.kron(np.eye(layout.sigma_dim), a_res), label)


def conjugate_product(x: np.ndarray, unitaries: Sequence[np.ndarray], dims: Sequence[int]) -> np.ndarray:
    """``U x U^dagger`` for ``U = U_0 (x) U_1 (x) ...`` without forming ``U``."""
    k = len(dims)
    t = np.asarray(x).reshape(tuple(dims) * 2)
    for a, u in enumerate(unitaries):
        t = np.moveaxis(np.tensordot(u, t, axes=([1], [a])), 0, a)
        t = np.moveaxis(np.tensordot(t, u.conj(), axes=([k + a], [1])), -1, k + a)
    d = math.prod(dims)
    return t.reshape(d, d)


# single-site building blocks ---------------------------------------------------

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def spin_matrices(d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(2Sx, 2Sy, 2Sz)`` for spin ``S = (d-1)/2``; equals the Pauli triple at ``d = 2``."""
    if d < 2:
        raise ValueError("site dimension must be at least 2")
    s = (d - 1) / 2
    m = s - np.arange(d)
    sp = np.zeros((d, d), dtype=complex)
    for i in range(1, d):
        sp[i - 1, i] = np.sqrt(s * (s + 1) - m[i] * (m[i] + 1))
    sx = (sp + sp.conj().T) / 2
    sy = (sp - sp.conj().T) / 2j
    sz = np.diag(m).astype(complex)
    return 2 * sx, 2 * sy, 2 * sz
