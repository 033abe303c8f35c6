"""Independent closed forms used by several test files."""
import numpy as np
import scipy.linalg


def xy_chain_config(length, beta=1.0, J=1.0):
    """A single free XY chain with a one-dimensional (trivial) system."""
    return {"sigma": {"dim": 1, "hamiltonian": [[0.0]]},
            "reservoirs": [{"model": "XY", "length": length, "beta": beta, "params": {"J": J}}],
            "coupling": {"terms": []}}


def xy_autocommutator(length, site, times, J=1.0):
    """``||[Z_j, breve^t Z_j]||`` on a free XY chain by Jordan-Wigner.

    With ``G = exp(-i h t)`` and ``h`` the tridiagonal hopping matrix, the
    commutator is ``4 |G_jj| sqrt(1 - |G_jj|^2)`` in norm.
    """
    h = J * (np.eye(length, k=1) + np.eye(length, k=-1))
    out = []
    for t in times:
        g = abs(scipy.linalg.expm(-1j * h * t)[site, site])
        out.append(4 * g * np.sqrt(max(0.0, 1 - g * g)))
    return np.array(out)
