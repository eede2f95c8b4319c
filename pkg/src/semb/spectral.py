"""Smooth functional bases from the generalized eigenproblem L u = lambda M u.

The columns of the basis are the lowest few eigenvectors of the cotangent
Laplacian under the lumped mass inner product.  They are used purely as a
smoothness prior: per-vertex embeddings are parameterized as coefficient
matrices in this basis, never the other way around, so the basis is not a
matching cue.
"""

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import SembError

DENSE_VERTEX_LIMIT = 2000


class SpectralBasis:
    """Q lowest eigenpairs of one mesh, columns ordered by ascending eigenvalue.

    ``U`` is K x Q and mass-orthonormal (``U.T @ M @ U = I``); tiny negative
    eigenvalues from floating-point are clamped to zero.  ``mesh_id`` ties
    the basis to the geometry it was computed from.
    """

    def __init__(self, U, eigenvalues, mesh_id=None):
        U = np.asarray(U, dtype=np.float64)
        eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
        if U.ndim != 2 or eigenvalues.shape != (U.shape[1],):
            raise SembError("basis shape mismatch")
        if (np.diff(eigenvalues) < -1e-10).any():
            raise SembError("eigenvalues must be nondecreasing")
        self.U = U
        self.eigenvalues = eigenvalues
        self.mesh_id = mesh_id
        self.U.flags.writeable = False
        self.eigenvalues.flags.writeable = False

    @property
    def num_vertices(self):
        return self.U.shape[0]

    @property
    def num_modes(self):
        return self.U.shape[1]


def _fix_signs(U):
    # deterministic sign: the entry of largest magnitude in each column is positive
    idx = np.argmax(np.abs(U), axis=0)
    flip = U[idx, np.arange(U.shape[1])] < 0
    U = U.copy()
    U[:, flip] *= -1.0
    return U


def spectral_basis(L, mass, Q, mesh_id=None, dense_limit=DENSE_VERTEX_LIMIT):
    """Compute the Q algebraically smallest generalized eigenpairs.

    Parameters
    ----------
    L : scipy sparse matrix
        K x K symmetric positive-semidefinite Laplacian.
    mass : scipy sparse matrix
        K x K diagonal mass matrix with strictly positive diagonal.
    Q : int
        Number of modes, 0 < Q < K.

    For K up to ``dense_limit`` the problem is reduced to a standard
    symmetric one through the diagonal mass matrix and solved densely,
    which is exact and reproducible byte-for-byte.  Larger meshes fall
    back to shift-inverted Lanczos with a fixed starting vector.
    """
    K = L.shape[0]
    if not 0 < Q < K:
        raise SembError(f"need 0 < Q < K, got Q={Q}, K={K}")
    m = np.asarray(mass.diagonal(), dtype=np.float64)
    if (m <= 0).any():
        raise SembError("mass matrix must have strictly positive diagonal")

    if K <= dense_limit:
        s = 1.0 / np.sqrt(m)
        A = L.toarray() * s[:, None] * s[None, :]
        A = 0.5 * (A + A.T)
        w, Y = np.linalg.eigh(A)
        w = w[:Q]
        U = Y[:, :Q] * s[:, None]
    else:
        sigma = -1e-8 * max(abs(L).max(), 1.0)
        M = sparse.diags(m).tocsc()
        v0 = np.random.default_rng(0).standard_normal(K)
        try:
            w, U = eigsh(L.tocsc(), k=Q, M=M, sigma=sigma, which="LM", v0=v0)
        except ArpackNoConvergence as exc:
            raise SembError(f"eigensolver did not converge: {exc}") from exc
        order = np.argsort(w)
        w = w[order]
        U = U[:, order]

    if (w < -1e-8).any():
        raise SembError(f"negative eigenvalue {w.min():g} beyond tolerance")
    w = np.maximum(w, 0.0)
    U = _fix_signs(U)
    return SpectralBasis(U, w, mesh_id=mesh_id)
