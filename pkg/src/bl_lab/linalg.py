"""Sparse solver helpers shared by the operator, spectral and resolvent modules."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# above this many unknowns, SPD systems go through AMG-preconditioned CG instead of LU
DIRECT_LIMIT = 40_000


def factorize(A: sp.spmatrix):
    """Return ``solve(b)`` for a general (possibly complex) sparse matrix."""
    lu = spla.splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A")
    return lu.solve


def spd_solver(A: sp.spmatrix, rtol: float = 1e-13):
    """Return ``solve(b)`` for a real SPD matrix; LU when small, AMG-CG when large."""
    A = sp.csr_matrix(A)
    if A.shape[0] <= DIRECT_LIMIT:
        return factorize(A)
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(A)

    def solve(b):
        b = np.asarray(b)
        if np.iscomplexobj(b):
            return solve(b.real) + 1j * solve(b.imag)
        return ml.solve(b, tol=rtol, accel="cg", maxiter=500)

    return solve


def smallest_eigs(S: sp.spmatrix, k: int, shift: float, tol: float = 1e-10,
                  max_restarts: int = 3):
    """``k`` eigenpairs of symmetric ``S`` closest above ``shift`` (shift below the spectrum).

    Uses shift-invert Lanczos; the subspace is enlarged on non-convergence.
    Small matrices go to a dense solver.
    """
    N = S.shape[0]
    if N <= 2500:
        import scipy.linalg as sla

        vals, vecs = sla.eigh(S.toarray(), subset_by_index=[0, k - 1])
        return vals, vecs
    shifted = sp.csr_matrix(S - shift * sp.identity(N, format="csr"))
    solve = spd_solver(shifted)
    op = spla.LinearOperator((N, N), matvec=solve, dtype=float)
    ncv = min(N, max(2 * k + 1, 20))
    v0 = np.ones(N) / np.sqrt(N) + 1e-3 * np.cos(np.arange(N))
    last = None
    for _ in range(max_restarts + 1):
        try:
            mu, vecs = spla.eigsh(op, k=k, which="LM", tol=tol, ncv=ncv, v0=v0, maxiter=50 * N)
            break
        except spla.ArpackNoConvergence as exc:
            last = exc
            ncv = min(N, 2 * ncv)
    else:
        raise RuntimeError(f"eigensolver did not converge: {last}")
    vals = shift + 1.0 / mu
    order = np.argsort(vals)
    return vals[order], vecs[:, order]
