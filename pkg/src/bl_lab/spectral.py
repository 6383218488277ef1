"""Boundary spectral data: eigenpairs, traces, diagnostics, alignment and persistence."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .grid import BoundaryFunction, Grid, GridError, ScalarField, _pack, _unpack
from .linalg import smallest_eigs
from .operator import RobinOperator, normal_derivative

log = logging.getLogger(__name__)

GAP_TOL = 1e-6


class SpectralError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SpectralDataset:
    """Eigenvalues ``lambdas`` (nondecreasing) with boundary traces ``psis`` of shape (K, nb).

    ``phis`` (K, N) holds the H-orthonormal interior eigenfields when kept.
    """

    grid: Grid
    lambdas: np.ndarray
    psis: np.ndarray = field(repr=False)
    phis: np.ndarray | None = field(default=None, repr=False)
    operator_hash: str = ""

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        psis = np.asarray(self.psis)
        if psis.ndim != 2 or psis.shape != (lam.size, self.grid.boundary_size):
            raise GridError(f"trace block has shape {psis.shape}, expected ({lam.size}, {self.grid.boundary_size})")
        if np.any(np.diff(lam) < 0):
            raise SpectralError("eigenvalues must be nondecreasing")
        if self.phis is not None and np.shape(self.phis) != (lam.size, self.grid.size):
            raise GridError("interior block does not match K x grid size")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "psis", psis)

    @property
    def K(self) -> int:
        return int(self.lambdas.size)

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.psis) or not np.any(np.imag(self.psis))

    def trace(self, k: int) -> BoundaryFunction:
        return BoundaryFunction(self.grid, self.psis[k])

    def phi(self, k: int) -> ScalarField:
        if self.phis is None:
            raise SpectralError("dataset carries no interior eigenfields")
        return ScalarField(self.grid, self.phis[k])

    def truncated(self, K: int) -> "SpectralDataset":
        if K > self.K:
            raise SpectralError(f"requested {K} modes, dataset has {self.K}")
        return replace(self, lambdas=self.lambdas[:K], psis=self.psis[:K],
                       phis=None if self.phis is None else self.phis[:K])

    def coefficients(self, g: BoundaryFunction) -> np.ndarray:
        """``(g, psi_k)_{L2(Gamma)}`` for every k."""
        if g.grid != self.grid:
            raise GridError("boundary function on a different grid")
        return self.psis.conj() @ (self.grid.boundary_weights * g.values)


def _canonical_sign(vecs: np.ndarray, bnodes: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude boundary entry is positive."""
    tr = vecs[bnodes]
    idx = np.argmax(np.abs(tr), axis=0)
    signs = np.sign(tr[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def eig(op: RobinOperator, K: int, keep_interior: bool = False, tol: float = 1e-10) -> SpectralDataset:
    """Lowest ``K`` eigenpairs of ``M phi = lambda B phi`` by shift-invert Lanczos.

    The shift sits at ``-lambda* - 1``, below the spectrum. Eigenfields are
    B-orthonormal (the discrete L2 inner product) and sign-canonicalised.
    """
    N = op.grid.size
    if K < 1:
        raise SpectralError("K must be >= 1")
    if K > max(1, int(0.2 * N)):
        raise SpectralError(f"K={K} exceeds 20% of the {N} unknowns")
    d = 1.0 / np.sqrt(op.mass)
    S = (sp.diags(d) @ op.matrix @ sp.diags(d)).tocsr()
    shift = -op.constants.lambda_star - 1.0
    vals, vecs = smallest_eigs(S, K, shift, tol=tol)
    phis = vecs * d[:, None]
    phis = _canonical_sign(phis, op.grid.boundary_nodes)
    psis = phis[op.grid.boundary_nodes].T.copy()
    return SpectralDataset(op.grid, vals, psis, phis.T.copy() if keep_interior else None, op.hash)


def check_invariants(ds: SpectralDataset, op: RobinOperator | None = None,
                     tol_robin: float = 1.0) -> dict:
    """Evaluate the dataset invariants; returns a dict of measured quantities and flags.

    ``tol_robin`` bounds ``||d_nu phi_k + alpha psi_k||_{L2(Gamma)} / (1 + |lambda_k|)``;
    the one-sided normal difference is only first-order accurate on eigenfields, so the
    default is loose.
    """
    out = {"nondecreasing": bool(np.all(np.diff(ds.lambdas) >= 0))}
    if op is not None:
        out["lower_bound"] = bool(np.all(ds.lambdas > -op.constants.lambda_star))
    if ds.phis is not None:
        w = ds.grid.weights.ravel()
        gram = (ds.phis.conj() * w) @ ds.phis.T
        out["gram_error"] = float(np.abs(gram - np.eye(ds.K)).max())
        out["orthonormal"] = out["gram_error"] <= 1e-8
        if op is not None:
            res = op.matrix @ ds.phis.T - (op.mass[:, None] * ds.phis.T) * ds.lambdas
            rel = np.sqrt(np.sum(np.abs(res) ** 2 / op.mass[:, None], axis=0))
            out["eigen_residual"] = float(rel.max())
            robin = []
            for k in range(ds.K):
                r = normal_derivative(ds.grid, ds.phi(k)) + op.alpha * ds.trace(k)
                robin.append(np.sqrt(r.inner(r).real) / (1 + abs(ds.lambdas[k])))
            out["robin_residual"] = float(max(robin))
            out["robin_ok"] = out["robin_residual"] <= tol_robin
    out["passed"] = all(v for v in out.values() if isinstance(v, bool))
    return out


# -- Weyl asymptotics -----------------------------------------------------------------------

@dataclass(frozen=True)
class WeylFit:
    slope: float
    C: float
    k_range: tuple[int, int]
    residual: float
    slope_ci: tuple[float, float]


def weyl_fit(ds_or_lambdas, n: int, k_range: tuple[int, int] | None = None) -> WeylFit:
    """Fit ``log(1 + |lambda_k|)`` against ``log k``; report the tightest two-sided constant.

    ``C`` is the smallest value with ``C^-1 k^(2/n) <= 1 + |lambda_k| <= C k^(2/n)`` on the
    fitted range. Default range is ``[K/3, K]``.
    """
    lam = np.asarray(getattr(ds_or_lambdas, "lambdas", ds_or_lambdas), dtype=float)
    K = lam.size
    if K < 30:
        raise SpectralError(f"Weyl fit needs K >= 30, got {K}")
    lo, hi = k_range if k_range is not None else (max(1, K // 3), K)
    if not 1 <= lo < hi <= K:
        raise SpectralError(f"invalid fit range {(lo, hi)} for K={K}")
    k = np.arange(lo, hi + 1)
    y = np.log1p(np.abs(lam[lo - 1:hi]))
    fit = stats.linregress(np.log(k), y)
    resid = y - (fit.intercept + fit.slope * np.log(k))
    ratio = np.exp(y) / k ** (2.0 / n)
    C = float(max(1.0, ratio.max(), (1.0 / ratio).max()))
    half = 1.96 * fit.stderr
    return WeylFit(float(fit.slope), C, (int(lo), int(hi)), float(np.sqrt(np.mean(resid ** 2))),
                   (float(fit.slope - half), float(fit.slope + half)))


# -- regularity --------------------------------------------------------------------------

def h2_norm(f: ScalarField) -> float:
    """Discrete H^2 norm from second-order finite differences (one-sided at the boundary)."""
    g = f.grid
    w = g.weights
    v = f.values
    total = np.sum(w * np.abs(v) ** 2)
    for i in range(g.n):
        di = np.gradient(v, g.spacing[i], axis=i, edge_order=2) if g.shape[i] > 2 else np.zeros_like(v)
        total += np.sum(w * np.abs(di) ** 2)
        for j in range(g.n):
            dij = np.gradient(di, g.spacing[j], axis=j, edge_order=2)
            total += np.sum(w * np.abs(dij) ** 2)
    return float(np.sqrt(total))


def h2_diagnostic(ds: SpectralDataset, op: RobinOperator | None = None) -> np.ndarray:
    """``||phi_k||_{H^2} / (1 + |lambda_k|)`` for every mode; should stay bounded in k."""
    if ds.phis is None:
        raise SpectralError("h2_diagnostic needs interior eigenfields (keep_interior=True)")
    ratios = np.array([h2_norm(ds.phi(k)) / (1 + abs(ds.lambdas[k])) for k in range(ds.K)])
    spread = ratios.max() / np.median(ratios)
    if spread > 3:
        log.warning("H2 ratio spread %.2f: eigenfield regularity degrading with k", spread)
    return ratios


# -- alignment ---------------------------------------------------------------------------

def clusters(lambdas: np.ndarray, gap_tol: float = GAP_TOL) -> list[np.ndarray]:
    """Index groups of consecutive eigenvalues with gaps below ``gap_tol (1 + |lambda|)``."""
    groups, cur = [], [0]
    for k in range(1, len(lambdas)):
        if lambdas[k] - lambdas[k - 1] < gap_tol * (1 + abs(lambdas[k])):
            cur.append(k)
        else:
            groups.append(np.array(cur))
            cur = [k]
    groups.append(np.array(cur))
    return groups


def _snap(Q: np.ndarray, tol: float = 1e-10) -> np.ndarray | None:
    """None if Q is the identity to ``tol``; an exact sign matrix if Q is one to ``tol``."""
    m = Q.shape[0]
    if np.abs(Q - np.eye(m)).max() <= tol:
        return None
    D = np.diag(np.sign(np.diag(Q)))
    if np.all(np.diag(D) != 0) and np.abs(Q - D).max() <= tol:
        return D
    return Q


def align(ds: SpectralDataset, ref: SpectralDataset, gap_tol: float = GAP_TOL) -> SpectralDataset:
    """Rotate each eigenvalue cluster of ``ds`` to best match the traces of ``ref``.

    Orthogonal Procrustes in ``L2(Gamma)`` per cluster; single modes only change sign.
    Idempotent: rotations within ``1e-10`` of the identity are skipped.
    """
    if ds.grid != ref.grid:
        raise GridError("datasets live on different grids")
    if ds.K != ref.K:
        raise SpectralError(f"K mismatch: {ds.K} vs {ref.K}")
    wb = ds.grid.boundary_weights
    psis = ds.psis.copy()
    phis = None if ds.phis is None else ds.phis.copy()
    for idx in clusters(ds.lambdas, gap_tol):
        A, R = ds.psis[idx], ref.psis[idx]
        C = np.real((R * wb) @ A.conj().T)  # C_ij = (psi_ref_i, psi_j)
        if idx.size == 1:
            Q = np.array([[-1.0]]) if C[0, 0] < 0 else None
        else:
            U, _, Vt = np.linalg.svd(C)
            Q = _snap(U @ Vt)
        if Q is None:
            continue
        psis[idx] = Q @ A
        if phis is not None:
            phis[idx] = Q @ ds.phis[idx]
    return replace(ds, psis=psis, phis=phis)


# -- persistence -------------------------------------------------------------------------

def dataset_to_bytes(ds: SpectralDataset) -> bytes:
    header = {
        "format": "bl-lab-spectral-1",
        "K": ds.K,
        "grid": ds.grid.to_header(),
        "lambdas": [repr(float(x)) for x in ds.lambdas],
        "has_phis": ds.phis is not None,
        "operator_hash": ds.operator_hash,
        "real": bool(ds.is_real),
    }
    arrays = [ds.psis.ravel()] + ([ds.phis.ravel()] if ds.phis is not None else [])
    return _pack(header, arrays)


def dataset_from_bytes(data: bytes) -> SpectralDataset:
    header, body = _unpack(data)
    grid = Grid.from_header(header["grid"])
    lam = np.array([float(x) for x in header["lambdas"]])
    K, nb, N = header["K"], grid.boundary_size, grid.size
    raw = np.frombuffer(body, dtype="<c16").astype(np.complex128)
    expected = K * nb + (K * N if header["has_phis"] else 0)
    if raw.size != expected:
        raise SpectralError(f"dataset body has {raw.size} values, expected {expected}")
    psis = raw[:K * nb].reshape(K, nb)
    phis = raw[K * nb:].reshape(K, N) if header["has_phis"] else None
    if header.get("real", False):
        psis = psis.real.copy()
        phis = None if phis is None else phis.real.copy()
    return SpectralDataset(grid, lam, psis, phis, header.get("operator_hash", ""))


def save_dataset(path, ds: SpectralDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> SpectralDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def dataset_summary(ds: SpectralDataset) -> dict:
    return {"K": ds.K, "grid": ds.grid.to_header(), "operator_hash": ds.operator_hash,
            "lambda_min": float(ds.lambdas[0]), "lambda_max": float(ds.lambdas[-1])}


__all__ = [
    "SpectralDataset", "WeylFit", "eig", "weyl_fit", "h2_norm", "h2_diagnostic", "align",
    "clusters", "check_invariants", "save_dataset", "load_dataset", "dataset_to_bytes",
    "dataset_from_bytes", "GAP_TOL", "SpectralError",
]
