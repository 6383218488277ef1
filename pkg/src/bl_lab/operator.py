"""Discrete Robin Schrodinger form on a box grid.

The form ``a(u, v) = int grad u . grad conj(v) + int q u conj(v) + int_Gamma alpha u conj(v)``
is assembled as ``M = K + diag(w q) + T^T diag(w_Gamma alpha) T`` with ``K`` the grid
stiffness, ``w`` the interior trapezoid weights and ``T`` the trace selection. This is
the same matrix the ghost-node Robin stencil produces after symmetrisation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .grid import BoundaryFunction, Grid, GridError, ScalarField, build_grid, load_field, norm
from .linalg import factorize, smallest_eigs, spd_solver

log = logging.getLogger(__name__)


class OperatorError(ValueError):
    """Operator data violating the standing assumptions."""


@dataclass(frozen=True)
class OperatorConstants:
    trace_norm: float  # n-frak: norm of V -> L2(Gamma)
    c_lower: float  # c-frak: alpha >= -c_lower
    kappa: float
    lambda_star: float
    tau_star: float
    lambda_plus: float
    aleph_used: float
    near_constraint: bool = False

    def as_dict(self) -> dict:
        return {
            "trace_norm": self.trace_norm,
            "c_lower": self.c_lower,
            "kappa": self.kappa,
            "lambda_star": self.lambda_star,
            "tau_star": self.tau_star,
            "lambda_plus": self.lambda_plus,
            "aleph_used": self.aleph_used,
            "near_constraint": self.near_constraint,
        }


@dataclass(frozen=True, eq=False)
class RobinOperator:
    grid: Grid
    q: ScalarField
    alpha: BoundaryFunction
    aleph: float
    matrix: sp.csr_matrix = field(repr=False)
    constants: OperatorConstants
    potential_rho: float
    notes: tuple[str, ...] = ()

    @property
    def mass(self) -> np.ndarray:
        """Diagonal of the lumped mass matrix (interior trapezoid weights)."""
        return self.grid.weights.ravel()

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.grid.to_header(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.q.flat, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.alpha.values, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def shifted(self, lam: complex) -> sp.csr_matrix:
        """``M - lam B``."""
        return (self.matrix - lam * sp.diags(self.mass)).tocsr()


# -- potentials ----------------------------------------------------------------------------

def bump_potential(grid: Grid, center=None, radius: float = 0.2, amplitude: float = 5.0) -> ScalarField:
    """Smooth compactly supported bump, peak value ``amplitude`` at ``center``."""
    c = grid.center if center is None else np.asarray(center, dtype=float)
    r2 = sum((m - ci) ** 2 for m, ci in zip(grid.mesh, c)) / radius ** 2
    vals = np.zeros(grid.shape)
    inside = r2 < 1.0
    vals[inside] = amplitude * np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    return ScalarField(grid, vals)


def singular_potential(grid: Grid, center=None, exponent: float = 0.9, cap: float | None = None):
    """Samples of ``|x - center|^-exponent`` capped at ``cap``.

    Returns the field and the number of capped nodes. The default cap is the value at
    distance ``min(spacing)/2``, the smallest resolvable radius.
    """
    c = grid.center if center is None else np.asarray(center, dtype=float)
    r = np.sqrt(sum((m - ci) ** 2 for m, ci in zip(grid.mesh, c)))
    if cap is None:
        cap = (0.5 * min(grid.spacing)) ** (-exponent)
    with np.errstate(divide="ignore"):
        vals = np.where(r > 0, r ** (-exponent), np.inf)
    capped = int(np.count_nonzero(vals > cap))
    return ScalarField(grid, np.minimum(vals, cap)), capped


def make_potential(grid: Grid, spec) -> tuple[ScalarField, str]:
    """Build a potential from a builtin name/params dict or a field file reference."""
    if spec is None or spec == "zero":
        return ScalarField.zeros(grid), "zero"
    if isinstance(spec, dict) and "file" in spec:
        f = load_field(spec["file"])
        if f.grid != grid:
            raise GridError("potential file grid does not match operator grid")
        return ScalarField(grid, np.real(f.values)), f"file:{spec['file']}"
    name = spec["builtin"] if isinstance(spec, dict) else spec
    params = {k: v for k, v in spec.items() if k != "builtin"} if isinstance(spec, dict) else {}
    if name == "zero":
        return ScalarField.zeros(grid), "zero"
    if name == "bump":
        return bump_potential(grid, **params), f"bump{params}"
    if name == "singular":
        q, capped = singular_potential(grid, **params)
        return q, f"singular{params} capped_nodes={capped}"
    raise OperatorError(f"unknown builtin potential {name!r}")


def make_alpha(grid: Grid, spec) -> BoundaryFunction:
    if spec is None:
        return BoundaryFunction.constant(grid, 0.0)
    if isinstance(spec, (int, float)):
        return BoundaryFunction.constant(grid, float(spec))
    if isinstance(spec, (list, tuple)):
        return BoundaryFunction.per_face(grid, [float(v) for v in spec])
    if isinstance(spec, dict) and "file" in spec:
        f = load_field(spec["file"])
        return BoundaryFunction(grid, np.real(f.values))
    raise OperatorError(f"cannot interpret alpha spec {spec!r}")


# -- constants -----------------------------------------------------------------------------

@lru_cache(maxsize=16)
def trace_norm(grid: Grid, tol: float = 1e-10, maxiter: int = 1000) -> float:
    """Norm of the discrete trace map ``V -> L2(Gamma)`` by power iteration on ``T*T``.

    Iterates ``x <- (K + B)^-1 T^T W_Gamma T x`` and returns the square root of the
    converged Rayleigh quotient.
    """
    T = grid.trace_matrix
    TWT = (T.T @ sp.diags(grid.boundary_weights) @ T).tocsr()
    gram = (grid.stiffness + sp.diags(grid.weights.ravel())).tocsr()
    solve = spd_solver(gram)
    x = np.ones(grid.size)
    mu = 0.0
    for _ in range(maxiter):
        y = solve(TWT @ x)
        new = float(x @ (TWT @ x)) / float(x @ (gram @ x))
        x = y / np.linalg.norm(y)
        if abs(new - mu) <= tol * abs(new):
            mu = new
            break
        mu = new
    return float(np.sqrt(mu))


def _lowest_generalized(A: sp.spmatrix, weights: np.ndarray, shift: float) -> float:
    """Smallest eigenvalue of ``A x = mu diag(weights) x``."""
    d = sp.diags(1.0 / np.sqrt(weights))
    S = (d @ A @ d).tocsr()
    vals, _ = smallest_eigs(S, 1, shift)
    return float(vals[0])


def _gershgorin_lower(A: sp.spmatrix, weights: np.ndarray) -> float:
    d = sp.diags(1.0 / np.sqrt(weights))
    S = sp.csr_matrix(d @ A @ d)
    diag = S.diagonal()
    off = np.asarray(abs(S).sum(axis=1)).ravel() - np.abs(diag)
    return float(np.min(diag - off))


def c_epsilon(grid: Grid, q: ScalarField, eps: float) -> float:
    """Smallest ``C`` with ``||q u^2||_L1 <= eps ||u||_V^2 + C ||u||_H^2`` for all grid fields."""
    aq = np.abs(np.real(q.flat))
    if not np.any(aq):
        return 0.0
    w = grid.weights.ravel()
    # C = max over u of (u^T (W|q| - eps(K+W)) u) / u^T W u
    A = (eps * (grid.stiffness + sp.diags(w)) - sp.diags(w * aq)).tocsr()
    mu = _lowest_generalized(A, w, _gershgorin_lower(A, w) - 1.0)
    return max(0.0, -mu)


def assemble(grid: Grid, q: ScalarField | None = None, alpha: BoundaryFunction | float | None = None,
             aleph: float = 10.0, rho: float | None = None) -> RobinOperator:
    """Assemble the Robin operator for potential ``q`` and Robin coefficient ``alpha``.

    Raises OperatorError when ``alpha`` violates ``alpha >= -c`` with ``c n^2 < 1``.
    ``||q||_{L^rho} > aleph`` only warns; ``rho`` defaults to ``max(n/2, 1)``.
    """
    if q is None:
        q = ScalarField.zeros(grid)
    if alpha is None or isinstance(alpha, (int, float)):
        alpha = BoundaryFunction.constant(grid, 0.0 if alpha is None else float(alpha))
    if q.grid != grid or alpha.grid != grid:
        raise GridError("potential / Robin coefficient on a different grid")
    if np.iscomplexobj(q.values) and np.any(np.imag(q.values)):
        raise OperatorError("potential must be real")
    if np.iscomplexobj(alpha.values) and np.any(np.imag(alpha.values)):
        raise OperatorError("Robin coefficient must be real")
    q = ScalarField(grid, np.real(q.values).astype(float))
    alpha = BoundaryFunction(grid, np.real(alpha.values).astype(float))
    notes = []

    nfrak = trace_norm(grid)
    c_lower = max(0.0, -float(alpha.values.min()))
    if c_lower * nfrak ** 2 >= 1.0:
        raise OperatorError(
            f"alpha >= -c requires c < n^-2 = {nfrak ** -2:.6g}; got c = {c_lower:.6g}"
        )
    near = c_lower * nfrak ** 2 > 0.9
    if near:
        notes.append("alpha close to the coercivity constraint boundary (c n^2 > 0.9)")
        log.warning(notes[-1])

    if rho is None:
        rho = max(grid.n / 2.0, 1.0)
    qnorm = norm(q, "Lp", p=rho)
    if qnorm > aleph:
        msg = f"||q||_L^{rho} = {qnorm:.4g} exceeds aleph = {aleph:.4g}; theory constants degrade"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)

    w = grid.weights.ravel()
    T = grid.trace_matrix
    R = T.T @ sp.diags(grid.boundary_weights * alpha.values) @ T
    M = (grid.stiffness + sp.diags(w * q.flat) + R).tocsr()
    M = ((M + M.T) * 0.5).tocsr()  # bitwise symmetric

    kappa = 0.5 * (1.0 - c_lower * nfrak ** 2)
    # smallest shift L with a(u,u) + L|u|_H^2 >= kappa |u|_V^2 over all grid fields:
    # L_min = kappa - lambda_min(M - kappa K, W); then doubled
    A = (M - kappa * grid.stiffness).tocsr()
    mu0 = _lowest_generalized(A, w, _gershgorin_lower(A, w) - 1.0)
    lam_min = kappa - mu0
    lambda_star = max(2.0 * lam_min, 1e-8)
    tau_star = 1.0 + float(np.sqrt(max(0.0, 2.0 - lambda_star)))
    c_kappa = c_epsilon(grid, q, kappa)
    lambda_plus = max(lambda_star, (1.0 + c_kappa) / (1.0 - kappa / 4.0))
    consts = OperatorConstants(nfrak, c_lower, kappa, lambda_star, tau_star, lambda_plus,
                               float(qnorm), near)
    return RobinOperator(grid, q, alpha, float(aleph), M, consts, float(rho), tuple(notes))


def load_operator_spec(spec: dict, base_dir=None) -> RobinOperator:
    """Build an operator from ``{grid, q, alpha, aleph}`` (see README for the schema)."""
    import os

    g = spec["grid"]
    grid = build_grid(g["n"], g["side_lengths"], g["nodes_per_axis"])

    def _resolve(ref):
        if isinstance(ref, dict) and "file" in ref and base_dir is not None:
            return {**ref, "file": os.path.join(base_dir, ref["file"])}
        return ref

    q, _ = make_potential(grid, _resolve(spec.get("q", "zero")))
    alpha = make_alpha(grid, _resolve(spec.get("alpha", 0.0)))
    return assemble(grid, q, alpha, aleph=float(spec.get("aleph", 10.0)))


# -- form, traces, normal derivatives --------------------------------------------------------

def _check(op: RobinOperator, *fields) -> None:
    for f in fields:
        if f.grid != op.grid:
            raise GridError("field is not on the operator's grid")


def _mul_conj(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of ``a * conj(b)``; swapping a, b negates the imaginary part bitwise."""
    ar, ai, br, bi = a.real, a.imag, b.real, b.imag
    return ar * br + ai * bi, ai * br - ar * bi


def _symmetric_pairing(M: sp.csr_matrix, u: np.ndarray, v: np.ndarray) -> complex:
    """``conj(v)^T M u`` in real arithmetic, so that swapping u, v conjugates the result exactly.

    (numpy's complex multiply may fuse operations and lose this symmetry.)
    """
    up = sp.triu(M, k=1, format="coo")
    d = M.diagonal()
    re0, im0 = _mul_conj(u, v)
    re1, im1 = _mul_conj(u[up.col], v[up.row])
    re2, im2 = _mul_conj(u[up.row], v[up.col])
    re = np.sum(d * re0) + np.sum(up.data * (re1 + re2))
    im = np.sum(d * im0) + np.sum(up.data * (im1 + im2))
    return complex(re, im)


def form_apply(op: RobinOperator, u: ScalarField, v: ScalarField) -> complex:
    """``a(u, v)`` for the assembled matrix; ``form_apply(u, v) == conj(form_apply(v, u))`` bitwise."""
    _check(op, u, v)
    return _symmetric_pairing(op.matrix, u.flat.astype(complex), v.flat.astype(complex))


def boundary_form(op: RobinOperator, u: ScalarField, v: ScalarField) -> complex:
    """``a_0(u, v) = int_Gamma alpha u conj(v) ds``."""
    _check(op, u, v)
    tu, tv = u.trace().values, v.trace().values
    return complex(np.sum(op.grid.boundary_weights * op.alpha.values * tu * np.conj(tv)))


def _face_slices(grid: Grid, axis: int, side: int, depth: int):
    out = []
    for k in range(depth):
        idx = [slice(None)] * grid.n
        idx[axis] = k if side == 0 else -1 - k
        out.append(tuple(idx))
    return out


def normal_derivative(op_or_grid, u: ScalarField) -> BoundaryFunction:
    """Outward normal derivative by the second-order one-sided difference on each face."""
    grid = op_or_grid.grid if isinstance(op_or_grid, RobinOperator) else op_or_grid
    if u.grid != grid:
        raise GridError("field is not on the operator's grid")
    parts = []
    for face in grid.faces:
        h = grid.spacing[face.axis]
        s0, s1, s2 = _face_slices(grid, face.axis, face.side, 3)
        v = u.values
        # derivative into the domain, then flip to the outward direction
        inward = (-3.0 * v[s0] + 4.0 * v[s1] - v[s2]) / (2.0 * h)
        parts.append(-np.asarray(inward).ravel())
    return BoundaryFunction(grid, np.concatenate(parts))


def laplacian_with_flux(grid: Grid, u: ScalarField, flux: BoundaryFunction) -> ScalarField:
    """Central-difference Laplacian with ghost nodes set from the given normal flux.

    With this Laplacian the discrete Green identity
    ``W lap(u) + K u = T^T W_Gamma flux`` holds exactly.
    """
    v = u.values
    out = np.zeros(grid.shape, dtype=np.result_type(v, flux.values, float))
    offset = 0
    flux_by_face = []
    for face in grid.faces:
        n_f = face.nodes.size
        flux_by_face.append(flux.values[offset:offset + n_f])
        offset += n_f
    for axis in range(grid.n):
        h2 = grid.spacing[axis] ** 2
        h = grid.spacing[axis]
        d = np.zeros_like(out)
        sl = lambda a, b: tuple(slice(a, b) if j == axis else slice(None) for j in range(grid.n))
        d[sl(1, -1)] = (v[sl(2, None)] - 2 * v[sl(1, -1)] + v[sl(None, -2)]) / h2
        for side in (0, 1):
            face = grid.faces[2 * axis + side]
            fl = flux_by_face[2 * axis + side].reshape(
                [c for j, c in enumerate(grid.shape) if j != axis] or [1])
            b0, b1 = _face_slices(grid, axis, side, 2)
            val = (2 * v[b1] - 2 * v[b0] + 2 * h * fl.reshape(v[b0].shape)) / h2
            d[b0] = val
        out = out + d
    return ScalarField(grid, out)


def laplacian_one_sided(grid: Grid, u: ScalarField) -> ScalarField:
    """Laplacian with second-order one-sided second differences at boundary nodes.

    Independent of any flux; used to measure the discrete Green defect.
    """
    v = u.values
    out = np.zeros(grid.shape, dtype=np.result_type(v, float))
    for axis in range(grid.n):
        h2 = grid.spacing[axis] ** 2
        c = grid.shape[axis]
        sl = lambda a, b: tuple(slice(a, b) if j == axis else slice(None) for j in range(grid.n))
        d = np.zeros_like(out)
        d[sl(1, -1)] = (v[sl(2, None)] - 2 * v[sl(1, -1)] + v[sl(None, -2)]) / h2
        for side in (0, 1):
            if c >= 4:
                s = _face_slices(grid, axis, side, 4)
                d[s[0]] = (2 * v[s[0]] - 5 * v[s[1]] + 4 * v[s[2]] - v[s[3]]) / h2
            else:
                s = _face_slices(grid, axis, side, 3)
                d[s[0]] = (v[s[0]] - 2 * v[s[1]] + v[s[2]]) / h2
        out = out + d
    return ScalarField(grid, out)


def green_defect(op_or_grid, u: ScalarField, v: ScalarField) -> float:
    """``|<lap u, v> + (grad u, grad v) - <d_nu u, v|Gamma>|`` by quadrature."""
    grid = op_or_grid.grid if isinstance(op_or_grid, RobinOperator) else op_or_grid
    lap = laplacian_one_sided(grid, u)
    w = grid.weights.ravel()
    vb = np.conj(v.flat)
    t1 = np.sum(w * lap.flat * vb)
    t2 = np.sum((grid.stiffness @ u.flat) * vb)
    dn = normal_derivative(grid, u)
    t3 = np.sum(grid.boundary_weights * dn.values * np.conj(v.trace().values))
    return float(abs(t1 + t2 - t3))


# -- invariant probes ----------------------------------------------------------------------

def probe_bank(grid: Grid, count: int, seed: int = 0, complex_valued: bool = False) -> list[ScalarField]:
    """Deterministic probe fields: alternating smooth random cosine sums, rough i.i.d.
    Gaussian noise, and localized Gaussian blobs, all from ``numpy.random.default_rng(seed)``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        kind = i % 3
        if kind == 0:
            vals = np.zeros(grid.shape)
            for _ in range(4):
                freqs = rng.integers(0, 5, size=grid.n)
                phase = rng.uniform(0, 2 * np.pi)
                arg = sum(np.pi * k * m / L for k, m, L in zip(freqs, grid.mesh, grid.side_lengths))
                vals = vals + rng.normal() * np.cos(arg + phase)
        elif kind == 1:
            vals = rng.normal(size=grid.shape)
        else:
            c = [rng.uniform(0, L) for L in grid.side_lengths]
            s = rng.uniform(0.05, 0.3) * min(grid.side_lengths)
            vals = np.exp(-sum((m - ci) ** 2 for m, ci in zip(grid.mesh, c)) / (2 * s * s))
        if complex_valued:
            vals = vals + 1j * rng.normal(size=grid.shape) * (kind == 1) + 1j * np.roll(vals, 1)
        out.append(ScalarField(grid, vals))
    return out


def coercivity_check(op: RobinOperator, probes) -> dict:
    """Count violations of ``a(u,u) + lambda* |u|_H^2 >= kappa |u|_V^2``; returns worst margin."""
    c = op.constants
    worst = np.inf
    violations = 0
    for u in probes:
        lhs = form_apply(op, u, u).real + c.lambda_star * norm(u, "L2") ** 2
        rhs = c.kappa * norm(u, "H1") ** 2
        margin = (lhs - rhs) / max(rhs, 1e-300)
        worst = min(worst, margin)
        if lhs < rhs * (1 - 1e-12):
            violations += 1
    return {"violations": violations, "worst_relative_margin": float(worst), "probes": len(probes)}


def ii1_constants(op: RobinOperator, eps_values=(0.5, 0.1, 0.05), probes=None) -> dict:
    """``C_eps`` for ``||q u^2||_L1 <= eps ||u||_V^2 + C_eps ||u||_H^2``.

    The constant is the exact discrete supremum; when probes are given, their worst
    ratio is verified against it.
    """
    out = {}
    for eps in eps_values:
        C = c_epsilon(op.grid, op.q, eps)
        worst_excess = -np.inf
        if probes is not None:
            aq = np.abs(op.q.flat)
            w = op.grid.weights.ravel()
            for u in probes:
                lhs = float(np.sum(w * aq * np.abs(u.flat) ** 2))
                rhs = eps * norm(u, "H1") ** 2 + C * norm(u, "L2") ** 2
                worst_excess = max(worst_excess, (lhs - rhs) / max(rhs, 1e-300))
        out[eps] = {"C_eps": C, "worst_probe_excess": float(worst_excess)}
    return out


def appendix_a_check(op: RobinOperator, probes, p: float | None = None) -> dict:
    """Worst ratio ``|a_0(u,v)| / (|alpha|_{L^s} |u|_{L^p} |v|_{L^p})`` with ``s = p/(p-2)``."""
    n = op.grid.n
    if p is None:
        lo, hi = 2 * n / (n - 1) if n > 1 else 3.0, 2 * (n - 1) / (n - 2) if n > 2 else 6.0
        p = 0.5 * (lo + hi)
    s = p / (p - 2)
    a_s = norm(op.alpha, "Lp", p=s)
    worst = 0.0
    for u, v in zip(probes, probes[1:] + probes[:1]):
        lhs = abs(boundary_form(op, u, v))
        rhs = a_s * norm(u.trace(), "Lp", p=p) * norm(v.trace(), "Lp", p=p)
        if rhs > 0:
            worst = max(worst, lhs / rhs)
    return {"p": p, "s": s, "constant": worst, "passed": worst <= 1.0 + 1e-12}
