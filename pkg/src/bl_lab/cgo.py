"""Potential reconstruction from two boundary spectral datasets with CGO probes.

For ``lambda_tau = (tau + i)^2`` and unit directions ``omega, theta`` built from a
frequency ``xi``, the exponentials ``e^{i sqrt(lambda) omega.x}`` and
``e^{-i sqrt(lambda) theta.x}`` give Robin data ``g, h``. The difference of the
two spectral series

    U + V = sum_k d_k / (lambda_k - lambda) - sum_k d~_k / (lambda~_k - lambda),
    d_k = (g, psi_k)(psi_k, h),

approximates the Fourier transform of ``b = q~ - q`` at ``(1 + i/tau) xi``; a
low-pass inverse transform of these samples recovers ``q - q~``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import (BoundaryFunction, FourierField, Grid, GridError, ScalarField,
                   inverse_fourier_transform, lattice_axes, norm, padded_shape_for)
from .spectral import SpectralDataset, SpectralError

log = logging.getLogger(__name__)


class ReconstructionError(ValueError):
    pass


# -- probe geometry --------------------------------------------------------------------------

def directions(xi, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit vectors ``omega, theta`` with ``(tau + i)(theta - omega) = (1 + i/tau) xi``.

    ``eta`` is the coordinate axis least aligned with ``xi``, orthogonalised against it.

    >>> w, t, e = directions([2 * np.pi, 0, 0], 10.0)
    >>> np.round(w, 5).tolist(), e.tolist()
    ([-0.31416, 0.94937, 0.0], [0.0, 1.0, 0.0])
    """
    xi = np.asarray(xi, dtype=float)
    n = xi.size
    a = float(np.sqrt(xi @ xi))
    if tau <= a / 2:
        raise ReconstructionError(f"tau={tau} must exceed |xi|/2={a / 2}")
    if a == 0:
        eta = np.eye(n)[0]
    else:
        eta = np.eye(n)[int(np.argmin(np.abs(xi)))]
        eta = eta - xi * (eta @ xi) / (a * a)
        eta = eta / np.linalg.norm(eta)
    s = math.sqrt(1.0 - a * a / (4.0 * tau * tau))
    return s * eta - xi / (2 * tau), s * eta + xi / (2 * tau), eta


@dataclass(frozen=True, eq=False)
class CgoProbe:
    tau: float
    xi: np.ndarray
    omega: np.ndarray
    theta: np.ndarray
    origin: np.ndarray
    e_omega: ScalarField = field(repr=False)
    e_theta: ScalarField = field(repr=False)  # e^{-i sqrt(lambda) theta.x}
    g: BoundaryFunction = field(repr=False)
    h: BoundaryFunction = field(repr=False)

    @property
    def lam(self) -> complex:
        return complex(self.tau, 1.0) ** 2

    @property
    def sqrt_lam(self) -> complex:
        return complex(self.tau, 1.0)

    @property
    def data_size(self) -> float:
        """``||g||_{L2} ||h||_{L2}``, which grows like tau^2."""
        return float(np.sqrt(self.g.inner(self.g).real * self.h.inner(self.h).real))


def probe_data(grid: Grid, alpha: np.ndarray, omega, theta, tau: float, origin) -> tuple[np.ndarray, np.ndarray]:
    """Boundary values of ``g`` and ``conj(h)`` for the given directions (vectorised over rows)."""
    s = complex(tau, 1.0)
    X = grid.boundary_points - origin
    nu = grid.boundary_normals
    omega = np.atleast_2d(omega)
    theta = np.atleast_2d(theta)
    g = (1j * s * (omega @ nu.T) + alpha) * np.exp(1j * s * (omega @ X.T))
    hbar = (-1j * s * (theta @ nu.T) + alpha) * np.exp(-1j * s * (theta @ X.T))
    return g, hbar


def make_probe(grid: Grid, alpha: BoundaryFunction | float, xi, tau: float,
               tau_star: float = 1.0, origin=None) -> CgoProbe:
    """CGO probe for frequency ``xi``; ``origin`` shifts the exponentials' reference point."""
    if tau < tau_star:
        raise ReconstructionError(f"tau={tau} below tau*={tau_star}")
    a = alpha.values if isinstance(alpha, BoundaryFunction) else np.full(grid.boundary_size, float(alpha))
    origin = np.zeros(grid.n) if origin is None else np.asarray(origin, dtype=float)
    omega, theta, _ = directions(xi, tau)
    s = complex(tau, 1.0)
    pts = grid.points - origin
    e_w = ScalarField(grid, np.exp(1j * s * (pts @ omega)))
    e_t = ScalarField(grid, np.exp(-1j * s * (pts @ theta)))
    g, hbar = probe_data(grid, a, omega, theta, tau, origin)
    return CgoProbe(float(tau), np.asarray(xi, dtype=float), omega, theta, origin, e_w, e_t,
                    BoundaryFunction(grid, g[0]), BoundaryFunction(grid, np.conj(hbar[0])))


# -- series ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class SeriesTerms:
    U: complex
    V: complex
    R: complex
    tail: float  # magnitude of the last 10% of the used terms, a truncation indicator


def _check_pair(dsA: SpectralDataset, dsB: SpectralDataset, K_use: int) -> None:
    if dsA.grid != dsB.grid:
        raise GridError("datasets live on different grids")
    if K_use > min(dsA.K, dsB.K):
        raise SpectralError(f"K_use={K_use} exceeds available modes ({dsA.K}, {dsB.K})")


def _series_batch(dsA, dsB, g, hbar, lam, K_use, ell):
    """U, V, R and tail indicator for a batch of boundary data rows."""
    w = dsA.grid.boundary_weights
    la, lb = dsA.lambdas[:K_use], dsB.lambdas[:K_use]
    PA, PB = dsA.psis[:K_use], dsB.psis[:K_use]
    # (g, psi_k) = sum w g conj(psi_k); (psi_k, h) = sum w psi_k conj(h)
    ga, ha = (g * w) @ PA.conj().T, (hbar * w) @ PA.T
    gb, hb = (g * w) @ PB.conj().T, (hbar * w) @ PB.T
    d, dt = ga * ha, gb * hb
    ra, rb = 1.0 / (la - lam), 1.0 / (lb - lam)
    u_terms = (d - dt) * ra
    v_terms = (lb - la) * dt * ra * rb
    U = u_terms.sum(axis=1)
    V = v_terms.sum(axis=1)
    if ell > 1:
        m = min(ell - 1, K_use)
        R = ((lb[:m] - la[:m]) * d[:, :m] * ra[:m] * rb[:m]).sum(axis=1)
    else:
        R = np.zeros_like(U)
    last = max(1, K_use // 10)
    tail = np.abs((u_terms + v_terms)[:, -last:].sum(axis=1))
    return U, V, R, tail


def scattering_series(dsA: SpectralDataset, dsB: SpectralDataset, probe: CgoProbe,
                      K_use: int | None = None, ell: int = 1) -> SeriesTerms:
    """Truncated ``U``, ``V`` and the low-index correction ``R`` for one probe.

    ``dsA`` holds the data of ``q``, ``dsB`` those of ``q~``. ``R`` vanishes for ``ell = 1``.
    """
    K_use = min(dsA.K, dsB.K) if K_use is None else K_use
    _check_pair(dsA, dsB, K_use)
    if ell < 1:
        raise ReconstructionError("ell must be >= 1")
    U, V, R, tail = _series_batch(dsA, dsB, probe.g.values[None, :], np.conj(probe.h.values)[None, :],
                                  probe.lam, K_use, ell)
    return SeriesTerms(complex(U[0]), complex(V[0]), complex(R[0]), float(tail[0]))


# -- parameters -----------------------------------------------------------------------------

def beta_for(n: int, r: float) -> float:
    return max(0.0, n * (2.0 - r) / (2.0 * r))


def stability_exponents(n: int, beta: float) -> tuple[float, float]:
    """Exponents ``a, b`` of the error budget ``tau^-a + tau^b delta^2``."""
    return 2.0 * (1.0 - 2.0 * beta) / (n + 2), (3.0 * n + 4) / (n + 2)


def delta_threshold(n: int, beta: float = 0.0) -> float:
    """``delta_0 = (2 (1 - 2 beta) / (3n + 4))^(1/2)``; above it the budget has no interior minimum."""
    return math.sqrt(2.0 * (1.0 - 2.0 * beta) / (3 * n + 4))


def choose_tau(delta: float, n: int = 3, beta: float = 0.0, tau_star: float = 1.0,
               tau_max: float = 1e6) -> float:
    """Minimiser of ``tau^-a + tau^b delta^2`` on ``[tau_star, tau_max]``.

    Closed-form stationary point ``(a / (b delta^2))^(1/(a+b))`` clamped to the interval;
    returns ``tau_star`` when ``delta >= delta_0``.
    """
    if delta < 0:
        raise ReconstructionError("delta must be nonnegative")
    if tau_max < tau_star:
        tau_max = tau_star
    if delta == 0:
        return float(tau_max)
    if delta >= delta_threshold(n, beta):
        return float(tau_star)
    a, b = stability_exponents(n, beta)
    t = (a / (b * delta * delta)) ** (1.0 / (a + b))
    return float(min(max(t, tau_star), tau_max))


def practical_tau_max(grid: Grid, ds: SpectralDataset, K_use: int, resolution: float = 0.5,
                      series_fraction: float = 1.0 / 3.0) -> float:
    """Largest tau the discrete data can support.

    Two limits: the probe oscillation ``tau h`` must stay below ``resolution`` on the
    coarsest axis, and ``Re lambda_tau = tau^2 - 1`` must stay below ``series_fraction``
    of the last used eigenvalue so the truncated series has converged.
    """
    t_res = resolution / max(grid.spacing)
    t_ser = math.sqrt(max(series_fraction * ds.lambdas[K_use - 1], 0.0) + 1.0)
    return float(min(t_res, t_ser))


@dataclass
class ReconstructionParams:
    """Reconstruction settings; ``"auto"`` entries are resolved by ``resolve``.

    rho : low-pass exponent, ball radius ``tau^rho`` when ``ball_radius == "power"``.
    ball_radius : ``"auto"`` uses ``ball_factor * tau`` (see ``resolve``), ``"power"`` uses
        ``tau^rho``, or a number.
    padding : zero-padding factor of the frequency lattice, or ``"auto"`` (2, doubled until
        the admissible ball holds at least 10 lattice points).
    """

    n: int = 3
    r: float = 2.0
    tau: float | str = "auto"
    rho: float | str = "auto"
    K_use: int | None = None
    ell: int = 1
    padding: float | str = "auto"
    ball_radius: float | str = "auto"
    ball_factor: float = 1.6
    delta: float = 0.0
    tau_max: float | None = None
    per_xi_tau: bool = False
    centered: bool = True

    @property
    def beta(self) -> float:
        return beta_for(self.n, self.r)

    def validate(self) -> None:
        if self.n == 3 and not self.r > 1.5:
            raise ReconstructionError("n = 3 requires r > 3/2")
        if self.n >= 4 and self.r < self.n / 2:
            raise ReconstructionError("r must be at least n/2")
        if not 0 <= self.beta < 0.5:
            raise ReconstructionError(f"beta={self.beta} outside [0, 1/2)")
        if self.rho != "auto" and not 0 < float(self.rho) < 1:
            raise ReconstructionError("rho must lie in (0, 1)")
        if self.ell < 1:
            raise ReconstructionError("ell must be >= 1")


@dataclass(frozen=True)
class ResolvedParams:
    tau: float
    rho: float
    ball_radius: float
    padded_shape: tuple[int, ...]
    K_use: int
    ell: int
    tau_star: float
    tau_max: float
    lattice_points: int


def _ball_count(grid: Grid, shape, radius: float) -> int:
    axes = lattice_axes(grid, shape)
    r2 = np.zeros(shape)
    for i, a in enumerate(axes):
        s = [1] * grid.n
        s[i] = -1
        r2 = r2 + a.reshape(s) ** 2
    return int(np.count_nonzero(r2 < radius * radius))


def resolve(params: ReconstructionParams, dsA: SpectralDataset, dsB: SpectralDataset,
            tau_star: float = 1.0) -> ResolvedParams:
    """Turn ``"auto"`` settings into numbers for the given data."""
    params.validate()
    grid = dsA.grid
    K_use = min(dsA.K, dsB.K) if params.K_use is None else int(params.K_use)
    _check_pair(dsA, dsB, K_use)
    beta = params.beta
    rho = (1 - 2 * beta) / (params.n + 2) if params.rho == "auto" else float(params.rho)
    tmax = params.tau_max if params.tau_max is not None else practical_tau_max(grid, dsA, K_use)
    tmax = max(tmax, tau_star)
    if params.tau == "auto":
        tau = choose_tau(params.delta, params.n, beta, tau_star, tmax)
    else:
        tau = float(params.tau)
        if tau < tau_star:
            raise ReconstructionError(f"tau={tau} below tau*={tau_star:.4g}")
    if params.ball_radius == "auto":
        radius = params.ball_factor * tau
    elif params.ball_radius == "power":
        radius = tau ** rho
    else:
        radius = float(params.ball_radius)
    if not params.per_xi_tau and radius > 2 * tau:
        raise ReconstructionError(f"ball radius {radius:.4g} exceeds 2 tau = {2 * tau:.4g}")
    if params.padding == "auto":
        pad = 2.0
        while _ball_count(grid, padded_shape_for(grid, pad), radius) < 10 and pad < 16:
            pad *= 2
    else:
        pad = float(params.padding)
    shape = padded_shape_for(grid, pad)
    count = _ball_count(grid, shape, radius)
    if count < 10:
        raise ReconstructionError(
            f"frequency ball of radius {radius:.4g} holds {count} lattice points (< 10); "
            "increase tau, the radius or the padding")
    return ResolvedParams(float(tau), float(rho), float(radius), shape, K_use, int(params.ell),
                          float(tau_star), float(tmax), count)


# -- sampling and inversion ------------------------------------------------------------------

@dataclass(frozen=True)
class FourierEstimate:
    xi: np.ndarray
    value: complex  # estimate of b_hat at xi (b = q~ - q), origin phase removed
    tau: float
    U: complex
    V: complex
    R: complex
    tail: float
    remainder_budget: float  # tau^(-1 + 2 beta), the size of the dropped remainder
    shift_note: float  # |xi| / tau: relative frequency shift of the sampled point


def _sample_batch(dsA, dsB, alpha, xis, tau, K_use, ell, origin, beta, chunk=256):
    grid = dsA.grid
    out = []
    for start in range(0, len(xis), chunk):
        block = xis[start:start + chunk]
        taus = np.array([tau(x) if callable(tau) else tau for x in block])
        res = {}
        for t in np.unique(taus):
            idx = np.nonzero(taus == t)[0]
            dirs = [directions(block[i], t) for i in idx]
            om = np.array([d[0] for d in dirs])
            th = np.array([d[1] for d in dirs])
            g, hbar = probe_data(grid, alpha, om, th, t, origin)
            U, V, R, tail = _series_batch(dsA, dsB, g, hbar, complex(t, 1.0) ** 2, K_use, ell)
            for j, i in enumerate(idx):
                res[i] = (t, U[j], V[j], R[j], tail[j])
        for i, x in enumerate(block):
            t, U, V, R, tail = res[i]
            raw = U + V - R
            # sample of the transform about ``origin``; move the phase to the grid origin
            val = raw * np.exp(-1j * (x @ origin))
            out.append(FourierEstimate(np.asarray(x), complex(val), float(t), complex(U), complex(V),
                                       complex(R), float(tail), float(t ** (-1 + 2 * beta)),
                                       float(np.linalg.norm(x) / t)))
    return out


def fourier_sample(dsA: SpectralDataset, dsB: SpectralDataset, xi, params: ReconstructionParams,
                   alpha: BoundaryFunction | float = 0.0, tau_star: float = 1.0) -> FourierEstimate:
    """Estimate of ``b_hat(xi)``, ``b = (q~ - q) chi_Omega``, from the two datasets.

    Uses ``U + V - R`` at ``lambda_tau``; the remainder of size ``tau^(-1+2 beta)`` is dropped.
    """
    grid = dsA.grid
    K_use = min(dsA.K, dsB.K) if params.K_use is None else params.K_use
    _check_pair(dsA, dsB, K_use)
    if params.tau == "auto":
        tmax = params.tau_max or practical_tau_max(grid, dsA, K_use)
        tau = choose_tau(params.delta, params.n, params.beta, tau_star, max(tmax, tau_star))
    else:
        tau = float(params.tau)
    a = alpha.values if isinstance(alpha, BoundaryFunction) else np.full(grid.boundary_size, float(alpha))
    origin = grid.center if params.centered else np.zeros(grid.n)
    return _sample_batch(dsA, dsB, a, [np.asarray(xi, dtype=float)], tau, K_use, params.ell,
                         origin, params.beta)[0]


@dataclass(frozen=True, eq=False)
class Reconstruction:
    field: ScalarField  # approximation of q - q~
    samples: FourierField = field(repr=False)
    estimates: list = field(repr=False)
    resolved: ResolvedParams = None
    diagnostics: dict = field(default_factory=dict)


def reconstruct(dsA: SpectralDataset, dsB: SpectralDataset, params: ReconstructionParams | None = None,
                alpha: BoundaryFunction | float = 0.0, tau_star: float = 1.0,
                truth: ScalarField | None = None) -> Reconstruction:
    """Low-pass reconstruction of ``q - q~`` from the spectral data of ``q`` (dsA) and ``q~`` (dsB).

    Samples ``b_hat`` on the padded-box frequency lattice inside the ball, symmetrises
    ``F(-xi) = conj(F(xi))``, inverts with the discrete transform, negates and keeps the
    real part. ``alpha`` must be the Robin coefficient shared by both operators.
    """
    params = params or ReconstructionParams()
    grid = dsA.grid
    rp = resolve(params, dsA, dsB, tau_star)
    a = alpha.values if isinstance(alpha, BoundaryFunction) else np.full(grid.boundary_size, float(alpha))
    axes = lattice_axes(grid, rp.padded_shape)
    mesh = np.meshgrid(*axes, indexing="ij")
    r2 = sum(m ** 2 for m in mesh)
    idx = np.argwhere(r2 < rp.ball_radius ** 2)
    xis = np.stack([axes[i][idx[:, i]] for i in range(grid.n)], axis=1)
    origin = grid.center if params.centered else np.zeros(grid.n)
    if params.per_xi_tau:
        tau = lambda x: max(rp.tau, float(np.linalg.norm(x)) / params.ball_factor)  # noqa: E731
    else:
        tau = rp.tau
    est = _sample_batch(dsA, dsB, a, list(xis), tau, rp.K_use, rp.ell, origin, params.beta)
    F = np.zeros(rp.padded_shape, dtype=complex)
    for (i, e) in zip(idx, est):
        F[tuple(i)] = e.value
    if dsA.is_real and dsB.is_real:
        # F(-xi) = conj F(xi) for real b; average the two estimates
        neg = tuple(np.array([(-i) % m for i, m in zip(idx.T, rp.padded_shape)]))
        pos = tuple(idx.T)
        F_sym = np.zeros_like(F)
        F_sym[pos] = 0.5 * (F[pos] + np.conj(F[neg]))
        F = F_sym
    samples = FourierField(grid, rp.padded_shape, F)
    b = inverse_fourier_transform(samples)
    rec = ScalarField(grid, -np.real(b.values))
    diag = {
        "tau": rp.tau, "rho": rp.rho, "ball_radius": rp.ball_radius,
        "padded_shape": list(rp.padded_shape), "lattice_points": rp.lattice_points,
        "K_use": rp.K_use, "ell": rp.ell, "tau_star": rp.tau_star, "tau_max": rp.tau_max,
        "effective_rho": math.log(rp.ball_radius) / math.log(rp.tau) if rp.tau > 1 else float("nan"),
        "max_abs_U": float(max((abs(e.U) for e in est), default=0.0)),
        "max_abs_V": float(max((abs(e.V) for e in est), default=0.0)),
        "max_tail": float(max((e.tail for e in est), default=0.0)),
        "remainder_budget": float(rp.tau ** (-1 + 2 * params.beta)),
        "max_shift": float(max((e.shift_note for e in est), default=0.0)),
        "H-1_norm": norm(rec, "H-1"),
        "L2_norm": norm(rec, "L2"),
    }
    if truth is not None:
        diag.update(error_report(rec, truth))
    return Reconstruction(rec, samples, est, rp, diag)


def error_report(rec: ScalarField, truth: ScalarField) -> dict:
    """Absolute and relative ``H^-1`` / ``L2`` errors against the true ``q - q~``."""
    diff = rec - truth
    tn = norm(truth, "H-1")
    e = norm(diff, "H-1")
    tl = norm(truth, "L2")
    el = norm(diff, "L2")
    return {"H-1_error": e, "H-1_relative_error": e / tn if tn > 0 else (0.0 if e == 0 else float("inf")),
            "L2_error": el, "L2_relative_error": el / tl if tl > 0 else (0.0 if el == 0 else float("inf"))}


__all__ = [
    "directions", "CgoProbe", "make_probe", "probe_data", "SeriesTerms", "scattering_series",
    "ReconstructionParams", "ResolvedParams", "resolve", "FourierEstimate", "fourier_sample",
    "Reconstruction", "reconstruct", "choose_tau", "delta_threshold", "stability_exponents",
    "beta_for", "practical_tau_max", "error_report", "ReconstructionError",
]
