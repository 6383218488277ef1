"""Experiment orchestration: data discrepancy, noise models, forward caching, stability sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cgo import ReconstructionParams, reconstruct, stability_exponents
from .grid import GridError, ScalarField
from .operator import RobinOperator, load_operator_spec
from .spectral import SpectralDataset, SpectralError, align, eig, load_dataset, save_dataset

log = logging.getLogger(__name__)

CACHE_ENV = "BL_LAB_CACHE"


def psi(theta: float, t: float) -> float:
    """``0`` at 0, ``|ln t|^-theta`` on ``(0, 1/e)``, ``t`` on ``[1/e, inf)``.

    >>> psi(2.0, math.exp(-10.0))
    0.01
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 0.0
    if t < math.exp(-1.0):
        return abs(math.log(t)) ** (-theta)
    return float(t)


@dataclass(frozen=True)
class Delta:
    total: float
    traces: float  # l2 over k of ||psi_k - psi~_k||_{L2(Gamma)}
    eigenvalues: float  # l-inf over k of |lambda_k - lambda~_k|
    K: int
    tail_note: str = ""


def delta_metric(dsA: SpectralDataset, dsB: SpectralDataset) -> Delta:
    """Data discrepancy over the available modes (no tail extrapolation)."""
    if dsA.grid != dsB.grid:
        raise GridError("datasets live on different grids")
    if dsA.K != dsB.K:
        raise SpectralError(f"K mismatch: {dsA.K} vs {dsB.K}")
    diff = dsA.psis - dsB.psis
    tr = float(np.sqrt(np.sum(dsA.grid.boundary_weights * np.abs(diff) ** 2)))
    ev = float(np.max(np.abs(dsA.lambdas - dsB.lambdas))) if dsA.K else 0.0
    note = (f"sums over k <= {dsA.K} only; modes beyond K (lambda_k ~ k^(2/{dsA.grid.n}) "
            "by the Weyl law) are not measured")
    return Delta(tr + ev, tr, ev, dsA.K, note)


# -- perturbation model ------------------------------------------------------------------

def boundary_modes(grid, count: int = 10) -> np.ndarray:
    """Low cosine modes on each face, shape (faces * count, nb), each supported on one face."""
    rows = []
    offset = 0
    for face in grid.faces:
        m = face.nodes.size
        other = [j for j in range(grid.n) if j != face.axis]
        if not other:
            v = np.zeros(grid.boundary_size)
            v[offset] = 1.0
            rows.append(v)
            offset += m
            continue
        coords = [grid.axes[j] / grid.side_lengths[j] for j in other]
        orders = sorted(np.ndindex(*([count] * len(other))), key=lambda t: (sum(t), t))[:count]
        for o in orders:
            vals = np.ones(())
            for c, k in zip(coords, o):
                vals = np.multiply.outer(vals, np.cos(np.pi * k * c))
            v = np.zeros(grid.boundary_size)
            v[offset:offset + m] = np.asarray(vals).ravel()
            rows.append(v)
        offset += m
    return np.array(rows)


def perturb(ds: SpectralDataset, eig_level: float, trace_level: float, seed: int = 0,
            aleph: float | None = None) -> SpectralDataset:
    """Noisy copy of ``ds``.

    Eigenvalues get i.i.d. uniform jitter in ``[-eig_level, eig_level]`` (clamped at ``aleph``)
    and are re-sorted; traces get random combinations of low boundary cosine modes scaled
    so the total ``l2(L2(Gamma))`` perturbation equals ``trace_level``.
    """
    rng = np.random.default_rng(seed)
    amp = eig_level
    if aleph is not None and eig_level > aleph:
        warnings.warn(f"eigenvalue jitter {eig_level} clamped at aleph={aleph}", stacklevel=2)
        amp = aleph
    lam = np.sort(ds.lambdas + rng.uniform(-amp, amp, size=ds.K)) if amp > 0 else ds.lambdas.copy()
    psis = ds.psis.copy()
    if trace_level > 0:
        modes = boundary_modes(ds.grid)
        noise = rng.normal(size=(ds.K, modes.shape[0])) @ modes
        total = np.sqrt(np.sum(ds.grid.boundary_weights * noise ** 2))
        psis = psis + noise * (trace_level / total)
    return replace(ds, lambdas=lam, psis=psis)


# -- forward data with caching -------------------------------------------------------------

def cache_dir() -> Path | None:
    d = os.environ.get(CACHE_ENV)
    if not d:
        return None
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def forward(op: RobinOperator, K: int, keep_interior: bool = False) -> SpectralDataset:
    """``eig(op, K)``, reusing a cached dataset with at least K modes when ``BL_LAB_CACHE`` is set."""
    d = cache_dir()
    tag = "i" if keep_interior else "b"
    if d is not None:
        best = None
        for f in d.glob(f"{op.hash}_{tag}_K*.bin"):
            k = int(f.stem.rsplit("K", 1)[1])
            if k >= K and (best is None or k < best[0]):
                best = (k, f)
        if best is not None:
            log.info("forward data from cache %s", best[1])
            return load_dataset(best[1]).truncated(K)
    ds = eig(op, K, keep_interior=keep_interior)
    if d is not None:
        tmp = d / f".{op.hash}_{tag}_K{K}.tmp"
        save_dataset(tmp, ds)
        tmp.replace(d / f"{op.hash}_{tag}_K{K}.bin")
    return ds


# -- stability sweep -------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    true_operator: dict
    reference_operator: dict
    K: int = 300
    levels: list = field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1])
    eig_scale: float = 1.0
    trace_scale: float = 1.0
    seed: int = 0
    reconstruction: dict = field(default_factory=dict)
    records_csv: str | None = None
    report_json: str | None = None
    schema_version: int = 1

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | None = None) -> "ExperimentConfig":
        if d.get("schema_version", 1) != 1:
            raise ValueError(f"unsupported schema_version {d.get('schema_version')}")
        required = {"true_operator", "reference_operator"}
        missing = required - d.keys()
        if missing:
            raise ValueError(f"config missing {sorted(missing)}")
        pert = d.get("perturbation", {})
        out = d.get("output", {})
        cfg = cls(d["true_operator"], d["reference_operator"], int(d.get("K", 300)),
                  [float(x) for x in d.get("levels", [1e-4, 1e-3, 1e-2, 1e-1])],
                  float(pert.get("eig_scale", 1.0)), float(pert.get("trace_scale", 1.0)),
                  int(pert.get("seed", d.get("seed", 0))), dict(d.get("reconstruction", {})),
                  out.get("records_csv"), out.get("report_json"))
        if any(lv < 0 for lv in cfg.levels):
            raise ValueError("perturbation levels must be nonnegative")
        for spec in (cfg.true_operator, cfg.reference_operator):
            for key in ("q", "alpha"):
                ref = spec.get(key)
                if isinstance(ref, dict) and "file" in ref:
                    path = Path(base_dir or ".") / ref["file"]
                    if not path.exists():
                        raise FileNotFoundError(path)
        return cfg


@dataclass
class StabilityRecord:
    level: float
    delta: float
    delta_traces: float
    delta_eigenvalues: float
    error: float  # relative H^-1 reconstruction error
    absolute_error: float
    tau: float
    seed: int


@dataclass
class SweepReport:
    records: list[StabilityRecord]
    exponent: float
    fitted_slope: float
    C_fit: float
    spread: float
    monotone: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(StabilityRecord.__dataclass_fields__)
        w = csv.writer(buf)
        w.writerow(names)
        for r in self.records:
            w.writerow([repr(getattr(r, k)) if isinstance(getattr(r, k), float) else getattr(r, k)
                        for k in names])
        return buf.getvalue()

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2)


def params_from_dict(d: dict, n: int) -> ReconstructionParams:
    lattice = d.get("lattice", {})
    return ReconstructionParams(
        n=n, r=float(d.get("r", 2.0)), tau=d.get("tau", "auto"), rho=d.get("rho", "auto"),
        K_use=d.get("K_use"), ell=int(d.get("ell", 1)),
        padding=lattice.get("padding", d.get("padding", "auto")),
        ball_radius=lattice.get("ball_radius", d.get("ball_radius", "auto")),
        tau_max=d.get("tau_max"), per_xi_tau=bool(d.get("per_xi_tau", False)),
    )


def summarize_sweep(records: list[StabilityRecord], n: int, beta: float = 0.0) -> SweepReport:
    a, b = stability_exponents(n, beta)
    e = a / 3.0  # 2 (1 - 2 beta) / (3 (n + 2))
    pos = [r for r in records if r.delta > 0]
    if len(pos) >= 2:
        slope = float(np.polyfit(np.log([r.delta for r in pos]), np.log([max(r.error, 1e-300) for r in pos]), 1)[0])
        ratios = np.array([r.error / r.delta ** e for r in pos])
        C, spread = float(ratios.max()), float(ratios.max() / max(ratios.min(), 1e-300))
    else:
        slope, C, spread = float("nan"), float("nan"), float("nan")
    ordered = sorted(records, key=lambda r: r.delta)
    monotone = all(y.error >= 0.9 * x.error for x, y in zip(ordered, ordered[1:]))
    return SweepReport(records, e, slope, C, spread, monotone)


def _atomic_write(path: str, text: str) -> None:
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _run_level(dsA, dsB, opB, truth, base, tau_star, cfg, i, level):
    seed = cfg.seed + i
    noisy = perturb(dsB, cfg.eig_scale * level, cfg.trace_scale * level, seed, aleph=opB.aleph)
    noisy = align(noisy, dsB)
    dl = delta_metric(noisy, dsB)
    rec = reconstruct(dsA, noisy, replace(base, delta=dl.total), alpha=opB.alpha,
                      tau_star=tau_star, truth=truth)
    d = rec.diagnostics
    log.info("level %.3g: delta %.4g tau %.3g error %.4g", level, dl.total, d["tau"],
             d["H-1_relative_error"])
    return StabilityRecord(float(level), dl.total, dl.traces, dl.eigenvalues,
                           d["H-1_relative_error"], d["H-1_error"], d["tau"], seed)


def stability_sweep(cfg: ExperimentConfig, base_dir: str | None = None,
                    data: tuple[SpectralDataset, SpectralDataset, RobinOperator, RobinOperator] | None = None,
                    workers: int = 1) -> SweepReport:
    """Reconstruct ``q - q~`` from clean data of q and perturbed data of q~ at each level.

    At level ``eta`` the reference data get eigenvalue jitter ``eig_scale * eta`` and trace
    noise ``trace_scale * eta``; they are aligned to the clean reference, delta is measured
    against it, and tau follows from delta. Levels are independent and may run on several
    threads; the records file is rewritten atomically as each level finishes, so a failure
    leaves the completed levels on disk.
    """
    if data is None:
        opA = load_operator_spec(cfg.true_operator, base_dir)
        opB = load_operator_spec(cfg.reference_operator, base_dir)
        if opA.grid != opB.grid:
            raise GridError("true and reference operators must share the grid")
        if not np.array_equal(opA.alpha.values, opB.alpha.values):
            raise ValueError("true and reference operators must share the Robin coefficient")
        dsA, dsB = forward(opA, cfg.K), forward(opB, cfg.K)
    else:
        dsA, dsB, opA, opB = data
    n = opA.grid.n
    truth = ScalarField(opA.grid, opA.q.values - opB.q.values)
    base = params_from_dict(cfg.reconstruction, n)
    tau_star = max(opA.constants.tau_star, opB.constants.tau_star)
    done: dict[int, StabilityRecord] = {}
    lock = threading.Lock()

    def finish(i, rec):
        with lock:
            done[i] = rec
            if cfg.records_csv:
                part = [done[j] for j in sorted(done)]
                _atomic_write(cfg.records_csv, summarize_sweep(part, n, base.beta).to_csv())

    args = (dsA, dsB, opB, truth, base, tau_star, cfg)
    if workers <= 1:
        for i, level in enumerate(cfg.levels):
            finish(i, _run_level(*args, i, level))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(_run_level, *args, i, level): i for i, level in enumerate(cfg.levels)}
            for fut in as_completed(futs):
                finish(futs[fut], fut.result())
    report = summarize_sweep([done[j] for j in sorted(done)], n, base.beta)
    if cfg.report_json:
        _atomic_write(cfg.report_json, report.to_json())
    return report
