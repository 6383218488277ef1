"""Command-line entry point: ``bl-lab <command> ...``.

Exit status is 0 on success, 2 on invalid input and 3 on a numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from . import harness
from .cgo import ReconstructionParams, reconstruct
from .grid import ScalarField, load_field, save_field
from .operator import load_operator_spec
from .resolvent import ResolventError, verify_resolvent_bounds
from .spectral import SpectralError, load_dataset, save_dataset

log = logging.getLogger("bl_lab")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _read_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_forward(args) -> int:
    spec = _read_json(args.op)
    op = load_operator_spec(spec, str(Path(args.op).parent))
    K = args.K if args.K is not None else int(spec.get("K", 50))
    ds = harness.forward(op, K, keep_interior=args.interior)
    out = args.out or "dataset.bin"
    save_dataset(out, ds)
    log.info("wrote %d modes to %s (operator %s)", ds.K, out, op.hash)
    return EXIT_OK


def cmd_verify(args) -> int:
    op = load_operator_spec(_read_json(args.op), str(Path(args.op).parent))
    ds = load_dataset(args.ds) if args.ds else None
    other = load_operator_spec(_read_json(args.other), str(Path(args.other).parent)) if args.other else None
    taus = tuple(float(t) for t in args.tau.split(",")) if args.tau else (1, 2, 5, 10, 20)
    report = verify_resolvent_bounds(op, ds, tau_grid=taus, probe_count=args.probes, seed=args.seed,
                                     other=other)
    _emit(report.to_json(), args.out)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    man = _read_json(args.manifest)
    base = Path(args.manifest).parent
    dsA = load_dataset(base / man["datasetA"])
    dsB = load_dataset(base / man["datasetB"])
    lattice = man.get("lattice", {})
    params = ReconstructionParams(
        n=dsA.grid.n, r=float(man.get("r", 2.0)), tau=man.get("tau", "auto"), rho=man.get("rho", "auto"),
        K_use=man.get("K_use"), ell=int(man.get("ell", 1)), padding=lattice.get("padding", "auto"),
        ball_radius=lattice.get("ball_radius", "auto"), delta=float(man.get("delta", 0.0)),
    )
    alpha = load_field(base / man["alpha"]) if isinstance(man.get("alpha"), str) else float(man.get("alpha", 0.0))
    truth = load_field(base / man["truth"]) if man.get("truth") else None
    if truth is None and dsA.operator_hash == dsB.operator_hash:
        truth = ScalarField(dsA.grid, np.zeros(dsA.grid.size))  # same operator: q - q~ = 0
    rec = reconstruct(dsA, dsB, params, alpha=alpha, tau_star=float(man.get("tau_star", 1.0)), truth=truth)
    diag = dict(rec.diagnostics)
    out = args.out or str(Path(args.manifest).with_suffix(".field"))
    save_field(out, rec.field)
    diag["field"] = out
    _emit(json.dumps(diag, indent=2, default=float), args.report)
    return EXIT_OK


def cmd_stability(args) -> int:
    cfg = harness.ExperimentConfig.from_dict(_read_json(args.config), str(Path(args.config).parent))
    if args.out:
        cfg.records_csv = args.out
    cfg.seed = args.seed if args.seed is not None else cfg.seed
    report = harness.stability_sweep(cfg, str(Path(args.config).parent), workers=args.threads)
    if not cfg.records_csv:
        sys.stdout.write(report.to_csv())
    sys.stderr.write(f"# exponent e = {report.exponent:.6f}  fitted slope = {report.fitted_slope:.4f}  "
                     f"C_fit = {report.C_fit:.4g}  spread = {report.spread:.3g}  "
                     f"monotone = {report.monotone}\n")
    return EXIT_OK


def cmd_psi(args) -> int:
    _emit(repr(harness.psi(args.theta, args.t)), args.out)
    return EXIT_OK


def cmd_delta(args) -> int:
    d = harness.delta_metric(load_dataset(args.dsA), load_dataset(args.dsB))
    _emit(json.dumps({"delta": d.total, "traces": d.traces, "eigenvalues": d.eigenvalues, "K": d.K,
                      "tail_note": d.tail_note}, indent=2), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for parallel stages")
    common.add_argument("--out", default=None, help="primary output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="bl-lab", description="Boundary spectral data: forward solves, bound checks and reconstruction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("forward", parents=[common], help="operator spec -> spectral dataset file")
    f.add_argument("--op", required=True)
    f.add_argument("--K", type=int, default=None)
    f.add_argument("--interior", action="store_true", help="also store interior eigenfields")
    f.set_defaults(func=cmd_forward)

    v = sub.add_parser("verify", parents=[common], help="resolvent bound suite (JSON report)")
    v.add_argument("--op", required=True)
    v.add_argument("--ds", default=None)
    v.add_argument("--other", default=None, help="second operator spec for the trace-limit check")
    v.add_argument("--tau", default=None, help="comma-separated tau grid")
    v.add_argument("--probes", type=int, default=100)
    v.add_argument("--csv", default=None, help="per-probe rows")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("reconstruct", parents=[common], help="manifest -> field file + diagnostics")
    r.add_argument("--manifest", required=True)
    r.add_argument("--report", default=None, help="diagnostics JSON path (default stdout)")
    r.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("stability", parents=[common], help="config -> records CSV")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_stability)

    ps = sub.add_parser("psi", parents=[common], help="evaluate Psi_theta(t)")
    ps.add_argument("theta", type=float)
    ps.add_argument("t", type=float)
    ps.set_defaults(func=cmd_psi)

    d = sub.add_parser("delta", parents=[common], help="data discrepancy between two datasets")
    d.add_argument("dsA")
    d.add_argument("dsB")
    d.set_defaults(func=cmd_delta)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ResolventError, spla.ArpackNoConvergence, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, TypeError, OSError, SpectralError, json.JSONDecodeError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
