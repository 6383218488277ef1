import json

import pytest

from bl_lab import cli
from bl_lab.resolvent import ResolventError

OP = {"grid": {"n": 3, "side_lengths": [1, 1, 1], "nodes_per_axis": 9}, "q": "zero", "alpha": 0.0}
BUMP = {**OP, "q": {"builtin": "bump", "radius": 0.3}}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.delenv("BL_LAB_CACHE", raising=False)
    (tmp_path / "neumann_cube.json").write_text(json.dumps(OP))
    (tmp_path / "bump.json").write_text(json.dumps(BUMP))
    return tmp_path


def _forward(workdir, spec, out, K=30, *extra):
    assert cli.main(["forward", "--op", str(workdir / spec), "--K", str(K), "--out", str(workdir / out),
                     *extra]) == 0
    return workdir / out


def test_forward_bit_identical(workdir):
    a = _forward(workdir, "neumann_cube.json", "a.bin", 50, "--seed", "1")
    b = _forward(workdir, "neumann_cube.json", "b.bin", 50, "--seed", "1")
    assert a.read_bytes() == b.read_bytes()


def test_verify_reports_each_estimate(workdir, capsys):
    ds = _forward(workdir, "bump.json", "ds.bin", 20, "--interior")
    code = cli.main(["verify", "--op", str(workdir / "bump.json"), "--ds", str(ds), "--probes", "6",
                     "--tau", "1,2,5", "--other", str(workdir / "neumann_cube.json")])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    names = {r["name"] for r in report["records"]}
    assert {"re1", "re2", "re4", "re5", "re7", "lim1", "lim2"} <= names


def test_reconstruct_identical_data(workdir, capsys):
    _forward(workdir, "bump.json", "ds.bin", 40)
    (workdir / "m.json").write_text(json.dumps({
        "datasetA": "ds.bin", "datasetB": "ds.bin", "tau": 3, "rho": "auto", "K_use": 40, "ell": 1,
        "lattice": {"padding": "auto", "ball_radius": "auto"}}))
    assert cli.main(["reconstruct", "--manifest", str(workdir / "m.json"),
                     "--out", str(workdir / "rec.field")]) == 0
    diag = json.loads(capsys.readouterr().out)
    assert diag["H-1_error"] == 0.0
    assert (workdir / "rec.field").exists()


def test_psi_and_delta(workdir, capsys):
    assert cli.main(["psi", "2", "4.5399929762484854e-05"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.01, rel=1e-12)
    a = _forward(workdir, "neumann_cube.json", "a.bin", 20)
    b = _forward(workdir, "bump.json", "b.bin", 20)
    assert cli.main(["delta", str(a), str(a)]) == 0
    assert json.loads(capsys.readouterr().out)["delta"] == 0.0
    assert cli.main(["delta", str(a), str(b), "--out", str(workdir / "d.json")]) == 0
    d = json.loads((workdir / "d.json").read_text())
    assert d["delta"] == pytest.approx(d["traces"] + d["eigenvalues"])


def test_stability_writes_csv(workdir, capsys):
    cfg = {"schema_version": 1, "true_operator": BUMP, "reference_operator": OP, "K": 40,
           "levels": [1e-3, 1e-1], "perturbation": {"eig_scale": 1.0, "trace_scale": 1.0, "seed": 0},
           "reconstruction": {"tau": 3.0}}
    (workdir / "cfg.json").write_text(json.dumps(cfg))
    out = workdir / "rec.csv"
    assert cli.main(["stability", "--config", str(workdir / "cfg.json"), "--out", str(out),
                     "--threads", "2"]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 3
    assert "exponent e = 0.133333" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["bogus"],
    [],
    ["forward"],
    ["psi", "0", "1"],
])
def test_invalid_input_exit_2(argv, workdir):
    with pytest.raises(SystemExit) as exc:
        code = cli.main(argv)
        raise SystemExit(code)
    assert exc.value.code == 2


def test_missing_file_exit_2(workdir):
    assert cli.main(["forward", "--op", str(workdir / "missing.json")]) == 2
    (workdir / "bad.json").write_text("{not json")
    assert cli.main(["forward", "--op", str(workdir / "bad.json")]) == 2


def test_numerical_failure_exit_3(workdir, monkeypatch):
    def boom(*args, **kwargs):
        raise ResolventError("lambda on the spectrum")

    monkeypatch.setattr(cli, "verify_resolvent_bounds", boom)
    assert cli.main(["verify", "--op", str(workdir / "neumann_cube.json")]) == 3
