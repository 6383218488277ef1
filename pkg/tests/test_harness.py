import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bl_lab.cgo import ReconstructionParams, reconstruct
from bl_lab.grid import ScalarField, build_grid
from bl_lab.harness import (
    ExperimentConfig,
    boundary_modes,
    delta_metric,
    forward,
    perturb,
    psi,
    stability_sweep,
    summarize_sweep,
    StabilityRecord,
)
from bl_lab.operator import assemble
from bl_lab.spectral import SpectralDataset, SpectralError, load_dataset


def test_psi_branches():
    assert psi(1.5, 0.0) == 0.0
    assert psi(2.0, math.exp(-10.0)) == pytest.approx(0.01, abs=1e-15)
    for theta in (0.1, 1.0, 7.0):
        assert psi(theta, 2.0) == 2.0
        assert psi(theta, math.exp(-1.0)) == math.exp(-1.0)


@pytest.mark.parametrize("theta, t", [(0.0, 0.1), (-1.0, 0.1), (1.0, -0.5)])
def test_psi_rejects(theta, t):
    with pytest.raises(ValueError):
        psi(theta, t)


@settings(max_examples=100)
@given(st.floats(0.01, 10), st.floats(0, 5), st.floats(0, 5))
def test_psi_monotone_on_each_piece(theta, s, t):
    s, t = sorted((s, t))
    cut = math.exp(-1.0)
    if t < cut or s >= cut:
        assert psi(theta, s) <= psi(theta, t)


@pytest.fixture(scope="module")
def small_ds():
    g = build_grid(3, [1.0, 1.05, 1.1], 9)
    op = assemble(g, alpha=0.5)
    return op, forward(op, 40)


def test_delta_identical(small_ds):
    _, ds = small_ds
    d = delta_metric(ds, ds)
    assert (d.total, d.traces, d.eigenvalues) == (0.0, 0.0, 0.0)
    assert "Weyl" in d.tail_note


def test_delta_single_eigenvalue(small_ds):
    _, ds = small_ds
    lam = ds.lambdas.copy()
    lam[0] += 0.5
    assert lam[0] <= lam[1]
    assert delta_metric(ds, replace(ds, lambdas=lam)).total == pytest.approx(0.5, abs=1e-14)


def test_delta_single_trace(small_ds):
    _, ds = small_ds
    g = ds.grid
    unit = np.ones(g.boundary_size) / math.sqrt(g.boundary_weights.sum())
    psis = ds.psis.copy()
    psis[0] += 1e-3 * unit
    assert delta_metric(ds, replace(ds, psis=psis)).total == pytest.approx(1e-3, rel=1e-10)


def test_delta_k_mismatch(small_ds):
    _, ds = small_ds
    with pytest.raises(SpectralError):
        delta_metric(ds, ds.truncated(10))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_delta_triangle(seed):
    g = build_grid(2, [1.0, 1.2], 5)
    r = np.random.default_rng(seed)
    sets = [SpectralDataset(g, np.sort(r.normal(size=6)), r.normal(size=(6, g.boundary_size)))
            for _ in range(3)]
    a, b, c = sets
    assert delta_metric(a, c).total <= delta_metric(a, b).total + delta_metric(b, c).total + 1e-12


def test_boundary_modes_face_supported(small_ds):
    _, ds = small_ds
    modes = boundary_modes(ds.grid)
    assert modes.shape == (60, ds.grid.boundary_size)
    offsets = np.cumsum([0] + [f.nodes.size for f in ds.grid.faces])
    for i, m in enumerate(modes):
        f = i // 10
        assert not np.any(m[:offsets[f]]) and not np.any(m[offsets[f + 1]:])
    # the first mode on each face is the constant
    np.testing.assert_array_equal(modes[0][:offsets[1]], 1.0)


def test_perturb_levels(small_ds):
    op, ds = small_ds
    noisy = perturb(ds, 1e-2, 3e-2, seed=4)
    d = delta_metric(noisy, ds)
    assert d.traces == pytest.approx(3e-2, rel=1e-10)
    assert 0 < d.eigenvalues <= 1e-2
    again = perturb(ds, 1e-2, 3e-2, seed=4)
    assert np.array_equal(again.psis, noisy.psis) and np.array_equal(again.lambdas, noisy.lambdas)
    assert np.all(np.diff(noisy.lambdas) >= 0)


def test_perturb_clamps_at_aleph(small_ds):
    _, ds = small_ds
    with pytest.warns(UserWarning, match="clamped"):
        noisy = perturb(ds, 5.0, 0.0, seed=0, aleph=0.1)
    assert delta_metric(noisy, ds).eigenvalues <= 0.1


def test_forward_cache(tmp_path, monkeypatch, small_ds):
    op, ds = small_ds
    monkeypatch.setenv("BL_LAB_CACHE", str(tmp_path))
    first = forward(op, 30)
    files = list(tmp_path.glob(f"{op.hash}_b_K30.bin"))
    assert len(files) == 1
    np.testing.assert_array_equal(load_dataset(files[0]).lambdas, first.lambdas)
    again = forward(op, 20)  # served by truncating the cached K=30 file
    assert len(list(tmp_path.glob("*.bin"))) == 1
    np.testing.assert_array_equal(again.lambdas, first.lambdas[:20])


def test_config_from_dict(tmp_path):
    base = {"true_operator": {"grid": {}}, "reference_operator": {"grid": {}}}
    cfg = ExperimentConfig.from_dict({**base, "levels": [0.1], "perturbation": {"seed": 3}})
    assert cfg.levels == [0.1] and cfg.seed == 3
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"true_operator": {}})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**base, "schema_version": 2})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**base, "levels": [-1]})
    with pytest.raises(FileNotFoundError):
        ExperimentConfig.from_dict({**base, "true_operator": {"q": {"file": "nope.field"}}}, str(tmp_path))


def test_summarize_exponent_and_spread():
    recs = [StabilityRecord(l, d, d / 2, d / 2, e, e, 3.0, 0)
            for l, d, e in [(1e-3, 1e-3, 0.2), (1e-2, 1e-2, 0.3), (1e-1, 1e-1, 0.5)]]
    rep = summarize_sweep(recs, 3)
    assert rep.exponent == pytest.approx(2 / 15)
    ratios = [0.2 / 1e-3 ** (2 / 15), 0.3 / 1e-2 ** (2 / 15), 0.5 / 1e-1 ** (2 / 15)]
    assert rep.C_fit == pytest.approx(max(ratios))
    assert rep.spread == pytest.approx(max(ratios) / min(ratios))
    assert rep.monotone
    assert "exponent" in json.loads(rep.to_json())


def test_sweep_zero_level_is_clean_floor(small_pair, tmp_path):
    opA, opB, dsA, dsB = small_pair
    cfg = ExperimentConfig({}, {}, K=dsA.K, levels=[0.0], records_csv=str(tmp_path / "r.csv"),
                           report_json=str(tmp_path / "r.json"))
    rep = stability_sweep(cfg, data=(dsA, dsB, opA, opB))
    assert len(rep.records) == 1 and rep.records[0].delta == 0.0
    tau_star = max(opA.constants.tau_star, opB.constants.tau_star)
    truth = ScalarField(dsA.grid, opA.q.values - opB.q.values)
    clean = reconstruct(dsA, dsB, ReconstructionParams(), tau_star=tau_star, truth=truth)
    assert rep.records[0].error == clean.diagnostics["H-1_relative_error"]
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("level,delta,") and len(lines) == 2
    assert json.loads((tmp_path / "r.json").read_text())["exponent"] == pytest.approx(2 / 15)


def test_sweep_parallel_matches_serial(small_pair):
    opA, opB, dsA, dsB = small_pair
    cfg = ExperimentConfig({}, {}, K=dsA.K, levels=[1e-3, 1e-1])
    serial = stability_sweep(cfg, data=(dsA, dsB, opA, opB), workers=1)
    threaded = stability_sweep(cfg, data=(dsA, dsB, opA, opB), workers=2)
    assert serial.records == threaded.records
