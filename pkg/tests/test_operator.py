import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from bl_lab.grid import BoundaryFunction, ScalarField, build_grid, norm
from bl_lab.linalg import smallest_eigs
from bl_lab.operator import (
    OperatorError,
    appendix_a_check,
    assemble,
    boundary_form,
    bump_potential,
    coercivity_check,
    form_apply,
    green_defect,
    ii1_constants,
    laplacian_with_flux,
    load_operator_spec,
    make_potential,
    normal_derivative,
    probe_bank,
    singular_potential,
    trace_norm,
)

# root of tan(w) = 2w / (w^2 - 1) on (1, 2) by brentq at xtol 1e-15; lambda_1 = w^2
ROBIN_1D_OMEGA = 1.3065423741888063
ROBIN_1D_LAMBDA1 = 1.7070529755509227


def _lowest(op, k=1):
    w = op.mass
    S = sp.diags(w ** -0.5) @ op.matrix @ sp.diags(w ** -0.5)
    vals, _ = smallest_eigs(S.tocsc(), k, -op.constants.lambda_star - 1.0)
    return vals


def test_neumann_kernel_is_constants(neumann17, cube17):
    one = np.ones(cube17.size)
    assert np.abs(neumann17.matrix @ one).max() < 1e-12
    assert _lowest(neumann17)[0] == pytest.approx(0.0, abs=1e-10)


def test_robin_1d_lowest_eigenvalue():
    assert np.tan(ROBIN_1D_OMEGA) == pytest.approx(2 * ROBIN_1D_OMEGA / (ROBIN_1D_OMEGA ** 2 - 1), rel=1e-12)
    g = build_grid(1, [1.0], 513)
    op = assemble(g, alpha=1.0)
    assert abs(_lowest(op)[0] - ROBIN_1D_LAMBDA1) <= 1e-3


def test_negative_alpha_beyond_trace_constant_rejected(cube9):
    n_frak = trace_norm(cube9)
    with pytest.raises(OperatorError):
        assemble(cube9, alpha=-2.0 / n_frak ** 2)


def test_slightly_negative_alpha_accepted(cube9):
    n_frak = trace_norm(cube9)
    op = assemble(cube9, alpha=-0.5 / n_frak ** 2)
    assert op.constants.c_lower == pytest.approx(0.5 / n_frak ** 2)
    assert op.constants.lambda_star > 0


def test_trace_inequality_on_probes(cube9):
    n_frak = trace_norm(cube9)
    for u in probe_bank(cube9, 12, seed=3):
        assert norm(u.trace(), "L2") <= n_frak * norm(u, "H1") * (1 + 1e-9)


def test_complex_potential_rejected(cube9):
    q = ScalarField(cube9, np.full(cube9.size, 1j))
    with pytest.raises(OperatorError):
        assemble(cube9, q)


def test_form_constants(cube17):
    one = ScalarField(cube17, np.ones(cube17.size))
    op = assemble(cube17, alpha=1.0)
    assert form_apply(op, one, one).real == pytest.approx(6.0, rel=1e-12)
    op_q = assemble(cube17, ScalarField(cube17, np.full(cube17.size, 2.5)))
    assert form_apply(op_q, one, one).real == pytest.approx(2.5, rel=1e-12)


def test_form_gradient_orthogonal_to_constants(neumann17, cube17):
    u = ScalarField.from_function(cube17, lambda x, y, z: np.sin(np.pi * x))
    one = ScalarField(cube17, np.ones(cube17.size))
    assert abs(form_apply(neumann17, u, one)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_form_conjugate_symmetric(seed):
    g = build_grid(3, [1.0, 1.05, 1.1], 5)
    op = assemble(g, bump_potential(g, radius=0.4), alpha=0.3)
    r = np.random.default_rng(seed)
    u, v = (ScalarField(g, r.normal(size=g.size) + 1j * r.normal(size=g.size)) for _ in range(2))
    assert form_apply(op, u, v) == np.conj(form_apply(op, v, u))


def test_boundary_form(cube17):
    one = ScalarField(cube17, np.ones(cube17.size))
    assert boundary_form(assemble(cube17), one, one) == 0
    op = assemble(cube17, alpha=1.0)
    assert boundary_form(op, one, one).real == pytest.approx(6.0, rel=1e-12)
    # nodal indicator of the x = 0 plane: the face itself plus half-weight edge strips
    # on the four adjacent faces, 1 + 4 * (h / 2)
    ind = ScalarField.from_function(cube17, lambda x, y, z: (x == 0).astype(float))
    h = cube17.spacing[0]
    assert boundary_form(op, ind, ind).real == pytest.approx(1 + 2 * h, rel=1e-12)


def test_normal_derivative_linear_exact(cube17):
    u = ScalarField.from_function(cube17, lambda x, y, z: x)
    dn = normal_derivative(cube17, u)
    for i, face in enumerate(cube17.faces):
        expected = {(0, 0): -1.0, (0, 1): 1.0}.get((face.axis, face.side), 0.0)
        np.testing.assert_allclose(dn.face_values(i), expected, atol=1e-12)
    const = ScalarField(cube17, np.full(cube17.size, 3.0))
    assert np.abs(normal_derivative(cube17, const).values).max() < 1e-12


@pytest.mark.parametrize("nodes", [17, 33])
def test_normal_derivative_exponential(nodes):
    g = build_grid(3, [1, 1, 1], nodes)
    k = 1j * (1 + 1j)
    u = ScalarField.from_function(g, lambda x, y, z: np.exp(k * x))
    face = 1  # x = 1
    got = normal_derivative(g, u).face_values(face)
    h = 1 / (nodes - 1)
    assert np.abs(got - k * np.exp(k)).max() <= 2 * h ** 2 * abs(k) ** 3 * np.exp(1)


def test_flux_identity_exact(cube9, rng):
    u = ScalarField(cube9, rng.normal(size=cube9.size))
    flux = BoundaryFunction(cube9, rng.normal(size=cube9.boundary_size))
    lhs = cube9.weights.ravel() * laplacian_with_flux(cube9, u, flux).flat + cube9.stiffness @ u.flat
    rhs = cube9.trace_matrix.T @ (cube9.boundary_weights * flux.values)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_green_defect_constants_exact(cube9):
    c = ScalarField(cube9, np.full(cube9.size, 2.0))
    assert green_defect(cube9, c, c) == 0.0


@pytest.mark.parametrize("ufn, vfn", [
    (lambda x, y, z: x ** 2, lambda x, y, z: np.ones_like(x)),
    (lambda x, y, z: np.sin(np.pi * x), lambda x, y, z: np.sin(np.pi * x)),
])
def test_green_defect_second_order(ufn, vfn):
    defects = []
    for nodes in (9, 17, 33):
        g = build_grid(3, [1, 1, 1], nodes)
        defects.append(green_defect(g, ScalarField.from_function(g, ufn), ScalarField.from_function(g, vfn)))
    for coarse, fine in zip(defects, defects[1:]):
        assert fine <= coarse / 3.0 or fine < 1e-12


def test_bump_potential_shape(cube17):
    q = bump_potential(cube17, center=[0.5, 0.5, 0.5], radius=0.2)
    assert q.values.max() == pytest.approx(5.0)
    r = np.sqrt(sum((m - 0.5) ** 2 for m in cube17.mesh))
    assert np.all(q.values[r >= 0.2] == 0)


def test_singular_potential_capped(cube9):
    q, capped = singular_potential(cube9, center=[0.5, 0.5, 0.5], exponent=0.9)
    assert np.isfinite(q.values).all()
    assert capped == 1


def test_make_potential_specs(cube9):
    assert not np.any(make_potential(cube9, "zero")[0].values)
    q, label = make_potential(cube9, {"builtin": "bump", "amplitude": 2.0})
    assert q.values.max() <= 2.0 and label.startswith("bump")
    with pytest.raises(OperatorError):
        make_potential(cube9, "wiggle")


def test_load_operator_spec_and_hash(tmp_path):
    spec = {"grid": {"n": 3, "side_lengths": [1, 1, 1], "nodes_per_axis": 7},
            "q": {"builtin": "bump", "radius": 0.3}, "alpha": [0, 0, 1, 1, 0.5, 0.5]}
    a, b = load_operator_spec(spec), load_operator_spec(spec)
    assert a.hash == b.hash
    assert load_operator_spec({**spec, "alpha": 0.0}).hash != a.hash
    assert a.alpha.face_values(4)[0] == 0.5


def test_large_potential_norm_warns(cube9):
    big = ScalarField(cube9, np.full(cube9.size, 50.0))
    with pytest.warns(UserWarning):
        assemble(cube9, big, aleph=1.0)


def test_coercivity_on_probes(cube9):
    op = assemble(cube9, bump_potential(cube9, radius=0.4), alpha=-0.05)
    rep = coercivity_check(op, probe_bank(cube9, 30, seed=0, complex_valued=True))
    assert rep["violations"] == 0


def test_ii1_constants_dominate_probes(cube9):
    op = assemble(cube9, bump_potential(cube9, radius=0.4))
    out = ii1_constants(op, probes=probe_bank(cube9, 20, seed=1))
    Cs = [out[e]["C_eps"] for e in (0.5, 0.1, 0.05)]
    assert Cs == sorted(Cs)  # smaller eps needs a larger constant
    assert all(out[e]["worst_probe_excess"] <= 1e-10 for e in out)


def test_boundary_hoelder_check(cube9):
    op = assemble(cube9, alpha=0.7)
    rep = appendix_a_check(op, probe_bank(cube9, 10, seed=2))
    assert rep["passed"]
    assert rep["s"] == pytest.approx(rep["p"] / (rep["p"] - 2))


def test_probe_bank_deterministic(cube9):
    a, b = probe_bank(cube9, 6, seed=5), probe_bank(cube9, 6, seed=5)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
