import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bl_lab.grid import (
    BoundaryFunction,
    GridError,
    ScalarField,
    build_grid,
    default_box,
    field_from_bytes,
    field_to_bytes,
    fourier_transform,
    hermitian_symmetrize,
    inverse_fourier_transform,
    load_field,
    norm,
    save_field,
)


def test_build_grid_cube17():
    g = build_grid(3, [1, 1, 1], [17, 17, 17])
    assert g.size == 17 ** 3
    assert g.spacing == (1 / 16,) * 3
    assert len(g.faces) == 6
    assert all(f.nodes.size == 17 ** 2 for f in g.faces)


def test_build_grid_smallest_1d():
    g = build_grid(1, [1], [3])
    assert g.size == 3
    assert [f.nodes.tolist() for f in g.faces] == [[0], [2]]


def test_anisotropic_box_spacing():
    g = build_grid(3, [1.0, 1.05, 1.1], [17, 17, 17])
    np.testing.assert_allclose(g.spacing, (1 / 16, 1.05 / 16, 1.1 / 16), rtol=0, atol=1e-15)
    assert default_box(24).side_lengths == (1.0, 1.05, 1.1)


@pytest.mark.parametrize("args", [
    (4, [1] * 4, 5),
    (3, [1, 1], 5),
    (2, [1, 1], [2, 5]),
    (2, [1, -1], 5),
])
def test_build_grid_rejects(args):
    with pytest.raises(GridError):
        build_grid(*args)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_quadrature_weights_sum_to_measure(n):
    g = build_grid(n, [1.0, 1.05, 1.1][:n], 9)
    assert g.weights.sum() == pytest.approx(g.volume, rel=1e-13)
    assert g.boundary_weights.sum() == pytest.approx(g.surface_area, rel=1e-13)


def test_boundary_normals_outward():
    g = build_grid(3, [1, 2, 3], 5)
    pts, nrm = g.boundary_points, g.boundary_normals
    inward = g.center - pts
    assert np.all(np.sum(inward * nrm, axis=1) < 0)


def test_norm_constant_and_zero(cube17):
    one = ScalarField(cube17, np.ones(cube17.size))
    assert norm(one, "L2") == pytest.approx(1.0, rel=1e-13)
    zero = ScalarField.zeros(cube17)
    for kind in ("L2", "Linf", "H1", "H-1"):
        assert norm(zero, kind) == 0.0
    assert norm(zero, "Lp", p=3) == 0.0


@pytest.mark.parametrize("nodes", [17, 33])
def test_norm_sine_l2(nodes):
    g = build_grid(3, [1, 1, 1], nodes)
    f = ScalarField.from_function(g, lambda x, y, z: np.sin(np.pi * x))
    h = 1 / (nodes - 1)
    assert abs(norm(f, "L2") - 1 / math.sqrt(2)) <= 2 * h ** 2


def test_norm_h1_closed_form(cube17):
    # ||sin(pi x)||_H1^2 = 1/2 + pi^2/2; the discrete energy is second-order accurate
    f = ScalarField.from_function(cube17, lambda x, y, z: np.sin(np.pi * x))
    assert norm(f, "H1") == pytest.approx(math.sqrt(0.5 + np.pi ** 2 / 2), rel=5e-3)


def test_norm_hminus1_indicator_1d():
    # whole-line H^-1 norm of the indicator of [0, 1]: Green's function exp(-|x|)/2 gives exp(-1)
    g = build_grid(1, [1], 257)
    one = ScalarField(g, np.ones(g.size))
    assert norm(one, "H-1", padding_factor=32) == pytest.approx(math.exp(-0.5), rel=1e-4)
    # default padding: periodic images bias the value upward by a few percent
    assert 0 < norm(one, "H-1") / math.exp(-0.5) - 1 < 0.03


def test_norm_boundary_function(cube9):
    one = BoundaryFunction.constant(cube9, 1.0)
    assert norm(one, "L2") == pytest.approx(math.sqrt(6.0), rel=1e-13)
    with pytest.raises(ValueError):
        norm(one, "H1")
    with pytest.raises(ValueError):
        norm(one, "Wk")


def test_fourier_constant_at_zero(cube17):
    F = fourier_transform(ScalarField(cube17, np.ones(cube17.size)))
    assert F.value_at([0, 0, 0]) == pytest.approx(1.0, rel=1e-13)


def test_fourier_single_exponential(cube17):
    # with f_hat(xi) = int f exp(-i xi x), the mode exp(+2 pi i x) peaks at xi = (2 pi, 0, 0)
    f = ScalarField.from_function(cube17, lambda x, y, z: np.exp(2j * np.pi * x))
    F = fourier_transform(f)
    h = 1 / 16
    assert abs(F.value_at([2 * np.pi, 0, 0]) - 1) <= 2 * h ** 2
    assert abs(F.value_at([0, 0, 0])) <= 2 * h ** 2


def test_fourier_roundtrip(cube9, rng):
    # forward applies trapezoid weights, the inverse is the plain lattice sum
    f = ScalarField(cube9, rng.normal(size=cube9.size))
    back = inverse_fourier_transform(fourier_transform(f, 2.0))
    cell = np.prod(cube9.spacing)
    np.testing.assert_allclose(back.values, f.values * cube9.weights / cell, atol=1e-12)


def test_fourier_real_input_hermitian(cube9, rng):
    F = fourier_transform(ScalarField(cube9, rng.normal(size=cube9.size)))
    np.testing.assert_array_equal(hermitian_symmetrize(F.samples), F.samples)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=27, max_size=27),
       st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=27, max_size=27))
def test_field_bytes_roundtrip_bit_exact(re, im):
    g = build_grid(3, [1, 1, 1], 3)
    f = ScalarField(g, np.array(re) + 1j * np.array(im))
    back = field_from_bytes(field_to_bytes(f))
    assert back.grid == g
    assert back.values.tobytes() == f.values.astype(complex).tobytes()


def test_save_load_boundary(tmp_path, cube9, rng):
    b = BoundaryFunction(cube9, rng.normal(size=cube9.boundary_size))
    save_field(tmp_path / "b.field", b)
    back = load_field(tmp_path / "b.field")
    assert isinstance(back, BoundaryFunction)
    np.testing.assert_array_equal(back.values.real, b.values)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-10, 10).filter(lambda c: c == 0 or abs(c) > 1e-100))
def test_l2_norm_homogeneous_and_subadditive(seed, c):
    g = build_grid(2, [1.0, 1.3], 6)
    r = np.random.default_rng(seed)
    f, h = (ScalarField(g, r.normal(size=g.size)) for _ in range(2))
    assert norm(f * c, "L2") == pytest.approx(abs(c) * norm(f, "L2"), rel=1e-12, abs=1e-300)
    assert norm(f + h, "L2") <= norm(f, "L2") + norm(h, "L2") + 1e-12
    assert norm(f, "H-1") <= norm(f, "L2") * (1 + 1e-12)


def test_mismatched_grids(cube9, cube17):
    with pytest.raises(GridError):
        ScalarField.zeros(cube9) + ScalarField.zeros(cube17)
