import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metricuq.mesh import delaunay_triangulate
from metricuq.recovery import recover_gradient, recover_hessian

from conftest import structured_mesh


def interior(mesh, margin=0.0):
    """Vertices farther than ``margin`` from the box boundary."""
    lo, hi = mesh.box[:, 0] + margin, mesh.box[:, 1] - margin
    return np.all((mesh.vertices > lo + 1e-9) & (mesh.vertices < hi - 1e-9), axis=1)


def test_linear_gradient_exact():
    mesh = structured_mesh(6)
    x = mesh.vertices
    g = recover_gradient(mesh, 3 * x[:, 0] - 2 * x[:, 1])
    np.testing.assert_allclose(g, np.tile([3.0, -2.0], (mesh.n_vertices, 1)), atol=1e-12)


def test_constant_gradient_zero():
    mesh = structured_mesh(4)
    np.testing.assert_allclose(recover_gradient(mesh, np.full(mesh.n_vertices, 7.0)), 0.0, atol=1e-12)


def test_quadratic_gradient_interior():
    mesh = structured_mesh(10)
    x = mesh.vertices
    g = recover_gradient(mesh, x[:, 0] ** 2)
    sel = interior(mesh) & np.isclose(x[:, 0], 0.5)
    # finite-difference oracle: d/dx x^2 at 0.5 is 1, recovery error O(h)
    np.testing.assert_allclose(g[sel, 0], 1.0, atol=0.1)


def test_linear_hessian_zero(rng):
    mesh = delaunay_triangulate(rng.random((50, 2)), [[0, 1], [0, 1]])
    x = mesh.vertices
    H = recover_hessian(mesh, 1.5 * x[:, 0] + 0.3 * x[:, 1] - 2.0)
    np.testing.assert_allclose(H, 0.0, atol=1e-10)


def test_bilinear_hessian():
    mesh = structured_mesh(16)
    x = mesh.vertices
    H = recover_hessian(mesh, x[:, 0] * x[:, 1])
    # boundary gradients are one-sided; their one-ring is excluded
    sel = interior(mesh, 1.0 / 16)
    np.testing.assert_allclose(H[sel, 0, 1], 1.0, atol=0.15)
    np.testing.assert_allclose(H[sel, 0, 0], 0.0, atol=0.15)
    np.testing.assert_allclose(H[sel, 1, 1], 0.0, atol=0.15)


def test_square_hessian():
    mesh = structured_mesh(16)
    H = recover_hessian(mesh, mesh.vertices[:, 0] ** 2)
    np.testing.assert_allclose(H[interior(mesh, 1.0 / 16), 0, 0], 2.0, atol=0.2)


def test_3d_quadratic_hessian():
    mesh = structured_mesh(6, [[0, 1]] * 3)
    x = mesh.vertices
    H = recover_hessian(mesh, x[:, 0] ** 2 + 3 * x[:, 1] * x[:, 2])
    ref = np.array([[2.0, 0, 0], [0, 0, 3.0], [0, 3.0, 0]])
    sel = interior(mesh, 1.0 / 6)
    assert sel.sum() > 0
    np.testing.assert_allclose(H[sel], np.broadcast_to(ref, H[sel].shape), atol=0.3)


def test_hessian_error_decreases_with_refinement():
    errs = []
    for n in (4, 8, 16):
        mesh = structured_mesh(n)
        x = mesh.vertices
        H = recover_hessian(mesh, x[:, 0] ** 2 + x[:, 0] * x[:, 1])
        ref = np.array([[2.0, 1.0], [1.0, 0.0]])
        errs.append(np.abs(H[interior(mesh)] - ref).max())
    assert errs[0] >= errs[1] >= errs[2] - 1e-12


@given(st.integers(0, 2**32 - 1))
def test_hessian_symmetric(seed):
    rng = np.random.default_rng(seed)
    mesh = delaunay_triangulate(rng.random((30, 2)), [[0, 1], [0, 1]])
    H = recover_hessian(mesh, rng.normal(size=mesh.n_vertices))
    np.testing.assert_array_equal(H, np.swapaxes(H, 1, 2))
    assert np.all(np.isfinite(H))


def test_values_shape_checked():
    mesh = structured_mesh(2)
    with pytest.raises(Exception):
        recover_gradient(mesh, np.zeros(3))
