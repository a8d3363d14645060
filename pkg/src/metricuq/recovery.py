"""Gradient and Hessian recovery for vertex-sampled fields (double L2 projection)."""

import numpy as np
from scipy.spatial import cKDTree


def element_gradients(mesh, values):
    """Constant P1 gradient on each simplex; ``values`` may carry trailing components."""
    P = mesh.vertices[mesh.simplices]
    T = P[:, 1:] - P[:, :1]  # (m, d, d), rows are edge vectors
    f = np.asarray(values, dtype=float)[mesh.simplices]
    df = f[:, 1:] - f[:, :1]
    if df.ndim == 2:
        return np.linalg.solve(T, df[..., None])[..., 0]
    return np.linalg.solve(T, df)


def _project_to_vertices(mesh, elem_values):
    """Volume-weighted average of element values at vertices (lumped L2 projection)."""
    vol = np.abs(mesh.volumes)
    n = mesh.n_vertices
    flat = elem_values.reshape(len(vol), -1)
    acc = np.zeros((n, flat.shape[1]))
    wsum = np.zeros(n)
    for k in range(mesh.dim + 1):
        idx = mesh.simplices[:, k]
        np.add.at(acc, idx, vol[:, None] * flat)
        np.add.at(wsum, idx, vol)
    if np.any(wsum == 0):
        raise ValueError("isolated vertex: no incident simplex")
    return (acc / wsum[:, None]).reshape((n,) + elem_values.shape[1:])


def recover_gradient(mesh, values):
    """Per-vertex gradient, exact for globally linear fields."""
    return _project_to_vertices(mesh, element_gradients(mesh, values))


def recover_hessian(mesh, values, gradient=None):
    """Per-vertex symmetric Hessian: gradient of the recovered gradient, projected again.

    Vertices whose one-ring is a single simplex take the Hessian of the nearest
    interior vertex.
    """
    g = recover_gradient(mesh, values) if gradient is None else gradient
    # element_gradients gives d(g_a)/dx_b as [..., b, a]
    Hk = element_gradients(mesh, g)
    H = _project_to_vertices(mesh, np.swapaxes(Hk, 1, 2))
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    lonely = mesh.vertex_simplex_counts == 1
    if lonely.any():
        donors = np.flatnonzero(~mesh.on_boundary)
        if donors.size == 0:
            donors = np.flatnonzero(~lonely)
        if donors.size:
            _, j = cKDTree(mesh.vertices[donors]).query(mesh.vertices[lonely])
            H[lonely] = H[donors[j]]
    return H
