"""Random smooth SPD fields and equal-complexity perturbations for optimality checks."""

import numpy as np

from metricuq.metric import MetricField, mesh_complexity


def smooth_spd_field(points, rng):
    """W(x) = R(theta) diag(a, b) R^T with smooth random theta, a, b."""
    x, y = points[:, 0], points[:, 1]
    c = rng.uniform(0.5, 3.0, 6)
    theta = c[0] * x + c[1] * np.sin(c[2] * y)
    a = np.exp(np.sin(c[3] * x + c[4] * y))
    b = np.exp(np.cos(c[5] * x * y)) * rng.uniform(0.05, 1.0)
    R = np.stack([np.stack([np.cos(theta), -np.sin(theta)], -1), np.stack([np.sin(theta), np.cos(theta)], -1)], -2)
    return np.einsum("nij,nj,nkj->nik", R, np.stack([a, b], -1), R)


def perturb_to_complexity(mesh, M, complexity, rng, scale=0.3):
    """M' = S M S with a random SPD S near identity, rescaled to ``complexity``."""
    d = mesh.dim
    A = rng.normal(scale=scale, size=(mesh.n_vertices, d, d))
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    lam, vec = np.linalg.eigh(A)
    S = np.einsum("nij,nj,nkj->nik", vec, np.exp(lam), vec)
    Mp = S @ M @ S
    c = mesh_complexity(MetricField(mesh, Mp))
    return Mp * (complexity / c) ** (2.0 / d)


def random_metric_target(seed, n_locked=30, box=((0.0, 1.0), (0.0, 1.0))):
    """Locked random points with a smooth anisotropic target of random complexity in [200, 1000]."""
    from metricuq.mesh import delaunay_triangulate

    rng = np.random.default_rng(seed)
    mesh = delaunay_triangulate(rng.random((n_locked, 2)), box)
    W = smooth_spd_field(mesh.vertices, rng)
    C = rng.uniform(200.0, 1000.0)
    return mesh, W * (C / mesh_complexity(MetricField(mesh, W))), C
