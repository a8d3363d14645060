"""pdf-weighted Hessians, optimal metrics and continuous interpolation-error estimates."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .metric import (
    MetricField,
    clamp_eigenvalues,
    eigenvalue_bounds,
    implied_metrics,
    integrate_vertex_field,
    mesh_complexity,
)
from .quadrature import _density, newton_cotes_rule, subgrid_points
from .recovery import recover_hessian

logger = logging.getLogger(__name__)

# Constant of the continuous linear-interpolation error model, per dimension.
INTERP_CONSTANT = {2: 1.0 / 8.0, 3: 1.0 / 10.0}


@dataclass(frozen=True)
class ErrorBudget:
    K: float
    dim: int
    E_opt: float


def abs_weighted(H, rho):
    """|rho H| per vertex: absolute eigenvalues scaled by the density, no clamping."""
    lam, vec = np.linalg.eigh(H)
    lam = np.abs(lam) * np.asarray(rho, dtype=float)[:, None]
    return np.einsum("nij,nj,nkj->nik", vec, lam, vec)


def weighted_hessian(H, rho, box):
    """SPD weighted Hessian |rho H| with eigenvalues clamped to the data bounds."""
    floor, cap = eigenvalue_bounds(box)
    return clamp_eigenvalues(abs_weighted(H, rho), floor, cap)


def _det_power(W):
    d = W.shape[-1]
    return np.clip(np.linalg.det(W), 0.0, None) ** (1.0 / (2.0 + d))


def _is_degenerate(W, box):
    floor, _ = eigenvalue_bounds(box)
    return bool(np.all(np.linalg.eigvalsh(W) <= floor * (1.0 + 1e-9)))


def optimal_stochastic_metric(mesh, W, complexity) -> MetricField:
    """Metric minimizing the weighted L1 interpolation error at fixed complexity.

    The result is clamped to the eigenvalue bounds of the box and then rescaled
    by bisection so that its complexity matches the request.
    """
    if not complexity > 0:
        raise ValueError("complexity must be positive")
    W = np.asarray(W, dtype=float)
    d = mesh.dim
    degenerate = _is_degenerate(W, mesh.box)
    if degenerate:
        logger.warning("weighted Hessian is at the floor everywhere: using a uniform metric")
        W = np.broadcast_to(np.eye(d), W.shape).copy()
    g = _det_power(W)
    I = integrate_vertex_field(mesh, g)
    M = (complexity ** (2.0 / d) * I ** (-2.0 / d)) * W / g[:, None, None]
    floor, cap = eigenvalue_bounds(mesh.box)
    M = _rescale_clamped(mesh, M, complexity, floor, cap)
    return MetricField(mesh, M, degenerate=degenerate)


def _rescale_clamped(mesh, M, complexity, floor, cap, tol=1e-6):
    def cplx(s):
        return mesh_complexity(MetricField(mesh, clamp_eigenvalues(s * M, floor, cap)))

    if abs(cplx(1.0) / complexity - 1.0) <= tol:
        return clamp_eigenvalues(M, floor, cap)
    lo, hi = 1.0, 1.0
    while cplx(lo) > complexity and lo > 1e-30:
        lo *= 0.5
    while cplx(hi) < complexity and hi < 1e30:
        hi *= 2.0
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        if cplx(mid) < complexity:
            lo = mid
        else:
            hi = mid
        if hi / lo - 1.0 < tol:
            break
    return clamp_eigenvalues(np.sqrt(lo * hi) * M, floor, cap)


def error_constant(mesh, W) -> float:
    """K = (integral of det(W)^(1/(2+d)))^((2+d)/d)."""
    d = mesh.dim
    return integrate_vertex_field(mesh, _det_power(np.asarray(W))) ** ((2.0 + d) / d)


def optimal_error_and_constant(mesh, W, complexity) -> ErrorBudget:
    d = mesh.dim
    K = error_constant(mesh, W)
    return ErrorBudget(K, d, d * complexity ** (-2.0 / d) * K)


def optimal_error(K, dim, complexity):
    return dim * np.asarray(complexity, dtype=float) ** (-2.0 / dim) * K


def required_complexity(K, dim, target_error):
    """Complexity at which the optimal-metric error model reaches ``target_error``."""
    t = np.asarray(target_error, dtype=float)
    if np.any(t <= 0):
        raise ValueError("target error must be positive")
    out = (dim * np.asarray(K, dtype=float) / t) ** (dim / 2.0)
    return float(out) if out.ndim == 0 else out


def continuous_error(mesh, W, M) -> float:
    """Integral of trace(M^(-1/2) W M^(-1/2)) over the mesh, vertex-averaged."""
    tr = np.einsum("nij,nji->n", np.linalg.inv(M), W)
    return integrate_vertex_field(mesh, tr)


def interp_error_estimate(mesh, values, pdf, hessian=None) -> float:
    """Estimated E[eta] on the realized mesh.

    Uses the metric in which each element is unit and the recovered |rho H|.
    """
    H = recover_hessian(mesh, values) if hessian is None else hessian
    rho = _density(pdf, mesh.vertices)
    A = abs_weighted(H, rho)[mesh.simplices].mean(axis=1)
    Minv = np.linalg.inv(implied_metrics(mesh.vertices[mesh.simplices]))
    tr = np.einsum("mij,mji->m", Minv, A)
    return float(INTERP_CONSTANT[mesh.dim] * np.sum(np.abs(mesh.volumes) * tr))


def evaluated_interp_error(mesh, values, exact_fn, pdf, degree=3) -> float:
    """E[eta] from the exact function on a Newton-Cotes subgrid of every element."""
    X, Wq, _ = subgrid_points(mesh, degree)
    bary, _ = newton_cotes_rule(mesh.dim, degree)
    pts = X.reshape(-1, mesh.dim)
    interp = np.einsum("qk,mk->mq", bary, np.asarray(values, dtype=float)[mesh.simplices])
    exact = np.asarray(exact_fn(pts), dtype=float).reshape(interp.shape)
    rho = _density(pdf, pts).reshape(interp.shape)
    return float(np.sum(Wq * rho * np.abs(exact - interp)))
