"""Riemannian metric tensors: construction, edge lengths, element quality, complexity.

Arrays of metrics are stored as ``(n, d, d)`` stacks; most functions here are
vectorized over the leading axis.  The scalar helpers (:func:`metric_from_eigen`,
:func:`metric_edge_length`, :func:`element_quality`) wrap the batched kernels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
UNIT_EDGE_RANGE = (1.0 / SQRT2, SQRT2)
QUALITY_TOLERANCE = 0.8

# Normalization making the regular simplex with unit edges score 1.
QUALITY_CONSTANT = {2: 4.0 * math.sqrt(3.0), 3: 36.0 / 3.0 ** (1.0 / 3.0)}


@dataclass(frozen=True)
class MetricTensor:
    """A single SPD metric tensor."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] not in (2, 3):
            raise ValueError(f"metric must be 2x2 or 3x3, got shape {m.shape}")
        if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(m).max())):
            raise ValueError("metric is not symmetric")
        object.__setattr__(self, "matrix", 0.5 * (m + m.T))
        if self.eigenvalues.min() <= 0.0:
            raise ValueError("metric is not positive definite")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def _eig(self):
        return np.linalg.eigh(self.matrix)

    @property
    def eigenvalues(self) -> np.ndarray:
        return self._eig[0]

    @property
    def directions(self) -> np.ndarray:
        """Principal directions as columns, ordered like :attr:`eigenvalues`."""
        return self._eig[1]

    @property
    def sizes(self) -> np.ndarray:
        return self.eigenvalues ** -0.5

    @property
    def density(self) -> float:
        return float(math.sqrt(np.linalg.det(self.matrix)))

    @property
    def anisotropy_quotients(self) -> np.ndarray:
        """r_i = h_i^d / prod(h)."""
        h = self.sizes
        return h ** self.dim / np.prod(h)


@dataclass
class MetricField:
    """Piecewise-linear metric field: one tensor per mesh vertex."""

    mesh: object
    tensors: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self.tensors = np.asarray(self.tensors, dtype=float)
        n, d = self.mesh.vertices.shape
        if self.tensors.shape != (n, d, d):
            raise ValueError(
                f"metric field shape {self.tensors.shape} does not match mesh ({n}, {d}, {d})"
            )

    def __getitem__(self, i) -> MetricTensor:
        return MetricTensor(self.tensors[i])


def metric_from_eigen(directions, sizes) -> MetricTensor:
    """Build ``R diag(h^-2) R^T`` from an orthonormal frame (columns) and sizes."""
    R = np.asarray(directions, dtype=float)
    h = np.asarray(sizes, dtype=float)
    d = h.shape[0]
    if R.shape != (d, d):
        raise ValueError("frame and sizes have inconsistent dimensions")
    if np.any(h <= 0.0):
        raise ValueError("sizes must be positive")
    if not np.allclose(R.T @ R, np.eye(d), rtol=0.0, atol=1e-10):
        raise ValueError("frame is not orthonormal")
    return MetricTensor((R * h ** -2.0) @ R.T)


def eigenvalue_bounds(box) -> tuple[float, float]:
    """Eigenvalue floor and cap for data-driven metrics on a parameter box."""
    box = np.asarray(box, dtype=float)
    diag = float(np.linalg.norm(box[:, 1] - box[:, 0]))
    return (10.0 * diag) ** -2.0, (diag / 1e4) ** -2.0


def clamp_eigenvalues(tensors, floor, cap, absolute=False):
    """Clamp eigenvalues of a stack of symmetric matrices into ``[floor, cap]``."""
    lam, vec = np.linalg.eigh(tensors)
    if absolute:
        lam = np.abs(lam)
    lam = np.clip(lam, floor, cap)
    return np.einsum("...ij,...j,...kj->...ik", vec, lam, vec)


def quadratic_form(M, e):
    """e^T M e for stacked symmetric metrics and vectors."""
    d = e.shape[-1]
    out = 0.0
    for i in range(d):
        ei = e[..., i]
        out = out + M[..., i, i] * ei * ei
        for j in range(i + 1, d):
            out = out + 2.0 * M[..., i, j] * ei * e[..., j]
    return out


def edge_lengths(Ma, Mb, e):
    """Metric length of edges ``e`` (n, d) with endpoint metrics Ma, Mb (n, d, d).

    Uses the logarithmic mean of the endpoint lengths, exact when the length
    varies geometrically along the edge.
    """
    la = np.sqrt(quadratic_form(Ma, e))
    lb = np.sqrt(quadratic_form(Mb, e))
    diff = la - lb
    close = np.abs(diff) < 1e-12 * la
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(close, la, diff / np.log(la / np.where(close, 1.0, lb)))
    return out


def metric_edge_length(Ma, Mb, e) -> float:
    e = np.asarray(e, dtype=float)
    if not np.any(e):
        raise ValueError("zero edge vector")
    Ma = getattr(Ma, "matrix", Ma)
    Mb = getattr(Mb, "matrix", Mb)
    return float(edge_lengths(np.asarray(Ma, float), np.asarray(Mb, float), e))


def small_det(A):
    """Determinant of stacked 2x2 or 3x3 matrices by cofactor expansion."""
    if A.shape[-1] == 2:
        return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    return (
        A[..., 0, 0] * (A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1])
        - A[..., 0, 1] * (A[..., 1, 0] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 0])
        + A[..., 0, 2] * (A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0])
    )


def simplex_volumes(P):
    """Signed volumes of simplices given as vertex stacks (m, d+1, d)."""
    d = P.shape[-1]
    T = P[..., 1:, :] - P[..., :1, :]
    return small_det(T) / math.factorial(d)


def local_edges(d):
    """Local vertex pairs of a d-simplex."""
    return [(i, j) for i in range(d + 1) for j in range(i + 1, d + 1)]


def qualities(P, M):
    """Metric quality of simplices ``P`` (m, d+1, d) with vertex metrics ``M`` (m, d+1, d, d).

    Edge lengths use the endpoint formula; the metric volume uses the
    vertex-averaged density.  Inverted or flat elements score 0.
    """
    d = P.shape[-1]
    pairs = local_edges(d)
    ia = [a for a, _ in pairs]
    ib = [b for _, b in pairs]
    E = P[:, ib, :] - P[:, ia, :]
    L = edge_lengths(M[:, ia], M[:, ib], E)
    dens = np.sqrt(np.clip(small_det(M), 0.0, None)).mean(axis=1)
    vol = simplex_volumes(P) * dens
    q = QUALITY_CONSTANT[d] * np.clip(vol, 0.0, None) ** (2.0 / d) / np.sum(L * L, axis=1)
    return np.where(vol > 0.0, q, 0.0)


def element_quality(vertices, metrics) -> float:
    """Quality Q_M of one simplex; 1 for the regular unit simplex, 0 if degenerate."""
    P = np.asarray(vertices, dtype=float)[None]
    M = np.asarray([getattr(m, "matrix", m) for m in metrics], dtype=float)[None]
    vol = simplex_volumes(P)[0]
    if abs(vol) <= 1e-300:
        logger.warning("degenerate simplex: quality set to 0")
        return 0.0
    if vol < 0:
        swap = [1, 0] + list(range(2, P.shape[1]))
        P = P[:, swap]
        M = M[:, swap]
    return float(qualities(P, M)[0])


def element_volumes(mesh):
    return simplex_volumes(mesh.vertices[mesh.simplices])


def integrate_vertex_field(mesh, values):
    """Integral of a vertex field with per-element vertex-averaged quadrature."""
    vol = np.abs(element_volumes(mesh))
    return float(np.sum(vol * np.asarray(values)[mesh.simplices].mean(axis=1)))


def mesh_complexity(field: MetricField) -> float:
    """Continuous complexity: integral of sqrt(det M)."""
    dens = np.sqrt(np.linalg.det(field.tensors))
    return integrate_vertex_field(field.mesh, dens)


def implied_metrics(P):
    """Metric in which each simplex (m, d+1, d) is regular with unit edges."""
    m, _, d = P.shape
    pairs = local_edges(d)
    E = np.stack([P[:, b] - P[:, a] for a, b in pairs], axis=1)  # (m, ne, d)
    iu = np.triu_indices(d)
    coef = E[:, :, iu[0]] * E[:, :, iu[1]]
    coef = coef * np.where(iu[0] == iu[1], 1.0, 2.0)
    sol = np.linalg.solve(coef, np.ones((m, len(pairs), 1)))[..., 0]
    out = np.zeros((m, d, d))
    out[:, iu[0], iu[1]] = sol
    out[:, iu[1], iu[0]] = sol
    return out


def intersect(M1, M2):
    """Metric intersection by simultaneous reduction (batched).

    The result prescribes, in every direction, the smaller of the two sizes.
    """
    L = np.linalg.cholesky(M1)
    Linv = np.linalg.inv(L)
    A = Linv @ M2 @ np.swapaxes(Linv, -1, -2)
    mu, U = np.linalg.eigh(0.5 * (A + np.swapaxes(A, -1, -2)))
    B = L @ U
    return np.einsum("...ij,...j,...kj->...ik", B, np.maximum(mu, 1.0), B)


def interpolate_metrics(M, bary):
    """Linear interpolation of metric entries with barycentric weights (q, k)."""
    return np.einsum("qk,qkij->qij", bary, M)
