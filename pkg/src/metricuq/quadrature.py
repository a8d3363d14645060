"""Piecewise-linear simplex surrogate and pdf-weighted Newton-Cotes quadrature."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy

MAX_DEGREE = {2: 8, 3: 6}
DEFAULT_DEGREE = {2: 5, 3: 3}


def lattice_multi_indices(dim, degree):
    """Multi-indices (i_0..i_dim) with sum ``degree``, lexicographic order."""
    return [
        idx
        for idx in itertools.product(range(degree + 1), repeat=dim + 1)
        if sum(idx) == degree
    ]


def _monomial_exponents(dim, degree):
    return [e for e in itertools.product(range(degree + 1), repeat=dim) if sum(e) <= degree]


def _reference_moment(exps):
    # int over {x_i >= 0, sum x_i <= 1} of prod x_i^a_i = prod(a_i!) / (sum a_i + d)!
    num = math.prod(math.factorial(a) for a in exps)
    return sympy.Rational(num, math.factorial(sum(exps) + len(exps)))


@lru_cache(maxsize=None)
def _exact_rule(dim, degree):
    if dim not in MAX_DEGREE:
        raise ValueError(f"unsupported dimension {dim}")
    if not 1 <= degree <= MAX_DEGREE[dim]:
        raise ValueError(f"Newton-Cotes degree {degree} unsupported in {dim}D (1..{MAX_DEGREE[dim]})")
    idx = lattice_multi_indices(dim, degree)
    pts = [[sympy.Rational(i, degree) for i in mi[1:]] for mi in idx]
    exps = _monomial_exponents(dim, degree)
    V = sympy.Matrix(
        [[math.prod(p[k] ** e[k] for k in range(dim)) for p in pts] for e in exps]
    )
    rhs = sympy.Matrix([_reference_moment(e) for e in exps])
    w = V.LUsolve(rhs)
    return tuple(tuple(mi) for mi in idx), tuple(w)


def newton_cotes_exact(dim, degree):
    """Lattice multi-indices and exact rational weights on the reference simplex."""
    return _exact_rule(dim, degree)


@lru_cache(maxsize=None)
def newton_cotes_rule(dim, degree):
    """Closed Newton-Cotes rule on the reference simplex.

    Returns barycentric points ``(q, dim+1)`` and weights summing to the
    reference volume ``1/dim!``.
    """
    idx, w = _exact_rule(dim, degree)
    bary = np.array(idx, dtype=float) / degree
    bary.flags.writeable = False
    weights = np.array([float(x) for x in w])
    weights.flags.writeable = False
    return bary, weights


@dataclass
class Surrogate:
    """Global piecewise-linear interpolant of nodal values on a simplex mesh."""

    mesh: object
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_vertices,):
            raise ValueError("one value per mesh vertex required")

    def __call__(self, points):
        return interpolate(self, points)


def interpolate(s: Surrogate, points):
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    ids, bc = s.mesh.locate(np.atleast_2d(pts))
    vals = np.einsum("qk,qk->q", bc, s.values[s.mesh.simplices[ids]])
    return float(vals[0]) if single else vals


@dataclass
class QuadratureTable:
    """Per-element, per-vertex pdf-weighted quadrature weights c_(i,k)."""

    weights: np.ndarray
    degree: int
    n_vertices: int

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def vertex_weights(self, simplices) -> np.ndarray:
        """Weights gathered per vertex."""
        out = np.zeros(self.n_vertices)
        np.add.at(out, simplices.ravel(), self.weights.ravel())
        return out


def subgrid_points(mesh, degree):
    """Physical NC subgrid points (m, q, d) and scaled weights (m, q)."""
    bary, w = newton_cotes_rule(mesh.dim, degree)
    P = mesh.vertices[mesh.simplices]
    X = np.einsum("ql,mld->mqd", bary, P)
    scale = np.abs(mesh.volumes) * math.factorial(mesh.dim)
    return X, scale[:, None] * w[None, :], bary


def compute_weights(mesh, pdf, degree=None) -> QuadratureTable:
    """c_(i,k) = sum_l q_(i,l) L_(i,k)(xi_l) rho(xi_l)."""
    degree = DEFAULT_DEGREE[mesh.dim] if degree is None else degree
    X, W, bary = subgrid_points(mesh, degree)
    rho = _density(pdf, X.reshape(-1, mesh.dim)).reshape(W.shape)
    c = np.einsum("mq,mq,qk->mk", W, rho, bary)
    return QuadratureTable(c, degree, mesh.n_vertices)


def _density(pdf, x):
    f = getattr(pdf, "density", pdf)
    return np.asarray(f(x), dtype=float)


def expectation(s: Surrogate, table: QuadratureTable) -> float:
    if table.weights.shape != s.mesh.simplices.shape or table.n_vertices != s.mesh.n_vertices:
        raise ValueError("quadrature table does not match the surrogate mesh")
    return float(np.sum(table.weights * s.values[s.mesh.simplices]))


def second_moment(s: Surrogate, pdf, degree=None) -> float:
    degree = DEFAULT_DEGREE[s.mesh.dim] if degree is None else max(2, degree)
    X, W, bary = subgrid_points(s.mesh, degree)
    rho = _density(pdf, X.reshape(-1, s.mesh.dim)).reshape(W.shape)
    vals = np.einsum("qk,mk->mq", bary, s.values[s.mesh.simplices])
    return float(np.sum(W * rho * vals * vals))


def variance(s: Surrogate, pdf, degree=None, table=None) -> float:
    """E[(I j)^2] - E[I j]^2 on the subgrid rule, clamped at zero."""
    degree = DEFAULT_DEGREE[s.mesh.dim] if degree is None else max(2, degree)
    if table is None or table.degree != degree:
        table = compute_weights(s.mesh, pdf, degree)
    m1 = expectation(s, table)
    return max(0.0, second_moment(s, pdf, degree) - m1 * m1)
