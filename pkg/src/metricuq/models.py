"""Test problems, probability densities, DoE sampling and deterministic-model wrappers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import stats
from scipy.stats import qmc

# -- probability densities ------------------------------------------------------


@dataclass
class Pdf:
    """Joint density on a box with a sampler.

    ``marginals`` holds frozen scipy distributions (already truncated to the
    box) when the density is a product; otherwise sampling falls back to
    acceptance-rejection against ``rho_max``.
    """

    name: str
    box: np.ndarray
    density_fn: Callable[[np.ndarray], np.ndarray]
    rho_max: float
    marginals: list | None = None
    normalization: float = field(init=False)

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=float)
        self.normalization = _grid_integral(self.density_fn, self.box)
        if abs(self.normalization - 1.0) > 1e-3:
            raise ValueError(f"pdf {self.name!r} integrates to {self.normalization}, not 1")

    @property
    def dim(self) -> int:
        return self.box.shape[0]

    def density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.density_fn(x)

    def __call__(self, x):
        return self.density(x)

    def map_unit(self, u) -> np.ndarray:
        """Map points of the unit cube through the marginal inverse CDFs."""
        if self.marginals is None:
            raise TypeError(f"pdf {self.name!r} is not a product of marginals")
        u = np.atleast_2d(u)
        return np.column_stack([m.ppf(u[:, k]) for k, m in enumerate(self.marginals)])

    def sample(self, n, rng) -> np.ndarray:
        """Plain Monte Carlo draws."""
        if self.marginals is not None:
            return self.map_unit(rng.random((n, self.dim)))
        return self._reject(n, lambda k: self._uniform(rng.random((k, self.dim))), rng)

    def _uniform(self, u):
        lo, hi = self.box[:, 0], self.box[:, 1]
        return lo + u * (hi - lo)

    def _reject(self, n, draw, rng):
        out = []
        got = 0
        while got < n:
            x = draw(n)
            keep = rng.random(len(x)) * self.rho_max < self.density_fn(x)
            out.append(x[keep])
            got += int(keep.sum())
        return np.concatenate(out)[:n]


def _grid_integral(fn, box, n_total=1_000_000):
    d = box.shape[0]
    n = max(8, int(round(n_total ** (1.0 / d))))
    h = (box[:, 1] - box[:, 0]) / n
    axes = [box[k, 0] + (np.arange(n) + 0.5) * h[k] for k in range(d)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    return float(np.sum(fn(grid)) * np.prod(h))


def uniform_pdf(box) -> Pdf:
    box = np.asarray(box, dtype=float)
    vol = float(np.prod(box[:, 1] - box[:, 0]))
    margs = [stats.uniform(loc=lo, scale=hi - lo) for lo, hi in box]
    return Pdf("uniform", box, lambda x: np.full(len(x), 1.0 / vol), 1.0 / vol, margs)


DISCO_HIGH = (1.0 - (2.6 - 0.5 * 0.2**2 * math.pi) * 0.005 - (0.5 * 0.2**2 * math.pi) * 0.9) / 1.4


def disco_density(x) -> np.ndarray:
    """Piecewise-constant density on [-1, 1]^2; branches tested in order."""
    x = np.atleast_2d(x)
    x1, x2 = x[:, 0], x[:, 1]
    upper = x2 >= -0.3 * x1 + 0.3
    circle = x1**2 + (x2 + 1.0) ** 2 <= 0.2**2
    return np.where(upper, DISCO_HIGH, np.where(circle, 0.9, 0.005))


def disco_pdf() -> Pdf:
    return Pdf("disco", [[-1.0, 1.0], [-1.0, 1.0]], disco_density, 0.9)


def lognormal_params(mean, cv):
    """(mu, sigma) of the underlying normal for a lognormal with given mean and CV."""
    s2 = math.log(1.0 + cv * cv)
    return math.log(mean) - 0.5 * s2, math.sqrt(s2)


class _Truncated:
    """Frozen distribution truncated to its [q, 1-q] quantile interval."""

    def __init__(self, dist, tail):
        self.dist = dist
        self.lo, self.hi = dist.ppf(tail), dist.ppf(1.0 - tail)
        self.clo, self.chi = dist.cdf(self.lo), dist.cdf(self.hi)
        self.mass = self.chi - self.clo

    def pdf(self, x):
        inside = (x >= self.lo) & (x <= self.hi)
        return np.where(inside, self.dist.pdf(x) / self.mass, 0.0)

    def ppf(self, u):
        return self.dist.ppf(self.clo + np.asarray(u) * self.mass)


def lognormal_pdf(means, cvs, tail=1e-6) -> Pdf:
    margs = []
    for m, cv in zip(means, cvs):
        mu, s = lognormal_params(m, cv)
        margs.append(_Truncated(stats.lognorm(s=s, scale=math.exp(mu)), tail))
    box = np.array([[t.lo, t.hi] for t in margs])

    def dens(x):
        out = np.ones(len(x))
        for k, t in enumerate(margs):
            out *= t.pdf(x[:, k])
        return out

    peak = 1.0
    for m, cv in zip(means, cvs):
        mu, s = lognormal_params(m, cv)
        mode = math.exp(mu - s * s)
        peak *= float(stats.lognorm(s=s, scale=math.exp(mu)).pdf(mode))
    return Pdf("lognormal", box, dens, peak / min(t.mass for t in margs), margs)


def matched_uniform_pdf(means, cvs) -> Pdf:
    """Uniform marginals with the given means and coefficients of variation."""
    half = [math.sqrt(3.0) * m * cv for m, cv in zip(means, cvs)]
    return uniform_pdf([[m - h, m + h] for m, h in zip(means, half)])


def lhs_sample(pdf: Pdf, n: int, seed) -> np.ndarray:
    """Latin hypercube design mapped through the pdf.

    Product densities use marginal inverse CDFs.  Other densities use stratified
    uniform LHS batches on the box, thinned by acceptance-rejection.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    sampler = qmc.LatinHypercube(d=pdf.dim, seed=rng)
    if pdf.marginals is not None:
        return pdf.map_unit(sampler.random(n))
    return pdf._reject(n, lambda k: pdf._uniform(sampler.random(k)), rng)


# -- analytic test functions ------------------------------------------------------


def jakeman_fn(xi, dim=None) -> np.ndarray:
    """Discontinuous test function on [-1, 1]^d, d in {2, 3}."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    d = xi.shape[1] if dim is None else dim
    if d not in (2, 3) or xi.shape[1] != d:
        raise ValueError("jakeman_fn is defined for dim 2 or 3")
    x1, x2 = xi[:, 0], xi[:, 1]
    f1 = np.exp(-(x1**2 + x2**2)) - x1**3 - x2**3
    f2 = 1.0 + f1 + np.sum(xi[:, 1:] ** 2, axis=1) / (4.0 * d)
    a = 3.0 * x1 + 2.0 * x2 >= 0.0
    b = -x1 + 0.3 * x2 < 0.0
    out = np.where(a & b, f1 - 2.0, np.where(a & ~b, 2.0 * f2, f1))
    if d == 2:
        circ = (x1 + 1.0) ** 2 + (x2 + 1.0) ** 2 < 0.95**2
        out = np.where(~a & circ, 2.0 * f1 + 4.0, out)
    return out


# -- piston problem --------------------------------------------------------------


@dataclass(frozen=True)
class PistonState:
    u_piston: float = 1.0
    p_pre: float = 1.0
    rho_pre: float = 1.0
    L: float = 1.0
    t_obs: float = 0.5
    gamma: float = 1.4

    def __post_init__(self):
        for name in ("u_piston", "p_pre", "rho_pre", "L", "t_obs", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


class PistonSolution(NamedTuple):
    p_post: float
    M_shock: float
    u_shock: float
    rho_post: float
    m_obs: float


def piston_arrays(u, p, rho=1.0, L=1.0, t=0.5, gamma=1.4):
    """Vectorized shock relations; returns (p_post, M_shock, u_shock, rho_post, m_obs)."""
    u, p, rho, L = (np.asarray(v, dtype=float) for v in (u, p, rho, L))
    # squared jump relation: x^2 - rho u^2 (g-1)/2 x - rho g p u^2 = 0, x = p_post - p_pre
    b = rho * u * u * 0.5 * (gamma - 1.0)
    c = rho * gamma * p * u * u
    x = 0.5 * (b + np.sqrt(b * b + 4.0 * c))
    p_post = p + x
    M = np.sqrt(1.0 + (gamma + 1.0) / (2.0 * gamma) * x / p)
    u_shock = np.sqrt(gamma * p / rho) * M
    if np.any(u_shock <= u):
        raise ValueError("shock slower than the piston")
    rho_post = rho * u_shock / (u_shock - u)
    m = np.where(t < L / u_shock, 0.0, rho_post * u)
    return p_post, M, u_shock, rho_post, m


def piston_solve(state: PistonState) -> PistonSolution:
    out = piston_arrays(state.u_piston, state.p_pre, state.rho_pre, state.L, state.t_obs, state.gamma)
    return PistonSolution(*(float(v) for v in out))


def piston2_fn(xi):
    xi = np.atleast_2d(xi)
    return piston_arrays(xi[:, 0], xi[:, 1])[4]


def piston3_fn(xi):
    xi = np.atleast_2d(xi)
    return piston_arrays(xi[:, 0], xi[:, 1], L=xi[:, 2])[4]


# -- deterministic models --------------------------------------------------------


class Evaluation(NamedTuple):
    value: np.ndarray
    error: np.ndarray
    constant: np.ndarray


@dataclass
class AnalyticModel:
    """Exact QoI: no deterministic discretization error."""

    fn: Callable
    dim_x: int = 2
    name: str = "analytic"

    def evaluate(self, points, complexity) -> Evaluation:
        pts = np.atleast_2d(points)
        j = np.asarray(self.fn(pts), dtype=float)
        z = np.zeros(len(pts))
        return Evaluation(j, z, z.copy())

    def exact(self, points):
        return np.asarray(self.fn(np.atleast_2d(points)), dtype=float)


@dataclass
class SyntheticModel:
    """QoI biased by the optimal-metric error model d_x C^(-2/d_x) K(xi)."""

    fn: Callable
    k_field: Callable
    dim_x: int = 2
    name: str = "synthetic"

    def evaluate(self, points, complexity) -> Evaluation:
        pts = np.atleast_2d(points)
        C = np.broadcast_to(np.asarray(complexity, dtype=float), (len(pts),))
        if np.any(C <= 0):
            raise ValueError("complexity must be positive")
        K = np.asarray(self.k_field(pts), dtype=float)
        if np.any(K <= 0):
            raise ValueError("error constant must be positive")
        eps = self.dim_x * C ** (-2.0 / self.dim_x) * K
        return Evaluation(np.asarray(self.fn(pts), dtype=float) + eps, eps, K)

    def exact(self, points):
        return np.asarray(self.fn(np.atleast_2d(points)), dtype=float)


def synthetic_det_model(exact, k_field, d_x=2) -> SyntheticModel:
    if not callable(k_field):
        k = float(k_field)
        k_field = lambda x: np.full(len(np.atleast_2d(x)), k)  # noqa: E731
    return SyntheticModel(exact, k_field, d_x)


# -- registry --------------------------------------------------------------------

PISTON_MEANS = {"piston2": (1.0, 1.0), "piston3": (1.0, 1.0, 1.0)}
PISTON_CV = 0.10

MODELS = {
    "jakeman2d": (lambda x: jakeman_fn(x, 2), 2),
    "jakeman3d": (lambda x: jakeman_fn(x, 3), 3),
    "piston2": (piston2_fn, 2),
    "piston3": (piston3_fn, 3),
}
PDF_KINDS = ("uniform", "disco", "lognormal")


class Problem(NamedTuple):
    name: str
    fn: Callable
    pdf: Pdf


def make_problem(name: str, pdf_kind: str) -> Problem:
    if name not in MODELS:
        raise KeyError(f"unknown model {name!r}; available: {sorted(MODELS)}")
    if pdf_kind not in PDF_KINDS:
        raise KeyError(f"unknown pdf {pdf_kind!r}; available: {list(PDF_KINDS)}")
    fn, d = MODELS[name]
    if name.startswith("jakeman"):
        box = [[-1.0, 1.0]] * d
        if pdf_kind == "uniform":
            pdf = uniform_pdf(box)
        elif pdf_kind == "disco":
            if d != 2:
                raise ValueError("the piecewise-constant pdf is two-dimensional")
            pdf = disco_pdf()
        else:
            raise ValueError("lognormal pdf is not defined on the jakeman box")
    else:
        means = PISTON_MEANS[name]
        cvs = [PISTON_CV] * d
        if pdf_kind == "lognormal":
            pdf = lognormal_pdf(means, cvs)
        elif pdf_kind == "uniform":
            pdf = matched_uniform_pdf(means, cvs)
        else:
            raise ValueError("the piecewise-constant pdf is defined for jakeman2d only")
    return Problem(name, fn, pdf)
