import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metricuq.estimate import required_complexity
from metricuq.models import (
    DISCO_HIGH,
    AnalyticModel,
    PistonState,
    disco_density,
    disco_pdf,
    jakeman_fn,
    lhs_sample,
    lognormal_pdf,
    make_problem,
    matched_uniform_pdf,
    piston2_fn,
    piston3_fn,
    piston_arrays,
    piston_solve,
    synthetic_det_model,
    uniform_pdf,
)

# Frozen oracles: mpmath (30 digits) root of the implicit shock relation and
# hand evaluation of the test function and density branches.
PISTON_U1 = dict(p_post=2.2874342087037917, M=1.4503499701905818, u_shock=1.7160772274127263)
PISTON_U2 = dict(p_post=3.8, M=1.8439088914585775, u_shock=2.1817424229271429, rho_post=12.004585323492481, m=24.009170646984963)
PISTON_MIXED = dict(u=1.3, p=0.8, L=0.8, p_post=2.3551316676275743, u_shock=1.7280503468224209, m=5.2481337009665036)
DISCO_HIGH_ORACLE = 0.66483249392910193
JAKEMAN_ORACLE = {(0.0, 0.0): 4.0, (1.0, 0.0): -2.6321205588285577, (-1.0, -1.0): 8.2706705664732254}


# -- Jakeman -------------------------------------------------------------------


@pytest.mark.parametrize("xi,value", JAKEMAN_ORACLE.items())
def test_jakeman_hand_values(xi, value):
    assert jakeman_fn(np.array([xi]))[0] == pytest.approx(value, rel=1e-14)


def test_jakeman_3d_has_no_circle_branch():
    # in 3D the point below the circle is in the plain f1 branch
    x = np.array([[-1.0, -1.0, 0.5]])
    f1 = math.exp(-2.0) + 2.0
    assert jakeman_fn(x)[0] == pytest.approx(f1)


def test_jakeman_dimension_checked():
    with pytest.raises(ValueError):
        jakeman_fn(np.zeros((1, 4)))


def _f1(x1, x2):
    return math.exp(-(x1 * x1 + x2 * x2)) - x1**3 - x2**3


@given(st.floats(-0.9, 0.9))
def test_jakeman_branch_boundaries(t):
    eps = 1e-9
    # 3 x1 + 2 x2 = 0 with -x1 + 0.3 x2 < 0 on the side x1 > 0
    x1 = abs(t) * 0.5 + 0.05
    x2 = -1.5 * x1
    n = np.array([3.0, 2.0]) / math.sqrt(13.0)
    inside = np.array([[x1, x2]]) + eps * n
    outside = np.array([[x1, x2]]) - eps * n
    assert jakeman_fn(inside)[0] == pytest.approx(_f1(*inside[0]) - 2.0)
    a = jakeman_fn(outside)[0]
    assert a in (pytest.approx(_f1(*outside[0])), pytest.approx(2 * _f1(*outside[0]) + 4.0))
    # -x1 + 0.3 x2 = 0 inside the half plane 3 x1 + 2 x2 >= 0
    y2 = abs(t) + 0.05
    y1 = 0.3 * y2
    m = np.array([-1.0, 0.3]) / math.hypot(1.0, 0.3)
    pos = np.array([[y1, y2]]) + eps * m
    neg = np.array([[y1, y2]]) - eps * m
    f2 = 1.0 + _f1(*pos[0]) + pos[0, 1] ** 2 / 8.0
    assert jakeman_fn(pos)[0] == pytest.approx(2.0 * f2)
    assert jakeman_fn(neg)[0] == pytest.approx(_f1(*neg[0]) - 2.0)


def test_jakeman_circle_boundary():
    r = 0.95
    for s, branch in ((-1e-9, "circle"), (1e-9, "plain")):
        x = np.array([[-1.0 + (r + s) / math.sqrt(2), -1.0 + (r + s) / math.sqrt(2)]])
        f1 = _f1(*x[0])
        expected = 2 * f1 + 4.0 if branch == "circle" else f1
        assert jakeman_fn(x)[0] == pytest.approx(expected)


# -- densities -----------------------------------------------------------------


def test_disco_values():
    assert DISCO_HIGH == pytest.approx(DISCO_HIGH_ORACLE, rel=1e-14)
    np.testing.assert_allclose(disco_density([[0, 1], [0, -1], [-1, -0.5]]), [DISCO_HIGH_ORACLE, 0.9, 0.005])


@pytest.mark.parametrize(
    "pdf",
    [
        uniform_pdf([[-1, 1], [-1, 1]]),
        uniform_pdf([[0, 2], [0, 1], [0, 3]]),
        disco_pdf(),
        lognormal_pdf([1, 1], [0.1, 0.1]),
        lognormal_pdf([1, 1, 1], [0.1, 0.1, 0.1]),
        matched_uniform_pdf([1, 1], [0.1, 0.1]),
    ],
    ids=["uniform2", "uniform3", "disco", "lognormal2", "lognormal3", "matched"],
)
def test_pdfs_normalized_and_nonnegative(pdf):
    assert abs(pdf.normalization - 1.0) <= 1e-3
    x = pdf.sample(2000, np.random.default_rng(0))
    assert np.all(pdf.density(x) >= 0)
    assert np.all((x >= pdf.box[:, 0]) & (x <= pdf.box[:, 1]))


def test_unnormalized_pdf_rejected():
    from metricuq.models import Pdf

    with pytest.raises(ValueError):
        Pdf("bad", [[0, 1], [0, 1]], lambda x: np.full(len(x), 2.0), 2.0)


def test_lognormal_box_is_quantile_truncation():
    pdf = lognormal_pdf([1.0], [0.1])
    lo, hi = pdf.box[0]
    assert 0.6 < lo < 0.65 and 1.55 < hi < 1.65


def test_matched_uniform_moments():
    pdf = matched_uniform_pdf([1.0, 1.0], [0.1, 0.1])
    half = math.sqrt(3.0) * 0.1
    np.testing.assert_allclose(pdf.box, [[1 - half, 1 + half]] * 2)


# -- LHS -----------------------------------------------------------------------


def test_lhs_one_per_quartile():
    pts = lhs_sample(uniform_pdf([[0, 1], [0, 1]]), 4, seed=9)
    for k in range(2):
        assert sorted(np.floor(pts[:, k] * 4).astype(int)) == [0, 1, 2, 3]


@given(st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_lhs_stratification_property(n, seed):
    pts = lhs_sample(uniform_pdf([[-1, 1], [-1, 1], [-1, 1]]), n, seed)
    u = (pts + 1.0) / 2.0
    for k in range(3):
        assert sorted(np.floor(u[:, k] * n).astype(int)) == list(range(n))


def test_lhs_deterministic():
    pdf = lognormal_pdf([1, 1], [0.1, 0.1])
    np.testing.assert_array_equal(lhs_sample(pdf, 30, 5), lhs_sample(pdf, 30, 5))
    np.testing.assert_array_equal(lhs_sample(disco_pdf(), 30, 5), lhs_sample(disco_pdf(), 30, 5))


def test_lhs_lognormal_mean():
    pts = lhs_sample(lognormal_pdf([1.0], [0.1]), 10_000, seed=1)
    assert abs(pts.mean() - 1.0) <= 0.01


def test_lhs_disco_follows_density():
    pts = lhs_sample(disco_pdf(), 4000, seed=2)
    high = disco_density(pts) > 0.5
    # probability mass of the two high-density regions is 1 - 0.005 * low area
    assert high.mean() == pytest.approx(1.0 - 0.005 * (2.6 - 0.02 * math.pi), abs=0.01)


def test_lhs_requires_positive_n():
    with pytest.raises(ValueError):
        lhs_sample(uniform_pdf([[0, 1]]), 0, 0)


# -- piston -------------------------------------------------------------------


def test_piston_slow():
    s = piston_solve(PistonState(u_piston=1.0))
    assert s.p_post == pytest.approx(PISTON_U1["p_post"], rel=1e-13)
    assert s.M_shock == pytest.approx(PISTON_U1["M"], rel=1e-13)
    assert s.u_shock == pytest.approx(PISTON_U1["u_shock"], rel=1e-13)
    assert s.u_shock < 2.0
    assert s.m_obs == 0.0


def test_piston_fast():
    s = piston_solve(PistonState(u_piston=2.0))
    assert s.p_post == pytest.approx(3.8, rel=1e-14)
    assert s.M_shock == pytest.approx(PISTON_U2["M"], rel=1e-13)
    assert s.u_shock == pytest.approx(PISTON_U2["u_shock"], rel=1e-13)
    assert s.rho_post == pytest.approx(PISTON_U2["rho_post"], rel=1e-13)
    assert s.m_obs == pytest.approx(PISTON_U2["m"], rel=1e-13)


def test_piston_mixed_state():
    o = PISTON_MIXED
    s = piston_solve(PistonState(u_piston=o["u"], p_pre=o["p"], L=o["L"]))
    assert s.p_post == pytest.approx(o["p_post"], rel=1e-13)
    assert s.u_shock == pytest.approx(o["u_shock"], rel=1e-13)
    assert s.m_obs == pytest.approx(o["m"], rel=1e-13)


def test_piston_acoustic_limit():
    s = piston_solve(PistonState(u_piston=1e-9))
    assert s.p_post == pytest.approx(1.0, abs=1e-8)
    assert s.m_obs == 0.0


def test_piston_state_positive():
    with pytest.raises(ValueError):
        PistonState(u_piston=-1.0)


@given(st.floats(0.6, 1.6), st.floats(0.6, 1.6))
def test_piston_relation_satisfied(u, p):
    g = 1.4
    p_post, M, us, rho_post, m = piston_arrays(u, p)
    x = p_post - p
    c = math.sqrt(g * p)
    assert x == pytest.approx(c * u * math.sqrt(1 + (g - 1) / (2 * g) * x / p), rel=1e-12)
    assert us == pytest.approx(c * M, rel=1e-14)
    assert rho_post * (us - u) == pytest.approx(us, rel=1e-12)


def test_piston_monotone_scans():
    u = np.linspace(0.6, 2.0, 100)
    m_u = piston_arrays(u, np.ones_like(u))[4]
    assert np.all(np.diff(m_u) >= 0)
    L = np.linspace(0.2, 2.0, 100)
    m_L = piston3_fn(np.column_stack([np.full(100, 1.6), np.ones(100), L]))
    assert np.all(np.diff(m_L) <= 0)
    assert m_L[0] > 0 and m_L[-1] == 0


def test_piston2_matches_piston3_at_unit_length():
    x = np.random.default_rng(0).uniform(0.7, 1.6, (50, 2))
    np.testing.assert_array_equal(piston2_fn(x), piston3_fn(np.column_stack([x, np.ones(50)])))


# -- deterministic models ------------------------------------------------------


def test_analytic_model_has_no_error():
    m = AnalyticModel(lambda x: x[:, 0])
    j, eps, K = m.evaluate(np.array([[0.2, 0.3]]), 100.0)
    assert j[0] == 0.2 and eps[0] == 0.0 and K[0] == 0.0


def test_synthetic_model_scaling_and_limit():
    m = synthetic_det_model(lambda x: x[:, 0], 2.0, 2)
    x = np.array([[0.5, 0.5]])
    e1 = m.evaluate(x, 100.0).error[0]
    e4 = m.evaluate(x, 400.0).error[0]
    assert e1 / e4 == pytest.approx(4.0)
    assert m.evaluate(x, 1e12).value[0] == pytest.approx(0.5, abs=1e-10)
    with pytest.raises(ValueError):
        m.evaluate(x, 0.0)


@given(st.floats(1e-3, 10.0), st.floats(1e-6, 1.0), st.sampled_from([2, 3]))
def test_synthetic_roundtrip(K, target, d_x):
    m = synthetic_det_model(lambda x: np.zeros(len(x)), lambda x: np.full(len(x), K), d_x)
    C = required_complexity(K, d_x, target)
    assert m.evaluate(np.zeros((1, 2)), C).error[0] == pytest.approx(target, rel=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(1.0, 1e5))
def test_synthetic_error_equals_bias(seed, C):
    rng = np.random.default_rng(seed)
    m = synthetic_det_model(lambda x: jakeman_fn(x), lambda x: 1.0 + x[:, 0] ** 2, 2)
    x = rng.uniform(-1, 1, (20, 2))
    ev = m.evaluate(x, C)
    np.testing.assert_allclose(ev.error, np.abs(ev.value - m.exact(x)), rtol=1e-12, atol=1e-15)


# -- registry ------------------------------------------------------------------


def test_registry():
    assert make_problem("jakeman2d", "disco").pdf.name == "disco"
    assert make_problem("piston3", "lognormal").pdf.dim == 3
    with pytest.raises(KeyError):
        make_problem("nope", "uniform")
    with pytest.raises(ValueError):
        make_problem("jakeman3d", "disco")
    with pytest.raises(ValueError):
        make_problem("jakeman2d", "lognormal")


def test_piston_rejects_shock_behind_piston():
    # outside the modelled range the squared relation no longer gives a leading shock
    with pytest.raises(ValueError):
        piston_arrays(2.0, 0.5)
