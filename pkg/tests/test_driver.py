import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metricuq.driver import (
    AdaptOptions,
    CycleRecord,
    SampleRecord,
    SampleStore,
    Schedule,
    TotalTargets,
    control_deterministic,
    cycles_csv,
    fit_convergence_rate,
    read_cycles_csv,
    run_stochastic_adaptation,
    run_total_control,
)
from metricuq.estimate import optimal_error, required_complexity
from metricuq.models import AnalyticModel, jakeman_fn, synthetic_det_model, uniform_pdf

BOX = [[-1.0, 1.0], [-1.0, 1.0]]


def quadratic(x):
    return x[:, 0] ** 2 + x[:, 1] ** 2


class CountingModel(AnalyticModel):
    """Analytic model that logs every (point, complexity) it is asked for."""

    def __init__(self, fn):
        super().__init__(fn, name="count")
        self.calls = []

    def evaluate(self, points, C):
        Cs = np.broadcast_to(np.asarray(C, dtype=float), (len(points),))
        self.calls += [(tuple(p), float(c)) for p, c in zip(np.asarray(points), Cs)]
        return super().evaluate(points, C)


# -- sample store -----------------------------------------------------------------


def test_store_key_absorbs_roundoff():
    store = SampleStore(BOX)
    store.put([0.25, -0.5], SampleRecord((0.25, -0.5), 1.0))
    assert [0.25 + 1e-15, -0.5 - 1e-15] in store
    assert [0.25 + 1e-9, -0.5] not in store


def test_store_rejects_complexity_decrease():
    store = SampleStore(BOX)
    store.put([0, 0], SampleRecord((0, 0), 1.0, C_x=10.0))
    with pytest.raises(ValueError):
        store.put([0, 0], SampleRecord((0, 0), 1.0, C_x=5.0))


def test_store_roundtrip():
    store = SampleStore(BOX)
    for k, p in enumerate([(0.1, 0.2), (-0.3, 0.7)]):
        store.put(p, SampleRecord(p, k + 0.5, 0.1 * k, 2.0, 100.0, "m"))
    again = SampleStore.loads(store.dumps(), BOX)
    assert again.records == store.records


# -- schedule and rate fit ------------------------------------------------------------


def test_schedule_targets():
    s = Schedule(factor=2.0, n_steps=3)
    assert [s.target(k, 14) for k in (1, 2, 3)] == [28.0, 56.0, 112.0]
    assert Schedule(c_start=5, C_xi_max=12).target(2, 14) == 12.0
    assert Schedule(mode="fixed-target", C_xi_max=300).target(1, 14) == 300.0
    with pytest.raises(ValueError):
        Schedule(factor=1.0)
    with pytest.raises(ValueError):
        Schedule(mode="fixed-target")


def test_fit_exact_inverse():
    N = np.array([10.0, 20.0, 40.0, 80.0])
    slope, _ = fit_convergence_rate(N, 1.0 / N)
    assert slope == pytest.approx(-1.0, abs=1e-9)


def test_fit_with_constant():
    N = np.array([10.0, 30.0, 100.0, 1000.0])
    slope, icpt = fit_convergence_rate(N, 3.0 * N**-0.67)
    assert slope == pytest.approx(-0.67, abs=1e-12)
    assert icpt == pytest.approx(math.log(3.0), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_fit_noisy(seed):
    rng = np.random.default_rng(seed)
    N = np.geomspace(10, 10_000, 9)
    slope, _ = fit_convergence_rate(N, N**-1.0 * (1.0 + rng.uniform(-0.05, 0.05, N.size)))
    assert -1.1 <= slope <= -0.9


def test_fit_needs_three_positive_points():
    with pytest.raises(ValueError):
        fit_convergence_rate([1, 2], [1, 2])
    with pytest.raises(ValueError):
        fit_convergence_rate([1, 2, 3], [1, 0, 2])


def test_fit_from_records():
    recs = [CycleRecord(k, 10 * 2**k, 0, 0, 0, 0, 2.0 / (10 * 2**k), "stochastic") for k in range(4)]
    assert fit_convergence_rate(recs)[0] == pytest.approx(-1.0)


def test_cycles_csv_roundtrip():
    recs = [CycleRecord(0, 14, 100.0, 0.1, 0.2, 0.0, 0.3, "none"), CycleRecord(1, 30, 150.5, 0.1, 0.2, 1e-3, 0.1, "deterministic")]
    assert read_cycles_csv(cycles_csv(recs)) == recs


# -- deterministic control ----------------------------------------------------------


def synthetic_store(eps_values, K=1.0):
    model = synthetic_det_model(lambda x: np.zeros(len(x)), K, 2)
    store = SampleStore(BOX)
    for n, e in enumerate(eps_values):
        C_n = required_complexity(K, 2, e)
        p = (0.1 * n, 0.0)
        store.put(p, SampleRecord(p, e, e, K, C_n, "syn"))
    return model, store


def test_control_below_target_is_noop():
    model, store = synthetic_store([1e-3, 2e-3])
    before = dict(store.records)
    assert control_deterministic(store, model, 5e-3) == []
    assert store.records == before


def test_control_quadruples_complexity():
    target = 1e-3
    model, store = synthetic_store([4 * target])
    (k,) = store.records
    C_old = store.records[k].C_x
    assert control_deterministic(store, model, target) == [k]
    rec = store.records[k]
    assert rec.C_x == pytest.approx(4.0 * C_old, rel=1e-12)
    assert rec.eps == pytest.approx(target, rel=1e-12)


def test_control_pins_at_budget():
    model, store = synthetic_store([1e-2])
    (k,) = store.records
    control_deterministic(store, model, 1e-6, C_x_max=1e4)
    rec = store.records[k]
    assert rec.C_x == 1e4
    assert rec.eps == pytest.approx(optimal_error(1.0, 2, 1e4), rel=1e-12)
    assert rec.eps > 1e-6


def test_control_rejects_bad_target():
    model, store = synthetic_store([1e-2])
    with pytest.raises(ValueError):
        control_deterministic(store, model, 0.0)


# -- stochastic adaptation ------------------------------------------------------------


def test_zero_steps_is_initial_interpolant():
    pdf = uniform_pdf(BOX)
    res = run_stochastic_adaptation(AnalyticModel(quadratic), pdf, Schedule(n_steps=0))
    assert len(res.records) == 1 and res.records[0].action == "none"
    V = res.surrogate.mesh.vertices
    np.testing.assert_allclose(res.surrogate(V), quadratic(V))
    assert res.surrogate.mesh.n_vertices == 14  # 10 LHS samples plus 4 corners


def test_quadratic_model_scaling():
    pdf = uniform_pdf(BOX)
    res = run_stochastic_adaptation(AnalyticModel(quadratic), pdf, Schedule(n_steps=4))
    eta = [r.mean_eta for r in res.records]
    assert all(b < a for a, b in zip(eta, eta[1:]))
    assert eta[-1] / eta[0] <= 1.5 / 2**4


def test_sample_conservation_and_economy():
    pdf = uniform_pdf(BOX)
    model = CountingModel(jakeman_fn)
    meshes = []
    res = run_stochastic_adaptation(model, pdf, Schedule(n_steps=3), callback=lambda r: meshes.append(r.mesh))
    for a, b in zip(meshes, meshes[1:]):
        later = {tuple(p) for p in b.vertices}
        assert {tuple(p) for p in a.vertices[a.locked]} <= later
    assert res.store.n_evaluations == res.records[-1].N_xi == len(model.calls)
    assert len(set(model.calls)) == len(model.calls)


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    pdf = uniform_pdf(BOX)
    model = AnalyticModel(jakeman_fn)

    def save_after_first(runner):
        if runner.stoch_steps == 1:
            runner.save(tmp_path)

    full = run_stochastic_adaptation(model, pdf, Schedule(n_steps=3), callback=save_after_first)
    resumed = run_stochastic_adaptation(model, pdf, Schedule(n_steps=3), resume_from=tmp_path)
    assert cycles_csv(resumed.records) == cycles_csv(full.records)
    assert [r.eval_eta for r in resumed.records] == [r.eval_eta for r in full.records]


def test_run_deterministic():
    pdf = uniform_pdf(BOX)
    a = run_stochastic_adaptation(AnalyticModel(jakeman_fn), pdf, Schedule(n_steps=3), AdaptOptions(seed=4))
    b = run_stochastic_adaptation(AnalyticModel(jakeman_fn), pdf, Schedule(n_steps=3), AdaptOptions(seed=4))
    assert cycles_csv(a.records) == cycles_csv(b.records)


def test_failed_evaluations_raise():
    from metricuq.driver import EvaluationError

    bad = AnalyticModel(lambda x: np.full(len(x), np.nan))
    with pytest.raises(EvaluationError):
        run_stochastic_adaptation(bad, uniform_pdf(BOX), Schedule(n_steps=0))


# -- total control ------------------------------------------------------------------


def test_total_control_without_model_error_is_pure_refinement():
    pdf = uniform_pdf(BOX)
    model = AnalyticModel(jakeman_fn)
    tot = run_total_control(model, pdf, Schedule(n_steps=100), TotalTargets(0.0, 3))
    ref = run_stochastic_adaptation(model, pdf, Schedule(n_steps=3))
    assert {r.action for r in tot.records[1:]} == {"stochastic"}
    assert cycles_csv(tot.records) == cycles_csv(ref.records)
    assert not tot.converged


def test_total_control_target_already_met():
    pdf = uniform_pdf(BOX)
    model = synthetic_det_model(jakeman_fn, 1.0, 2)
    res = run_total_control(model, pdf, Schedule(), TotalTargets(100.0, 19))
    assert len(res.records) == 1 and res.converged


def test_total_control_alternation_and_budget():
    pdf = uniform_pdf(BOX)
    model = synthetic_det_model(jakeman_fn, 1.0, 2)
    res = run_total_control(model, pdf, Schedule(n_steps=100), TotalTargets(0.03, 10))
    recs = res.records
    assert {"stochastic", "deterministic"} <= {r.action for r in recs}
    for prev, cur in zip(recs, recs[1:]):
        if cur.action == "deterministic":
            assert cur.N_xi == prev.N_xi
            assert cur.mean_N_x >= prev.mean_N_x
    assert res.converged
    assert recs[-1].mean_eps + recs[-1].mean_eta <= 0.03
