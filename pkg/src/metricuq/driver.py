"""Adaptation loops: stochastic refinement, sample-wise deterministic control, total control.

A :class:`Runner` owns the mutable state of one run (mesh, sample store, cycle
log, step counters) and can be checkpointed to and restored from a directory.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .estimate import (
    evaluated_interp_error,
    interp_error_estimate,
    optimal_stochastic_metric,
    required_complexity,
    weighted_hessian,
)
from .mesh import SimplexMesh, delaunay_triangulate, read_mesh, write_mesh
from .models import lhs_sample
from .quadrature import DEFAULT_DEGREE, Surrogate, compute_weights, expectation, variance
from .recovery import recover_hessian
from .remesh import MesherOptions, adapt_mesh, metric_gradation

logger = logging.getLogger(__name__)

CYCLE_COLUMNS = ("cycle", "N_xi", "mean_N_x", "mean_j", "var_j", "mean_eps", "mean_eta", "action")
ACTIONS = ("none", "stochastic", "deterministic")
TIE_RTOL = 1e-9


# -- sample store ---------------------------------------------------------------


@dataclass
class SampleRecord:
    point: tuple
    j: float
    eps: float = 0.0
    K_x: float = 0.0
    C_x: float = 0.0
    model: str = ""


class SampleStore:
    """Evaluated points keyed by box-normalized coordinates rounded to 12 digits."""

    def __init__(self, box):
        self.box = np.asarray(box, dtype=float)
        self.records: dict[tuple, SampleRecord] = {}
        self.n_evaluations = 0

    def key(self, x) -> tuple:
        lo, hi = self.box[:, 0], self.box[:, 1]
        u = (np.asarray(x, dtype=float) - lo) / (hi - lo)
        return tuple(round(float(v), 12) + 0.0 for v in u)

    def __contains__(self, x) -> bool:
        return self.key(x) in self.records

    def __len__(self) -> int:
        return len(self.records)

    def get(self, x) -> SampleRecord:
        return self.records[self.key(x)]

    def put(self, x, rec: SampleRecord):
        k = self.key(x)
        old = self.records.get(k)
        if old is not None and rec.C_x < old.C_x:
            raise ValueError("spent complexity must not decrease")
        self.records[k] = rec

    def column(self, points, name) -> np.ndarray:
        return np.array([getattr(self.get(p), name) for p in points], dtype=float)

    def dumps(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.box.shape[0]
        w.writerow([f"x{k}" for k in range(d)] + ["j", "eps", "K_x", "C_x", "model"])
        for k in sorted(self.records):
            r = self.records[k]
            w.writerow([repr(float(v)) for v in r.point] + [repr(r.j), repr(r.eps), repr(r.K_x), repr(r.C_x), r.model])
        return buf.getvalue()

    @classmethod
    def loads(cls, text, box, n_evaluations=0) -> "SampleStore":
        store = cls(box)
        rows = list(csv.reader(io.StringIO(text)))
        d = store.box.shape[0]
        for row in rows[1:]:
            pt = tuple(float(v) for v in row[:d])
            j, eps, K, C = (float(v) for v in row[d : d + 4])
            store.records[store.key(pt)] = SampleRecord(pt, j, eps, K, C, row[d + 4])
        store.n_evaluations = n_evaluations
        return store


# -- schedule and log -------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Complexity targets for the stochastic steps.

    ``multiply`` targets ``c_start * factor**l`` at step l; ``fixed-target`` jumps
    to ``C_xi_max`` at every step.  ``c_start`` defaults to the initial vertex count.
    """

    mode: str = "multiply"
    factor: float = 2.0
    n_steps: int = 8
    c_start: float | None = None
    C_xi_max: float = math.inf
    C_x_max: float = math.inf
    C_x_default: float = 100.0

    def __post_init__(self):
        if self.mode not in ("multiply", "fixed-target"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if not self.factor > 1.0:
            raise ValueError("schedule factor must exceed 1")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")
        if self.mode == "fixed-target" and not math.isfinite(self.C_xi_max):
            raise ValueError("fixed-target mode needs a finite C_xi_max")

    def target(self, step: int, n_initial: int) -> float:
        if self.mode == "fixed-target":
            return float(self.C_xi_max)
        c0 = float(n_initial if self.c_start is None else self.c_start)
        return float(min(c0 * self.factor**step, self.C_xi_max))


@dataclass
class CycleRecord:
    cycle: int
    N_xi: int
    mean_N_x: float
    mean_j: float
    var_j: float
    mean_eps: float
    mean_eta: float
    action: str
    eval_eta: float | None = None

    def row(self):
        return [
            str(self.cycle),
            str(self.N_xi),
            repr(float(self.mean_N_x)),
            repr(float(self.mean_j)),
            repr(float(self.var_j)),
            repr(float(self.mean_eps)),
            repr(float(self.mean_eta)),
            self.action,
        ]


def cycles_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CYCLE_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def evaluated_csv(records) -> str:
    lines = ["cycle,N_xi,eval_eta"]
    lines += [f"{r.cycle},{r.N_xi},{r.eval_eta!r}" for r in records if r.eval_eta is not None]
    return "\n".join(lines) + "\n"


def read_cycles_csv(text) -> list[CycleRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        CycleRecord(
            int(r["cycle"]), int(r["N_xi"]), float(r["mean_N_x"]), float(r["mean_j"]),
            float(r["var_j"]), float(r["mean_eps"]), float(r["mean_eta"]), r["action"],
        )
        for r in rows
    ]


def fit_convergence_rate(x, y=None, column="mean_eta"):
    """Least-squares line through (log N, log error); returns (slope, intercept).

    Pass either arrays ``x`` (sample counts) and ``y`` (errors), or a list of
    cycle records and the error column to fit.
    """
    if y is None:
        recs = list(x)
        x = [r.N_xi for r in recs]
        y = [getattr(r, column) for r in recs]
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3:
        raise ValueError("at least 3 points are needed for a rate fit")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("counts and errors must be positive")
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)


# -- run configuration -------------------------------------------------------------


@dataclass(frozen=True)
class AdaptOptions:
    n_initial: int = 10
    seed: int = 0
    quad_degree: int | None = None
    gradation: float | None = 2.0
    threads: int = 1
    mesher: MesherOptions = field(default_factory=MesherOptions)
    interpolate_C_x: bool = False


@dataclass(frozen=True)
class TotalTargets:
    delta_j: float
    it_max: int = 20


class EvaluationError(RuntimeError):
    pass


# -- runner ---------------------------------------------------------------------


class Runner:
    """State and single-step operations shared by all adaptation algorithms."""

    def __init__(self, model, pdf, schedule: Schedule, opts: AdaptOptions, exact_fn=None):
        self.model = model
        self.pdf = pdf
        self.schedule = schedule
        self.opts = opts
        self.exact_fn = exact_fn if exact_fn is not None else getattr(model, "exact", None)
        self.store = SampleStore(pdf.box)
        self.mesh: SimplexMesh | None = None
        self.metric = None
        self.records: list[CycleRecord] = []
        self.stoch_steps = 0
        self.n_initial = 0
        self.pinned = False
        d = pdf.dim
        default = 8 if getattr(pdf, "name", "") == "disco" and d == 2 else DEFAULT_DEGREE[d]
        self.degree = opts.quad_degree or default

    # evaluation ------------------------------------------------------------
    def _call_model(self, pts, C):
        threads = max(1, self.opts.threads)
        if threads == 1 or len(pts) < 2 * threads:
            return self.model.evaluate(pts, C)
        chunks = np.array_split(np.arange(len(pts)), threads)
        Cs = np.broadcast_to(np.asarray(C, dtype=float), (len(pts),))
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda ix: self.model.evaluate(pts[ix], Cs[ix]), chunks))
        return tuple(np.concatenate([p[k] for p in parts]) for k in range(3))

    def _evaluate(self, pts, C):
        for attempt in range(2):
            try:
                j, eps, K = self._call_model(pts, C)
                j, eps, K = (np.asarray(v, dtype=float) for v in (j, eps, K))
                if np.all(np.isfinite(j)):
                    return j, eps, K
                raise EvaluationError("non-finite model output")
            except Exception as exc:  # noqa: BLE001 - model contract is opaque
                logger.warning("model evaluation failed (attempt %d): %s", attempt + 1, exc)
        raise EvaluationError("model evaluation failed twice")

    def _new_complexity(self, idx):
        C = np.full(len(idx), float(self.schedule.C_x_default))
        if self.opts.interpolate_C_x and self.mesh is not None and len(self.store):
            known = np.array([p in self.store for p in self.mesh.vertices])
            if known.any():
                from scipy.spatial import cKDTree

                kp = self.mesh.vertices[known]
                kc = self.store.column(kp, "C_x")
                _, nn = cKDTree(kp).query(self.mesh.vertices[idx])
                C = kc[nn]
        return C

    def evaluate_new(self):
        """Evaluate mesh vertices missing from the store; failing points are nudged."""
        V = self.mesh.vertices
        idx = np.array([i for i, p in enumerate(V) if p not in self.store], dtype=np.int64)
        if idx.size == 0:
            return 0
        C = self._new_complexity(idx)
        try:
            j, eps, K = self._evaluate(V[idx], C)
        except EvaluationError:
            j, eps, K = self._evaluate_one_by_one(idx, C)
            V = self.mesh.vertices
        for n, i in enumerate(idx):
            self.store.put(V[i], SampleRecord(tuple(float(v) for v in V[i]), float(j[n]), float(eps[n]), float(K[n]), float(C[n]), getattr(self.model, "name", "")))
        self.store.n_evaluations += len(idx)
        return len(idx)

    def _evaluate_one_by_one(self, idx, C):
        out = np.zeros((3, len(idx)))
        verts = self.mesh.vertices.copy()
        center = self.pdf.box.mean(axis=1)
        extent = self.pdf.box[:, 1] - self.pdf.box[:, 0]
        for n, i in enumerate(idx):
            try:
                res = self._evaluate(verts[i : i + 1], C[n : n + 1])
            except EvaluationError:
                step = 1e-6 * extent * np.sign(center - verts[i])
                verts[i] = verts[i] + step
                logger.warning("perturbing failed sample %s by %s", verts[i] - step, step)
                res = self._evaluate(verts[i : i + 1], C[n : n + 1])
            out[:, n] = [float(np.asarray(r).ravel()[0]) for r in res]
        mesh = SimplexMesh(verts, self.mesh.simplices, self.mesh.locked, self.mesh.box)
        if not np.all(mesh.volumes > 0):
            raise EvaluationError("perturbed sample invalidates the mesh")
        self.mesh = mesh
        return out[0], out[1], out[2]

    # statistics ------------------------------------------------------------
    def nodal(self, name="j"):
        return self.store.column(self.mesh.vertices, name)

    def surrogate(self) -> Surrogate:
        return Surrogate(self.mesh, self.nodal("j"))

    def moments(self):
        table = compute_weights(self.mesh, self.pdf, self.degree)
        s = self.surrogate()
        mean_j = expectation(s, table)
        var_j = variance(s, self.pdf, self.degree, table)
        mean_eps = expectation(Surrogate(self.mesh, np.abs(self.nodal("eps"))), table)
        mean_eta = interp_error_estimate(self.mesh, s.values, self.pdf)
        return mean_j, var_j, mean_eps, mean_eta

    def log_cycle(self, action) -> CycleRecord:
        mean_j, var_j, mean_eps, mean_eta = self.moments()
        ev = None
        if self.exact_fn is not None:
            ev = evaluated_interp_error(self.mesh, self.nodal("j"), self.exact_fn, self.pdf)
        rec = CycleRecord(
            len(self.records), self.mesh.n_vertices, float(np.mean(self.nodal("C_x"))),
            mean_j, var_j, mean_eps, mean_eta, action, ev,
        )
        self.records.append(rec)
        logger.info("cycle %d %s: N=%d E[eta]=%.4g", rec.cycle, action, rec.N_xi, mean_eta)
        return rec

    # steps -----------------------------------------------------------------
    def initialize(self):
        pts = lhs_sample(self.pdf, self.opts.n_initial, self.opts.seed)
        self.mesh = delaunay_triangulate(pts, self.pdf.box)
        self.n_initial = self.mesh.n_vertices
        self.evaluate_new()
        return self.log_cycle("none")

    def stochastic_step(self) -> CycleRecord:
        self.stoch_steps += 1
        C = self.schedule.target(self.stoch_steps, self.n_initial)
        values = self.nodal("j")
        H = recover_hessian(self.mesh, values)
        rho = np.asarray(self.pdf.density(self.mesh.vertices), dtype=float)
        W = weighted_hessian(H, rho, self.mesh.box)
        M = optimal_stochastic_metric(self.mesh, W, C)
        if self.opts.gradation:
            M = metric_gradation(M, self.opts.gradation)
        mopts = self.opts.mesher
        mopts = MesherOptions(**{**asdict(mopts), "seed": mopts.seed + self.stoch_steps})
        res = adapt_mesh(self.mesh, M, mopts)
        logger.debug("mesher: %s", res.report)
        mesh = res.mesh
        self.mesh = SimplexMesh(mesh.vertices, mesh.simplices, np.ones(mesh.n_vertices, bool), mesh.box)
        self.metric = type(res.metric)(self.mesh, res.metric.tensors)
        self.evaluate_new()
        return self.log_cycle("stochastic")

    def deterministic_step(self, eps_target) -> CycleRecord:
        control_deterministic(self.store, self.model, eps_target, self.schedule.C_x_max, runner=self)
        return self.log_cycle("deterministic")

    # checkpoints -----------------------------------------------------------
    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "samples.csv").write_text(self.store.dumps())
        fields_ = {k: self.nodal(k) for k in ("j", "eps", "C_x")}
        write_mesh(d / "mesh.txt", self.mesh, fields=fields_)
        (d / "cycles.csv").write_text(cycles_csv(self.records))
        (d / "evaluated.csv").write_text(evaluated_csv(self.records))
        state = {
            "stoch_steps": self.stoch_steps,
            "n_initial": self.n_initial,
            "n_evaluations": self.store.n_evaluations,
            "pinned": self.pinned,
            "eval_eta": [r.eval_eta for r in self.records],
        }
        (d / "state.json").write_text(json.dumps(state, indent=1))

    def load(self, directory):
        d = Path(directory)
        state = json.loads((d / "state.json").read_text())
        self.store = SampleStore.loads((d / "samples.csv").read_text(), self.pdf.box, state["n_evaluations"])
        self.mesh = read_mesh(d / "mesh.txt").mesh
        self.records = read_cycles_csv((d / "cycles.csv").read_text())
        for r, ev in zip(self.records, state["eval_eta"]):
            r.eval_eta = ev
        self.stoch_steps = state["stoch_steps"]
        self.n_initial = state["n_initial"]
        self.pinned = state["pinned"]
        return self


# -- algorithms -------------------------------------------------------------------


@dataclass
class RunResult:
    surrogate: Surrogate
    records: list
    store: SampleStore
    converged: bool = True
    pinned: bool = False


def _start(runner, resume_from, callback):
    if resume_from is not None:
        runner.load(resume_from)
    else:
        runner.initialize()
        if callback:
            callback(runner)


def run_stochastic_adaptation(model, pdf, schedule, opts=None, callback=None, resume_from=None) -> RunResult:
    """Adaptive refinement of the stochastic discretization at fixed model fidelity."""
    opts = AdaptOptions() if opts is None else opts
    runner = Runner(model, pdf, schedule, opts)
    _start(runner, resume_from, callback)
    while runner.stoch_steps < schedule.n_steps:
        runner.stochastic_step()
        if callback:
            callback(runner)
    return RunResult(runner.surrogate(), runner.records, runner.store)


def control_deterministic(store: SampleStore, model, eps_target, C_x_max=math.inf, runner=None, d_x=None):
    """Re-run samples whose error exceeds ``eps_target`` at the complexity predicted to meet it.

    Returns the keys that were re-evaluated.  Samples whose required complexity
    exceeds ``C_x_max`` are run at ``C_x_max`` (pinned) and keep a residual error.
    """
    if not eps_target > 0:
        raise ValueError("error target must be positive")
    d_x = getattr(model, "dim_x", 2) if d_x is None else d_x
    keys, C_new = [], []
    pinned = False
    for k in sorted(store.records):
        r = store.records[k]
        if r.eps > eps_target * (1.0 + TIE_RTOL) and r.K_x > 0:
            C = required_complexity(r.K_x, d_x, eps_target)
            if C > C_x_max:
                C, pinned = float(C_x_max), True
            if C > r.C_x:
                keys.append(k)
                C_new.append(C)
    if pinned:
        logger.warning("error target %.3g needs more than C_x_max=%g for some samples", eps_target, C_x_max)
    if runner is not None:
        runner.pinned = runner.pinned or pinned
    if not keys:
        return []
    pts = np.array([store.records[k].point for k in keys])
    C_new = np.array(C_new)
    if runner is not None:
        j, eps, K = runner._evaluate(pts, C_new)
    else:
        j, eps, K = (np.asarray(v, dtype=float) for v in model.evaluate(pts, C_new))
    for n, k in enumerate(keys):
        old = store.records[k]
        store.records[k] = SampleRecord(old.point, float(j[n]), float(eps[n]), float(K[n]), float(C_new[n]), old.model)
    store.n_evaluations += len(keys)
    return keys


def run_total_control(model, pdf, schedule, targets: TotalTargets, opts=None, callback=None, resume_from=None) -> RunResult:
    """Alternate deterministic and stochastic refinement until the total error target is met."""
    opts = AdaptOptions() if opts is None else opts
    runner = Runner(model, pdf, schedule, opts)
    _start(runner, resume_from, callback)
    converged = False
    while True:
        last = runner.records[-1]
        if last.mean_eps + last.mean_eta <= targets.delta_j:
            converged = True
            break
        if len(runner.records) - 1 >= targets.it_max:
            break
        # ties (within rounding) go to the stochastic branch
        if last.mean_eps > last.mean_eta * (1.0 + TIE_RTOL):
            runner.deterministic_step(last.mean_eta)
        else:
            runner.stochastic_step()
        if callback:
            callback(runner)
    if not converged:
        logger.warning("total error target not reached after %d cycles", targets.it_max)
    return RunResult(runner.surrogate(), runner.records, runner.store, converged, runner.pinned)
