"""Command-line front end: ``metricuq run | mc-reference | export``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, load_config
from .driver import (
    read_cycles_csv,
    evaluated_csv,
    cycles_csv,
    fit_convergence_rate,
    run_stochastic_adaptation,
    run_total_control,
)
from .mesh import read_mesh, write_mesh, write_vtk
from .models import AnalyticModel, make_problem, synthetic_det_model

logger = logging.getLogger("metricuq")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def build_model(cfg, problem):
    if cfg.det_model.kind == "synthetic":
        m = synthetic_det_model(problem.fn, cfg.det_model.K, cfg.det_model.d_x)
        m.name = problem.name
        return m
    return AnalyticModel(problem.fn, name=problem.name)


def rates_text(cycles_text: str, evaluated_text: str | None = None) -> str:
    """Fitted log-log rates; the estimate line is computed from cycles.csv itself."""
    lines = []
    recs = read_cycles_csv(cycles_text)
    lines += _rate_lines("estimated", [r.N_xi for r in recs], [r.mean_eta for r in recs])
    if evaluated_text:
        rows = [ln.split(",") for ln in evaluated_text.strip().splitlines()[1:]]
        lines += _rate_lines("evaluated", [int(r[1]) for r in rows], [float(r[2]) for r in rows])
    return "\n".join(lines) + "\n"


def _rate_lines(label, n, err):
    try:
        slope, intercept = fit_convergence_rate(n, err)
    except ValueError:
        slope = intercept = math.nan
    return [f"slope_{label} {slope!r}", f"intercept_{label} {intercept!r}"]


def _cycle_writer(out: Path):
    meshes = out / "meshes"
    meshes.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint"

    def callback(runner):
        cyc = runner.records[-1].cycle
        fields = {k: runner.nodal(k) for k in ("j", "eps", "C_x")}
        metric = getattr(runner, "metric", None)
        write_mesh(meshes / f"cycle_{cyc:03d}.mesh", runner.mesh, metric=metric, fields=fields)
        runner.save(ckpt)
        (out / "cycles.csv").write_text(cycles_csv(runner.records))
        (out / "evaluated.csv").write_text(evaluated_csv(runner.records))

    return callback


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.out is not None:
        cfg.output = args.out
    cfg.validate()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    problem = make_problem(cfg.model, cfg.pdf)
    model = build_model(cfg, problem)
    opts = cfg.adapt_options()
    resume = out / "checkpoint" if args.resume and (out / "checkpoint" / "state.json").exists() else None
    callback = _cycle_writer(out)
    if cfg.algorithm == "stoch":
        res = run_stochastic_adaptation(model, problem.pdf, cfg.schedule_obj(), opts, callback, resume)
    else:
        res = run_total_control(model, problem.pdf, cfg.schedule_obj(), cfg.targets(), opts, callback, resume)
    cyc_text = (out / "cycles.csv").read_text()
    ev_text = (out / "evaluated.csv").read_text()
    (out / "rates.txt").write_text(rates_text(cyc_text, ev_text))
    final = sorted((out / "meshes").glob("cycle_*.mesh"))[-1]
    (out / "surrogate.mesh").write_text(final.read_text())
    status = {"converged": res.converged, "pinned": res.pinned, "n_evaluations": res.store.n_evaluations}
    (out / "status.json").write_text(json.dumps(status, indent=1) + "\n")
    print(f"wrote {out} ({len(res.records)} cycles, {res.store.n_evaluations} evaluations)")
    return EXIT_OK


def mc_reference(fn, pdf, n, seed, chunk=1_000_000) -> dict:
    """Plain Monte Carlo moments of ``fn`` under ``pdf`` with standard errors."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    s1 = s2 = 0.0
    shift = None
    done = 0
    while done < n:
        k = min(chunk, n - done)
        y = np.asarray(fn(pdf.sample(k, rng)), dtype=float)
        if shift is None:
            shift = float(y[0])
        z = y - shift
        s1 += float(z.sum())
        s2 += float((z * z).sum())
        done += k
    mean = shift + s1 / n
    out = {"n": n, "seed": seed, "mean": mean, "mean_se": None, "variance": None, "variance_se": None}
    if n > 1:
        var = (s2 - s1 * s1 / n) / (n - 1)
        var = max(var, 0.0)
        out["variance"] = var
        out["mean_se"] = math.sqrt(var / n)
        # large-sample s.e. of the variance: approximate with the Gaussian formula
        out["variance_se"] = var * math.sqrt(2.0 / (n - 1))
    else:
        out["variance_undefined"] = True
    return out


def cmd_mc_reference(args) -> int:
    try:
        problem = make_problem(args.model, args.pdf)
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    res = mc_reference(problem.fn, problem.pdf, args.n, args.seed)
    res.update(model=args.model, pdf=args.pdf)
    text = json.dumps(res, indent=1) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = Path(args.checkpoint)
    meshes = ckpt / "meshes"
    available = sorted(int(m.group(1)) for p in meshes.glob("cycle_*.mesh") if (m := re.match(r"cycle_(\d+)\.mesh$", p.name)))
    if args.cycle not in available:
        raise RuntimeError(f"cycle {args.cycle} not found; available cycles: {available}")
    data = read_mesh(meshes / f"cycle_{args.cycle:03d}.mesh")
    suffix = ".vtk" if args.format == "vtk" else ".mesh"
    out = Path(args.out) if args.out else ckpt / f"export_cycle_{args.cycle:03d}{suffix}"
    if args.format == "vtk":
        write_vtk(out, data.mesh, data.metric, data.fields)
    else:
        write_mesh(out, data.mesh, data.metric, data.fields)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metricuq", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an adaptation experiment from a YAML config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--threads", type=int)
    r.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("mc-reference", help="Monte Carlo moments of an analytic model")
    m.add_argument("--model", required=True)
    m.add_argument("--pdf", required=True)
    m.add_argument("--n", type=int, default=10_000_000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out")
    m.add_argument("--threads", type=int, help="accepted for interface symmetry; sampling is serial")
    m.set_defaults(func=cmd_mc_reference)

    e = sub.add_parser("export", help="export a cycle mesh with its fields")
    e.add_argument("--checkpoint", required=True, help="run output directory")
    e.add_argument("--cycle", type=int, required=True)
    e.add_argument("--format", choices=("native", "vtk"), default="native")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        logger.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
