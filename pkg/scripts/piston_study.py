"""Surrogate moments of the piston problem against a Monte Carlo reference, per cycle.

    python scripts/piston_study.py --pdf lognormal --steps 4
"""

import argparse
import time

from metricuq.cli import mc_reference
from metricuq.driver import AdaptOptions, Schedule, run_stochastic_adaptation
from metricuq.models import AnalyticModel, make_problem


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", default="piston2", choices=("piston2", "piston3"))
    p.add_argument("--pdf", default="lognormal")
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--factor", type=float, default=2.0)
    p.add_argument("--n-initial", type=int, default=30)
    p.add_argument("--n-mc", type=int, default=10**7)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    problem = make_problem(args.model, args.pdf)
    t0 = time.perf_counter()
    ref = mc_reference(problem.fn, problem.pdf, args.n_mc, seed=12345)
    print(f"MC reference ({args.n_mc} samples, {time.perf_counter() - t0:.1f} s): "
          f"mean {ref['mean']:.6e} +- {ref['mean_se']:.1e}, variance {ref['variance']:.6e} +- {ref['variance_se']:.1e}")
    res = run_stochastic_adaptation(
        AnalyticModel(problem.fn, name=problem.name),
        problem.pdf,
        Schedule(factor=args.factor, n_steps=args.steps),
        AdaptOptions(n_initial=args.n_initial, seed=args.seed),
    )
    print("N_xi  |mean err|  |var err|  E[eta]")
    for r in res.records:
        print(f"{r.N_xi:5d}  {abs(r.mean_j - ref['mean']):.3e}  {abs(r.var_j - ref['variance']):.3e}  {r.mean_eta:.3e}")


if __name__ == "__main__":
    main()
