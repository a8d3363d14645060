"""Compare few large refinement steps with many small ones on the same problem.

    python scripts/step_size_study.py --model jakeman2d --pdf disco
"""

import argparse

from metricuq.driver import AdaptOptions, Schedule, run_stochastic_adaptation
from metricuq.models import AnalyticModel, make_problem


def run(problem, steps, factor, seed):
    model = AnalyticModel(problem.fn, name=problem.name)
    return run_stochastic_adaptation(model, problem.pdf, Schedule(factor=factor, n_steps=steps), AdaptOptions(seed=seed))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", default="jakeman2d")
    p.add_argument("--pdf", default="disco")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schedules", default="3x5.5,8x2", help="comma-separated STEPSxFACTOR list")
    args = p.parse_args(argv)
    problem = make_problem(args.model, args.pdf)
    for item in args.schedules.split(","):
        steps, factor = item.split("x")
        res = run(problem, int(steps), float(factor), args.seed)
        print(f"{item}:")
        for r in res.records:
            print(f"  cycle {r.cycle}  N {r.N_xi:6d}  E[eta] est {r.mean_eta:.4e}  evaluated {r.eval_eta:.4e}")


if __name__ == "__main__":
    main()
