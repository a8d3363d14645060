"""Total error control with the synthetic deterministic model; prints the cycle log.

    python scripts/total_control.py --delta-j 2e-3 --it-max 19
"""

import argparse

from metricuq.driver import AdaptOptions, Schedule, TotalTargets, run_total_control
from metricuq.models import make_problem, synthetic_det_model


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--delta-j", type=float, default=2e-3)
    p.add_argument("--it-max", type=int, default=19)
    p.add_argument("--K", type=float, default=1.0)
    p.add_argument("--C-x-max", type=float, default=float("inf"))
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    problem = make_problem("jakeman2d", "uniform")
    model = synthetic_det_model(problem.fn, args.K, 2)
    res = run_total_control(
        model,
        problem.pdf,
        Schedule(n_steps=100, C_x_max=args.C_x_max),
        TotalTargets(args.delta_j, args.it_max),
        AdaptOptions(seed=args.seed),
    )
    print("cycle  N_xi  mean_N_x  E[eps]      E[eta]      action")
    for r in res.records:
        print(f"{r.cycle:5d} {r.N_xi:5d} {r.mean_N_x:9.2f}  {r.mean_eps:.4e}  {r.mean_eta:.4e}  {r.action}")
    print(f"converged {res.converged}, pinned {res.pinned}, evaluations {res.store.n_evaluations}")


if __name__ == "__main__":
    main()
