"""Run one or more configs through the CLI and print the fitted convergence rates.

    python scripts/run_convergence.py configs/jakeman2d_uniform.yaml configs/jakeman2d_disco.yaml
"""

import argparse
import sys
from pathlib import Path

from metricuq.cli import main as cli_main
from metricuq.config import load_config


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("configs", nargs="+")
    p.add_argument("--seed", type=int)
    args = p.parse_args(argv)
    for path in args.configs:
        cmd = ["run", "--config", path] + (["--seed", str(args.seed)] if args.seed is not None else [])
        code = cli_main(cmd)
        if code:
            return code
        out = Path(load_config(path).output)
        rates = dict(line.split() for line in (out / "rates.txt").read_text().splitlines())
        print(f"{path}: estimated slope {float(rates['slope_estimated']):.3f}, "
              f"evaluated slope {float(rates.get('slope_evaluated', 'nan')):.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
