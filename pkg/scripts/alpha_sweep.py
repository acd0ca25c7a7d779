"""Fine common-alpha sweep on the S1 population against the linearized bound.

    python scripts/alpha_sweep.py --lo 0.02 --hi 0.4 --steps 77 > sweep.csv
"""
import argparse
import sys
from dataclasses import replace

from drsim.analysis import aggregate_alpha_bound
from drsim.cli import sweep, sweep_grid
from drsim.scenario_io import builtin_scenario


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--lo", type=float, default=0.02)
    parser.add_argument("--hi", type=float, default=0.40)
    parser.add_argument("--steps", type=int, default=77)
    parser.add_argument("--horizon", type=int, default=300)
    args = parser.parse_args()

    spec = builtin_scenario("S1")
    spec = replace(spec, horizon=args.horizon)
    bound = aggregate_alpha_bound([u.w for u in spec.users], spec.price_model)
    print(f"# linearized bound alpha_max = {bound:.5f}", file=sys.stderr)
    rows = sweep(spec, "alpha", sweep_grid(args.lo, args.hi, args.steps))
    print("alpha,status,convergence_slot,terminal_price")
    for r in rows:
        print(f"{r['value']:.4f},{r['status']},{r['convergence_slot']},{r['terminal_price']}")


if __name__ == "__main__":
    main()
