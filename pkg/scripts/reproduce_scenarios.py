"""Run the built-in scenarios S1-S7, write CSV traces, print a one-line summary each.

    python scripts/reproduce_scenarios.py --out runs/
"""
import argparse
from pathlib import Path

from drsim.analysis import summarize
from drsim.engine import run
from drsim.scenario_io import BUILTIN_NAMES, builtin_scenario, write_trace


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    print(f"{'name':4s} {'p_end':>9s} {'p*':>9s} {'conv':>5s} {'cross':>5s}")
    for name in BUILTIN_NAMES:
        trace = run(builtin_scenario(name), seed=args.seed)
        (out / f"{name}.csv").write_bytes(write_trace(trace, "csv"))
        s = summarize(trace)
        conv = "-" if s.convergence_slot is None else str(s.convergence_slot)
        print(f"{name:4s} {s.terminal_price:9.5f} {s.equilibrium_price:9.5f} {conv:>5s} {s.price_overshoot_count:5d}")


if __name__ == "__main__":
    main()
