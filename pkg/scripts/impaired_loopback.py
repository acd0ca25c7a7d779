"""Broker + agents over loopback under price loss and delay, several seeds.

    python scripts/impaired_loopback.py --loss 0.1 --delay 2 --seeds 10
"""
import argparse
import time

import numpy as np

from drsim.netsim import ImpairmentSpec, run_loopback
from drsim.pricing import equilibrium_price
from drsim.scenario_io import load_scenario


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--scenario", default="S1")
    parser.add_argument("--loss", type=float, default=0.1)
    parser.add_argument("--delay", type=int, default=2)
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--tail", type=int, default=50)
    args = parser.parse_args()

    spec = load_scenario(args.scenario)
    p_star = equilibrium_price([u.w for u in spec.users], spec.price_model)
    for seed in range(args.seeds):
        t0 = time.perf_counter()
        trace, _ = run_loopback(spec, ImpairmentSpec(args.loss, args.delay, seed))
        avg = trace.prices[-args.tail:].mean()
        print(f"seed {seed:2d}  tail avg {avg:.6f}  ({100 * (avg / p_star - 1):+.4f}%)  {time.perf_counter() - t0:.2f}s")
    print(f"p* = {p_star:.6f}")


if __name__ == "__main__":
    main()
