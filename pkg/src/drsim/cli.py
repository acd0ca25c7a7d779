"""Command-line entry point: ``drsim {run,analyze,sweep,list-scenarios,broker,agent}``."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace

import numpy as np

from . import analysis, engine, netsim, scenario_io
from .agents import UserParams

DESCRIPTIONS = {
    "S1": "baseline: x0=0.02, w=0.11..0.20, alpha=0.1",
    "S2": "S1 with alpha=0.17",
    "S3": "S1 with x0=0.01..0.10",
    "S4": "S3 with alpha=0.11..0.20",
    "S5": "S1, every w perturbed by U(-0.05, 0.05) at slot 100",
    "S6": "S1, capacity doubled at slot 100",
    "S7": "S1 with +/-5% multiplicative price noise",
}


class CliError(Exception):
    pass


def _load(args) -> engine.ScenarioSpec:
    target = getattr(args, "target", None) or args.scenario
    if not target:
        raise CliError("no scenario given (name S1..S7 or a scenario file)")
    try:
        spec = scenario_io.load_scenario(target)
    except FileNotFoundError:
        raise CliError(f"scenario file not found: {target}") from None
    if getattr(args, "horizon", None) is not None:
        spec = replace(spec, horizon=args.horizon)
    if getattr(args, "seed", None) is not None:
        spec = spec.with_seed(args.seed)
    return spec


def _write(trace, path, fmt):
    data = scenario_io.write_trace(trace, fmt)
    with open(path, "wb") as fh:
        fh.write(data)


def _fmt_slot(s):
    return "not converged" if s is None else str(s)


def print_summary(trace: engine.Trace, out=None) -> None:
    out = out or sys.stdout
    summary = analysis.summarize(trace)
    spec = trace.scenario
    print(f"scenario        {spec.name} ({spec.n_users} users, {len(trace)} slots, seed {trace.seed})", file=out)
    print(f"terminal price  {summary.terminal_price:.6f}", file=out)
    print(f"equilibrium     {summary.equilibrium_price:.6f}", file=out)
    print(f"convergence     {_fmt_slot(summary.convergence_slot)}", file=out)
    print(f"overshoots      {summary.price_overshoot_count}", file=out)
    prices = trace.prices
    for ev in spec.events:
        if ev.slot > 0:
            before, after = prices[ev.slot - 1], summary.terminal_price
            print(
                f"event {ev.kind} at slot {ev.slot}: price {before:.6f} -> {after:.6f} "
                f"(drop {100 * (1 - after / before):.2f}%)",
                file=out,
            )
    print("terminal demands", file=out)
    for i, x in enumerate(summary.terminal_demands):
        print(f"  user {i + 1:2d}  {x:.6f}", file=out)


def cmd_run(args) -> int:
    spec = _load(args)
    trace = engine.run(spec)
    if args.out:
        _write(trace, args.out, args.format)
    print_summary(trace)
    return 0


def _print_stability(spec, out=None):
    out = out or sys.stdout
    rep = analysis.stability_report(spec)
    print(f"equilibrium price p*   {rep.p_star:.6f}", file=out)
    print(f"alpha bound (common)   {rep.alpha_max_common:.6f}", file=out)
    print(f"aggregate factor       {rep.aggregate_factor:.6f}  {rep.aggregate_verdict}", file=out)
    wtps = [u.w for u in spec.users]
    for u, f, v, w in zip(spec.users, rep.per_user_factor, rep.per_user_verdict, wtps):
        print(f"  user {u.id + 1:2d}  alpha={u.alpha:.4g}  x*={w / rep.p_star:.6f}  factor={f:.6f}  {v}", file=out)
    return rep


def cmd_analyze(args) -> int:
    target = args.target or args.scenario
    trace = None
    if target and target.endswith(".json"):
        try:
            with open(target, "rb") as fh:
                trace = scenario_io.read_trace(fh.read())
        except FileNotFoundError:
            raise CliError(f"trace file not found: {target}") from None
        spec = trace.scenario
    else:
        spec = _load(args)
    print("stability", "-" * 40)
    _print_stability(spec)
    if trace is not None:
        print("trace", "-" * 44)
        print_summary(trace)
        return 0
    if spec.price_noise is not None:
        print("ode comparison skipped: scenario has price noise")
        return 0
    print("ode vs discrete", "-" * 34)
    try:
        disc = engine.run(spec)
    except engine.DivergenceError as exc:
        print(f"discrete run diverged: {exc}")
        return 0
    ode = analysis.integrate_ode(spec, args.dt)
    pd_, po = disc.terminal.true_price, ode.terminal.true_price
    xd, xo = np.array(disc.terminal.demands), np.array(ode.terminal.demands)
    print(f"terminal price  discrete {pd_:.6f}  ode {po:.6f}  rel diff {abs(pd_ - po) / pd_:.2e}")
    print(f"max rel demand difference {np.max(np.abs(xd - xo) / xd):.2e}")
    return 0


def sweep_grid(lo: float, hi: float, steps: int) -> list[float]:
    if steps < 1:
        raise CliError("--steps must be >= 1")
    if steps == 1:
        return [lo]
    return [float(v) for v in np.linspace(lo, hi, steps)]


def apply_param(spec: engine.ScenarioSpec, param: str, value: float) -> engine.ScenarioSpec:
    if param == "alpha":
        return replace(spec, users=tuple(replace(u, alpha=value) for u in spec.users))
    if param in ("k", "C"):
        return replace(spec, price_model=replace(spec.price_model, **{param: value}))
    raise CliError(f"unknown sweep parameter {param!r}")


def sweep(spec: engine.ScenarioSpec, param: str, values) -> list[dict]:
    rows = []
    for v in values:
        point = apply_param(spec, param, v)
        try:
            trace = engine.run(point)
        except engine.DivergenceError:
            rows.append({"param": param, "value": v, "terminal_price": "", "convergence_slot": "", "status": "diverged"})
            continue
        conv = engine.detect_convergence(trace, 1e-6, min(10, len(trace)))
        rows.append(
            {
                "param": param,
                "value": v,
                "terminal_price": f"{trace.terminal.true_price:.17g}",
                "convergence_slot": "" if conv is None else conv,
                "status": "converged" if conv is not None else "not_converged",
            }
        )
    return rows


def cmd_sweep(args) -> int:
    spec = _load(args)
    try:
        lo, hi = (float(s) for s in args.range.split(":"))
    except ValueError:
        raise CliError(f"--range must look like LO:HI, got {args.range!r}") from None
    rows = sweep(spec, args.param, sweep_grid(lo, hi, args.steps))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["param", "value", "terminal_price", "convergence_slot", "status"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_list(args) -> int:
    for name in scenario_io.BUILTIN_NAMES:
        print(f"{name}  {DESCRIPTIONS[name]}")
    return 0


def _impairment(args):
    return netsim.ImpairmentSpec(loss_prob=args.loss, delay_slots=args.delay_slots, seed=args.impairment_seed)


def cmd_broker(args) -> int:
    spec = _load(args)
    trace = netsim.broker_run(spec, args.listen, _impairment(args), slot_deadline=args.deadline)
    if args.out:
        _write(trace, args.out, args.format)
    print_summary(trace)
    return 0


def cmd_agent(args) -> int:
    if args.w is not None:
        if args.alpha is None or args.x0 is None:
            raise CliError("--w needs --alpha and --x0")
        params = UserParams(id=args.user, w=args.w, alpha=args.alpha, x0=args.x0)
    else:
        spec = _load(args)
        if not 0 <= args.user < spec.n_users:
            raise CliError(f"--user must lie in [0, {spec.n_users})")
        params = spec.users[args.user]
    final = netsim.agent_run(params, args.connect, slot_deadline=args.deadline, connect_timeout=args.connect_timeout)
    print(f"agent {params.id} final demand {final:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drsim", description="Price-feedback demand response simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p, positional=True):
        if positional:
            p.add_argument("target", nargs="?", help="built-in name (S1..S7) or scenario file")
        p.add_argument("--scenario", help="built-in name or scenario file")
        p.add_argument("--seed", type=int)
        p.add_argument("--horizon", type=int)

    def output_args(p):
        p.add_argument("--out", help="trace output path")
        p.add_argument("--format", choices=("csv", "structured"), default="csv")

    p = sub.add_parser("run", help="simulate a scenario")
    scenario_args(p)
    output_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="stability report and ODE comparison")
    scenario_args(p)
    p.add_argument("--dt", type=float, default=0.01)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="run a scenario over a parameter grid")
    scenario_args(p)
    p.add_argument("--param", choices=("alpha", "k", "C"), required=True)
    p.add_argument("--range", required=True, help="LO:HI")
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("list-scenarios", help="list built-in scenarios")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("broker", help="serve a scenario to networked agents")
    scenario_args(p)
    output_args(p)
    p.add_argument("--listen", default="127.0.0.1:7878", help="host:port")
    p.add_argument("--loss", type=float, default=0.0, help="price loss probability")
    p.add_argument("--delay-slots", type=int, default=0)
    p.add_argument("--impairment-seed", type=int, default=0)
    p.add_argument("--deadline", type=float, default=netsim.SLOT_DEADLINE, help="slot deadline in seconds")
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("agent", help="run one agent against a broker")
    scenario_args(p)
    p.add_argument("--connect", default="127.0.0.1:7878", help="host:port")
    p.add_argument("--user", type=int, required=True, help="agent index")
    p.add_argument("--w", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--x0", type=float)
    p.add_argument("--deadline", type=float, default=netsim.SLOT_DEADLINE)
    p.add_argument("--connect-timeout", type=float, default=5.0)
    p.set_defaults(func=cmd_agent)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, scenario_io.ScenarioError, engine.DivergenceError, netsim.ProtocolError, netsim.AgentTimeout, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"drsim: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
