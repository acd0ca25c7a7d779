"""Stability analytics, the continuous-time reference model, and trace summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .agents import UserParams
from .engine import (
    DivergenceError,
    ScenarioSpec,
    SimRandom,
    SimState,
    SlotRecord,
    Trace,
    apply_event,
    detect_convergence,
)
from .pricing import PriceModel, equilibrium_price

CONTRACTING = "contracting"
OSCILLATING = "oscillating-contracting"
DIVERGENT = "divergent"


def verdict(factor: float) -> str:
    if abs(factor) >= 1:
        return DIVERGENT
    return CONTRACTING if factor > 0 else OSCILLATING


@dataclass(frozen=True)
class StabilityReport:
    """Linear stability of the demand dynamics around the equilibrium.

    ``per_user_factor`` is the error multiplier of each user at a frozen
    equilibrium price. ``aggregate_factor`` is the multiplier of the mode in
    which all demands move together and drag the price with them, evaluated
    at the largest gain in the scenario.
    """

    p_star: float
    per_user_factor: tuple[float, ...]
    per_user_verdict: tuple[str, ...]
    aggregate_factor: float
    aggregate_verdict: str
    alpha_max_common: float


def per_user_stability(params: UserParams, p_star: float) -> float:
    if p_star <= 0:
        raise ValueError("p_star must be positive")
    return 1.0 - params.alpha * p_star


def aggregate_alpha_bound(wtps: Sequence[float], model: PriceModel) -> float:
    """Largest common gain for which the coupled price/demand map is locally stable.

    Around the equilibrium the Jacobian is
    ``(1 - alpha p*) I - alpha k p* x* 1^T / X*``. Directions summing to zero
    contract by ``1 - alpha p*``; the direction ``x*`` contracts by
    ``1 - alpha p* (k + 1)``, which leaves the unit disc first.
    """
    p_star = equilibrium_price(wtps, model)
    return 2.0 / (p_star * (model.k + 1.0))


def stability_report(scenario: ScenarioSpec) -> StabilityReport:
    wtps = [u.w for u in scenario.users]
    model = scenario.price_model
    p_star = equilibrium_price(wtps, model)
    factors = tuple(per_user_stability(u, p_star) for u in scenario.users)
    alpha = max(u.alpha for u in scenario.users)
    agg = 1.0 - alpha * p_star * (model.k + 1.0)
    return StabilityReport(
        p_star=p_star,
        per_user_factor=factors,
        per_user_verdict=tuple(verdict(f) for f in factors),
        aggregate_factor=agg,
        aggregate_verdict=verdict(agg),
        alpha_max_common=aggregate_alpha_bound(wtps, model),
    )


def _rk4_unit(x, w, alpha, model, n_sub):
    """Advance the ODE by one time unit in ``n_sub`` classical RK4 steps."""
    h = 1.0 / n_sub
    a, k, C = model.a, model.k, model.C

    def f(y):
        return alpha * (w - y * (a * (y.sum() / C) ** k))

    for _ in range(n_sub):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def integrate_ode(scenario: ScenarioSpec, dt: float = 0.01) -> Trace:
    """Integrate ``dx_i/dt = alpha_i (w_i - x_i p(t))`` with fixed-step RK4.

    The trace is sampled at t = 0, 1, ..., horizon - 1; events fire at the
    matching integer times. ``1 / dt`` must be an integer.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if scenario.price_noise is not None:
        raise ValueError("integrate_ode needs a noise-free scenario")
    n_sub = round(1.0 / dt)
    if n_sub < 1 or abs(n_sub * dt - 1.0) > 1e-9:
        raise ValueError(f"1/dt must be a whole number of substeps, got dt={dt}")

    rng = SimRandom(scenario.seed)
    state = SimState.initial(replace(scenario, hem=None))
    trace = Trace(scenario=scenario, seed=scenario.seed)
    x = np.array(state.demands, dtype=float)
    old_err = np.seterr(over="ignore", invalid="ignore")
    try:
        for n in range(scenario.horizon):
            for ev in scenario.events:
                if ev.slot == n:
                    apply_event(state, ev, rng.events)
            if not np.isfinite(x).all():
                raise DivergenceError(n, int(np.argmin(np.isfinite(x))), "demand")
            total = math.fsum(x)
            price = state.model.a * (total / state.model.C) ** state.model.k
            if not math.isfinite(price):
                raise DivergenceError(n, None, "price")
            trace.records.append(
                SlotRecord(
                    slot=n,
                    demands=tuple(float(v) for v in x),
                    aggregate=total,
                    true_price=price,
                    observed_prices=(price,) * len(x),
                    wtps=tuple(u.w for u in state.users),
                    capacity=state.model.C,
                )
            )
            w = np.array([u.w for u in state.users])
            alpha = np.array([u.alpha for u in state.users])
            x = _rk4_unit(x, w, alpha, state.model, n_sub)
    finally:
        np.seterr(**old_err)
    return trace


def count_crossings(prices: Sequence[float], reference: float, band: float = 1e-6) -> int:
    """Number of times ``prices`` passes from one side of ``reference`` to the other.

    Samples within ``band`` (relative) of the reference are ignored.
    """
    dev = (np.asarray(prices) - reference) / reference
    signs = np.sign(dev[np.abs(dev) > band])
    return int(np.count_nonzero(signs[1:] != signs[:-1]))


@dataclass
class Summary:
    terminal_price: float
    terminal_demands: tuple[float, ...]
    convergence_slot: Optional[int]
    price_overshoot_count: int
    equilibrium_price: float
    prices: np.ndarray = field(repr=False)

    def time_avg_price_after(self, slot: int) -> float:
        """Mean true price from ``slot`` to the end of the trace."""
        if not 0 <= slot < len(self.prices):
            raise ValueError(f"slot {slot} outside trace of length {len(self.prices)}")
        return float(np.mean(self.prices[slot:]))


def summarize(trace: Trace, tol: float = 1e-6, window: int = 10) -> Summary:
    """Headline numbers of a trace.

    Overshoots count crossings of the equilibrium price implied by the final
    parameters, up to the convergence slot when there is one.
    """
    if not trace.records:
        raise ValueError("empty trace")
    last = trace.terminal
    prices = trace.prices
    model = replace(trace.scenario.price_model, C=last.capacity)
    p_star = equilibrium_price(last.wtps, model)
    conv = detect_convergence(trace, tol, min(window, len(trace)))
    upto = prices if conv is None else prices[: conv + 1]
    return Summary(
        terminal_price=last.true_price,
        terminal_demands=last.demands,
        convergence_slot=conv,
        price_overshoot_count=count_crossings(upto, p_star),
        equilibrium_price=p_star,
        prices=prices,
    )
