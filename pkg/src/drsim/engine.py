"""Synchronous discrete-time simulation of price-responsive users.

Every slot: apply scheduled events, price the aggregate demand, hand each
user its (possibly noisy) observed price, and let all users adapt at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .agents import Appliance, HemState, UserParams, X_MIN, adapt_demand, hem_step
from .pricing import PriceModel, spot_price

DEFAULT_HORIZON = 300
WTP_FLOOR = 1e-6

PERTURB_WTP = "perturb_wtp"
SET_CAPACITY = "set_capacity"
SET_WTP = "set_wtp"
SET_ALPHA = "set_alpha"
EVENT_PARAMS = {
    PERTURB_WTP: ("low", "high"),
    SET_CAPACITY: ("C",),
    SET_WTP: ("user", "w"),
    SET_ALPHA: ("user", "alpha"),
}

MULTIPLICATIVE = "multiplicative_uniform"
ADDITIVE = "additive_uniform"


class DivergenceError(RuntimeError):
    """A demand or price became non-finite during a run."""

    def __init__(self, slot: int, user: Optional[int], what: str):
        self.slot = slot
        self.user = user
        who = "aggregate" if user is None else f"user {user}"
        super().__init__(f"non-finite {what} at slot {slot} ({who}); adaptation gain may exceed the stability bound")


@dataclass(frozen=True)
class Event:
    """A parameter change applied at the start of ``slot``.

    ``params`` by kind: perturb_wtp ``{low, high}``, set_capacity ``{C}``,
    set_wtp ``{user, w}``, set_alpha ``{user, alpha}``.
    """

    slot: int
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.slot, int) or self.slot < 0:
            raise ValueError(f"event slot must be a nonnegative integer, got {self.slot!r}")
        if self.kind not in EVENT_PARAMS:
            raise ValueError(f"unknown event kind {self.kind!r}; expected one of {sorted(EVENT_PARAMS)}")
        expected = set(EVENT_PARAMS[self.kind])
        if set(self.params) != expected:
            raise ValueError(f"{self.kind} event needs params {sorted(expected)}, got {sorted(self.params)}")
        p = self.params
        if self.kind == PERTURB_WTP and not p["low"] <= p["high"]:
            raise ValueError("perturb_wtp needs low <= high")
        if self.kind == SET_CAPACITY and not p["C"] > 0:
            raise ValueError("set_capacity needs C > 0")
        if self.kind == SET_WTP and not p["w"] > 0:
            raise ValueError("set_wtp needs w > 0")
        if self.kind == SET_ALPHA and not p["alpha"] > 0:
            raise ValueError("set_alpha needs alpha > 0")


@dataclass(frozen=True)
class NoiseSpec:
    """Uniform perturbation of the price seen by agents (the true price is untouched).

    ``width`` is the relative half-width ``delta`` for multiplicative noise and
    the absolute half-width for additive noise.
    """

    kind: str = MULTIPLICATIVE
    width: float = 0.05

    def __post_init__(self):
        if self.kind == MULTIPLICATIVE:
            if not 0 <= self.width < 1:
                raise ValueError(f"multiplicative noise delta must lie in [0, 1), got {self.width!r}")
        elif self.kind == ADDITIVE:
            if not self.width >= 0:
                raise ValueError(f"additive noise half_width must be >= 0, got {self.width!r}")
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")

    def observe(self, price: float, rng: np.random.Generator) -> float:
        u = rng.uniform(-self.width, self.width)
        if self.kind == MULTIPLICATIVE:
            return price * (1.0 + u)
        return max(0.0, price + u)


@dataclass(frozen=True)
class ScenarioSpec:
    users: tuple[UserParams, ...]
    price_model: PriceModel = PriceModel()
    horizon: int = DEFAULT_HORIZON
    events: tuple[Event, ...] = ()
    price_noise: Optional[NoiseSpec] = None
    seed: int = 0
    hem: Optional[tuple[Optional[tuple[Appliance, ...]], ...]] = None
    name: str = "custom"

    def __post_init__(self):
        if len(self.users) == 0:
            raise ValueError("scenario needs at least one user")
        for i, u in enumerate(self.users):
            if u.id != i:
                raise ValueError(f"user at position {i} has id {u.id}; ids must equal list positions")
        if not isinstance(self.horizon, int) or self.horizon < 1:
            raise ValueError(f"horizon must be a positive integer, got {self.horizon!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        for ev in self.events:
            if ev.slot >= self.horizon:
                raise ValueError(f"event at slot {ev.slot} lies outside horizon {self.horizon}")
            if "user" in ev.params and not 0 <= ev.params["user"] < len(self.users):
                raise ValueError(f"event targets unknown user {ev.params['user']}")
        if self.hem is not None and len(self.hem) != len(self.users):
            raise ValueError("hem needs one (possibly empty) appliance catalog per user")

    @property
    def n_users(self) -> int:
        return len(self.users)

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class SlotRecord:
    """State of one slot.

    ``demands`` are x(n); ``observed_prices`` are what each user reacted to
    when forming x(n+1) (``None`` when a user had no price yet); ``wtps`` and
    ``capacity`` are the parameters in force at the end of this slot.
    """

    slot: int
    demands: tuple[float, ...]
    aggregate: float
    true_price: float
    observed_prices: tuple[Optional[float], ...]
    wtps: tuple[float, ...]
    capacity: float


@dataclass
class Trace:
    scenario: ScenarioSpec
    seed: int
    records: list[SlotRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def prices(self) -> np.ndarray:
        return np.array([r.true_price for r in self.records])

    @property
    def demands(self) -> np.ndarray:
        """Array of shape (slots, users)."""
        return np.array([r.demands for r in self.records])

    @property
    def terminal(self) -> SlotRecord:
        return self.records[-1]


class SimRandom:
    """Independent generators for event draws and price noise, both derived from one seed.

    Keeping the streams apart means switching noise on or off never shifts
    the random WTP perturbations.
    """

    def __init__(self, seed: int):
        events_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
        self.events = np.random.Generator(np.random.PCG64(events_ss))
        self.noise = np.random.Generator(np.random.PCG64(noise_ss))


@dataclass
class SimState:
    demands: list[float]
    users: list[UserParams]
    model: PriceModel
    hem: Optional[list[Optional[HemState]]] = None

    @classmethod
    def initial(cls, scenario: ScenarioSpec) -> "SimState":
        hem = None
        if scenario.hem is not None:
            hem = [
                HemState.initial(u, cat) if cat else None
                for u, cat in zip(scenario.users, scenario.hem)
            ]
        return cls(
            demands=[u.x0 for u in scenario.users],
            users=list(scenario.users),
            model=scenario.price_model,
            hem=hem,
        )


def apply_event(state: SimState, event: Event, rng: np.random.Generator) -> None:
    p = event.params
    if event.kind == PERTURB_WTP:
        for i, u in enumerate(state.users):
            delta = rng.uniform(p["low"], p["high"])
            state.users[i] = replace(u, w=max(WTP_FLOOR, u.w + delta))
    elif event.kind == SET_CAPACITY:
        state.model = replace(state.model, C=float(p["C"]))
    elif event.kind == SET_WTP:
        i = p["user"]
        state.users[i] = replace(state.users[i], w=max(WTP_FLOOR, float(p["w"])))
    elif event.kind == SET_ALPHA:
        i = p["user"]
        state.users[i] = replace(state.users[i], alpha=float(p["alpha"]))


def aggregate_demand(demands: Sequence[float]) -> float:
    # fsum is order independent, so permuting users leaves the price bit-identical
    return math.fsum(demands)


def price_of(total: float, model: PriceModel, slot: int) -> float:
    try:
        price = spot_price(total, model)
    except OverflowError:
        raise DivergenceError(slot, None, "price") from None
    if not math.isfinite(price):
        raise DivergenceError(slot, None, "price")
    return price


def step(state: SimState, scenario: ScenarioSpec, slot: int, rng: SimRandom) -> tuple[SimState, SlotRecord]:
    """Advance ``state`` from slot ``n`` to ``n + 1`` and return the slot-``n`` record."""
    for ev in scenario.events:
        if ev.slot == slot:
            apply_event(state, ev, rng.events)

    total = aggregate_demand(state.demands)
    if not math.isfinite(total):
        bad = next(i for i, x in enumerate(state.demands) if not math.isfinite(x))
        raise DivergenceError(slot, bad, "demand")
    price = price_of(total, state.model, slot)

    noise = scenario.price_noise
    observed = [noise.observe(price, rng.noise) if noise else price for _ in state.users]

    nxt = []
    for i, (x, u, q) in enumerate(zip(state.demands, state.users, observed)):
        hem = state.hem[i] if state.hem else None
        if hem is None:
            x_new = adapt_demand(x, u.w, u.alpha, q)
        else:
            hem.user = u
            hem.current_demand = x
            x_new, _ = hem_step(hem, q)
            state.users[i] = hem.user
        if not math.isfinite(x_new):
            raise DivergenceError(slot, i, "demand")
        nxt.append(x_new)

    record = SlotRecord(
        slot=slot,
        demands=tuple(state.demands),
        aggregate=total,
        true_price=price,
        observed_prices=tuple(observed),
        wtps=tuple(u.w for u in state.users),
        capacity=state.model.C,
    )
    state.demands = nxt
    return state, record


def run(scenario: ScenarioSpec, seed: Optional[int] = None) -> Trace:
    """Simulate ``scenario`` for its full horizon.

    Deterministic in ``(scenario, seed)``; ``seed`` overrides ``scenario.seed``.
    Raises DivergenceError if any value stops being finite.
    """
    if seed is not None:
        scenario = scenario.with_seed(seed)
    rng = SimRandom(scenario.seed)
    state = SimState.initial(scenario)
    trace = Trace(scenario=scenario, seed=scenario.seed)
    for n in range(scenario.horizon):
        state, rec = step(state, scenario, n, rng)
        trace.records.append(rec)
    return trace


def detect_convergence(trace: Trace, tol: float = 1e-6, window: int = 10) -> Optional[int]:
    """First slot from which demands and price change by less than ``tol`` (relative)
    on each of ``window`` consecutive slot transitions, or None.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if window < 1 or window > len(trace.records):
        raise ValueError(f"window must lie in [1, horizon={len(trace.records)}], got {window}")
    data = np.column_stack([trace.demands, trace.prices])
    if len(data) < 2:
        return 0 if window <= 1 else None
    prev = np.maximum(np.abs(data[:-1]), np.finfo(float).tiny)
    with np.errstate(invalid="ignore", over="ignore"):
        calm = (np.abs(np.diff(data, axis=0)) / prev < tol).all(axis=1)
    run_len = 0
    for t, ok in enumerate(calm):
        run_len = run_len + 1 if ok else 0
        if run_len == window:
            return t - window + 1
    return None

