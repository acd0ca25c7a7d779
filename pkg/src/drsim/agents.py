"""Per-user demand adaptation and the home energy manager (HEM) layer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

X_MIN = 1e-6  # demand floor used in simulation mode

HARD = "hard"
SOFT = "soft"


def _positive(name, value):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")


@dataclass(frozen=True)
class UserParams:
    """One user.

    Attributes:
        id: index of the user within its scenario
        w: willingness to pay (currency per slot)
        alpha: adaptation gain
        x0: initial demand (energy per slot)
    """

    id: int
    w: float
    alpha: float
    x0: float

    def __post_init__(self):
        _positive("w", self.w)
        _positive("alpha", self.alpha)
        _positive("x0", self.x0)


@dataclass(frozen=True)
class Appliance:
    name: str
    energy_per_run: float
    kind: str = SOFT

    def __post_init__(self):
        _positive("energy_per_run", self.energy_per_run)
        if self.kind not in (HARD, SOFT):
            raise ValueError(f"appliance kind must be 'hard' or 'soft', got {self.kind!r}")


def adapt_demand(x: float, w: float, alpha: float, price: float, floor: float = X_MIN) -> float:
    """One step of the willingness-to-pay rule, ``x + alpha * (w - x * price)``, floored."""
    return max(floor, x + alpha * (w - x * price))


def fixed_price_trajectory(params: UserParams, q: float, n_slots: int) -> list[float]:
    """Iterate the adaptation rule at a constant price ``q`` with no floor.

    Returns ``n_slots + 1`` demands starting at ``params.x0``. The error
    against ``w / q`` shrinks (or grows) by ``1 - alpha * q`` every slot.
    """
    xs = [params.x0]
    x = params.x0
    for _ in range(n_slots):
        x = x + params.alpha * (params.w - x * q)
        xs.append(x)
    return xs


def min_wtp_for_hard(x: float, alpha: float, price: float, hard_next: float) -> float:
    """Smallest w for which the next demand covers ``hard_next``."""
    return max(0.0, (hard_next - x) / alpha + x * price)


@dataclass
class Allocation:
    hard: float = 0.0
    soft: float = 0.0  # soft budget, x_next - hard
    soft_runs: list[Appliance] = field(default_factory=list)
    deferred: list[Appliance] = field(default_factory=list)
    revised_w: Optional[float] = None

    @property
    def admitted_energy(self) -> float:
        return math.fsum(a.energy_per_run for a in self.soft_runs)


@dataclass
class HemState:
    """Mutable HEM state owned by one agent.

    Hard appliances run every slot. Each soft appliance keeps at most one
    pending run in ``soft_queue``; deferred runs keep their place ahead of
    newly requested ones.
    """

    user: UserParams
    catalog: list[Appliance]
    hard_demand_next: float = 0.0
    soft_queue: list[Appliance] = field(default_factory=list)
    current_demand: float = 0.0
    last_price: float = 0.0

    @classmethod
    def initial(cls, user: UserParams, catalog) -> "HemState":
        state = cls(user=user, catalog=list(catalog), current_demand=user.x0)
        state.refresh()
        return state

    def refresh(self) -> None:
        """Schedule hard loads for the next slot and enqueue new soft requests."""
        self.hard_demand_next = math.fsum(a.energy_per_run for a in self.catalog if a.kind == HARD)
        pending = {a.name for a in self.soft_queue}
        for a in self.catalog:
            if a.kind == SOFT and a.name not in pending:
                self.soft_queue.append(a)


def hem_allocate(state: HemState, x_next: float) -> Allocation:
    """Split ``x_next`` between hard loads and the soft queue.

    If ``x_next`` cannot cover the hard load nothing is allocated and
    ``revised_w`` carries the willingness to pay needed to cover it.
    """
    hard = state.hard_demand_next
    if x_next < hard:
        user = state.user
        return Allocation(
            revised_w=min_wtp_for_hard(state.current_demand, user.alpha, state.last_price, hard)
        )
    budget = x_next - hard
    alloc = Allocation(hard=hard, soft=budget)
    used = 0.0
    queue = state.soft_queue
    i = 0
    # FIFO: admission stops at the first run that does not fit
    while i < len(queue) and used + queue[i].energy_per_run <= budget:
        used += queue[i].energy_per_run
        i += 1
    alloc.soft_runs = list(queue[:i])
    alloc.deferred = list(queue[i:])
    return alloc


def hem_step(state: HemState, price: float) -> tuple[float, Allocation]:
    """Advance one HEM by a slot at the observed ``price``.

    Computes the next demand, escalates w once if hard loads would go
    unserved, allocates, and rolls the queue forward. The escalated w
    persists in ``state.user``.
    """
    user = state.user
    x = state.current_demand
    state.last_price = price
    x_next = adapt_demand(x, user.w, user.alpha, price)
    alloc = hem_allocate(state, x_next)
    if alloc.revised_w is not None:
        revised = alloc.revised_w
        if revised > user.w:
            state.user = user = replace(user, w=revised)
        x_next = adapt_demand(x, user.w, user.alpha, price)
        # rounding can leave x_next a hair under the hard load
        x_next = max(x_next, state.hard_demand_next)
        alloc = hem_allocate(state, x_next)
        alloc.revised_w = revised
    state.soft_queue = list(alloc.deferred)
    state.current_demand = x_next
    state.refresh()
    return x_next, alloc
