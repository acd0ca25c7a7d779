"""Load-dependent spot price and the closed-form equilibrium it induces.

Users with log utility ``w * log(x)`` facing the price ``a * (X / C) ** k``
settle where every demand equals ``w / p`` and the price is consistent with
the resulting aggregate. That fixed point has a closed form, implemented here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class PriceModel:
    """Spot price ``a * (total / C) ** k``.

    Attributes:
        a: price at full capacity (currency per unit energy)
        k: price exponent
        C: market capacity (energy per slot)
    """

    a: float = 1.0
    k: float = 4.0
    C: float = 1.0

    def __post_init__(self):
        for name in ("a", "k", "C"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ValueError(f"PriceModel.{name} must be a positive finite number, got {value!r}")


@dataclass(frozen=True)
class EquilibriumSolution:
    price: float
    demands: tuple[float, ...]
    aggregate: float


def spot_price(total_demand: float, model: PriceModel) -> float:
    if total_demand < 0:
        raise ValueError(f"total demand must be nonnegative, got {total_demand!r}")
    return model.a * (total_demand / model.C) ** model.k


def _check_wtps(wtps: Sequence[float]) -> None:
    if len(wtps) == 0:
        raise ValueError("at least one user is required")
    if any(not (w > 0) for w in wtps):
        raise ValueError("willingness-to-pay values must be positive")


def equilibrium_price(wtps: Sequence[float], model: PriceModel) -> float:
    """Price at which ``spot_price(sum(w / p)) == p``.

    Solving ``p = a * (W / (p C)) ** k`` for ``p`` gives
    ``p = a ** (1/(k+1)) * (W / C) ** (k/(k+1))`` with ``W = sum(wtps)``.
    """
    _check_wtps(wtps)
    total = math.fsum(wtps)
    k = model.k
    return model.a ** (1.0 / (k + 1.0)) * (total / model.C) ** (k / (k + 1.0))


def equilibrium_demands(wtps: Sequence[float], model: PriceModel) -> EquilibriumSolution:
    price = equilibrium_price(wtps, model)
    demands = tuple(w / price for w in wtps)
    return EquilibriumSolution(price=price, demands=demands, aggregate=math.fsum(demands))


def capacity_price_drop(c_old: float, c_new: float, k: float) -> float:
    """Fractional equilibrium price drop when capacity moves from ``c_old`` to ``c_new``.

    Negative when capacity shrinks (the price rises).
    """
    if c_old <= 0 or c_new <= 0:
        raise ValueError("capacities must be positive")
    if k <= 0:
        raise ValueError("k must be positive")
    return 1.0 - (c_new / c_old) ** (-k / (k + 1.0))
