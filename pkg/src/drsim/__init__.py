"""Price-feedback demand response: users adapt demand to a load-dependent spot price."""
from .agents import Appliance, HemState, UserParams, adapt_demand, fixed_price_trajectory, hem_allocate, min_wtp_for_hard
from .analysis import aggregate_alpha_bound, integrate_ode, per_user_stability, stability_report, summarize
from .engine import DivergenceError, Event, NoiseSpec, ScenarioSpec, Trace, detect_convergence, run, step
from .pricing import PriceModel, capacity_price_drop, equilibrium_demands, equilibrium_price, spot_price
from .scenario_io import builtin_scenario, parse_scenario, read_trace, serialize_scenario, write_trace

__version__ = "0.1.0"
