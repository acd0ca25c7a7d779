from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drsim.agents import UserParams, fixed_price_trajectory
from drsim.analysis import (
    CONTRACTING,
    DIVERGENT,
    OSCILLATING,
    aggregate_alpha_bound,
    count_crossings,
    integrate_ode,
    per_user_stability,
    stability_report,
    summarize,
    verdict,
)
from drsim.engine import ScenarioSpec, detect_convergence, run
from drsim.pricing import PriceModel, equilibrium_price
from drsim.scenario_io import builtin_scenario

from conftest import P_STAR_S1, S1_WTPS

UNIT = PriceModel(1.0, 4.0, 1.0)


def _common_alpha(spec, alpha):
    return replace(spec, users=tuple(replace(u, alpha=alpha) for u in spec.users))


def test_per_user_stability_examples():
    assert per_user_stability(UserParams(0, 1, 0.1, 1), 1.42) == pytest.approx(0.858, abs=1e-12)
    assert per_user_stability(UserParams(0, 1, 0.17, 1), 1.42) == pytest.approx(0.7586, abs=1e-12)
    assert per_user_stability(UserParams(0, 1, 1 / 1.42, 1), 1.42) == pytest.approx(0.0, abs=1e-15)


@given(st.floats(0.01, 1.0), st.floats(0.01, 1.5), st.floats(0.1, 3.0), st.floats(0.01, 1.0))
def test_factor_matches_measured_error_ratio(w, alpha, q, x0):
    params = UserParams(0, w, alpha, x0)
    star = w / q
    if abs(x0 - star) < 1e-3 * star:
        return
    xs = fixed_price_trajectory(params, q, 1)
    ratio = (xs[1] - star) / (xs[0] - star)
    assert ratio == pytest.approx(per_user_stability(params, q), rel=1e-9, abs=1e-12)


def test_verdicts():
    assert verdict(0.5) == CONTRACTING
    assert verdict(-0.2) == OSCILLATING
    assert verdict(0.0) == OSCILLATING
    assert verdict(-1.0) == DIVERGENT
    assert verdict(1.5) == DIVERGENT


def test_aggregate_alpha_bound_s1():
    bound = aggregate_alpha_bound(S1_WTPS, UNIT)
    assert bound == pytest.approx(0.28171, abs=1e-4)
    assert bound == pytest.approx(2 / (P_STAR_S1 * 5), rel=1e-12)


def test_aggregate_bound_brackets_simulation(s1):
    assert detect_convergence(run(_common_alpha(s1, 0.26))) is not None
    assert detect_convergence(run(_common_alpha(s1, 0.30))) is None


def test_aggregate_bound_matches_jacobian_eigenvalues():
    # finite-difference Jacobian of the coupled map at the equilibrium
    w = np.array(S1_WTPS)
    alpha = 0.17
    p = P_STAR_S1
    x_star = w / p

    def F(x):
        return x + alpha * (w - x * x.sum() ** 4)

    h = 1e-7
    J = np.column_stack([(F(x_star + h * e) - F(x_star - h * e)) / (2 * h) for e in np.eye(10)])
    eig = np.sort(np.linalg.eigvals(J).real)
    assert eig[0] == pytest.approx(1 - alpha * p * 5, abs=1e-6)
    assert eig[-1] == pytest.approx(1 - alpha * p, abs=1e-6)


def test_stability_report_s1_and_s2():
    rep = stability_report(builtin_scenario("S1"))
    assert set(rep.per_user_verdict) == {CONTRACTING}
    assert rep.aggregate_verdict == CONTRACTING
    rep2 = stability_report(builtin_scenario("S2"))
    assert rep2.aggregate_factor == pytest.approx(-0.207, abs=1e-3)
    assert rep2.aggregate_verdict == OSCILLATING
    rep3 = stability_report(_common_alpha(builtin_scenario("S1"), 1.5))
    assert DIVERGENT in rep3.per_user_verdict


def test_s2_price_crosses_equilibrium():
    trace = run(builtin_scenario("S2"))
    assert summarize(trace).price_overshoot_count >= 3


def test_ode_s1_terminal_price(s1):
    trace = integrate_ode(s1, 0.01)
    assert len(trace) == s1.horizon
    assert trace.terminal.true_price == pytest.approx(1.41993, abs=1e-3)


def test_ode_constant_at_equilibrium():
    w = S1_WTPS
    users = tuple(UserParams(i, wi, 0.1, wi / P_STAR_S1) for i, wi in enumerate(w))
    trace = integrate_ode(ScenarioSpec(users=users, horizon=20), 0.01)
    d = trace.demands
    assert np.allclose(d, d[0], rtol=1e-12, atol=0)


def test_ode_step_halving(s1):
    short = replace(s1, horizon=40)
    a = integrate_ode(short, 0.01).terminal.demands
    b = integrate_ode(short, 0.005).terminal.demands
    assert np.max(np.abs(np.subtract(a, b))) < 1e-6


def test_ode_rejects_noise_and_bad_dt():
    with pytest.raises(ValueError):
        integrate_ode(builtin_scenario("S7"))
    with pytest.raises(ValueError):
        integrate_ode(builtin_scenario("S1"), 0.3)


def test_ode_tracks_capacity_event():
    trace = integrate_ode(builtin_scenario("S6"))
    p2 = equilibrium_price(S1_WTPS, PriceModel(1, 4, 2))
    assert trace.terminal.true_price == pytest.approx(p2, rel=1e-3)


def test_summarize_constant_trace():
    users = (UserParams(0, 0.65, 0.2, 0.65 ** 0.2),)
    trace = run(ScenarioSpec(users=users, horizon=30))
    s = summarize(trace)
    assert s.terminal_price == trace.records[0].true_price
    assert s.price_overshoot_count == 0
    assert s.convergence_slot == 0
    assert s.time_avg_price_after(10) == pytest.approx(s.terminal_price, rel=1e-12)


def test_summarize_s7_time_average():
    s7 = builtin_scenario("S7")
    avgs = [summarize(run(s7, seed=seed)).time_avg_price_after(150) for seed in range(10)]
    assert np.mean(avgs) == pytest.approx(P_STAR_S1, rel=0.02)


def test_count_crossings():
    assert count_crossings([0.5, 1.5, 0.5, 1.5], 1.0) == 3
    assert count_crossings([1.0, 1.0], 1.0) == 0
    assert count_crossings([0.9, 1.0 + 1e-9, 0.8], 1.0) == 0


@settings(max_examples=8)
@given(st.floats(0.05, 0.26))
def test_common_alpha_below_bound_converges(alpha):
    assert detect_convergence(run(_common_alpha(builtin_scenario("S1"), alpha))) is not None


@settings(max_examples=8)
@given(st.floats(1.1 * 0.28171, 1.5))
def test_common_alpha_above_bound_fails(alpha):
    assert detect_convergence(run(_common_alpha(builtin_scenario("S1"), alpha))) is None
