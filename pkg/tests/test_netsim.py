import socket
import threading
from dataclasses import replace

import numpy as np
import pytest

from drsim.agents import UserParams, fixed_price_trajectory
from drsim.engine import Event, ScenarioSpec, run
from drsim.netsim import (
    DEMAND,
    END,
    JOIN,
    JOIN_ACK,
    PRICE,
    AgentLogic,
    AgentTimeout,
    ImpairmentShim,
    ImpairmentSpec,
    Message,
    ProtocolError,
    agent_run,
    broker_run,
    parse_endpoint,
    run_loopback,
    simulate_impaired,
)
from drsim.scenario_io import builtin_scenario

from conftest import P_STAR_S1


def test_message_round_trip():
    for msg in [
        Message(JOIN, 0, 3),
        Message(JOIN_ACK, 0, 3),
        Message(DEMAND, 7, 2, 0.0309968),
        Message(PRICE, 7, None, 1.4199248458359468),
        Message(PRICE, 8, None, None),
        Message(END, 300),
    ]:
        assert Message.decode(msg.encode()) == msg


def test_wire_format_is_one_json_line():
    line = Message(DEMAND, 4, 1, 0.25).encode()
    assert line == b'{"kind": "DEMAND", "slot": 4, "agent_id": 1, "value": 0.25}\n'


@pytest.mark.parametrize("raw", [b"garbage\n", b'{"kind": "HELLO"}\n', b'{"kind": "DEMAND", "slot": 1, "agent_id": 0}\n'])
def test_bad_messages(raw):
    with pytest.raises(ProtocolError):
        Message.decode(raw)


def test_parse_endpoint():
    assert parse_endpoint("127.0.0.1:7878") == ("127.0.0.1", 7878)
    with pytest.raises(ValueError):
        parse_endpoint("localhost")


def test_impairment_validation():
    with pytest.raises(ValueError):
        ImpairmentSpec(loss_prob=1.0)
    with pytest.raises(ValueError):
        ImpairmentSpec(delay_slots=-1)


def test_shim_delay_definition(s1):
    trace = simulate_impaired(replace(s1, horizon=30), ImpairmentSpec(delay_slots=2))
    prices = trace.prices
    for n, rec in enumerate(trace.records):
        expected = prices[n - 2] if n >= 2 else None
        assert rec.observed_prices == (expected,) * 10


def test_shim_loss_rate():
    spec = replace(builtin_scenario("S1"), horizon=2000)
    shim = ImpairmentShim(spec, ImpairmentSpec(loss_prob=0.1, seed=4))
    lost = sum(v is None for n in range(2000) for v in shim.deliver(n, 1.0))
    assert lost / 20000 == pytest.approx(0.1, abs=0.01)


def test_agent_logic_last_value_hold():
    agent = AgentLogic(UserParams(0, 0.11, 0.1, 0.02))
    assert agent.on_price(None) == 0.02  # no price seen yet: hold demand
    x1 = agent.on_price(0.5)
    x2 = agent.on_price(None)
    assert x2 == pytest.approx(x1 + 0.1 * (0.11 - x1 * 0.5), rel=1e-15)


def test_zero_impairment_in_process_equals_engine():
    for name in ["S1", "S6", "S7"]:
        spec = builtin_scenario(name)
        assert simulate_impaired(spec).records == run(spec).records


def test_single_agent_horizon_one():
    spec = ScenarioSpec(users=(UserParams(0, 1.0, 0.1, 0.02),), horizon=1)
    trace, finals = run_loopback(spec)
    assert trace.records == run(spec).records
    assert finals[0] == pytest.approx(0.02 + 0.1 * (1.0 - 0.02 * 0.02 ** 4))


def test_loopback_s1_matches_engine(s1):
    trace, finals = run_loopback(s1)
    ref = run(s1)
    assert np.max(np.abs(trace.demands - ref.demands)) <= 1e-12
    assert np.max(np.abs(trace.prices - ref.prices)) <= 1e-12
    assert trace.terminal.true_price == pytest.approx(1.42, abs=0.01)
    for u, x in zip(s1.users, finals):
        assert x == pytest.approx(u.w / 1.42, abs=1e-2)


def test_loopback_capacity_event_and_noise():
    spec = replace(builtin_scenario("S7"), events=(Event(50, "set_capacity", {"C": 2.0}),), horizon=120)
    trace, _ = run_loopback(spec)
    assert trace.records == run(spec).records


def test_loopback_loss_matches_in_process(s1):
    imp = ImpairmentSpec(loss_prob=0.1, delay_slots=0, seed=9)
    trace, _ = run_loopback(s1, imp)
    assert trace.records == simulate_impaired(s1, imp).records
    assert any(None in r.observed_prices or r.observed_prices != (r.true_price,) * 10 for r in trace.records)


def test_loopback_loss_and_delay_converges(s1):
    imp = ImpairmentSpec(loss_prob=0.1, delay_slots=2, seed=1)
    trace, _ = run_loopback(s1, imp)
    assert trace.records == simulate_impaired(s1, imp).records
    assert trace.prices[-50:].mean() == pytest.approx(P_STAR_S1, rel=0.02)


def test_broker_rejects_agent_side_events():
    with pytest.raises(ValueError):
        simulate_impaired(builtin_scenario("S5"))


def _fake_broker(prices, agent_id=0):
    """Serve fixed prices to one agent; returns (port, thread, received messages)."""
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    received = []

    def serve():
        conn, _ = srv.accept()
        f = conn.makefile("rwb")
        received.append(Message.decode(f.readline()))
        f.write(Message(JOIN_ACK, 0, agent_id).encode())
        f.flush()
        for n, q in enumerate(prices):
            received.append(Message.decode(f.readline()))
            f.write(Message(PRICE, n, value=q).encode())
            f.flush()
        received.append(Message.decode(f.readline()))
        f.write(Message(END, len(prices)).encode())
        f.flush()
        conn.close()
        srv.close()

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    return port, t, received


def test_agent_against_fixed_price_broker():
    params = UserParams(0, 0.11, 0.1, 0.02)
    port, t, received = _fake_broker([1.42] * 25)
    final = agent_run(params, f"127.0.0.1:{port}", slot_deadline=5.0)
    t.join()
    demands = [m.value for m in received if m.kind == DEMAND]
    expected = fixed_price_trajectory(params, 1.42, 25)
    assert demands == pytest.approx(expected, rel=1e-15)
    assert final == demands[-1]
    # lockstep: DEMAND slots arrive strictly in order
    assert [m.slot for m in received if m.kind == DEMAND] == list(range(26))


def test_agent_without_broker_times_out():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(AgentTimeout):
        agent_run(UserParams(0, 0.1, 0.1, 0.1), f"127.0.0.1:{port}", connect_timeout=0.3)


def _start_broker(spec, **kw):
    ready = threading.Event()
    port = []
    out = {}

    def target():
        try:
            out["trace"] = broker_run(spec, "127.0.0.1:0", on_listening=lambda p: (port.append(p), ready.set()), **kw)
        except Exception as exc:
            out["error"] = exc

    t = threading.Thread(target=target, daemon=True)
    t.start()
    ready.wait(5)
    return port[0], t, out


def _raw_join(port, agent_id):
    sock = socket.create_connection(("127.0.0.1", port))
    f = sock.makefile("rwb")
    f.write(Message(JOIN, 0, agent_id).encode())
    f.flush()
    assert Message.decode(f.readline()).kind == JOIN_ACK
    return sock, f


def test_broker_duplicate_demand_is_protocol_error():
    spec = ScenarioSpec(users=(UserParams(0, 1.0, 0.1, 0.02),), horizon=5)
    port, t, out = _start_broker(spec, slot_deadline=2.0)
    sock, f = _raw_join(port, 0)
    f.write(Message(DEMAND, 0, 0, 0.02).encode())
    f.flush()
    Message.decode(f.readline())
    f.write(Message(DEMAND, 0, 0, 0.02).encode())
    f.flush()
    t.join(5)
    sock.close()
    assert isinstance(out.get("error"), ProtocolError)
    assert "duplicate" in str(out["error"])


def test_broker_detects_disconnect():
    spec = ScenarioSpec(users=(UserParams(0, 1.0, 0.1, 0.02),), horizon=5)
    port, t, out = _start_broker(spec, slot_deadline=2.0)
    sock, f = _raw_join(port, 0)
    f.close()
    sock.close()
    t.join(5)
    assert isinstance(out.get("error"), ProtocolError)
    assert "disconnected" in str(out["error"])
