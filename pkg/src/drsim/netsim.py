"""Distributed runtime: one price broker, N agents, newline-delimited JSON over TCP.

Wire protocol (one JSON object per line, UTF-8)::

    agent  -> broker  {"kind": "JOIN", "slot": 0, "agent_id": i}
    broker -> agent   {"kind": "JOIN_ACK", "slot": 0, "agent_id": i}
    agent  -> broker  {"kind": "DEMAND", "slot": n, "agent_id": i, "value": x}
    broker -> agent   {"kind": "PRICE", "slot": n, "value": p}      # p is null if lost
    broker -> agent   {"kind": "END", "slot": horizon}

Slots run in lockstep. The broker collects DEMAND(n) from every agent,
prices the aggregate, and sends PRICE(n) to each agent through the
impairment shim. Agents answer with DEMAND(n + 1). After the last slot the
broker reads the final DEMAND(horizon) and sends END.

A lost price arrives as an explicit ``null`` so the slot still closes; the
agent then reuses the last price it saw (last-value-hold). An agent that has
never seen a price keeps its demand unchanged.
"""
from __future__ import annotations

import asyncio
import json
import logging
import math
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .agents import UserParams, adapt_demand
from .engine import (
    SET_CAPACITY,
    ScenarioSpec,
    SimRandom,
    SimState,
    SlotRecord,
    Trace,
    aggregate_demand,
    apply_event,
    price_of,
)

log = logging.getLogger(__name__)

JOIN = "JOIN"
JOIN_ACK = "JOIN_ACK"
DEMAND = "DEMAND"
PRICE = "PRICE"
END = "END"
KINDS = (JOIN, JOIN_ACK, DEMAND, PRICE, END)

SLOT_DEADLINE = 5.0


class ProtocolError(RuntimeError):
    pass


class AgentTimeout(TimeoutError):
    pass


@dataclass(frozen=True)
class Message:
    kind: str
    slot: int = 0
    agent_id: Optional[int] = None
    value: Optional[float] = None

    def encode(self) -> bytes:
        doc = {"kind": self.kind, "slot": self.slot}
        if self.agent_id is not None:
            doc["agent_id"] = self.agent_id
        if self.kind in (DEMAND, PRICE):
            doc["value"] = self.value
        return (json.dumps(doc, allow_nan=False) + "\n").encode("utf-8")

    @classmethod
    def decode(cls, line: bytes) -> "Message":
        try:
            doc = json.loads(line)
        except ValueError as exc:
            raise ProtocolError(f"undecodable message {line[:80]!r}") from exc
        kind = doc.get("kind")
        if kind not in KINDS:
            raise ProtocolError(f"unknown message kind {kind!r}")
        slot = doc.get("slot", 0)
        if not isinstance(slot, int) or slot < 0:
            raise ProtocolError(f"bad slot {slot!r}")
        value = doc.get("value")
        if kind == DEMAND and not (isinstance(value, (int, float)) and math.isfinite(value)):
            raise ProtocolError(f"DEMAND needs a finite value, got {value!r}")
        return cls(kind, slot, doc.get("agent_id"), None if value is None else float(value))


@dataclass(frozen=True)
class ImpairmentSpec:
    """Channel impairments on the broker -> agent price path.

    Attributes:
        loss_prob: probability that a PRICE message is lost
        delay_slots: staleness; PRICE(n) carries the true price of slot n - delay_slots
        seed: seed of the loss draws
    """

    loss_prob: float = 0.0
    delay_slots: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.loss_prob < 1:
            raise ValueError(f"loss_prob must lie in [0, 1), got {self.loss_prob!r}")
        if not isinstance(self.delay_slots, int) or self.delay_slots < 0:
            raise ValueError(f"delay_slots must be a nonnegative integer, got {self.delay_slots!r}")


class ImpairmentShim:
    """Deterministic per-slot price delivery: delay, then loss, then scenario noise.

    Draws happen in agent index order every slot, whether or not an
    impairment is active, so the sequence depends only on the seeds.
    """

    def __init__(self, scenario: ScenarioSpec, impairment: Optional[ImpairmentSpec] = None):
        self.impairment = impairment or ImpairmentSpec()
        self.noise = scenario.price_noise
        self.n = scenario.n_users
        self._loss_rng = np.random.Generator(np.random.PCG64(self.impairment.seed))
        self._noise_rng = SimRandom(scenario.seed).noise
        self.history: list[float] = []

    def deliver(self, slot: int, price: float) -> list[Optional[float]]:
        assert slot == len(self.history), "slots must be delivered in order"
        self.history.append(price)
        src = slot - self.impairment.delay_slots
        out = []
        for _ in range(self.n):
            lost = self._loss_rng.random() < self.impairment.loss_prob
            value = None if lost or src < 0 else self.history[src]
            if self.noise is not None:
                observed = self.noise.observe(value if value is not None else 0.0, self._noise_rng)
                if value is not None:
                    value = observed
            out.append(value)
        return out


class AgentLogic:
    """The per-agent update with last-value-hold on missing prices."""

    def __init__(self, params: UserParams):
        self.params = params
        self.demand = params.x0
        self.last_price: Optional[float] = None

    def on_price(self, value: Optional[float]) -> float:
        if value is not None:
            self.last_price = value
        if self.last_price is not None:
            p = self.params
            self.demand = adapt_demand(self.demand, p.w, p.alpha, self.last_price)
        return self.demand


def _check_distributable(scenario: ScenarioSpec) -> None:
    if scenario.hem is not None:
        raise ValueError("the distributed runtime does not carry HEM appliance catalogs")
    for ev in scenario.events:
        if ev.kind != SET_CAPACITY:
            raise ValueError(f"event {ev.kind!r} changes agent-side parameters; only set_capacity is supported by the broker")


class _SlotClock:
    """Broker-side slot bookkeeping shared by the socket and in-process paths."""

    def __init__(self, scenario: ScenarioSpec, impairment: Optional[ImpairmentSpec]):
        _check_distributable(scenario)
        self.scenario = scenario
        self.state = SimState.initial(scenario)
        self.rng = SimRandom(scenario.seed)
        self.shim = ImpairmentShim(scenario, impairment)
        self.held: list[Optional[float]] = [None] * scenario.n_users
        self.trace = Trace(scenario=scenario, seed=scenario.seed)

    def close_slot(self, slot: int, demands: list[float]) -> list[Optional[float]]:
        for ev in self.scenario.events:
            if ev.slot == slot:
                apply_event(self.state, ev, self.rng.events)
        total = aggregate_demand(demands)
        price = price_of(total, self.state.model, slot)
        sent = self.shim.deliver(slot, price)
        self.held = [v if v is not None else h for v, h in zip(sent, self.held)]
        self.trace.records.append(
            SlotRecord(
                slot=slot,
                demands=tuple(demands),
                aggregate=total,
                true_price=price,
                observed_prices=tuple(self.held),
                wtps=tuple(u.w for u in self.state.users),
                capacity=self.state.model.C,
            )
        )
        return sent


def simulate_impaired(scenario: ScenarioSpec, impairment: Optional[ImpairmentSpec] = None) -> Trace:
    """In-process run of the broker/agent protocol, without sockets."""
    clock = _SlotClock(scenario, impairment)
    agents = [AgentLogic(u) for u in scenario.users]
    for n in range(scenario.horizon):
        sent = clock.close_slot(n, [a.demand for a in agents])
        for a, v in zip(agents, sent):
            a.on_price(v)
    return clock.trace


# -- broker ------------------------------------------------------------------


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)


async def _read(reader: asyncio.StreamReader, deadline: float, who: str) -> Message:
    try:
        line = await asyncio.wait_for(reader.readline(), deadline)
    except asyncio.TimeoutError:
        raise ProtocolError(f"{who}: no message within {deadline}s") from None
    if not line:
        raise ProtocolError(f"{who}: disconnected")
    return Message.decode(line)


async def _serve(scenario, host, port, impairment, slot_deadline, join_timeout, on_listening):
    n_users = scenario.n_users
    clock = _SlotClock(scenario, impairment)
    conns: dict[int, tuple[asyncio.StreamReader, asyncio.StreamWriter]] = {}
    everyone = asyncio.Event()

    async def handle(reader, writer):
        try:
            msg = await _read(reader, join_timeout, "joining agent")
            aid = msg.agent_id
            if msg.kind != JOIN or not isinstance(aid, int) or not 0 <= aid < n_users or aid in conns:
                raise ProtocolError(f"rejected join {msg}")
        except ProtocolError as exc:
            log.warning("%s", exc)
            writer.close()
            return
        conns[aid] = (reader, writer)
        writer.write(Message(JOIN_ACK, 0, aid).encode())
        await writer.drain()
        if len(conns) == n_users:
            everyone.set()

    server = await asyncio.start_server(handle, host, port)
    bound = server.sockets[0].getsockname()[1]
    log.info("broker listening on %s:%d for %d agents", host, bound, n_users)
    if on_listening is not None:
        on_listening(bound)
    try:
        try:
            await asyncio.wait_for(everyone.wait(), join_timeout)
        except asyncio.TimeoutError:
            raise ProtocolError(f"only {len(conns)} of {n_users} agents joined within {join_timeout}s") from None
        server.close()
        order = [conns[i] for i in range(n_users)]

        for slot in range(scenario.horizon + 1):
            msgs = await asyncio.gather(
                *(_read(r, slot_deadline, f"agent {i}") for i, (r, _) in enumerate(order))
            )
            for i, m in enumerate(msgs):
                if m.kind != DEMAND or m.agent_id != i:
                    raise ProtocolError(f"agent {i}: expected DEMAND, got {m}")
                if m.slot < slot:
                    raise ProtocolError(f"agent {i}: duplicate DEMAND for slot {m.slot}")
                if m.slot != slot:
                    raise ProtocolError(f"agent {i}: DEMAND for slot {m.slot} while slot {slot} is open")
            if slot == scenario.horizon:
                for _, w in order:
                    w.write(Message(END, slot).encode())
                break
            sent = clock.close_slot(slot, [m.value for m in msgs])
            for (_, w), v in zip(order, sent):
                w.write(Message(PRICE, slot, value=v).encode())
            await asyncio.gather(*(w.drain() for _, w in order))
        await asyncio.gather(*(w.drain() for _, w in order), return_exceptions=True)
    finally:
        server.close()
        for _, w in conns.values():
            w.close()
    return clock.trace


def broker_run(
    scenario: ScenarioSpec,
    endpoint: str = "127.0.0.1:0",
    impairment: Optional[ImpairmentSpec] = None,
    slot_deadline: float = SLOT_DEADLINE,
    join_timeout: float = 30.0,
    on_listening: Optional[Callable[[int], None]] = None,
) -> Trace:
    """Serve one scenario to ``scenario.n_users`` agents and return the trace.

    ``on_listening`` receives the bound port (useful with port 0).
    """
    host, port = parse_endpoint(endpoint)
    return asyncio.run(_serve(scenario, host, port, impairment, slot_deadline, join_timeout, on_listening))


# -- agent -------------------------------------------------------------------


def _connect(host, port, timeout):
    give_up = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout)
        except OSError:
            if time.monotonic() >= give_up:
                raise AgentTimeout(f"no broker at {host}:{port} within {timeout}s") from None
            time.sleep(0.05)


def agent_run(params: UserParams, endpoint: str, slot_deadline: float = SLOT_DEADLINE, connect_timeout: float = 5.0) -> float:
    """Join the broker at ``endpoint`` and adapt until END. Returns the final demand."""
    host, port = parse_endpoint(endpoint)
    sock = _connect(host, port, connect_timeout)
    sock.settimeout(slot_deadline)
    logic = AgentLogic(params)
    try:
        stream = sock.makefile("rwb")

        def send(msg):
            stream.write(msg.encode())
            stream.flush()

        def recv():
            try:
                line = stream.readline()
            except (socket.timeout, TimeoutError):
                raise AgentTimeout(f"agent {params.id}: no message from broker within {slot_deadline}s") from None
            if not line:
                raise ProtocolError(f"agent {params.id}: broker closed the connection")
            return Message.decode(line)

        send(Message(JOIN, 0, params.id))
        ack = recv()
        if ack.kind != JOIN_ACK or ack.agent_id != params.id:
            raise ProtocolError(f"agent {params.id}: expected JOIN_ACK, got {ack}")
        slot = 0
        while True:
            send(Message(DEMAND, slot, params.id, logic.demand))
            msg = recv()
            if msg.kind == END:
                return logic.demand
            if msg.kind != PRICE or msg.slot != slot:
                raise ProtocolError(f"agent {params.id}: expected PRICE for slot {slot}, got {msg}")
            logic.on_price(msg.value)
            slot += 1
    finally:
        sock.close()


def run_loopback(
    scenario: ScenarioSpec,
    impairment: Optional[ImpairmentSpec] = None,
    slot_deadline: float = SLOT_DEADLINE,
) -> tuple[Trace, list[float]]:
    """Broker plus one thread per agent over 127.0.0.1; returns (trace, final demands)."""
    ready = threading.Event()
    port: list[int] = []
    result: dict = {}

    def on_listening(p):
        port.append(p)
        ready.set()

    def broker():
        try:
            result["trace"] = broker_run(scenario, "127.0.0.1:0", impairment, slot_deadline, on_listening=on_listening)
        except BaseException as exc:  # surfaced below
            result["broker_error"] = exc
            ready.set()

    finals: list[Optional[float]] = [None] * scenario.n_users
    errors: list[BaseException] = []

    def agent(u):
        try:
            finals[u.id] = agent_run(u, f"127.0.0.1:{port[0]}", slot_deadline)
        except BaseException as exc:
            errors.append(exc)

    bt = threading.Thread(target=broker, daemon=True)
    bt.start()
    ready.wait()
    if "broker_error" in result:
        raise result["broker_error"]
    threads = [threading.Thread(target=agent, args=(u,), daemon=True) for u in scenario.users]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    bt.join()
    if "broker_error" in result:
        raise result["broker_error"]
    if errors:
        raise errors[0]
    return result["trace"], finals
