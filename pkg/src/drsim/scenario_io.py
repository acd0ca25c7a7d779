"""Scenario documents (YAML), the built-in experiments S1-S7, and trace files."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import replace
from typing import Any, Optional

import yaml

from .agents import Appliance, UserParams
from .engine import (
    ADDITIVE,
    DEFAULT_HORIZON,
    EVENT_PARAMS,
    MULTIPLICATIVE,
    PERTURB_WTP,
    SET_CAPACITY,
    Event,
    NoiseSpec,
    ScenarioSpec,
    SlotRecord,
    Trace,
)
from .pricing import PriceModel

TRACE_FORMAT = "drsim-trace"
TRACE_VERSION = 1

TOP_KEYS = {"name", "users", "price", "horizon", "seed", "events", "noise", "hem"}
NOISE_WIDTH_KEY = {MULTIPLICATIVE: "delta", ADDITIVE: "half_width"}


class ScenarioError(ValueError):
    """Invalid scenario document. ``field`` is a dotted path, ``line`` is 1-based when known."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(field)
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


# -- built-in scenarios ------------------------------------------------------


def _s1_users(x0=None, alpha=None):
    users = []
    for i in range(10):
        users.append(
            UserParams(
                id=i,
                w=round(0.11 + 0.01 * i, 2),
                alpha=0.1 if alpha is None else alpha[i],
                x0=0.02 if x0 is None else x0[i],
            )
        )
    return tuple(users)


def _steps(lo_hundredths):
    return [round((lo_hundredths + i) / 100, 2) for i in range(10)]


def builtin_scenario(name: str) -> ScenarioSpec:
    """The seven reference experiments: 10 users, price ``(X / 1) ** 4``, 300 slots."""
    key = name.upper()
    base = ScenarioSpec(users=_s1_users(), price_model=PriceModel(1.0, 4.0, 1.0), name=key)
    if key == "S1":
        return base
    if key == "S2":
        return replace(base, users=tuple(replace(u, alpha=0.17) for u in base.users))
    if key == "S3":
        return replace(base, users=_s1_users(x0=_steps(1)))
    if key == "S4":
        return replace(base, users=_s1_users(x0=_steps(1), alpha=_steps(11)))
    if key == "S5":
        return replace(base, events=(Event(100, PERTURB_WTP, {"low": -0.05, "high": 0.05}),))
    if key == "S6":
        return replace(base, events=(Event(100, SET_CAPACITY, {"C": 2.0}),))
    if key == "S7":
        return replace(base, price_noise=NoiseSpec(MULTIPLICATIVE, 0.05))
    raise KeyError(f"unknown scenario {name!r}; valid names: {', '.join(BUILTIN_NAMES)}")


BUILTIN_NAMES = ("S1", "S2", "S3", "S4", "S5", "S6", "S7")


# -- scenario documents ------------------------------------------------------


class _LineMap(dict):
    """Mapping that remembers the source line of itself and of each key."""

    line: Optional[int] = None
    key_lines: dict


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    mapping = _LineMap(loader.construct_mapping(node, deep=True))
    mapping.line = node.start_mark.line + 1
    mapping.key_lines = {k.value: k.start_mark.line + 1 for k, _ in node.value}
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _line(m, key=None):
    if isinstance(m, _LineMap):
        if key is not None and key in m.key_lines:
            return m.key_lines[key]
        return m.line
    return None


def _mapping(value, path, parent=None, key=None) -> dict:
    if not isinstance(value, dict):
        raise ScenarioError("expected a mapping", path, _line(parent, key))
    return value


def _check_keys(m: dict, allowed, required, path):
    for k in m:
        if k not in allowed:
            raise ScenarioError(f"unknown key {k!r}; allowed: {sorted(allowed)}", _join(path, k), _line(m, k))
    for k in required:
        if k not in m:
            raise ScenarioError(f"missing required key {k!r}", _join(path, k), _line(m))


def _join(path, key):
    return f"{path}.{key}" if path else key


def _number(m, key, path, positive=True):
    value = m[key]
    field = _join(path, key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"expected a number, got {value!r}", field, _line(m, key))
    if positive and not value > 0:
        raise ScenarioError(f"must be positive, got {value!r}", field, _line(m, key))
    return float(value)


def _integer(m, key, path, minimum=0):
    value = m[key]
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ScenarioError(f"expected an integer >= {minimum}, got {value!r}", _join(path, key), _line(m, key))
    return value


def scenario_from_mapping(doc: Any) -> ScenarioSpec:
    """Validate a decoded document and build the ScenarioSpec, applying defaults."""
    doc = _mapping(doc, "<root>")
    _check_keys(doc, TOP_KEYS, ("users",), "")

    raw_users = doc["users"]
    if not isinstance(raw_users, list) or not raw_users:
        raise ScenarioError("expected a non-empty list of users", "users", _line(doc, "users"))
    users = []
    for i, u in enumerate(raw_users):
        path = f"users[{i}]"
        u = _mapping(u, path, doc, "users")
        _check_keys(u, {"w", "alpha", "x0"}, ("w", "alpha", "x0"), path)
        users.append(UserParams(id=i, w=_number(u, "w", path), alpha=_number(u, "alpha", path), x0=_number(u, "x0", path)))

    model = PriceModel()
    if doc.get("price") is not None:
        p = _mapping(doc["price"], "price", doc, "price")
        _check_keys(p, {"a", "k", "C"}, (), "price")
        model = PriceModel(**{k: _number(p, k, "price") for k in p})

    horizon = _integer(doc, "horizon", "", 1) if "horizon" in doc else DEFAULT_HORIZON
    seed = _integer(doc, "seed", "", 0) if "seed" in doc else 0
    if seed >= 2**64:
        raise ScenarioError("seed must fit in 64 bits", "seed", _line(doc, "seed"))

    events = []
    for i, e in enumerate(doc.get("events") or []):
        path = f"events[{i}]"
        e = _mapping(e, path, doc, "events")
        _check_keys(e, {"slot", "kind", "params"}, ("slot", "kind"), path)
        kind = e["kind"]
        if kind not in EVENT_PARAMS:
            raise ScenarioError(f"unknown event kind {kind!r}; expected one of {sorted(EVENT_PARAMS)}", f"{path}.kind", _line(e, "kind"))
        params = _mapping(e.get("params") or {}, f"{path}.params", e, "params")
        _check_keys(params, set(EVENT_PARAMS[kind]), EVENT_PARAMS[kind], f"{path}.params")
        clean = {}
        for k in params:
            if k == "user":
                clean[k] = _integer(params, k, f"{path}.params")
            else:
                clean[k] = _number(params, k, f"{path}.params", positive=kind != PERTURB_WTP)
        slot = _integer(e, "slot", path)
        if slot >= horizon:
            raise ScenarioError(f"slot {slot} outside horizon {horizon}", f"{path}.slot", _line(e, "slot"))
        if "user" in clean and clean["user"] >= len(users):
            raise ScenarioError(f"no user {clean['user']}", f"{path}.params.user", _line(params, "user"))
        try:
            events.append(Event(slot, kind, clean))
        except ValueError as exc:
            raise ScenarioError(str(exc), path, _line(e)) from None

    noise = None
    if doc.get("noise") is not None:
        n = _mapping(doc["noise"], "noise", doc, "noise")
        kind = n.get("kind")
        if kind not in NOISE_WIDTH_KEY:
            raise ScenarioError(f"unknown noise kind {kind!r}; expected one of {sorted(NOISE_WIDTH_KEY)}", "noise.kind", _line(n, "kind"))
        width_key = NOISE_WIDTH_KEY[kind]
        _check_keys(n, {"kind", width_key}, ("kind", width_key), "noise")
        try:
            noise = NoiseSpec(kind, _number(n, width_key, "noise", positive=False))
        except ValueError as exc:
            raise ScenarioError(str(exc), f"noise.{width_key}", _line(n, width_key)) from None

    hem = None
    if doc.get("hem") is not None:
        raw = doc["hem"]
        if not isinstance(raw, list) or len(raw) != len(users):
            raise ScenarioError("expected one appliance list per user", "hem", _line(doc, "hem"))
        hem = []
        for i, cat in enumerate(raw):
            apps = []
            for j, a in enumerate(cat or []):
                path = f"hem[{i}][{j}]"
                a = _mapping(a, path, doc, "hem")
                _check_keys(a, {"name", "energy", "kind"}, ("name", "energy", "kind"), path)
                try:
                    apps.append(Appliance(str(a["name"]), _number(a, "energy", path), a["kind"]))
                except ValueError as exc:
                    raise ScenarioError(str(exc), path, _line(a)) from None
            hem.append(tuple(apps) if apps else None)
        hem = tuple(hem)

    name = str(doc.get("name", "custom"))
    return ScenarioSpec(
        users=tuple(users),
        price_model=model,
        horizon=horizon,
        events=tuple(events),
        price_noise=noise,
        seed=seed,
        hem=hem,
        name=name,
    )


def parse_scenario(text: str) -> ScenarioSpec:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"malformed document: {getattr(exc, 'problem', exc)}", None, mark.line + 1 if mark else None) from None
    return scenario_from_mapping(doc)


def scenario_to_mapping(spec: ScenarioSpec) -> dict:
    doc: dict[str, Any] = {
        "name": spec.name,
        "users": [{"w": u.w, "alpha": u.alpha, "x0": u.x0} for u in spec.users],
        "price": {"a": spec.price_model.a, "k": spec.price_model.k, "C": spec.price_model.C},
        "horizon": spec.horizon,
        "seed": spec.seed,
        "events": [{"slot": e.slot, "kind": e.kind, "params": dict(e.params)} for e in spec.events],
    }
    if spec.price_noise is not None:
        n = spec.price_noise
        doc["noise"] = {"kind": n.kind, NOISE_WIDTH_KEY[n.kind]: n.width}
    if spec.hem is not None:
        doc["hem"] = [
            [{"name": a.name, "energy": a.energy_per_run, "kind": a.kind} for a in cat] if cat else []
            for cat in spec.hem
        ]
    return doc


def serialize_scenario(spec: ScenarioSpec) -> str:
    return yaml.safe_dump(scenario_to_mapping(spec), sort_keys=False, default_flow_style=None)


def load_scenario(name_or_path: str) -> ScenarioSpec:
    """Resolve a built-in name (S1..S7) or read a scenario file."""
    if name_or_path.upper() in BUILTIN_NAMES:
        return builtin_scenario(name_or_path)
    with open(name_or_path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# -- traces ------------------------------------------------------------------


def _csv_bytes(trace: Trace) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    n = trace.scenario.n_users
    writer.writerow(["slot", *(f"x_{i + 1}" for i in range(n)), "aggregate", "price"])
    for r in trace.records:
        writer.writerow([r.slot, *(f"{x:.17g}" for x in r.demands), f"{r.aggregate:.17g}", f"{r.true_price:.17g}"])
    return buf.getvalue().encode("utf-8")


def _structured_bytes(trace: Trace) -> bytes:
    doc = {
        "format": TRACE_FORMAT,
        "version": TRACE_VERSION,
        "seed": trace.seed,
        "scenario": scenario_to_mapping(trace.scenario),
        "records": [
            {
                "slot": r.slot,
                "demands": list(r.demands),
                "aggregate": r.aggregate,
                "true_price": r.true_price,
                "observed_prices": list(r.observed_prices),
                "wtps": list(r.wtps),
                "capacity": r.capacity,
            }
            for r in trace.records
        ],
    }
    return json.dumps(doc, allow_nan=False).encode("utf-8")


def write_trace(trace: Trace, format: str = "csv") -> bytes:
    if not trace.records:
        raise ValueError("cannot write an empty trace")
    if format == "csv":
        return _csv_bytes(trace)
    if format == "structured":
        return _structured_bytes(trace)
    raise ValueError(f"unknown trace format {format!r}; expected 'csv' or 'structured'")


def read_trace(data: bytes) -> Trace:
    """Read a structured (JSON) trace back into a Trace."""
    doc = json.loads(data)
    if doc.get("format") != TRACE_FORMAT:
        raise ValueError("not a structured drsim trace (CSV traces carry no scenario and cannot be read back)")
    records = [
        SlotRecord(
            slot=r["slot"],
            demands=tuple(r["demands"]),
            aggregate=r["aggregate"],
            true_price=r["true_price"],
            observed_prices=tuple(r["observed_prices"]),
            wtps=tuple(r["wtps"]),
            capacity=r["capacity"],
        )
        for r in doc["records"]
    ]
    return Trace(scenario=scenario_from_mapping(doc["scenario"]), seed=doc["seed"], records=records)
