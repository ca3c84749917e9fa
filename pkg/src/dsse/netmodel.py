"""Unbalanced three-phase radial feeder model and its JSON format.

Matrices are always stored expanded to 3x3 (phase order A, B, C) with the
rows and columns of absent phases zeroed.  JSON documents may give them
either expanded or compressed to the present phases.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Iterable, Sequence

import jsonschema
import numpy as np

PHASES = "ABC"
DELTA_PAIRS = ("AB", "BC", "CA")
CONNECTIONS = ("wye-grounded", "wye", "delta")
LOAD_MODELS = ("PQ", "I", "Z")


class NetworkError(ValueError):
    """Base class for every network parsing/validation failure."""


class SchemaError(NetworkError):
    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class DanglingReferenceError(NetworkError):
    pass


class RadialityError(NetworkError):
    pass


class PhaseMismatchError(NetworkError):
    pass


class InvariantError(NetworkError):
    pass


def phase_tuple(phases: Iterable[str]) -> tuple[str, ...]:
    """Canonical phase mask: sorted, deduplicated, non-empty."""
    ps = set(phases)
    bad = ps - set(PHASES)
    if bad:
        raise SchemaError(f"unknown phase(s) {sorted(bad)}")
    if not ps:
        raise InvariantError("phase mask must contain at least one phase")
    return tuple(p for p in PHASES if p in ps)


def phase_index(phases: Sequence[str]) -> list[int]:
    return [PHASES.index(p) for p in phases]


def _mask(phases: Sequence[str]) -> np.ndarray:
    m = np.zeros(3, dtype=bool)
    m[phase_index(phases)] = True
    return m


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...]
    base_kv: float
    is_source: bool = False


@dataclass(frozen=True, eq=False)
class LineSegment:
    from_bus: str
    to_bus: str
    phases: tuple[str, ...]
    z_per_length: np.ndarray  # ohm per unit length, 3x3 complex
    y_per_length: np.ndarray  # siemens per unit length, 3x3 complex
    length: float = 1.0

    @property
    def series_impedance(self) -> np.ndarray:
        return self.z_per_length * self.length

    @property
    def shunt_admittance(self) -> np.ndarray:
        return self.y_per_length * self.length


@dataclass(frozen=True)
class Transformer:
    from_bus: str
    to_bus: str
    conn_high: str
    conn_low: str
    kv_high: float
    kv_low: float
    kva: float
    z_pu: complex  # on the transformer's own kVA / kV rating


@dataclass(frozen=True)
class Regulator:
    """Per-phase step-voltage regulator at the sending end of line (from_bus, to_bus)."""

    from_bus: str
    to_bus: str
    taps: tuple[int, int, int]
    step: float = 0.00625
    vreg_pu: float | None = None
    band_pu: float = 0.0083

    def ratios(self, taps: Sequence[int] | None = None) -> np.ndarray:
        t = np.asarray(self.taps if taps is None else taps, dtype=float)
        return 1.0 + self.step * t


@dataclass(frozen=True)
class CapacitorBank:
    bus: str
    kvar: tuple[float, float, float]
    status: tuple[bool, bool, bool] = (True, True, True)


@dataclass(frozen=True)
class Load:
    """Spot load.  For wye loads ``kw``/``kvar`` are indexed by phase A, B, C;
    for delta loads by element AB, BC, CA."""

    bus: str
    phases: tuple[str, ...]
    connection: str
    model: str
    kw: tuple[float, float, float]
    kvar: tuple[float, float, float]

    def elements(self) -> list[str]:
        """Labels of the energised elements (phase letters or delta pairs)."""
        if self.connection == "delta":
            return [pq for pq in DELTA_PAIRS if set(pq) <= set(self.phases)]
        return list(self.phases)

    def nominal(self, element: str) -> complex:
        idx = DELTA_PAIRS.index(element) if self.connection == "delta" else PHASES.index(element)
        return complex(self.kw[idx], self.kvar[idx])


@dataclass(frozen=True, eq=False)
class NetworkModel:
    buses: tuple[Bus, ...]
    lines: tuple[LineSegment, ...] = ()
    transformers: tuple[Transformer, ...] = ()
    regulators: tuple[Regulator, ...] = ()
    capacitors: tuple[CapacitorBank, ...] = ()
    loads: tuple[Load, ...] = ()
    source_vmag: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source_vang: tuple[float, float, float] = (0.0, -120.0, 120.0)
    base_mva: float = 2.5
    name: str = ""
    _topology: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        validate(self)

    # -- lookups -----------------------------------------------------------
    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def bus(self, bus_id: str) -> Bus:
        return self.buses[self.bus_index[bus_id]]

    @property
    def source(self) -> Bus:
        return next(b for b in self.buses if b.is_source)

    @cached_property
    def phase_labels(self) -> list[tuple[str, str]]:
        """Canonical (bus, phase) order used by every state vector."""
        return [(b.id, p) for b in self.buses for p in b.phases]

    @cached_property
    def branches(self) -> list[tuple[str, str]]:
        """Unique branch bus pairs, oriented away from the source, in BFS order."""
        return self._tree()[1]

    @cached_property
    def bfs_order(self) -> list[str]:
        return self._tree()[0]

    @cached_property
    def parent(self) -> dict[str, str]:
        return {t: f for f, t in self.branches}

    @cached_property
    def children(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {b.id: [] for b in self.buses}
        for f, t in self.branches:
            out[f].append(t)
        return out

    def branch_phases(self, f: str, t: str) -> tuple[str, ...]:
        key = frozenset((f, t))
        for ln in self.lines:
            if frozenset((ln.from_bus, ln.to_bus)) == key:
                return ln.phases
        for tr in self.transformers:
            if frozenset((tr.from_bus, tr.to_bus)) == key:
                return phase_tuple(set(self.bus(tr.from_bus).phases) & set(self.bus(tr.to_bus).phases))
        for rg in self.regulators:
            if frozenset((rg.from_bus, rg.to_bus)) == key:
                return phase_tuple(set(self.bus(rg.from_bus).phases) & set(self.bus(rg.to_bus).phases))
        raise DanglingReferenceError(f"no branch between {f} and {t}")

    def incident_branches(self, bus_id: str) -> list[tuple[str, str]]:
        return [br for br in self.branches if bus_id in br]

    def _tree(self) -> tuple[list[str], list[tuple[str, str]]]:
        if "tree" not in self._topology:
            self._topology["tree"] = _build_tree(self)
        return self._topology["tree"]

    def with_changes(self, **kw) -> "NetworkModel":
        """Copy with some fields replaced; the copy is re-validated."""
        fields = {k: getattr(self, k) for k in (
            "buses", "lines", "transformers", "regulators", "capacitors", "loads",
            "source_vmag", "source_vang", "base_mva", "name")}
        fields.update(kw)
        return NetworkModel(**fields)


def _pairs(net: NetworkModel) -> list[tuple[str, str, str]]:
    out = [(ln.from_bus, ln.to_bus, "line") for ln in net.lines]
    out += [(t.from_bus, t.to_bus, "transformer") for t in net.transformers]
    out += [(r.from_bus, r.to_bus, "regulator") for r in net.regulators]
    return out


def _build_tree(net: NetworkModel) -> tuple[list[str], list[tuple[str, str]]]:
    ids = {b.id for b in net.buses}
    adj: dict[str, list[str]] = {b.id: [] for b in net.buses}
    seen_pairs: dict[frozenset, str] = {}
    for f, t, kind in _pairs(net):
        for end in (f, t):
            if end not in ids:
                raise DanglingReferenceError(f"{kind} {f}-{t} references undeclared bus {end!r}")
        if f == t:
            raise RadialityError(f"{kind} {f}-{t} is a self loop")
        key = frozenset((f, t))
        if key in seen_pairs:
            # a regulator may share its bus pair with exactly one line
            kinds = {seen_pairs[key], kind}
            if kinds == {"line", "regulator"}:
                seen_pairs[key] = "line+regulator"
                continue
            raise RadialityError(f"parallel branches between {f} and {t}")
        seen_pairs[key] = kind
        adj[f].append(t)
        adj[t].append(f)
    src = [b.id for b in net.buses if b.is_source]
    root = src[0]
    order, edges = [root], []
    visited = {root}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in visited:
                visited.add(v)
                order.append(v)
                edges.append((u, v))
                queue.append(v)
    if len(visited) != len(ids):
        missing = sorted(ids - visited)
        raise RadialityError(f"buses not reachable from source: {missing}")
    if len(seen_pairs) != len(ids) - 1:
        raise RadialityError(f"branch graph has a cycle ({len(seen_pairs)} branches for {len(ids)} buses)")
    return order, edges


def validate(net: NetworkModel) -> None:
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        raise InvariantError("bus ids must be unique")
    n_src = sum(b.is_source for b in net.buses)
    if n_src != 1:
        raise InvariantError(f"exactly one source bus required, found {n_src}")
    for b in net.buses:
        if not b.base_kv > 0:
            raise InvariantError(f"bus {b.id}: base_kv must be positive")
        if not b.phases:
            raise InvariantError(f"bus {b.id}: empty phase mask")
    if net.base_mva <= 0:
        raise InvariantError("base_mva must be positive")
    bus_ph = {b.id: set(b.phases) for b in net.buses}
    for kind, items in (("line", net.lines), ("transformer", net.transformers),
                        ("regulator", net.regulators)):
        for it in items:
            for end in (it.from_bus, it.to_bus):
                if end not in bus_ph:
                    raise DanglingReferenceError(f"{kind} {it.from_bus}-{it.to_bus} references undeclared bus {end!r}")
    for ln in net.lines:
        if not set(ln.phases) <= bus_ph[ln.from_bus] & bus_ph[ln.to_bus]:
            raise PhaseMismatchError(f"line {ln.from_bus}-{ln.to_bus}: phases {ln.phases} not present at both ends")
        idx = phase_index(ln.phases)
        absent = ~_mask(ln.phases)
        if np.any(ln.z_per_length[absent]) or np.any(ln.z_per_length[:, absent]):
            raise PhaseMismatchError(f"line {ln.from_bus}-{ln.to_bus}: impedance on absent phase")
        sub = ln.series_impedance[np.ix_(idx, idx)]
        if not np.all(np.isfinite(sub)) or abs(np.linalg.det(sub)) < 1e-300 or np.linalg.cond(sub) > 1e12:
            raise InvariantError(f"line {ln.from_bus}-{ln.to_bus}: singular impedance submatrix")
        if ln.length < 0:
            raise InvariantError(f"line {ln.from_bus}-{ln.to_bus}: negative length")
    for tr in net.transformers:
        if tr.kv_high <= 0 or tr.kv_low <= 0 or tr.kva <= 0:
            raise InvariantError(f"transformer {tr.from_bus}-{tr.to_bus}: ratings must be positive")
        for c in (tr.conn_high, tr.conn_low):
            if c not in CONNECTIONS:
                raise SchemaError(f"unknown connection {c!r}")
        if (tr.conn_high, tr.conn_low) not in SUPPORTED_TRANSFORMERS:
            raise InvariantError(
                f"transformer {tr.from_bus}-{tr.to_bus}: {tr.conn_high}/{tr.conn_low} not supported")
        if tr.conn_high == "delta" and (len(bus_ph[tr.from_bus]) < 3 or len(bus_ph[tr.to_bus]) < 3):
            raise PhaseMismatchError(f"transformer {tr.from_bus}-{tr.to_bus}: open-delta not supported")
        if tr.z_pu == 0:
            raise InvariantError(f"transformer {tr.from_bus}-{tr.to_bus}: zero impedance")
    line_pairs = {frozenset((ln.from_bus, ln.to_bus)) for ln in net.lines}
    for rg in net.regulators:
        if frozenset((rg.from_bus, rg.to_bus)) not in line_pairs:
            raise InvariantError(f"regulator {rg.from_bus}-{rg.to_bus} must sit on an existing line")
        if any(abs(t) > 16 for t in rg.taps):
            raise InvariantError(f"regulator {rg.from_bus}-{rg.to_bus}: tap outside [-16, 16]")
        if rg.step <= 0:
            raise InvariantError(f"regulator {rg.from_bus}-{rg.to_bus}: step must be positive")
    for cap in net.capacitors:
        if cap.bus not in bus_ph:
            raise DanglingReferenceError(f"capacitor references undeclared bus {cap.bus!r}")
        if any(k < 0 for k in cap.kvar):
            raise InvariantError(f"capacitor at {cap.bus}: negative rating")
        for p, k in zip(PHASES, cap.kvar):
            if k and p not in bus_ph[cap.bus]:
                raise PhaseMismatchError(f"capacitor at {cap.bus}: phase {p} absent")
    for ld in net.loads:
        if ld.bus not in bus_ph:
            raise DanglingReferenceError(f"load references undeclared bus {ld.bus!r}")
        if not set(ld.phases) <= bus_ph[ld.bus]:
            raise PhaseMismatchError(f"load at {ld.bus}: phases {ld.phases} not present at bus")
        if ld.connection not in ("wye", "delta"):
            raise SchemaError(f"load at {ld.bus}: unknown connection {ld.connection!r}")
        if ld.model not in LOAD_MODELS:
            raise SchemaError(f"load at {ld.bus}: unknown model {ld.model!r}")
        if ld.connection == "delta" and len(ld.phases) < 2:
            raise PhaseMismatchError(f"delta load at {ld.bus} needs at least two phases")
        if any(p < 0 for p in ld.kw):
            raise InvariantError(f"load at {ld.bus}: negative nominal P")
        labels = DELTA_PAIRS if ld.connection == "delta" else PHASES
        for lab, p, q in zip(labels, ld.kw, ld.kvar):
            if (p or q) and not set(lab) <= set(ld.phases):
                raise PhaseMismatchError(f"load at {ld.bus}: element {lab} outside phases {ld.phases}")
    net._topology["tree"] = _build_tree(net)
    downstream = set(net._topology["tree"][1])
    for kind, items in (("transformer", net.transformers), ("regulator", net.regulators)):
        for it in items:
            if (it.from_bus, it.to_bus) not in downstream:
                raise RadialityError(f"{kind} {it.from_bus}-{it.to_bus} must point away from the source")
    # phases never widen moving away from the source
    for f, t in net._topology["tree"][1]:
        bp = set(net.branch_phases(f, t))
        if not bp <= bus_ph[f]:
            raise PhaseMismatchError(f"branch {f}-{t} carries phases absent upstream")
        if not bus_ph[t] <= bp:
            raise PhaseMismatchError(f"bus {t} has phases not fed by branch {f}-{t}")


SUPPORTED_TRANSFORMERS = {
    ("wye-grounded", "wye-grounded"),
    ("wye", "wye"),
    ("delta", "wye-grounded"),
}


def zero_injection_phases(net: NetworkModel) -> set[tuple[str, str]]:
    """Present (bus, phase) pairs with no load, capacitor or source attached."""
    injected: set[tuple[str, str]] = set()
    src = net.source.id
    for p in net.source.phases:
        injected.add((src, p))
    for ld in net.loads:
        for el in ld.elements():
            for p in el:
                injected.add((ld.bus, p))
    for cap in net.capacitors:
        for p, k in zip(PHASES, cap.kvar):
            if k > 0:
                injected.add((cap.bus, p))
    return {lab for lab in net.phase_labels if lab not in injected}


# -- JSON ------------------------------------------------------------------

_COMPLEX = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_MATRIX = {"type": "array", "items": {"type": "array", "items": _COMPLEX}}
_PHASES = {"type": "array", "items": {"enum": list(PHASES)}, "minItems": 1, "maxItems": 3}
_TRIPLE = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

SCHEMA = {
    "type": "object",
    "required": ["buses", "source"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "base_mva": {"type": "number", "exclusiveMinimum": 0},
        "source": {
            "type": "object", "additionalProperties": False,
            "required": ["vmag_pu", "vang_deg"],
            "properties": {"vmag_pu": _TRIPLE, "vang_deg": _TRIPLE},
        },
        "buses": {"type": "array", "minItems": 1, "items": {
            "type": "object", "additionalProperties": False,
            "required": ["id", "phases", "base_kv"],
            "properties": {"id": {"type": "string"}, "phases": _PHASES,
                           "base_kv": {"type": "number"}, "is_source": {"type": "boolean"}},
        }},
        "lines": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["from", "to", "phases", "z"],
            "properties": {"from": {"type": "string"}, "to": {"type": "string"}, "phases": _PHASES,
                           "z": _MATRIX, "y": _MATRIX, "length": {"type": "number"}},
        }},
        "transformers": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["from", "to", "kv_high", "kv_low", "kva", "z_pu"],
            "properties": {"from": {"type": "string"}, "to": {"type": "string"},
                           "conn_high": {"enum": list(CONNECTIONS)}, "conn_low": {"enum": list(CONNECTIONS)},
                           "kv_high": {"type": "number"}, "kv_low": {"type": "number"},
                           "kva": {"type": "number"}, "z_pu": _COMPLEX},
        }},
        "regulators": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["from", "to", "taps"],
            "properties": {"from": {"type": "string"}, "to": {"type": "string"},
                           "taps": {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3},
                           "step": {"type": "number"}, "vreg_pu": {"type": ["number", "null"]},
                           "band_pu": {"type": "number"}},
        }},
        "capacitors": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["bus", "kvar"],
            "properties": {"bus": {"type": "string"}, "kvar": _TRIPLE,
                           "status": {"type": "array", "items": {"type": "boolean"}, "minItems": 3, "maxItems": 3}},
        }},
        "loads": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["bus", "phases", "kw", "kvar"],
            "properties": {"bus": {"type": "string"}, "phases": _PHASES,
                           "connection": {"enum": ["wye", "delta"]}, "model": {"enum": list(LOAD_MODELS)},
                           "kw": _TRIPLE, "kvar": _TRIPLE},
        }},
    },
}


def _matrix(raw, phases: tuple[str, ...], path: str) -> np.ndarray:
    arr = np.array([[complex(re, im) for re, im in row] for row in raw], dtype=complex)
    k = len(phases)
    if arr.shape == (3, 3):
        return arr
    if arr.shape == (k, k):
        out = np.zeros((3, 3), dtype=complex)
        idx = phase_index(phases)
        out[np.ix_(idx, idx)] = arr
        return out
    raise SchemaError(f"matrix must be 3x3 or {k}x{k}, got {arr.shape}", path)


def from_dict(doc: dict) -> NetworkModel:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(exc.message, exc.json_path) from None
    buses = tuple(Bus(b["id"], phase_tuple(b["phases"]), float(b["base_kv"]), bool(b.get("is_source", False)))
                  for b in doc["buses"])
    lines = []
    for i, ln in enumerate(doc.get("lines", [])):
        ph = phase_tuple(ln["phases"])
        z = _matrix(ln["z"], ph, f"$.lines[{i}].z")
        y = _matrix(ln["y"], ph, f"$.lines[{i}].y") if "y" in ln else np.zeros((3, 3), complex)
        lines.append(LineSegment(ln["from"], ln["to"], ph, z, y, float(ln.get("length", 1.0))))
    transformers = tuple(
        Transformer(t["from"], t["to"], t.get("conn_high", "wye-grounded"), t.get("conn_low", "wye-grounded"),
                    float(t["kv_high"]), float(t["kv_low"]), float(t["kva"]), complex(*t["z_pu"]))
        for t in doc.get("transformers", []))
    regulators = tuple(
        Regulator(r["from"], r["to"], tuple(int(x) for x in r["taps"]), float(r.get("step", 0.00625)),
                  r.get("vreg_pu"), float(r.get("band_pu", 0.0083)))
        for r in doc.get("regulators", []))
    capacitors = tuple(
        CapacitorBank(c["bus"], tuple(float(x) for x in c["kvar"]),
                      tuple(bool(x) for x in c.get("status", [True] * 3)))
        for c in doc.get("capacitors", []))
    loads = tuple(
        Load(ld["bus"], phase_tuple(ld["phases"]), ld.get("connection", "wye"), ld.get("model", "PQ"),
             tuple(float(x) for x in ld["kw"]), tuple(float(x) for x in ld["kvar"]))
        for ld in doc.get("loads", []))
    src = doc["source"]
    return NetworkModel(buses, tuple(lines), transformers, regulators, capacitors, loads,
                        tuple(float(x) for x in src["vmag_pu"]), tuple(float(x) for x in src["vang_deg"]),
                        float(doc.get("base_mva", 2.5)), doc.get("name", ""))


def parse_network(text: str) -> NetworkModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}") from None
    return from_dict(doc)


def _cplx(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def _mat_out(m: np.ndarray) -> list:
    return [[_cplx(v) for v in row] for row in m]


def to_dict(net: NetworkModel) -> dict:
    """Canonical dictionary form: every optional field written out, matrices expanded."""
    return {
        "name": net.name,
        "base_mva": net.base_mva,
        "source": {"vmag_pu": list(net.source_vmag), "vang_deg": list(net.source_vang)},
        "buses": [{"id": b.id, "phases": list(b.phases), "base_kv": b.base_kv, "is_source": b.is_source}
                  for b in net.buses],
        "lines": [{"from": ln.from_bus, "to": ln.to_bus, "phases": list(ln.phases),
                   "z": _mat_out(ln.z_per_length), "y": _mat_out(ln.y_per_length), "length": ln.length}
                  for ln in net.lines],
        "transformers": [{"from": t.from_bus, "to": t.to_bus, "conn_high": t.conn_high, "conn_low": t.conn_low,
                          "kv_high": t.kv_high, "kv_low": t.kv_low, "kva": t.kva, "z_pu": _cplx(t.z_pu)}
                         for t in net.transformers],
        "regulators": [{"from": r.from_bus, "to": r.to_bus, "taps": list(r.taps), "step": r.step,
                        "vreg_pu": r.vreg_pu, "band_pu": r.band_pu} for r in net.regulators],
        "capacitors": [{"bus": c.bus, "kvar": list(c.kvar), "status": list(c.status)} for c in net.capacitors],
        "loads": [{"bus": ld.bus, "phases": list(ld.phases), "connection": ld.connection, "model": ld.model,
                   "kw": list(ld.kw), "kvar": list(ld.kvar)} for ld in net.loads],
    }


def serialize(net: NetworkModel) -> str:
    return json.dumps(to_dict(net), indent=1)


def load_network(path) -> NetworkModel:
    with open(path) as fh:
        return parse_network(fh.read())


def network_hash(net: NetworkModel) -> str:
    import hashlib
    return hashlib.sha256(serialize(net).encode()).hexdigest()[:16]


def load_ieee34_fixture() -> NetworkModel:
    """The IEEE 34-node test feeder bundled under ``dsse/data/ieee34.json``."""
    text = resources.files("dsse").joinpath("data/ieee34.json").read_text()
    return parse_network(text)


def total_nominal_load(net: NetworkModel) -> complex:
    """Sum of nominal spot-load power, kW + j kvar."""
    return sum((complex(sum(ld.kw), sum(ld.kvar)) for ld in net.loads), 0j)


SQRT3 = math.sqrt(3.0)
