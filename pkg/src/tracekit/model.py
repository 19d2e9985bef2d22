"""Core domain types shared by the tracing, ingest, and diagnosis layers.

Conventions every other module relies on:

* Timestamps are integer microseconds on a named node-local clock
  (``clock_id``). Ordering and subtraction are defined only between
  timestamps on the same clock; mixing clocks raises ``ClockMismatchError``.
  The few operations that deliberately difference across clocks (the
  queueing-delay estimator) work on raw ``micros`` and say so.
* Session ids are 128-bit integers, RPC ids 64-bit. ``parent_rpc_id == 0``
  marks a session root, so RPC id 0 is reserved and never allocated.
* Every record type has a canonical JSON Lines encoding (documented in
  ``docs/formats.md``); ``encode_record``/``decode_record`` round-trip all
  fields exactly. Ids are encoded as fixed-width lowercase hex.

Record constructors accept cross-field inconsistencies on purpose (for
example ``first_byte > last_byte``): raw instrumentation is untrusted, and
``validate_trace`` reports such problems as data rather than refusing to
represent them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional

FORMAT_VERSION = 1

#: parent_rpc_id carried by session-root edges; rpc id 0 is reserved.
ROOT_PARENT_ID = 0

SESSION_ID_MAX = (1 << 128) - 1
RPC_ID_MAX = (1 << 64) - 1


class ClockMismatchError(ValueError):
    """Two timestamps on different clocks were compared or subtracted."""


class DecodeError(ValueError):
    """A serialized record could not be decoded."""


@dataclass(frozen=True)
class Timestamp:
    """Integer microseconds on a named node-local clock."""

    micros: int
    clock_id: str

    def __post_init__(self) -> None:
        if self.micros < 0:
            raise ValueError(f"timestamp micros must be non-negative, got {self.micros}")

    def _require_same_clock(self, other: "Timestamp") -> None:
        if self.clock_id != other.clock_id:
            raise ClockMismatchError(
                f"cannot relate clock {self.clock_id!r} to clock {other.clock_id!r}"
            )

    def __lt__(self, other: "Timestamp") -> bool:
        self._require_same_clock(other)
        return self.micros < other.micros

    def __le__(self, other: "Timestamp") -> bool:
        self._require_same_clock(other)
        return self.micros <= other.micros

    def __gt__(self, other: "Timestamp") -> bool:
        self._require_same_clock(other)
        return self.micros > other.micros

    def __ge__(self, other: "Timestamp") -> bool:
        self._require_same_clock(other)
        return self.micros >= other.micros

    def __sub__(self, other: "Timestamp") -> int:
        """Microsecond difference; both timestamps must share a clock."""
        self._require_same_clock(other)
        return self.micros - other.micros

    def shifted(self, delta_us: int) -> "Timestamp":
        return Timestamp(self.micros + delta_us, self.clock_id)


class Direction(str, Enum):
    """The four observations of an RPC at a node."""

    REQUEST_OUT = "request_out"
    REQUEST_IN = "request_in"
    RESPONSE_OUT = "response_out"
    RESPONSE_IN = "response_in"


@dataclass(frozen=True)
class TraceHeader:
    """On-wire causality carrier: session id plus RPC / parent RPC ids."""

    session_id: int
    rpc_id: int
    parent_rpc_id: int

    def __post_init__(self) -> None:
        if not (0 < self.session_id <= SESSION_ID_MAX):
            raise ValueError(f"session_id out of range: {self.session_id}")
        if not (0 < self.rpc_id <= RPC_ID_MAX):
            raise ValueError(f"rpc_id out of range: {self.rpc_id}")
        if not (0 <= self.parent_rpc_id <= RPC_ID_MAX):
            raise ValueError(f"parent_rpc_id out of range: {self.parent_rpc_id}")
        if self.rpc_id == self.parent_rpc_id:
            raise ValueError(f"rpc_id equals parent_rpc_id: {self.rpc_id}")

    @property
    def is_root(self) -> bool:
        return self.parent_rpc_id == ROOT_PARENT_ID


@dataclass(frozen=True)
class RpcEdgeRecord:
    """One directed message of an RPC as observed at a single node.

    Both timestamps are on the observing node's clock; ``first_byte`` /
    ``last_byte`` bracket the (de)serialization window of the message at
    that node.
    """

    session_id: int
    rpc_id: int
    parent_rpc_id: int
    node: str
    peer: str
    direction: Direction
    first_byte: Timestamp
    last_byte: Timestamp
    payload_bytes: int = 0

    @property
    def dedup_key(self) -> tuple:
        return (self.session_id, self.rpc_id, self.node, self.direction.value,
                self.first_byte.micros)

    def describe(self) -> str:
        return (f"edge rpc={self.rpc_id:x} node={self.node} "
                f"dir={self.direction.value} t={self.first_byte.micros}")


@dataclass(frozen=True)
class AnnotationRecord:
    """Optional service-specific timestamped key-value pair."""

    session_id: int
    rpc_id: int
    node: str
    key: str
    value: str
    at: Timestamp

    @property
    def dedup_key(self) -> tuple:
        return (self.session_id, self.rpc_id, self.node, self.key, self.at.micros)

    def describe(self) -> str:
        return f"annotation rpc={self.rpc_id:x} node={self.node} key={self.key}"


@dataclass(frozen=True)
class NavEvent:
    name: str
    start: Timestamp
    end: Timestamp


@dataclass(frozen=True)
class NavTimingRecord:
    """User-side page event chain plus the total page load duration."""

    session_id: int
    events: tuple[NavEvent, ...]
    onload_ms: int

    @property
    def dedup_key(self) -> tuple:
        return ("navtiming", self.session_id)

    def describe(self) -> str:
        return f"navtiming session={self.session_id:x}"


@dataclass(frozen=True)
class TcpSnapshot:
    """Transport-layer statistics of one connection at one instant."""

    session_id: int
    connection_id: str
    at: Timestamp
    srtt_us: int
    rttvar_us: int
    rto_us: int
    retrans_segments: int
    reordering_events: int
    cwnd_segments: int
    send_window_bytes: int
    recv_window_bytes: int

    @property
    def dedup_key(self) -> tuple:
        return ("tcp", self.session_id, self.connection_id, self.at.micros)

    def describe(self) -> str:
        return f"tcp session={self.session_id:x} conn={self.connection_id}"


@dataclass(frozen=True)
class SyslogMessage:
    """One device log line; ``template_id`` is set iff a template matched."""

    device: str
    at: Timestamp
    severity: int
    raw: str
    template_id: Optional[str] = None
    attrs: tuple[tuple[str, str], ...] = ()

    @property
    def attrs_dict(self) -> dict[str, str]:
        return dict(self.attrs)


class TemplateLayer(str, Enum):
    PHY = "PHY"
    L2 = "L2"
    L3 = "L3"
    L4 = "L4"
    ROUTING = "routing"
    HARDWARE = "hardware"


@dataclass(frozen=True)
class Template:
    """Anchored pattern class for semi-structured device log lines."""

    template_id: str
    pattern: str
    layer: TemplateLayer
    equivalence_class: str


class RuleScope(str, Enum):
    INTRA_DEVICE = "intra_device"
    INTER_DEVICE = "inter_device"


@dataclass(frozen=True)
class CausalRule:
    """Mined directed relation between two syslog templates."""

    cause: str
    effect: str
    scope: RuleScope
    score: float
    support: int


@dataclass(frozen=True)
class ProblemNode:
    device: str
    template_id: str
    first_at: Timestamp
    last_at: Timestamp


@dataclass(frozen=True)
class ProblemEdge:
    cause_device: str
    cause_template: str
    effect_device: str
    effect_template: str
    rule: CausalRule


@dataclass(frozen=True)
class ProblemGraph:
    """Directed acyclic graph of template instances within a time window."""

    nodes: tuple[ProblemNode, ...]
    edges: tuple[ProblemEdge, ...]
    window: tuple[Timestamp, Timestamp]

    def devices(self) -> frozenset[str]:
        return frozenset(n.device for n in self.nodes)

    def root_nodes(self) -> tuple[ProblemNode, ...]:
        """Nodes with no incoming edge, earliest first."""
        targets = {(e.effect_device, e.effect_template) for e in self.edges}
        roots = [n for n in self.nodes if (n.device, n.template_id) not in targets]
        return tuple(sorted(roots, key=lambda n: (n.first_at.micros, n.device, n.template_id)))


class DeviceTier(str, Enum):
    TOR = "ToR"
    AGG = "AGG"
    CORE = "CORE"
    MIDDLEBOX = "middlebox"


@dataclass(frozen=True)
class Device:
    device_id: str
    tier: DeviceTier


@dataclass(frozen=True)
class TopologySnapshot:
    """Datacenter fabric: tiered devices, links, and host attachments."""

    devices: tuple[Device, ...]
    links: tuple[tuple[str, str], ...]
    host_attachments: tuple[tuple[str, str], ...]
    taken_at: Timestamp

    def tier_of(self, device_id: str) -> DeviceTier:
        for d in self.devices:
            if d.device_id == device_id:
                return d.tier
        raise KeyError(device_id)

    def tiers(self) -> dict[str, DeviceTier]:
        return {d.device_id: d.tier for d in self.devices}

    def neighbors(self) -> dict[str, frozenset[str]]:
        adj: dict[str, set[str]] = {d.device_id: set() for d in self.devices}
        for a, b in self.links:
            adj[a].add(b)
            adj[b].add(a)
        return {k: frozenset(v) for k, v in adj.items()}

    def attached_tor(self, host: str) -> str:
        for h, tor in self.host_attachments:
            if h == host:
                return tor
        raise KeyError(f"host {host!r} not attached in topology")

    def validate(self) -> list[str]:
        problems = []
        seen_hosts: dict[str, str] = {}
        tiers = self.tiers()
        for h, tor in self.host_attachments:
            if h in seen_hosts and seen_hosts[h] != tor:
                problems.append(f"host {h} attached to multiple ToRs")
            seen_hosts[h] = tor
            if tiers.get(tor) != DeviceTier.TOR:
                problems.append(f"host {h} attached to non-ToR device {tor}")
        if self.devices:
            adj = self.neighbors()
            start = self.devices[0].device_id
            seen = {start}
            stack = [start]
            while stack:
                for n in adj[stack.pop()]:
                    if n not in seen:
                        seen.add(n)
                        stack.append(n)
            if len(seen) != len(self.devices):
                problems.append("device graph is not connected")
        return problems


@dataclass(frozen=True)
class SessionTrace:
    """All assembled records of one user session."""

    session_id: int
    edges: tuple[RpcEdgeRecord, ...]
    annotations: tuple[AnnotationRecord, ...] = ()
    navtiming: Optional[NavTimingRecord] = None
    tcp_snapshots: tuple[TcpSnapshot, ...] = ()
    assembled_complete: bool = True


# ---------------------------------------------------------------------------
# Diagnosis report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionFinding:
    flag: str                       # normal | high | low | insufficient_data | deferred
    latency_ms: float
    key: tuple[str, ...]
    q1: Optional[float]
    q3: Optional[float]
    n: int
    k: float
    method: str = "iqr_fence"


@dataclass(frozen=True)
class PathSegment:
    kind: str                       # service | network
    node: str
    rpc_id: Optional[int]
    duration_us: int


@dataclass(frozen=True)
class Contribution:
    service: str
    latency_us: int
    fraction: float


@dataclass(frozen=True)
class ContentFinding:
    event: str
    duration_us: int
    fraction: float
    significant: bool


@dataclass(frozen=True)
class NetworkFinding:
    rpc_id: int
    src_node: str
    dst_node: str
    queueing_delay_us: Optional[int]
    flagged: bool
    possible_graphs: tuple[str, ...] = ()


@dataclass(frozen=True)
class InternetFinding:
    bottleneck: str                 # internet | cdn_backend
    rtt_variation: float
    download_stack_bound_us: int
    cache_hit: bool


@dataclass(frozen=True)
class DiagnosisReport:
    """Per-session verdict across all diagnosis stages."""

    session_id: int
    detected: DetectionFinding
    critical_path: tuple[PathSegment, ...]
    total_latency_us: int
    path_partial: bool
    contributions: tuple[Contribution, ...]
    content_findings: tuple[ContentFinding, ...]
    network_findings: tuple[NetworkFinding, ...]
    internet_findings: Optional[InternetFinding]
    pathologies: tuple[str, ...]
    e2e_source: str                 # navtiming | root_round_trip
    e2e_us: int
    session_start_us: int
    revision: int = 1
    notes: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# Trace validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    """One invariant violation, naming the offending field and record."""

    field: str
    record: str
    message: str


def validate_trace(trace: SessionTrace) -> list[Violation]:
    """Check every type invariant over an assembled trace.

    Violations are data, not errors: the list is empty iff the trace is
    well formed. The check is idempotent and insensitive to record order.
    """
    out: list[Violation] = []
    rpc_ids = {e.rpc_id for e in trace.edges}
    seen_keys: set[tuple] = set()

    for e in sorted(trace.edges, key=lambda e: (e.node, e.first_byte.micros,
                                                e.direction.value, e.rpc_id)):
        desc = e.describe()
        if e.session_id != trace.session_id:
            out.append(Violation("session_id", desc, "edge session differs from trace"))
        if e.rpc_id == e.parent_rpc_id:
            out.append(Violation("parent_rpc_id", desc, "rpc_id equals parent_rpc_id"))
        if e.rpc_id == ROOT_PARENT_ID:
            out.append(Violation("rpc_id", desc, "rpc id 0 is reserved"))
        if e.payload_bytes < 0:
            out.append(Violation("payload_bytes", desc, "negative payload size"))
        if e.first_byte.clock_id != e.node:
            out.append(Violation("first_byte", desc,
                                 f"clock {e.first_byte.clock_id!r} != node"))
        if e.last_byte.clock_id != e.node:
            out.append(Violation("last_byte", desc,
                                 f"clock {e.last_byte.clock_id!r} != node"))
        if (e.first_byte.clock_id == e.last_byte.clock_id
                and e.first_byte.micros > e.last_byte.micros):
            out.append(Violation("first_byte", desc, "timestamp order: first_byte > last_byte"))
        if e.parent_rpc_id != ROOT_PARENT_ID and e.parent_rpc_id not in rpc_ids:
            out.append(Violation("parent_rpc_id", desc,
                                 f"dangling parent {e.parent_rpc_id:x}"))
        key = e.dedup_key
        if key in seen_keys:
            out.append(Violation("dedup_key", desc, "duplicate edge record"))
        seen_keys.add(key)

    for a in sorted(trace.annotations, key=lambda a: (a.node, a.at.micros, a.key)):
        if not a.key:
            out.append(Violation("key", a.describe(), "empty annotation key"))
        if a.session_id != trace.session_id:
            out.append(Violation("session_id", a.describe(),
                                 "annotation session differs from trace"))

    nav = trace.navtiming
    if nav is not None:
        if nav.session_id != trace.session_id:
            out.append(Violation("session_id", nav.describe(),
                                 "navtiming session differs from trace"))
        starts = [ev.start.micros for ev in nav.events]
        if starts != sorted(starts):
            out.append(Violation("events", nav.describe(), "events not ordered by start"))
        if nav.events:
            origin = nav.events[0].start.micros
            for ev in nav.events:
                if (ev.end.micros - origin) > nav.onload_ms * 1000:
                    out.append(Violation("onload_ms", nav.describe(),
                                         f"event {ev.name} ends after onload"))

    for s in sorted(trace.tcp_snapshots, key=lambda s: (s.connection_id, s.at.micros)):
        desc = s.describe()
        for fname in ("srtt_us", "rttvar_us", "rto_us", "retrans_segments",
                      "reordering_events", "cwnd_segments", "send_window_bytes",
                      "recv_window_bytes"):
            if getattr(s, fname) < 0:
                out.append(Violation(fname, desc, "negative counter"))
        if s.rto_us < s.srtt_us:
            out.append(Violation("rto_us", desc, "rto_us below srtt_us"))
        if s.session_id != trace.session_id:
            out.append(Violation("session_id", desc, "snapshot session differs from trace"))

    return out


# ---------------------------------------------------------------------------
# JSON Lines codec
# ---------------------------------------------------------------------------

def format_session_id(session_id: int) -> str:
    return f"{session_id:032x}"


def format_rpc_id(rpc_id: int) -> str:
    return f"{rpc_id:016x}"


def _parse_hex(text: str, width: int, what: str) -> int:
    if not isinstance(text, str) or len(text) != width:
        raise DecodeError(f"{what}: expected {width} hex chars, got {text!r}")
    if text.lower() != text or any(c not in "0123456789abcdef" for c in text):
        raise DecodeError(f"{what}: invalid hex {text!r}")
    return int(text, 16)


def _ts_obj(ts: Timestamp) -> dict:
    return {"micros": ts.micros, "clock_id": ts.clock_id}


def _ts_back(obj: Mapping) -> Timestamp:
    return Timestamp(int(obj["micros"]), str(obj["clock_id"]))


def _edge_obj(e: RpcEdgeRecord) -> dict:
    return {
        "session_id": format_session_id(e.session_id),
        "rpc_id": format_rpc_id(e.rpc_id),
        "parent_rpc_id": format_rpc_id(e.parent_rpc_id),
        "node": e.node,
        "peer": e.peer,
        "direction": e.direction.value,
        "first_byte": _ts_obj(e.first_byte),
        "last_byte": _ts_obj(e.last_byte),
        "payload_bytes": e.payload_bytes,
    }


def _edge_back(o: Mapping) -> RpcEdgeRecord:
    return RpcEdgeRecord(
        session_id=_parse_hex(o["session_id"], 32, "session_id"),
        rpc_id=_parse_hex(o["rpc_id"], 16, "rpc_id"),
        parent_rpc_id=_parse_hex(o["parent_rpc_id"], 16, "parent_rpc_id"),
        node=str(o["node"]),
        peer=str(o["peer"]),
        direction=Direction(o["direction"]),
        first_byte=_ts_back(o["first_byte"]),
        last_byte=_ts_back(o["last_byte"]),
        payload_bytes=int(o["payload_bytes"]),
    )


def _annotation_obj(a: AnnotationRecord) -> dict:
    return {
        "session_id": format_session_id(a.session_id),
        "rpc_id": format_rpc_id(a.rpc_id),
        "node": a.node,
        "key": a.key,
        "value": a.value,
        "at": _ts_obj(a.at),
    }


def _annotation_back(o: Mapping) -> AnnotationRecord:
    return AnnotationRecord(
        session_id=_parse_hex(o["session_id"], 32, "session_id"),
        rpc_id=_parse_hex(o["rpc_id"], 16, "rpc_id"),
        node=str(o["node"]),
        key=str(o["key"]),
        value=str(o["value"]),
        at=_ts_back(o["at"]),
    )


def _nav_obj(n: NavTimingRecord) -> dict:
    return {
        "session_id": format_session_id(n.session_id),
        "events": [
            {"event_name": ev.name, "start": _ts_obj(ev.start), "end": _ts_obj(ev.end)}
            for ev in n.events
        ],
        "onload_ms": n.onload_ms,
    }


def _nav_back(o: Mapping) -> NavTimingRecord:
    return NavTimingRecord(
        session_id=_parse_hex(o["session_id"], 32, "session_id"),
        events=tuple(
            NavEvent(str(ev["event_name"]), _ts_back(ev["start"]), _ts_back(ev["end"]))
            for ev in o["events"]
        ),
        onload_ms=int(o["onload_ms"]),
    )


def _tcp_obj(s: TcpSnapshot) -> dict:
    return {
        "session_id": format_session_id(s.session_id),
        "connection_id": s.connection_id,
        "at": _ts_obj(s.at),
        "srtt_us": s.srtt_us,
        "rttvar_us": s.rttvar_us,
        "rto_us": s.rto_us,
        "retrans_segments": s.retrans_segments,
        "reordering_events": s.reordering_events,
        "cwnd_segments": s.cwnd_segments,
        "send_window_bytes": s.send_window_bytes,
        "recv_window_bytes": s.recv_window_bytes,
    }


def _tcp_back(o: Mapping) -> TcpSnapshot:
    return TcpSnapshot(
        session_id=_parse_hex(o["session_id"], 32, "session_id"),
        connection_id=str(o["connection_id"]),
        at=_ts_back(o["at"]),
        srtt_us=int(o["srtt_us"]),
        rttvar_us=int(o["rttvar_us"]),
        rto_us=int(o["rto_us"]),
        retrans_segments=int(o["retrans_segments"]),
        reordering_events=int(o["reordering_events"]),
        cwnd_segments=int(o["cwnd_segments"]),
        send_window_bytes=int(o["send_window_bytes"]),
        recv_window_bytes=int(o["recv_window_bytes"]),
    )


def _syslog_obj(m: SyslogMessage) -> dict:
    return {
        "device": m.device,
        "at": _ts_obj(m.at),
        "severity": m.severity,
        "raw": m.raw,
        "template_id": m.template_id,
        "attrs": [[k, v] for k, v in m.attrs],
    }


def _syslog_back(o: Mapping) -> SyslogMessage:
    return SyslogMessage(
        device=str(o["device"]),
        at=_ts_back(o["at"]),
        severity=int(o["severity"]),
        raw=str(o["raw"]),
        template_id=None if o["template_id"] is None else str(o["template_id"]),
        attrs=tuple((str(k), str(v)) for k, v in o["attrs"]),
    )


def _template_obj(t: Template) -> dict:
    return {
        "template_id": t.template_id,
        "pattern": t.pattern,
        "layer": t.layer.value,
        "equivalence_class": t.equivalence_class,
    }


def _template_back(o: Mapping) -> Template:
    return Template(
        template_id=str(o["template_id"]),
        pattern=str(o["pattern"]),
        layer=TemplateLayer(o["layer"]),
        equivalence_class=str(o["equivalence_class"]),
    )


def _rule_obj(r: CausalRule) -> dict:
    return {
        "cause": r.cause,
        "effect": r.effect,
        "scope": r.scope.value,
        "score": r.score,
        "support": r.support,
    }


def _rule_back(o: Mapping) -> CausalRule:
    return CausalRule(
        cause=str(o["cause"]),
        effect=str(o["effect"]),
        scope=RuleScope(o["scope"]),
        score=float(o["score"]),
        support=int(o["support"]),
    )


def _problem_graph_obj(g: ProblemGraph) -> dict:
    return {
        "nodes": [
            {"device": n.device, "template_id": n.template_id,
             "first_at": _ts_obj(n.first_at), "last_at": _ts_obj(n.last_at)}
            for n in g.nodes
        ],
        "edges": [
            {"cause_device": e.cause_device, "cause_template": e.cause_template,
             "effect_device": e.effect_device, "effect_template": e.effect_template,
             "rule": _rule_obj(e.rule)}
            for e in g.edges
        ],
        "window": [_ts_obj(g.window[0]), _ts_obj(g.window[1])],
    }


def _problem_graph_back(o: Mapping) -> ProblemGraph:
    return ProblemGraph(
        nodes=tuple(
            ProblemNode(str(n["device"]), str(n["template_id"]),
                        _ts_back(n["first_at"]), _ts_back(n["last_at"]))
            for n in o["nodes"]
        ),
        edges=tuple(
            ProblemEdge(str(e["cause_device"]), str(e["cause_template"]),
                        str(e["effect_device"]), str(e["effect_template"]),
                        _rule_back(e["rule"]))
            for e in o["edges"]
        ),
        window=(_ts_back(o["window"][0]), _ts_back(o["window"][1])),
    )


def _topology_obj(t: TopologySnapshot) -> dict:
    return {
        "devices": [{"device_id": d.device_id, "tier": d.tier.value} for d in t.devices],
        "links": [[a, b] for a, b in t.links],
        "host_attachments": [[h, tor] for h, tor in t.host_attachments],
        "taken_at": _ts_obj(t.taken_at),
    }


def _topology_back(o: Mapping) -> TopologySnapshot:
    return TopologySnapshot(
        devices=tuple(Device(str(d["device_id"]), DeviceTier(d["tier"])) for d in o["devices"]),
        links=tuple((str(a), str(b)) for a, b in o["links"]),
        host_attachments=tuple((str(h), str(tor)) for h, tor in o["host_attachments"]),
        taken_at=_ts_back(o["taken_at"]),
    )


def _trace_obj(t: SessionTrace) -> dict:
    return {
        "session_id": format_session_id(t.session_id),
        "edges": [_edge_obj(e) for e in t.edges],
        "annotations": [_annotation_obj(a) for a in t.annotations],
        "navtiming": None if t.navtiming is None else _nav_obj(t.navtiming),
        "tcp_snapshots": [_tcp_obj(s) for s in t.tcp_snapshots],
        "assembled_complete": t.assembled_complete,
    }


def _trace_back(o: Mapping) -> SessionTrace:
    return SessionTrace(
        session_id=_parse_hex(o["session_id"], 32, "session_id"),
        edges=tuple(_edge_back(e) for e in o["edges"]),
        annotations=tuple(_annotation_back(a) for a in o["annotations"]),
        navtiming=None if o["navtiming"] is None else _nav_back(o["navtiming"]),
        tcp_snapshots=tuple(_tcp_back(s) for s in o["tcp_snapshots"]),
        assembled_complete=bool(o["assembled_complete"]),
    )


def _report_obj(r: DiagnosisReport) -> dict:
    d = r.detected
    return {
        "session_id": format_session_id(r.session_id),
        "detected": {"flag": d.flag, "latency_ms": d.latency_ms, "key": list(d.key),
                     "q1": d.q1, "q3": d.q3, "n": d.n, "k": d.k, "method": d.method},
        "critical_path": [
            {"kind": s.kind, "node": s.node,
             "rpc_id": None if s.rpc_id is None else format_rpc_id(s.rpc_id),
             "duration_us": s.duration_us}
            for s in r.critical_path
        ],
        "total_latency_us": r.total_latency_us,
        "path_partial": r.path_partial,
        "contributions": [
            {"service": c.service, "latency_us": c.latency_us, "fraction": c.fraction}
            for c in r.contributions
        ],
        "content_findings": [
            {"event": c.event, "duration_us": c.duration_us, "fraction": c.fraction,
             "significant": c.significant}
            for c in r.content_findings
        ],
        "network_findings": [
            {"rpc_id": format_rpc_id(f.rpc_id), "src_node": f.src_node,
             "dst_node": f.dst_node, "queueing_delay_us": f.queueing_delay_us,
             "flagged": f.flagged, "possible_graphs": list(f.possible_graphs)}
            for f in r.network_findings
        ],
        "internet_findings": None if r.internet_findings is None else {
            "bottleneck": r.internet_findings.bottleneck,
            "rtt_variation": r.internet_findings.rtt_variation,
            "download_stack_bound_us": r.internet_findings.download_stack_bound_us,
            "cache_hit": r.internet_findings.cache_hit,
        },
        "pathologies": list(r.pathologies),
        "e2e_source": r.e2e_source,
        "e2e_us": r.e2e_us,
        "session_start_us": r.session_start_us,
        "revision": r.revision,
        "notes": list(r.notes),
    }


def _report_back(o: Mapping) -> DiagnosisReport:
    d = o["detected"]
    return DiagnosisReport(
        session_id=_parse_hex(o["session_id"], 32, "session_id"),
        detected=DetectionFinding(
            flag=str(d["flag"]), latency_ms=float(d["latency_ms"]),
            key=tuple(str(x) for x in d["key"]),
            q1=None if d["q1"] is None else float(d["q1"]),
            q3=None if d["q3"] is None else float(d["q3"]),
            n=int(d["n"]), k=float(d["k"]), method=str(d["method"])),
        critical_path=tuple(
            PathSegment(str(s["kind"]), str(s["node"]),
                        None if s["rpc_id"] is None else _parse_hex(s["rpc_id"], 16, "rpc_id"),
                        int(s["duration_us"]))
            for s in o["critical_path"]
        ),
        total_latency_us=int(o["total_latency_us"]),
        path_partial=bool(o["path_partial"]),
        contributions=tuple(
            Contribution(str(c["service"]), int(c["latency_us"]), float(c["fraction"]))
            for c in o["contributions"]
        ),
        content_findings=tuple(
            ContentFinding(str(c["event"]), int(c["duration_us"]), float(c["fraction"]),
                           bool(c["significant"]))
            for c in o["content_findings"]
        ),
        network_findings=tuple(
            NetworkFinding(_parse_hex(f["rpc_id"], 16, "rpc_id"), str(f["src_node"]),
                           str(f["dst_node"]),
                           None if f["queueing_delay_us"] is None else int(f["queueing_delay_us"]),
                           bool(f["flagged"]), tuple(str(g) for g in f["possible_graphs"]))
            for f in o["network_findings"]
        ),
        internet_findings=None if o["internet_findings"] is None else InternetFinding(
            bottleneck=str(o["internet_findings"]["bottleneck"]),
            rtt_variation=float(o["internet_findings"]["rtt_variation"]),
            download_stack_bound_us=int(o["internet_findings"]["download_stack_bound_us"]),
            cache_hit=bool(o["internet_findings"]["cache_hit"]),
        ),
        pathologies=tuple(str(p) for p in o["pathologies"]),
        e2e_source=str(o["e2e_source"]),
        e2e_us=int(o["e2e_us"]),
        session_start_us=int(o["session_start_us"]),
        revision=int(o["revision"]),
        notes=tuple(str(n) for n in o["notes"]),
    )


_ENCODERS = {
    RpcEdgeRecord: ("edge", _edge_obj),
    AnnotationRecord: ("annotation", _annotation_obj),
    NavTimingRecord: ("navtiming", _nav_obj),
    TcpSnapshot: ("tcp", _tcp_obj),
    SyslogMessage: ("syslog", _syslog_obj),
    Template: ("template", _template_obj),
    CausalRule: ("rule", _rule_obj),
    ProblemGraph: ("problem_graph", _problem_graph_obj),
    TopologySnapshot: ("topology", _topology_obj),
    SessionTrace: ("trace", _trace_obj),
    DiagnosisReport: ("report", _report_obj),
}

_DECODERS = {
    "edge": _edge_back,
    "annotation": _annotation_back,
    "navtiming": _nav_back,
    "tcp": _tcp_back,
    "syslog": _syslog_back,
    "template": _template_back,
    "rule": _rule_back,
    "problem_graph": _problem_graph_back,
    "topology": _topology_back,
    "trace": _trace_back,
    "report": _report_back,
}


def encode_record(record) -> str:
    """Encode any core record as one canonical JSON line."""
    try:
        kind, fn = _ENCODERS[type(record)]
    except KeyError:
        raise TypeError(f"no JSONL encoding for {type(record).__name__}")
    obj = {"v": FORMAT_VERSION, "kind": kind}
    obj.update(fn(record))
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def decode_record(line: str):
    """Decode one JSON line back into its record type.

    Raises ``DecodeError`` for anything that is not a well-formed record;
    callers that ingest untrusted streams quarantine on that.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DecodeError("record line is not a JSON object")
    kind = obj.get("kind")
    if kind not in _DECODERS:
        raise DecodeError(f"unknown record kind {kind!r}")
    if obj.get("v") != FORMAT_VERSION:
        raise DecodeError(f"unsupported format version {obj.get('v')!r}")
    try:
        return _DECODERS[kind](obj)
    except DecodeError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed {kind} record: {exc}") from exc


def decode_stream(lines: Iterable[str]):
    for line in lines:
        line = line.strip()
        if line:
            yield decode_record(line)
