"""Deterministic serving-stack simulator with injected ground truth.

Scenarios describe a fat-tree datacenter, a service call tree (with serial,
parallel, and first-k-of-n redundant fanout), and injections: a slowed
service, per-link queueing windows, syslog cascades, transport loss and
duplication, Internet-path conditions, and user-host stack delay.

Generation drives the real tracing library call by call (create,
sendtonext, recvfromnext, sendtoprev, annotate, close) on a virtual
timeline: every node has a constant clock offset, every edge gets an
explicit (de)serialization window, and one-way delays compose propagation,
injected queueing, and jitter. Nothing bypasses the API, so the emitted
stream is exactly what instrumented services would produce, and the
recorded ground truth (concurrency flags, redundancy winners, true
contributions, per-RPC paths and queue delays, bottleneck classes, dropped
records) is computed from the scheduler's own variables, never by reading
the emitted records back.

Identical seeds give byte-identical outputs.
"""

from __future__ import annotations

import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path
from random import Random
from typing import Optional

from .api import CollectingEmitter, Tracer, decode_header
from .model import (
    CausalRule,
    Device,
    DeviceTier,
    Direction,
    NavEvent,
    NavTimingRecord,
    RpcEdgeRecord,
    RuleScope,
    SyslogMessage,
    TcpSnapshot,
    Template,
    TemplateLayer,
    Timestamp,
    TopologySnapshot,
    encode_record,
    format_rpc_id,
    format_session_id,
)
from .netdiag import SYSLOG_CLOCK, format_syslog_line


class ScenarioError(ValueError):
    """Invalid scenario parameters."""


class _ForbiddenClock:
    """The simulator passes every timestamp explicitly; a clock read means a
    determinism bug."""

    def now(self) -> int:
        raise RuntimeError("simulator must not read wall time")


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TopologyParams:
    pods: int = 2
    tors_per_pod: int = 2
    aggs_per_pod: int = 2
    hosts_per_tor: int = 4
    cores: int = 2

    def validate(self) -> None:
        for name in ("pods", "tors_per_pod", "aggs_per_pod", "hosts_per_tor", "cores"):
            if getattr(self, name) <= 0:
                raise ScenarioError(f"topology.{name} must be positive")


def build_topology(params: TopologyParams,
                   taken_at_us: int = 1_700_000_000_000_000) -> TopologySnapshot:
    devices: list[Device] = []
    links: list[tuple[str, str]] = []
    attachments: list[tuple[str, str]] = []
    cores = [f"core-{i}" for i in range(params.cores)]
    devices.extend(Device(c, DeviceTier.CORE) for c in cores)
    host_idx = 0
    for pod in range(params.pods):
        aggs = [f"agg-{pod}-{i}" for i in range(params.aggs_per_pod)]
        devices.extend(Device(a, DeviceTier.AGG) for a in aggs)
        for agg in aggs:
            links.extend(tuple(sorted((agg, core))) for core in cores)
        for t in range(params.tors_per_pod):
            tor = f"tor-{pod}-{t}"
            devices.append(Device(tor, DeviceTier.TOR))
            for agg in aggs:
                links.append(tuple(sorted((tor, agg))))
            for _ in range(params.hosts_per_tor):
                attachments.append((f"h{host_idx:03d}", tor))
                host_idx += 1
    return TopologySnapshot(
        devices=tuple(sorted(devices, key=lambda d: d.device_id)),
        links=tuple(sorted(set(links))),
        host_attachments=tuple(attachments),
        taken_at=Timestamp(taken_at_us, "topology"),
    )


# ---------------------------------------------------------------------------
# Blueprints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Fanout:
    """One dispatch group: serial or parallel children, or first-k-of-n
    redundant replicas of a single child. ``when='cache_miss'`` makes the
    group conditional on the session's cache draw."""

    pattern: str
    children: tuple["BlueprintNode", ...]
    k: int = 0
    replicas: int = 0
    when: Optional[str] = None

    def validate(self) -> None:
        if self.pattern not in ("serial", "parallel", "redundant"):
            raise ScenarioError(f"unknown fanout pattern {self.pattern!r}")
        if not self.children:
            raise ScenarioError("fanout needs at least one child")
        if self.pattern == "redundant":
            if len(self.children) != 1:
                raise ScenarioError("redundant fanout replicates exactly one child")
            if not (0 < self.k <= self.replicas):
                raise ScenarioError("redundant fanout needs 0 < k <= replicas")
        if self.when not in (None, "cache_miss"):
            raise ScenarioError(f"unknown fanout condition {self.when!r}")


@dataclass(frozen=True)
class BlueprintNode:
    service: str
    think_ms: float = 2.0
    sigma: float = 0.4
    request_bytes: int = 512
    response_bytes: int = 4096
    fanouts: tuple[Fanout, ...] = ()

    def validate(self) -> None:
        if not self.service:
            raise ScenarioError("blueprint node needs a service name")
        if self.think_ms <= 0 or self.sigma < 0:
            raise ScenarioError(f"bad think parameters for {self.service}")
        for f in self.fanouts:
            f.validate()
            for c in f.children:
                c.validate()

    def walk(self):
        yield self
        for f in self.fanouts:
            for c in f.children:
                yield from c.walk()


def _bp(service, think, fanouts=(), **kw):
    return BlueprintNode(service=service, think_ms=think, fanouts=tuple(fanouts), **kw)


_shard = _bp("shard", 1.2, response_bytes=2048)
_content = _bp("content", 2.5, [Fanout("redundant", (_shard,), k=2, replicas=4)])
_profile = _bp("profile", 1.5)
_web = _bp("web", 2.0, [Fanout("parallel", (_content, _profile))])
_db = _bp("db", 1.0)
_ads = _bp("ads", 1.5, [Fanout("serial", (_db,))])

BLUEPRINTS: dict[str, BlueprintNode] = {
    "three_tier": _bp("cdn", 1.0, [Fanout("serial", (
        _bp("web", 3.0, [Fanout("serial", (_bp("db", 2.0),))]),))]),
    "mixed": _bp("cdn", 1.0, [Fanout("serial", (_web,)), Fanout("serial", (_ads,))],
                 response_bytes=16384),
    "sherpa": _bp("router", 0.3, [Fanout("serial", (
        _bp("su", 1.0, request_bytes=2048, response_bytes=24576),))],
        request_bytes=2048, response_bytes=24576),
    "video": _bp("cdn", 2.0, [Fanout("serial", (
        _bp("origin", 6.0, response_bytes=65536),), when="cache_miss")],
        response_bytes=65536),
}


def blueprint_from_dict(obj) -> BlueprintNode:
    if isinstance(obj, str):
        if obj not in BLUEPRINTS:
            raise ScenarioError(f"unknown blueprint {obj!r}; "
                                f"known: {sorted(BLUEPRINTS)}")
        return BLUEPRINTS[obj]
    if not isinstance(obj, dict):
        raise ScenarioError("blueprint must be a name or a table")
    fanouts = []
    for f in obj.get("fanout", []):
        fanouts.append(Fanout(
            pattern=str(f.get("pattern", "serial")),
            children=tuple(blueprint_from_dict(c) for c in f.get("children", [])),
            k=int(f.get("k", 0)),
            replicas=int(f.get("replicas", 0)),
            when=f.get("when"),
        ))
    return BlueprintNode(
        service=str(obj.get("service", "")),
        think_ms=float(obj.get("think_ms", 2.0)),
        sigma=float(obj.get("sigma", 0.4)),
        request_bytes=int(obj.get("request_bytes", 512)),
        response_bytes=int(obj.get("response_bytes", 4096)),
        fanouts=tuple(fanouts),
    )


# ---------------------------------------------------------------------------
# Injections and scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlowServiceInjection:
    service: str
    extra_ms: float
    fraction: float = 1.0


@dataclass(frozen=True)
class LinkQueueInjection:
    a: str
    b: str
    delay_ms: float
    start_s: float
    end_s: float

    @property
    def link(self) -> tuple[str, str]:
        return tuple(sorted((self.a, self.b)))


@dataclass(frozen=True)
class SyslogPlan:
    cascades: int = 0
    flaps: int = 0
    tier_weights: tuple[tuple[str, float], ...] = (("ToR", 0.93), ("AGG", 0.05),
                                                   ("CORE", 0.02))
    noise_rate_per_device_s: float = 0.05
    duration_s: float = 600.0
    spacing_s: float = 3.0


@dataclass(frozen=True)
class InternetPlan:
    enabled: bool = True
    internet_fraction: float = 0.95
    cache_miss_rate: float = 0.02
    stack_delay_fraction: float = 0.3
    stack_delay_min_ms: float = 20.0
    stack_delay_max_ms: float = 120.0


@dataclass(frozen=True)
class TransportPlan:
    loss_rate: float = 0.0
    dup_rate: float = 0.0
    shuffle: bool = True


@dataclass(frozen=True)
class Scenario:
    seed: int = 1
    sessions: int = 100
    dc: str = "dc1"
    topology: TopologyParams = TopologyParams()
    blueprint: BlueprintNode = BLUEPRINTS["three_tier"]
    slow_service: Optional[SlowServiceInjection] = None
    link_queues: tuple[LinkQueueInjection, ...] = ()
    syslog: SyslogPlan = SyslogPlan()
    internet: InternetPlan = InternetPlan()
    transport: TransportPlan = TransportPlan()
    instances: tuple[tuple[str, int], ...] = ()
    session_gap_ms: float = 50.0
    epoch_us: int = 1_700_000_000_000_000
    bytes_per_us: int = 1250
    ser_jitter_us: int = 2
    hop_delay_us: int = 15
    jitter_us: int = 10
    clock_offset_max_us: int = 50_000

    def validate(self) -> None:
        if self.sessions < 0:
            raise ScenarioError("sessions must be non-negative")
        self.topology.validate()
        self.blueprint.validate()
        for rate in (self.transport.loss_rate, self.transport.dup_rate):
            if not (0.0 <= rate < 1.0):
                raise ScenarioError("transport rates must be in [0, 1)")
        if self.bytes_per_us <= 0 or self.hop_delay_us < 0 or self.jitter_us < 0:
            raise ScenarioError("bad timing parameters")
        for lq in self.link_queues:
            if lq.delay_ms < 0 or lq.end_s <= lq.start_s:
                raise ScenarioError("bad link queue injection window")


def scenario_from_dict(d: dict) -> Scenario:
    known = {"seed", "sessions", "dc", "topology", "blueprint", "injections",
             "instances", "session_gap_ms", "epoch_us", "bytes_per_us",
             "ser_jitter_us", "hop_delay_us", "jitter_us", "clock_offset_max_us"}
    unknown = set(d) - known
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    inj = d.get("injections", {})
    known_inj = {"slow_service", "link_queue", "syslog", "internet", "transport"}
    unknown_inj = set(inj) - known_inj
    if unknown_inj:
        raise ScenarioError(f"unknown injection keys: {sorted(unknown_inj)}")

    slow = None
    if "slow_service" in inj:
        s = inj["slow_service"]
        slow = SlowServiceInjection(service=str(s["service"]),
                                    extra_ms=float(s["extra_ms"]),
                                    fraction=float(s.get("fraction", 1.0)))
    link_queues = tuple(
        LinkQueueInjection(a=str(q["a"]), b=str(q["b"]),
                           delay_ms=float(q["delay_ms"]),
                           start_s=float(q["start_s"]), end_s=float(q["end_s"]))
        for q in inj.get("link_queue", []))
    syslog = SyslogPlan(**{k: (tuple(sorted(v.items())) if k == "tier_weights" else v)
                           for k, v in inj.get("syslog", {}).items()})
    internet = InternetPlan(**inj.get("internet", {}))
    transport = TransportPlan(**inj.get("transport", {}))

    scenario = Scenario(
        seed=int(d.get("seed", 1)),
        sessions=int(d.get("sessions", 100)),
        dc=str(d.get("dc", "dc1")),
        topology=TopologyParams(**d.get("topology", {})),
        blueprint=blueprint_from_dict(d.get("blueprint", "three_tier")),
        slow_service=slow,
        link_queues=link_queues,
        syslog=syslog,
        internet=internet,
        transport=transport,
        instances=tuple(sorted((str(k), int(v))
                               for k, v in d.get("instances", {}).items())),
        session_gap_ms=float(d.get("session_gap_ms", 50.0)),
        epoch_us=int(d.get("epoch_us", 1_700_000_000_000_000)),
        bytes_per_us=int(d.get("bytes_per_us", 1250)),
        ser_jitter_us=int(d.get("ser_jitter_us", 2)),
        hop_delay_us=int(d.get("hop_delay_us", 15)),
        jitter_us=int(d.get("jitter_us", 10)),
        clock_offset_max_us=int(d.get("clock_offset_max_us", 50_000)),
    )
    scenario.validate()
    return scenario


def load_scenario(path: Path) -> Scenario:
    with open(path, "rb") as fh:
        return scenario_from_dict(tomllib.load(fh))


# ---------------------------------------------------------------------------
# Syslog corpus
# ---------------------------------------------------------------------------

def _tpl(tid, pattern, layer, eq):
    return Template(template_id=tid, pattern=pattern, layer=layer,
                    equivalence_class=eq)


BUILTIN_TEMPLATES: tuple[Template, ...] = (
    _tpl("MODULE_FAIL", r"Module (?P<module>\d+) failure detected",
         TemplateLayer.HARDWARE, "hardware_fault"),
    _tpl("LINK_DOWN", r"Interface (?P<interface>\S+) link down",
         TemplateLayer.PHY, "link_state"),
    _tpl("LINK_UP", r"Interface (?P<interface>\S+) link up",
         TemplateLayer.PHY, "link_state"),
    _tpl("STP_CHANGE", r"STP topology change on vlan (?P<vlan>\d+)",
         TemplateLayer.L2, "l2_control"),
    _tpl("IF_STATUS_CHANGE",
         r"Interface (?P<interface>\S+) status changed to (?P<state>\S+)",
         TemplateLayer.L2, "link_state"),
    _tpl("BGP_RESET", r"BGP peer (?P<peer>\S+) session reset",
         TemplateLayer.ROUTING, "routing_flap"),
    _tpl("OSPF_ADJ_CHANGE",
         r"OSPF adjacency with (?P<neighbor>\S+) changed to (?P<state>\S+)",
         TemplateLayer.ROUTING, "routing_flap"),
    _tpl("CRC_ERRORS", r"(?P<count>\d+) CRC errors on port (?P<port>\S+)",
         TemplateLayer.PHY, "line_errors"),
    _tpl("FAN_WARN", r"Fan tray (?P<tray>\d+) speed warning",
         TemplateLayer.HARDWARE, "environment"),
    _tpl("MEM_WARN", r"Memory utilization above (?P<pct>\d+) percent",
         TemplateLayer.HARDWARE, "environment"),
    _tpl("ACL_DENY", r"ACL denied flow from (?P<src>\S+)",
         TemplateLayer.L3, "filtering"),
    _tpl("SNMP_POLL", r"SNMP poll from (?P<collector>\S+) completed",
         TemplateLayer.L4, "management"),
    _tpl("CFG_SAVE", r"Configuration saved by (?P<user>\S+)",
         TemplateLayer.HARDWARE, "management"),
)

#: rules behind the cascade and flap patterns the generator injects
BUILTIN_RULES: tuple[CausalRule, ...] = (
    CausalRule("MODULE_FAIL", "LINK_DOWN", RuleScope.INTRA_DEVICE, 12.0, 500),
    CausalRule("LINK_DOWN", "STP_CHANGE", RuleScope.INTRA_DEVICE, 10.0, 400),
    CausalRule("LINK_DOWN", "IF_STATUS_CHANGE", RuleScope.INTER_DEVICE, 9.0, 350),
    CausalRule("LINK_DOWN", "LINK_UP", RuleScope.INTRA_DEVICE, 8.0, 600),
)

_NOISE = (
    (6, "SNMP_POLL", "SNMP poll from {c} completed", {"c": ("mon-a", "mon-b")}),
    (6, "CFG_SAVE", "Configuration saved by {c}", {"c": ("ops", "netbot")}),
    (6, "ACL_DENY", "ACL denied flow from {c}", {"c": ("10.0.8.4", "10.2.3.9")}),
)


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

@dataclass
class SessionTruth:
    session_id: str
    start_us: int
    e2e_us: int
    onload_ms: int
    page: str
    ucluster: str
    cache_hit: bool
    affected_slow: bool
    contributions: dict[str, int]
    top_contributor: str
    sibling_flags: list  # [node, response_rpc, request_rpc, causal]
    reply_contributors: list  # [node, parent_rpc, winners, losers]
    rpc_paths: dict  # rpc -> {src_host, dst_host, devices, queue_us}
    rpc_ids: list[str]
    bottleneck: str
    stack_delay_us: int
    rtt_used_us: int
    retrans_extra_us: int
    dropped_records: list[str] = field(default_factory=list)
    expected_complete: bool = True


@dataclass
class CascadeTruth:
    kind: str           # cascade | flap
    tier: str
    device: str
    peer: str
    start_us: int


@dataclass
class GroundTruth:
    sessions: dict[str, SessionTruth] = field(default_factory=dict)
    cascades: list[CascadeTruth] = field(default_factory=list)

    def to_obj(self) -> dict:
        return {
            "sessions": {sid: vars(t) for sid, t in sorted(self.sessions.items())},
            "cascades": [vars(c) for c in self.cascades],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        obj = json.loads(text)
        gt = cls()
        for sid, t in obj["sessions"].items():
            gt.sessions[sid] = SessionTruth(**t)
        gt.cascades = [CascadeTruth(**c) for c in obj["cascades"]]
        return gt


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass
class SimOutput:
    scenario: Scenario
    topology: TopologySnapshot
    templates: tuple[Template, ...]
    rules: tuple[CausalRule, ...]
    event_lines: list[str]
    clean_event_lines: list[str]
    syslog_lines: list[str]
    ground_truth: GroundTruth

    def write(self, out_dir: Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "events.jsonl").write_text(
            "".join(line + "\n" for line in self.event_lines))
        (out / "syslog.log").write_text(
            "".join(line + "\n" for line in self.syslog_lines))
        (out / "topology.jsonl").write_text(encode_record(self.topology) + "\n")
        (out / "templates.jsonl").write_text(
            "".join(encode_record(t) + "\n" for t in self.templates))
        (out / "rules.jsonl").write_text(
            "".join(encode_record(r) + "\n" for r in self.rules))
        (out / "ground_truth.json").write_text(self.ground_truth.to_json() + "\n")


@dataclass
class _RpcResult:
    rpc_id: int
    send_first: int
    send_last: int
    header: str
    payload: int
    contrib: dict[str, int]


@dataclass
class _SessionState:
    page: str = "home"
    ucluster: str = "isp0"
    cache_hit: bool = True
    affected_slow: bool = False
    server_extra_us: int = 0
    session_id: int = 0
    sibling_flags: list = field(default_factory=list)
    reply_contributors: list = field(default_factory=list)
    rpc_paths: dict = field(default_factory=dict)
    rpc_ids: list = field(default_factory=list)
    root_rpc: int = 0


class _Generator:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.sc = scenario
        self.rng = Random(scenario.seed)
        self.topology = build_topology(scenario.topology, scenario.epoch_us)
        self.emitter = CollectingEmitter()
        self.tracer = Tracer(self.emitter, clock=_ForbiddenClock(), rng=self.rng)
        self._place_services()
        self.offsets = {
            node: self.rng.randrange(0, 2 * scenario.clock_offset_max_us + 1)
                  - scenario.clock_offset_max_us
            for node in sorted(self.node_host)
        }
        self.queue_windows = [
            (lq.link, int(lq.start_s * 1_000_000) + scenario.epoch_us,
             int(lq.end_s * 1_000_000) + scenario.epoch_us,
             int(lq.delay_ms * 1000))
            for lq in scenario.link_queues
        ]

    # -- placement ---------------------------------------------------------

    def _place_services(self) -> None:
        sc = self.sc
        hosts_by_tor: dict[str, list[str]] = {}
        for host, tor in self.topology.host_attachments:
            hosts_by_tor.setdefault(tor, []).append(host)
        interleaved: list[str] = []
        tors = sorted(hosts_by_tor)
        depth = max(len(v) for v in hosts_by_tor.values())
        for i in range(depth):
            for tor in tors:
                if i < len(hosts_by_tor[tor]):
                    interleaved.append(hosts_by_tor[tor][i])

        required: dict[str, int] = {}
        overrides = dict(self.sc.instances)
        for node in sc.blueprint.walk():
            required.setdefault(node.service, 1)
            for f in node.fanouts:
                if f.pattern == "redundant":
                    child = f.children[0].service
                    required[child] = max(required.get(child, 1), f.replicas)
        for svc in required:
            required[svc] = max(required[svc], overrides.get(svc, 1))

        if sum(required.values()) > len(interleaved):
            raise ScenarioError("not enough hosts for the requested instances")
        self.instances: dict[str, list[str]] = {}
        self.node_host: dict[str, str] = {}
        cursor = 0
        for svc in sorted(required):
            nodes = []
            for _ in range(required[svc]):
                host = interleaved[cursor]
                cursor += 1
                node = f"{sc.dc}/{svc}/{host}"
                nodes.append(node)
                self.node_host[node] = host
            self.instances[svc] = nodes

    # -- timing helpers ------------------------------------------------------

    def _think_us(self, blue: BlueprintNode, st: _SessionState,
                  extra_us: int = 0) -> int:
        mu = math.log(max(blue.think_ms, 0.001) * 1000.0)
        value = int(self.rng.lognormvariate(mu, blue.sigma)) + 1
        return value + extra_us

    def _ser_us(self, payload_bytes: int) -> int:
        jitter = 0
        if self.sc.ser_jitter_us > 0:
            jitter = int(self.rng.expovariate(1.0 / self.sc.ser_jitter_us))
        return max(1, payload_bytes // self.sc.bytes_per_us + jitter)

    def _pick_path(self, src_host: str, dst_host: str) -> list[str]:
        tor_s = self.topology.attached_tor(src_host)
        tor_d = self.topology.attached_tor(dst_host)
        if tor_s == tor_d:
            return [tor_s]
        pod_s, pod_d = tor_s.split("-")[1], tor_d.split("-")[1]
        if pod_s == pod_d:
            agg = f"agg-{pod_s}-{self.rng.randrange(self.sc.topology.aggs_per_pod)}"
            return [tor_s, agg, tor_d]
        agg_s = f"agg-{pod_s}-{self.rng.randrange(self.sc.topology.aggs_per_pod)}"
        agg_d = f"agg-{pod_d}-{self.rng.randrange(self.sc.topology.aggs_per_pod)}"
        core = f"core-{self.rng.randrange(self.sc.topology.cores)}"
        return [tor_s, agg_s, core, agg_d, tor_d]

    def _queue_on(self, path: list[str], at_us: int) -> int:
        hops = list(zip(path, path[1:]))
        total = 0
        for link, start, end, delay in self.queue_windows:
            if start <= at_us < end:
                for a, b in hops:
                    if tuple(sorted((a, b))) == link:
                        total += delay
        return total

    def _one_way(self, src_node: str, dst_node: str,
                 at_us: int) -> tuple[int, list[str], int]:
        src_host = self.node_host[src_node]
        dst_host = self.node_host[dst_node]
        if src_host == dst_host:
            return 3 + self.rng.randrange(6), [], 0
        path = self._pick_path(src_host, dst_host)
        queue = self._queue_on(path, at_us)
        jitter = 0
        if self.sc.jitter_us > 0:
            jitter = int(self.rng.expovariate(1.0 / self.sc.jitter_us))
        owd = (len(path) + 1) * self.sc.hop_delay_us + queue + jitter
        return owd, path, queue

    # -- session execution ---------------------------------------------------

    def _exec_rpc(self, blue: BlueprintNode, node: str, caller: str,
                  in_header: str, arr_first: int, arr_last: int,
                  st: _SessionState, depth: int) -> _RpcResult:
        sc = self.sc
        off = self.offsets[node]
        ctx = self.tracer.create(
            in_header, node, peer=caller, payload_bytes=blue.request_bytes,
            first_byte_at=arr_first + off, last_byte_at=arr_last + off)
        rpc_id = ctx.header.rpc_id
        if depth == 0:
            st.session_id = ctx.header.session_id
            st.root_rpc = rpc_id
        st.rpc_ids.append(format_rpc_id(rpc_id))

        slow_extra = 0
        if st.affected_slow and sc.slow_service is not None \
                and blue.service == sc.slow_service.service:
            slow_extra = int(sc.slow_service.extra_ms * 1000)

        cursor = arr_last
        contrib: dict[str, int] = {}

        def add(svc: str, us: int) -> None:
            contrib[svc] = contrib.get(svc, 0) + us

        def merge(sub: dict[str, int]) -> None:
            for svc, us in sub.items():
                add(svc, us)

        children_log: list[tuple[int, int, int]] = []  # (rpc, dispatch_first, arrival_first)
        pending_losers: list[dict] = []

        def dispatch(child_blue: BlueprintNode, child_node: str,
                     dispatch_first: int) -> dict:
            ser = self._ser_us(child_blue.request_bytes)
            header = self.tracer.sendtonext(
                ctx, peer=child_node, payload_bytes=child_blue.request_bytes,
                first_byte_at=dispatch_first + off,
                last_byte_at=dispatch_first + ser + off)
            child_rpc = decode_header(header).rpc_id
            owd, path, queue = self._one_way(node, child_node, dispatch_first + ser)
            st.rpc_paths[format_rpc_id(child_rpc)] = {
                "src_host": self.node_host[node],
                "dst_host": self.node_host[child_node],
                "devices": path,
                "queue_us": queue,
            }
            result = self._exec_rpc(child_blue, child_node, node, header,
                                    dispatch_first + owd,
                                    dispatch_first + ser + owd, st, depth + 1)
            owd_back, _, _ = self._one_way(child_node, node, result.send_first)
            return {
                "blue": child_blue, "node": child_node, "rpc": child_rpc,
                "dispatch_first": dispatch_first, "result": result,
                "arr_first": result.send_first + owd_back,
                "arr_last": result.send_last + owd_back,
            }

        def receive(ent: dict, arr_first: int, arr_last: int) -> None:
            self.tracer.recvfromnext(
                ctx, ent["result"].header, peer=ent["node"],
                payload_bytes=ent["result"].payload,
                first_byte_at=arr_first + off, last_byte_at=arr_last + off)
            children_log.append((ent["rpc"], ent["dispatch_first"], arr_first))

        first_think = True
        for group in blue.fanouts:
            if group.when == "cache_miss" and st.cache_hit:
                continue
            extra = slow_extra if first_think else 0
            extra += st.server_extra_us if (depth == 0 and first_think) else 0
            first_think = False
            if group.pattern == "serial":
                for i, child_blue in enumerate(group.children):
                    think = self._think_us(blue, st, extra if i == 0 else 0)
                    add(blue.service, think)
                    dispatch_first = cursor + think
                    child_node = self.rng.choice(self.instances[child_blue.service])
                    ent = dispatch(child_blue, child_node, dispatch_first)
                    receive(ent, ent["arr_first"], ent["arr_last"])
                    merge(ent["result"].contrib)
                    cursor = ent["arr_last"]
            else:
                think = self._think_us(blue, st, extra)
                add(blue.service, think)
                dispatch_first = cursor + think
                if group.pattern == "redundant":
                    members = [group.children[0]] * group.replicas
                    nodes = self.rng.sample(self.instances[group.children[0].service],
                                            group.replicas)
                else:
                    members = list(group.children)
                    nodes = [self.rng.choice(self.instances[c.service])
                             for c in members]
                entries = [dispatch(cb, cn, dispatch_first)
                           for cb, cn in zip(members, nodes)]
                if group.pattern == "parallel":
                    for ent in sorted(entries, key=lambda e: e["arr_first"]):
                        receive(ent, ent["arr_first"], ent["arr_last"])
                    blocker = max(entries, key=lambda e: (e["arr_last"], e["rpc"]))
                    merge(blocker["result"].contrib)
                    cursor = blocker["arr_last"]
                else:
                    order = sorted(entries, key=lambda e: (e["arr_last"], e["rpc"]))
                    winners, losers = order[:group.k], order[group.k:]
                    for ent in sorted(winners, key=lambda e: e["arr_first"]):
                        receive(ent, ent["arr_first"], ent["arr_last"])
                    blocker = winners[-1]
                    merge(blocker["result"].contrib)
                    cursor = blocker["arr_last"]
                    pending_losers.extend(losers)

        think_post = self._think_us(blue, st, slow_extra if first_think else 0)
        if depth == 0 and first_think:
            think_post += st.server_extra_us
        add(blue.service, think_post)
        reply_first = cursor + think_post
        reply_last = reply_first + self._ser_us(blue.response_bytes)

        if depth == 0:
            at = arr_last + off
            self.tracer.annotate(ctx, "page", st.page, at=at)
            self.tracer.annotate(ctx, "ucluster", st.ucluster, at=at)
            self.tracer.annotate(ctx, "cache", "hit" if st.cache_hit else "miss", at=at)

        reply_header = self.tracer.sendtoprev(
            ctx, peer=caller, payload_bytes=blue.response_bytes,
            first_byte_at=reply_first + off, last_byte_at=reply_last + off)

        for ent in pending_losers:
            late_first = reply_last + 1000 + self.rng.randrange(5000)
            late_last = late_first + self._ser_us(ent["result"].payload)
            receive(ent, late_first, late_last)
        self.tracer.close(ctx)

        # Ground-truth causality flags from the scheduler's own instants.
        for r_rpc, _, r_arr in children_log:
            for e_rpc, e_dispatch, _ in children_log:
                if r_rpc == e_rpc:
                    continue
                st.sibling_flags.append([node, format_rpc_id(r_rpc),
                                         format_rpc_id(e_rpc),
                                         r_arr < e_dispatch])
        if children_log:
            winners = sorted(format_rpc_id(r) for r, _, arr in children_log
                             if arr < reply_last)
            losers = sorted(format_rpc_id(r) for r, _, arr in children_log
                            if arr >= reply_last)
            st.reply_contributors.append([node, format_rpc_id(rpc_id),
                                          winners, losers])

        return _RpcResult(rpc_id=rpc_id, send_first=reply_first,
                          send_last=reply_last, header=reply_header,
                          payload=blue.response_bytes, contrib=contrib)

    # -- per-session wrapper ---------------------------------------------------

    def run_session(self, index: int) -> tuple[list, SessionTruth]:
        sc = self.sc
        rng = self.rng
        t0 = sc.epoch_us + int(index * sc.session_gap_ms * 1000) + rng.randrange(1000)
        st = _SessionState(
            page=rng.choice(("home", "article", "watch")),
            ucluster=rng.choice(("isp0", "isp1", "isp2")),
            cache_hit=rng.random() >= sc.internet.cache_miss_rate,
            affected_slow=(sc.slow_service is not None
                           and rng.random() < sc.slow_service.fraction),
        )
        internet_class = rng.random() < sc.internet.internet_fraction
        if not internet_class:
            st.server_extra_us = 40_000 + rng.randrange(80_000)

        root_node = rng.choice(self.instances[sc.blueprint.service])
        req_ser = self._ser_us(sc.blueprint.request_bytes)
        result = self._exec_rpc(sc.blueprint, root_node, "user", "",
                                t0, t0 + req_ser, st, 0)
        e2e_us = result.send_first - (t0 + req_ser)

        # Internet-path composition; the RTO stays a valid conservative bound.
        if internet_class:
            srtt = 60_000 + rng.randrange(90_000)
            ratio = 0.25 + rng.random() * 0.35
            retrans = rng.choice((0, 0, 1, 2, 3))
        else:
            srtt = 5_000 + rng.randrange(10_000)
            ratio = 0.05 + rng.random() * 0.10
            retrans = 0
        rto = max(200_000, 4 * srtt)
        retrans_extra = 0
        if retrans:
            retrans_extra = int((0.05 + rng.random() * 0.25) * rto)
        stack_delay = 500 + rng.randrange(2500)
        if rng.random() < sc.internet.stack_delay_fraction:
            lo = int(sc.internet.stack_delay_min_ms * 1000)
            hi = int(sc.internet.stack_delay_max_ms * 1000)
            stack_delay = lo + rng.randrange(max(1, hi - lo))

        delta_fb = e2e_us + srtt + retrans_extra + stack_delay

        dns = 3_000 + rng.randrange(22_000)
        u0 = t0 - dns - srtt - 1_000
        if u0 < 0:
            u0 = 0
        cursor = u0
        page_extra = {"home": 0, "article": 30_000, "watch": 60_000}[st.page]
        durations = [
            ("dns", dns),
            ("connect", srtt),
            ("request", delta_fb),
            ("response", sc.blueprint.response_bytes // 100 + rng.randrange(8_000)),
            ("dom_processing", 60_000 + page_extra + rng.randrange(140_000)),
            ("render", 20_000 + rng.randrange(60_000)),
        ]
        events = []
        for name, dur in durations:
            events.append(NavEvent(name, Timestamp(cursor, "user"),
                                   Timestamp(cursor + dur, "user")))
            cursor += dur
        onload_ms = math.ceil((cursor - u0) / 1000)
        nav = NavTimingRecord(session_id=st.session_id, events=tuple(events),
                              onload_ms=onload_ms)

        snapshot = TcpSnapshot(
            session_id=st.session_id,
            connection_id=f"conn-{format_session_id(st.session_id)[:8]}",
            at=Timestamp(t0 + self.offsets[root_node], root_node),
            srtt_us=srtt, rttvar_us=int(ratio * srtt), rto_us=rto,
            retrans_segments=retrans, reordering_events=rng.randrange(3),
            cwnd_segments=10 + rng.randrange(60),
            send_window_bytes=65_535 + rng.randrange(4) * 65_535,
            recv_window_bytes=65_535 + rng.randrange(4) * 65_535,
        )

        records = self.emitter.drain() + [nav, snapshot]
        top = max(result.contrib.items(), key=lambda kv: (kv[1], kv[0]))[0]
        truth = SessionTruth(
            session_id=format_session_id(st.session_id),
            start_us=t0,
            e2e_us=e2e_us,
            onload_ms=onload_ms,
            page=st.page,
            ucluster=st.ucluster,
            cache_hit=st.cache_hit,
            affected_slow=st.affected_slow,
            contributions=dict(sorted(result.contrib.items())),
            top_contributor=top,
            sibling_flags=st.sibling_flags,
            reply_contributors=st.reply_contributors,
            rpc_paths=st.rpc_paths,
            rpc_ids=sorted(st.rpc_ids),
            bottleneck="internet" if internet_class else "cdn_backend",
            stack_delay_us=stack_delay,
            rtt_used_us=srtt,
            retrans_extra_us=retrans_extra,
        )
        return records, truth

    # -- syslog generation -------------------------------------------------------

    def generate_syslog(self, truth: GroundTruth) -> list[SyslogMessage]:
        sc = self.sc
        rng = self.rng
        messages: list[SyslogMessage] = []
        start = sc.epoch_us
        end = start + int(sc.syslog.duration_s * 1_000_000)

        devices_by_tier: dict[str, list[str]] = {"ToR": [], "AGG": [], "CORE": []}
        for d in self.topology.devices:
            if d.tier is DeviceTier.TOR:
                devices_by_tier["ToR"].append(d.device_id)
            elif d.tier is DeviceTier.AGG:
                devices_by_tier["AGG"].append(d.device_id)
            elif d.tier is DeviceTier.CORE:
                devices_by_tier["CORE"].append(d.device_id)
        adjacency = self.topology.neighbors()

        def emit(device: str, at_us: int, severity: int, text: str) -> None:
            messages.append(SyslogMessage(device=device,
                                          at=Timestamp(at_us, SYSLOG_CLOCK),
                                          severity=severity, raw=text))

        # Background noise, plus the occasional unmatched line.
        rate = sc.syslog.noise_rate_per_device_s
        if rate > 0:
            for device in sorted(adjacency):
                t = start
                while True:
                    t += int(rng.expovariate(rate) * 1_000_000) + 1
                    if t >= end:
                        break
                    if rng.random() < 0.05:
                        emit(device, t, 6, f"heartbeat ok seq {rng.randrange(10**6)}")
                        continue
                    sev, _, fmt, choices = _NOISE[rng.randrange(len(_NOISE))]
                    value = choices["c"][rng.randrange(len(choices["c"]))]
                    emit(device, t, sev, fmt.format(c=value))

        # Injected problems: collision-free placement so each instance mines
        # to its own component.
        busy_until: dict[str, int] = {}
        horizon = 130 * 1_000_000  # two mining windows
        weights = dict(sc.syslog.tier_weights)
        cursor_us = start + 1_000_000
        spacing = int(sc.syslog.spacing_s * 1_000_000)

        def pick_device(tier: str, at: int) -> Optional[str]:
            pool = [d for d in devices_by_tier[tier]
                    if busy_until.get(d, 0) <= at]
            return pool[rng.randrange(len(pool))] if pool else None

        def mark_busy(devs: list[str], at: int) -> None:
            for d in devs:
                busy_until[d] = at + horizon

        kinds = ["cascade"] * sc.syslog.cascades + ["flap"] * sc.syslog.flaps
        for kind in kinds:
            t = cursor_us
            cursor_us += spacing
            if kind == "flap":
                tier = "ToR"
            else:
                r = rng.random()
                acc = 0.0
                tier = "ToR"
                for name in ("ToR", "AGG", "CORE"):
                    acc += weights.get(name, 0.0)
                    if r < acc:
                        tier = name
                        break
            device = pick_device(tier, t)
            while device is None:
                t += spacing  # tier congested; slide until a device frees
                cursor_us = t + spacing
                device = pick_device(tier, t)
            if kind == "flap":
                iface = f"eth1/{1 + rng.randrange(48)}"
                at = t
                for _ in range(4 + rng.randrange(4)):
                    emit(device, at, 3, f"Interface {iface} link down")
                    at += 200_000 + rng.randrange(800_000)
                    emit(device, at, 5, f"Interface {iface} link up")
                    at += 500_000 + rng.randrange(1_500_000)
                mark_busy([device], at)
                truth.cascades.append(CascadeTruth(
                    kind="flap", tier=tier, device=device, peer="", start_us=t))
            else:
                peers = sorted(adjacency.get(device, frozenset()))
                peer = peers[rng.randrange(len(peers))]
                iface = f"eth2/{1 + rng.randrange(32)}"
                emit(device, t, 2, f"Module {1 + rng.randrange(8)} failure detected")
                t1 = t + 40_000 + rng.randrange(160_000)
                emit(device, t1, 3, f"Interface {iface} link down")
                t2 = t1 + 50_000 + rng.randrange(150_000)
                emit(device, t2, 4, f"STP topology change on vlan {100 + rng.randrange(50)}")
                t3 = t1 + 80_000 + rng.randrange(200_000)
                emit(peer, t3, 4, f"Interface {iface} status changed to down")
                mark_busy([device, peer], t3)
                truth.cascades.append(CascadeTruth(
                    kind="cascade", tier=tier, device=device, peer=peer, start_us=t))

        messages.sort(key=lambda m: (m.at.micros, m.device, m.raw))
        return messages


def _expected_complete(edges: list[RpcEdgeRecord]) -> bool:
    request_out = {e.rpc_id for e in edges if e.direction is Direction.REQUEST_OUT}
    all_ids = {e.rpc_id for e in edges}
    for e in edges:
        if e.direction is Direction.RESPONSE_IN and e.rpc_id not in request_out:
            return False
        if e.parent_rpc_id != 0 and e.parent_rpc_id not in all_ids:
            return False
    return True


def _record_key(record) -> str:
    return "|".join(str(part) for part in record.dedup_key)


def generate(scenario: Scenario) -> SimOutput:
    """Run a scenario end to end: sessions through the tracing library,
    syslogs, topology, snapshots, transport effects, and ground truth."""
    gen = _Generator(scenario)
    truth = GroundTruth()
    all_records: list = []
    spans: list[tuple[int, int]] = []  # record index range per session
    order: list[str] = []

    for index in range(scenario.sessions):
        begin = len(all_records)
        records, session_truth = gen.run_session(index)
        all_records.extend(records)
        spans.append((begin, len(all_records)))
        order.append(session_truth.session_id)
        truth.sessions[session_truth.session_id] = session_truth

    rng = gen.rng
    keep_flags = [rng.random() >= scenario.transport.loss_rate
                  for _ in all_records]
    survivors = [r for r, keep in zip(all_records, keep_flags) if keep]
    for sid, (begin, end) in zip(order, spans):
        dropped = [
            _record_key(all_records[i]) for i in range(begin, end)
            if not keep_flags[i]
        ]
        truth.sessions[sid].dropped_records = dropped
        surviving_edges = [all_records[i] for i in range(begin, end)
                           if keep_flags[i] and isinstance(all_records[i], RpcEdgeRecord)]
        truth.sessions[sid].expected_complete = _expected_complete(surviving_edges)

    duplicated = list(survivors)
    for record in survivors:
        if rng.random() < scenario.transport.dup_rate:
            duplicated.append(record)
    if scenario.transport.shuffle:
        rng.shuffle(duplicated)

    syslog_messages = gen.generate_syslog(truth)

    return SimOutput(
        scenario=scenario,
        topology=gen.topology,
        templates=BUILTIN_TEMPLATES,
        rules=BUILTIN_RULES,
        event_lines=[encode_record(r) for r in duplicated],
        clean_event_lines=[encode_record(r) for r in survivors],
        syslog_lines=[format_syslog_line(m) for m in syslog_messages],
        ground_truth=truth,
    )
