"""Per-session diagnosis pipeline: detection, critical path and service
contributions, network and Internet findings, and root-cause evaluation,
over an assembled event store.

Queueing-delay estimation is a cross-session sweep (per node pair, in send
order) so every RPC is judged against the recent history of its pair, not
just its own session. Sessions overlapping a volume-biased window for a
service they touch are deferred instead of analyzed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .causality import ExecutionGraph, build_execution_graph, infer_session_causality
from .critpath import (
    CriticalPath,
    critical_path,
    service_contributions,
    service_of,
)
from .detect import BaselineStore, DetectorConfig, content_diagnosis
from .inetdiag import RpcLatencyDecomposition, classify_bottleneck, rtt_variation
from .inetdiag import download_stack_bound
from .ingest import EventStore, service_and_datacenter
from .model import (
    Contribution,
    DetectionFinding,
    DiagnosisReport,
    Direction,
    InternetFinding,
    NetworkFinding,
    PathSegment,
    ProblemGraph,
    SessionTrace,
    TopologySnapshot,
)
from .netdiag import (
    DelayHistory,
    NetDiagConfig,
    UnattachedHostError,
    candidate_devices,
    correlate_rpc_problems,
    detect_rpc_problem,
    observe_and_estimate,
)
from .rootcause import BUILTIN_PROCEDURES, BoundRuleSet, RuleSet, bind_symptoms


@dataclass(frozen=True)
class PipelineConfig:
    detector: DetectorConfig = DetectorConfig()
    netdiag: NetDiagConfig = NetDiagConfig()
    top_k: int = 5
    assume_complete: bool = False  # skip the readiness delay (batch replay)


def trace_attributes(trace: SessionTrace) -> dict[str, str]:
    attrs: dict[str, str] = {}
    for a in sorted(trace.annotations, key=lambda a: (a.at.micros, a.key)):
        attrs[a.key] = a.value
    return attrs


def root_edges(trace: SessionTrace):
    """(request_in, response_out) of the session root, either may be None."""
    e_in = None
    r_out = None
    for e in trace.edges:
        if e.parent_rpc_id == 0:
            if e.direction is Direction.REQUEST_IN and e_in is None:
                e_in = e
            elif e.direction is Direction.RESPONSE_OUT and r_out is None:
                r_out = e
    return e_in, r_out


def baseline_key(trace: SessionTrace) -> tuple[str, str, str]:
    """Confounder tuple: page attribute, user cluster, hour-of-day bucket."""
    attrs = trace_attributes(trace)
    e_in, _ = root_edges(trace)
    start = e_in.first_byte.micros if e_in is not None else (
        min((e.first_byte.micros for e in trace.edges), default=0))
    hour = (start // 3_600_000_000) % 24
    return (attrs.get("page", "unknown"), attrs.get("ucluster", "unknown"),
            f"h{hour:02d}")


def session_start_us(trace: SessionTrace) -> int:
    e_in, _ = root_edges(trace)
    if e_in is not None:
        return e_in.first_byte.micros
    return min((e.first_byte.micros for e in trace.edges), default=0)


def e2e_latency(trace: SessionTrace) -> tuple[int, str]:
    """End-to-end latency and its source: page load time when user-side
    instrumentation exists, the root round trip otherwise."""
    if trace.navtiming is not None and trace.navtiming.onload_ms > 0:
        return trace.navtiming.onload_ms * 1000, "navtiming"
    e_in, r_out = root_edges(trace)
    if e_in is not None and r_out is not None:
        return r_out.first_byte.micros - e_in.last_byte.micros, "root_round_trip"
    return 0, "unknown"


def _clip_union(intervals: list[tuple[int, int]], lo: int, hi: int) -> int:
    clipped = sorted((max(a, lo), min(b, hi)) for a, b in intervals)
    total = 0
    cursor = lo
    for a, b in clipped:
        if b <= cursor:
            continue
        total += b - max(a, cursor)
        cursor = max(cursor, b)
    return total


def backend_split(trace: SessionTrace, graph: ExecutionGraph) -> Optional[tuple[int, int]]:
    """(cdn_us, backend_us): the root service's window split into its own
    computation and the union of child RPC in-flight intervals."""
    root = graph.root_entry()
    if root is None or root.request_in is None or not root.response_out:
        return None
    e_in = root.request_in
    r_out = min(root.response_out, key=lambda r: r.first_byte.micros)
    lo, hi = e_in.last_byte.micros, r_out.first_byte.micros
    if hi <= lo:
        return None
    intervals = []
    for child in graph.children_of(root.rpc_id):
        if child.request_out is None or not child.response_in:
            continue
        first_resp = min(child.response_in, key=lambda r: r.first_byte.micros)
        intervals.append((child.request_out.last_byte.micros,
                          first_resp.first_byte.micros))
    backend = _clip_union(intervals, lo, hi)
    return (hi - lo) - backend, backend


def estimate_queue_delays(traces: Sequence[SessionTrace],
                          config: NetDiagConfig) -> dict[int, int]:
    """Per-RPC queueing delay estimates, sweeping each node pair's request
    edges in send order across all sessions."""
    per_pair: dict[tuple[str, str], list] = {}
    for trace in traces:
        outs: dict[int, object] = {}
        ins: dict[int, object] = {}
        for e in trace.edges:
            if e.direction is Direction.REQUEST_OUT and e.rpc_id not in outs:
                outs[e.rpc_id] = e
            elif e.direction is Direction.REQUEST_IN and e.rpc_id not in ins:
                ins[e.rpc_id] = e
        for rpc_id, e_out in outs.items():
            e_in = ins.get(rpc_id)
            if e_in is not None:
                per_pair.setdefault((e_out.node, e_in.node), []).append((e_out, e_in))

    estimates: dict[int, int] = {}
    history = DelayHistory(window_us=config.delta_window_us)
    for pair in sorted(per_pair):
        for e_out, e_in in sorted(per_pair[pair],
                                  key=lambda p: p[0].first_byte.micros):
            estimate = observe_and_estimate(e_out, e_in, history)
            if estimate is not None:
                estimates[e_out.rpc_id] = estimate
    return estimates


@dataclass
class SessionInputs:
    trace: SessionTrace
    graph: ExecutionGraph
    path: CriticalPath
    e2e_us: int
    e2e_source: str


def graph_summary(graph: ProblemGraph,
                  topology: Optional[TopologySnapshot]) -> str:
    roots = graph.root_nodes()
    root = roots[0] if roots else graph.nodes[0]
    tier = "unknown"
    if topology is not None:
        try:
            tier = topology.tier_of(root.device).value
        except KeyError:
            pass
    return (f"win={graph.window[0].micros};root={root.device};tier={tier};"
            f"template={root.template_id};nodes={len(graph.nodes)}")


def diagnose_sessions(store: EventStore,
                      ruleset: Optional[RuleSet] = None,
                      *,
                      config: PipelineConfig = PipelineConfig(),
                      topology: Optional[TopologySnapshot] = None,
                      problem_graphs: Sequence[ProblemGraph] = (),
                      now_ms: Optional[int] = None,
                      baselines: Optional[BaselineStore] = None) -> list[DiagnosisReport]:
    """Diagnose every ready session in the store and return one report per
    session, deterministically ordered by session id."""
    session_ids = [
        sid for sid in store.session_ids()
        if config.assume_complete or store.session_ready(sid, now_ms)
    ]
    traces = {sid: store.assemble_session(sid) for sid in session_ids}

    biased = store.biased_windows()
    window_us = store.config.bias_window_ms * 1000

    def deferred_for(trace: SessionTrace) -> bool:
        if not biased:
            return False
        for e in trace.edges:
            service, dc = service_and_datacenter(e.node)
            flagged = biased.get((service, dc))
            if flagged and (e.first_byte.micros // window_us) in flagged:
                return True
        return False

    bound: Optional[BoundRuleSet] = None
    if ruleset is not None:
        bound = bind_symptoms(ruleset, BUILTIN_PROCEDURES)

    if baselines is None:
        baselines = BaselineStore(config.detector)
    deferred: dict[int, bool] = {}
    for sid in session_ids:
        trace = traces[sid]
        deferred[sid] = deferred_for(trace)
        if deferred[sid]:
            continue
        latency_us, _ = e2e_latency(trace)
        if latency_us > 0:
            baselines.update_baseline(baseline_key(trace), latency_us / 1000.0)

    queue_estimates = estimate_queue_delays(
        [traces[sid] for sid in session_ids if not deferred[sid]], config.netdiag)

    reports = []
    for sid in session_ids:
        trace = traces[sid]
        start_us = session_start_us(trace)
        revision = store.session_revision(sid)
        if deferred[sid]:
            reports.append(DiagnosisReport(
                session_id=sid,
                detected=DetectionFinding(flag="deferred", latency_ms=0.0,
                                          key=baseline_key(trace), q1=None,
                                          q3=None, n=0,
                                          k=config.detector.iqr_k),
                critical_path=(), total_latency_us=0, path_partial=True,
                contributions=(), content_findings=(), network_findings=(),
                internet_findings=None, pathologies=(),
                e2e_source="unknown", e2e_us=0, session_start_us=start_us,
                revision=revision,
                notes=("analysis deferred: volume-biased window",)))
            continue
        reports.append(_diagnose_one(
            trace, sid, start_us, revision, baselines, queue_estimates,
            config, topology, problem_graphs, bound))
    return reports


def _diagnose_one(trace, sid, start_us, revision, baselines, queue_estimates,
                  config, topology, problem_graphs, bound) -> DiagnosisReport:
    notes: list[str] = []
    e2e_us, e2e_source = e2e_latency(trace)

    graph = infer_session_causality(build_execution_graph(trace))
    path = critical_path(graph)
    segments = tuple(PathSegment(kind=s.kind, node=s.node, rpc_id=s.rpc_id,
                                 duration_us=s.duration_us)
                     for s in path.segments)

    contributions: tuple[Contribution, ...] = ()
    if e2e_us > 0:
        contributions = tuple(
            Contribution(c.service, c.latency_us, c.fraction)
            for c in service_contributions(graph, path, e2e_us=e2e_us,
                                           top_k=config.top_k))
    else:
        notes.append("no end-to-end latency; contributions skipped")

    key = baseline_key(trace)
    latency_ms = e2e_us / 1000.0
    detection = baselines.detect_session(key, latency_ms)
    base = detection.baseline
    detected = DetectionFinding(
        flag=detection.flag, latency_ms=latency_ms, key=key,
        q1=base.q1 if base else None, q3=base.q3 if base else None,
        n=base.n if base else 0, k=config.detector.iqr_k)

    content = ()
    if trace.navtiming is not None and trace.navtiming.onload_ms > 0:
        content = tuple(content_diagnosis(
            trace.navtiming, threshold=config.detector.content_threshold))

    network = _network_findings(trace, graph, path, e2e_us, queue_estimates,
                                config, topology, problem_graphs)

    internet, signals_extra = _internet_findings(trace, graph, notes)

    pathologies: tuple[str, ...] = ()
    if bound is not None:
        signals = {
            "detection_flag": detected.flag,
            "flagged_rpc_count": sum(1 for f in network if f.flagged),
            "significant_content_events": sum(1 for c in content if c.significant),
        }
        signals.update(signals_extra)
        pathologies = bound.evaluate_against(signals).matched

    if not trace.assembled_complete:
        notes.append("trace incomplete at assembly")

    return DiagnosisReport(
        session_id=sid, detected=detected, critical_path=segments,
        total_latency_us=path.total_latency_us,
        path_partial=path.partial, contributions=contributions,
        content_findings=content, network_findings=network,
        internet_findings=internet, pathologies=pathologies,
        e2e_source=e2e_source, e2e_us=e2e_us, session_start_us=start_us,
        revision=revision, notes=tuple(notes))


def _network_findings(trace, graph, path, e2e_us, queue_estimates, config,
                      topology, problem_graphs) -> tuple[NetworkFinding, ...]:
    findings = []
    for rpc_id in sorted(set(path.rpc_sequence)):
        entry = graph.rpcs.get(rpc_id)
        if entry is None or entry.request_out is None or entry.request_in is None:
            continue
        delay = queue_estimates.get(rpc_id)
        flagged = False
        if delay is not None and e2e_us > 0:
            flagged = detect_rpc_problem(delay, e2e_us,
                                         threshold=config.netdiag.rpc_threshold)
        summaries: tuple[str, ...] = ()
        if flagged and topology is not None and problem_graphs:
            src_host = entry.request_out.node.split("/")[-1]
            dst_host = entry.request_in.node.split("/")[-1]
            try:
                candidates = candidate_devices(topology, src_host, dst_host)
            except (UnattachedHostError, ValueError):
                candidates = frozenset()
            if candidates:
                first_resp = min((r.first_byte.micros for r in entry.response_in),
                                 default=entry.request_out.last_byte.micros)
                interval = (entry.request_out.first_byte.micros,
                            max(first_resp, entry.request_out.last_byte.micros))
                possible = correlate_rpc_problems(candidates, problem_graphs,
                                                  interval)
                summaries = tuple(graph_summary(p.graph, topology)
                                  for p in possible)
        findings.append(NetworkFinding(
            rpc_id=rpc_id, src_node=entry.request_out.node,
            dst_node=entry.request_in.node, queueing_delay_us=delay,
            flagged=flagged, possible_graphs=summaries))
    return tuple(findings)


def _internet_findings(trace, graph, notes) -> tuple[Optional[InternetFinding], dict]:
    signals: dict = {}
    if trace.navtiming is None or not trace.tcp_snapshots:
        return None, signals
    request_events = [ev for ev in trace.navtiming.events if ev.name == "request"]
    if not request_events:
        notes.append("navtiming lacks a request event; internet diagnosis skipped")
        return None, signals
    delta_fb = request_events[0].end.micros - request_events[0].start.micros

    split = backend_split(trace, graph)
    if split is None:
        notes.append("root window unavailable; internet diagnosis skipped")
        return None, signals
    delta_cdn, delta_be = split

    e_in, _ = root_edges(trace)
    snapshot = min(trace.tcp_snapshots,
                   key=lambda s: abs(s.at.micros - e_in.first_byte.micros))
    attrs = trace_attributes(trace)
    cache_hit = attrs.get("cache", "hit") != "miss"

    decomp = RpcLatencyDecomposition(
        delta_fb_us=max(0, delta_fb), delta_cdn_us=max(0, delta_cdn),
        delta_be_us=max(0, delta_be), delta_rto_us=snapshot.rto_us,
        cache_hit=cache_hit)
    variation = rtt_variation(snapshot) if snapshot.srtt_us > 0 else 0.0
    finding = InternetFinding(
        bottleneck=classify_bottleneck(decomp, snapshot),
        rtt_variation=variation,
        download_stack_bound_us=download_stack_bound(decomp),
        cache_hit=cache_hit)
    signals.update({
        "rtt_variation": variation,
        "retrans_segments": snapshot.retrans_segments,
        "cache_hit": cache_hit,
        "bottleneck": finding.bottleneck,
    })
    return finding, signals
