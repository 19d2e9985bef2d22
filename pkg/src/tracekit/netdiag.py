"""Datacenter network diagnosis.

Four cooperating pieces:

* Queueing-delay estimation for RPCs from first-byte deltas observed at the
  two endpoints. The raw delta mixes constant clock offset, propagation,
  and variable queueing; subtracting the minimum delta seen for the same
  node pair inside a recent window cancels the constant components, so the
  estimate is invariant under shifting either node's clock by a constant.
  The window must be long enough for queues to dissipate inside it but
  shorter than clock-drift timescales.
* Syslog preprocessing: an anchored template corpus maps semi-structured
  device lines to template ids with attribute extraction. Corpus patterns
  must be mutually exclusive; that is validated against probe lines at load
  time and enforced again on every match.
* Causal-rule mining over template timeseries using quasi-experimental
  design: candidate pairs are screened by Pearson correlation of bucketed
  counts, then a pair ``T_i -> T_j`` is accepted when the odds of seeing
  the effect in cause-buckets clear a threshold (treated = buckets where
  both occur, untreated = cause without effect), a two-proportion z-test
  against cause-absent buckets passes, and the cause's first occurrence
  precedes the effect's in most co-occurrence buckets.
* Windowed problem-graph construction: per time window, rule-matching
  template instances are connected intra-device first and then across
  topology-adjacent devices, in timestamp order, dropping cycle-closing
  edges. Weakly-connected components of size >= 2 (plus singleton
  high-severity instances) are emitted.

Per-RPC output is deliberately labeled "possible": a problem graph on a
device the RPC could have traversed, overlapping the RPC in time, is
correlation, not established causation.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import (
    CausalRule,
    Device,
    DeviceTier,
    Direction,
    ProblemEdge,
    ProblemGraph,
    ProblemNode,
    RpcEdgeRecord,
    RuleScope,
    SyslogMessage,
    Template,
    Timestamp,
    TopologySnapshot,
)

SYSLOG_CLOCK = "datacenter"


class EmptyHistoryError(LookupError):
    """No prior deltas for the node pair: queueing delay is undefined."""


class UnattachedHostError(KeyError):
    """A host has no ToR attachment in the topology snapshot."""


class CorpusValidationError(ValueError):
    """Template corpus violates mutual exclusivity."""


class SyslogParseError(ValueError):
    """A raw syslog line does not follow the expected shape."""


# ---------------------------------------------------------------------------
# Queueing delay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetDiagConfig:
    delta_window_us: int = 60_000_000
    rpc_threshold: float = 0.05
    window_s: int = 60
    overlap_s: int = 10
    high_severity_max: int = 3


class DelayHistory:
    """Recent one-way first-byte deltas per ordered node pair, pruned to the
    configured window. Entries are keyed on the sender's clock."""

    def __init__(self, window_us: int = 60_000_000):
        if window_us <= 0:
            raise ValueError("window must be positive")
        self.window_us = window_us
        self._entries: dict[tuple[str, str], deque] = {}

    def observe(self, src: str, dst: str, at_us: int, delta_us: int) -> None:
        self._entries.setdefault((src, dst), deque()).append((at_us, delta_us))

    def window_min(self, src: str, dst: str, now_us: int) -> Optional[int]:
        entries = self._entries.get((src, dst))
        if not entries:
            return None
        while entries and entries[0][0] < now_us - self.window_us:
            entries.popleft()
        if not entries:
            return None
        return min(delta for _, delta in entries)


def queueing_delay(request_out: RpcEdgeRecord, request_in: RpcEdgeRecord,
                   history: DelayHistory) -> int:
    """Estimate the variable (queueing) component of the one-way delay of
    one request edge observed at both endpoints.

    Works on raw micros across the two clocks on purpose: the constant
    offset between them is part of every delta for the pair and cancels
    against the window minimum. Raises ``EmptyHistoryError`` when the pair
    has no prior observations in the window; callers skip the RPC.
    """
    if request_out.direction is not Direction.REQUEST_OUT \
            or request_in.direction is not Direction.REQUEST_IN:
        raise ValueError("queueing_delay needs the request edge seen at both ends")
    if request_out.rpc_id != request_in.rpc_id:
        raise ValueError("edge observations belong to different RPCs")
    src, dst = request_out.node, request_in.node
    now = request_out.first_byte.micros
    raw = request_in.first_byte.micros - request_out.first_byte.micros
    prior_min = history.window_min(src, dst, now)
    if prior_min is None:
        raise EmptyHistoryError(f"no delay history for ({src}, {dst})")
    return raw - min(prior_min, raw)


def observe_and_estimate(request_out: RpcEdgeRecord, request_in: RpcEdgeRecord,
                         history: DelayHistory) -> Optional[int]:
    """Estimate against prior history, then record this delta. Returns None
    for the first observation of a pair."""
    try:
        estimate = queueing_delay(request_out, request_in, history)
    except EmptyHistoryError:
        estimate = None
    raw = request_in.first_byte.micros - request_out.first_byte.micros
    history.observe(request_out.node, request_in.node,
                    request_out.first_byte.micros, raw)
    return estimate


def detect_rpc_problem(delay_us: int, session_e2e_us: int, *,
                       threshold: float = 0.05) -> bool:
    """An RPC has a network problem when its queueing delay is significant
    relative to the session's end-to-end latency."""
    if session_e2e_us <= 0:
        raise ValueError(f"end-to-end latency must be positive, got {session_e2e_us}")
    return delay_us / session_e2e_us >= threshold


# ---------------------------------------------------------------------------
# Candidate devices (multi-path fat-tree)
# ---------------------------------------------------------------------------

_TIER_RANK = {DeviceTier.TOR: 0, DeviceTier.AGG: 1, DeviceTier.CORE: 2}


def candidate_devices(topology: TopologySnapshot, src_host: str,
                      dst_host: str) -> frozenset[str]:
    """Devices on any shortest up-down path between the hosts' ToRs.

    Multi-path routing makes the actual path non-deterministic, so the
    candidate set is the union over all shortest valley-free paths.
    Middleboxes are not part of the routed fabric and never appear.
    """
    try:
        src_tor = topology.attached_tor(src_host)
        dst_tor = topology.attached_tor(dst_host)
    except KeyError as exc:
        raise UnattachedHostError(str(exc)) from exc
    if src_tor == dst_tor:
        return frozenset({src_tor})

    tiers = topology.tiers()
    adj = topology.neighbors()

    def up_levels(start: str) -> list[dict[str, set[str]]]:
        """levels[d] maps device -> set of predecessors at depth d."""
        levels: list[dict[str, set[str]]] = [{start: set()}]
        while True:
            frontier: dict[str, set[str]] = {}
            for dev in levels[-1]:
                for nxt in adj.get(dev, ()):
                    if nxt not in tiers or tiers[nxt] is DeviceTier.MIDDLEBOX:
                        continue
                    if _TIER_RANK[tiers[nxt]] == _TIER_RANK[tiers[dev]] + 1:
                        frontier.setdefault(nxt, set()).add(dev)
            if not frontier:
                return levels
            levels.append(frontier)

    src_levels = up_levels(src_tor)
    dst_levels = up_levels(dst_tor)

    best: Optional[tuple[int, int]] = None
    meets: list[tuple[int, int, str]] = []
    for du in range(len(src_levels)):
        for dd in range(len(dst_levels)):
            common = set(src_levels[du]) & set(dst_levels[dd])
            if not common:
                continue
            if best is None or du + dd < sum(best):
                best = (du, dd)
                meets = [(du, dd, dev) for dev in sorted(common)]
            elif du + dd == sum(best):
                meets.extend((du, dd, dev) for dev in sorted(common))
    if best is None:
        raise ValueError(f"no up-down path between {src_tor} and {dst_tor}")

    total = sum(best)
    devices: set[str] = set()

    def collect(levels: list[dict[str, set[str]]], dev: str, depth: int) -> None:
        devices.add(dev)
        if depth == 0:
            return
        for pred in levels[depth][dev]:
            collect(levels, pred, depth - 1)

    for du, dd, dev in meets:
        if du + dd != total:
            continue
        collect(src_levels, dev, du)
        collect(dst_levels, dev, dd)
    return frozenset(devices)


# ---------------------------------------------------------------------------
# Syslog templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TemplateMatch:
    template_id: str
    attrs: tuple[tuple[str, str], ...]


class TemplateCorpus:
    """Compiled template patterns with mutual-exclusivity enforcement."""

    def __init__(self, templates: Sequence[Template],
                 probe_lines: Iterable[str] = ()):
        seen = set()
        for t in templates:
            if t.template_id in seen:
                raise CorpusValidationError(f"duplicate template id {t.template_id}")
            seen.add(t.template_id)
        self.templates = tuple(templates)
        self._compiled = [(t, re.compile(t.pattern)) for t in self.templates]
        for line in probe_lines:
            self._match_all(line)

    def __len__(self) -> int:
        return len(self.templates)

    def _match_all(self, text: str) -> Optional[tuple[Template, re.Match]]:
        hits = [(t, m) for t, rx in self._compiled if (m := rx.fullmatch(text))]
        if len(hits) > 1:
            ids = ", ".join(t.template_id for t, _ in hits)
            raise CorpusValidationError(
                f"templates not mutually exclusive on {text!r}: {ids}")
        return hits[0] if hits else None

    def match(self, text: str) -> Optional[TemplateMatch]:
        hit = self._match_all(text)
        if hit is None:
            return None
        template, m = hit
        attrs = tuple(sorted((k, v) for k, v in m.groupdict().items() if v is not None))
        return TemplateMatch(template_id=template.template_id, attrs=attrs)


def match_template(message: SyslogMessage,
                   corpus: TemplateCorpus) -> Optional[TemplateMatch]:
    """Match one syslog message body against the corpus; None if unmatched."""
    return corpus.match(message.raw)


_SYSLOG_LINE = re.compile(r"<(\d{1,3})>(\S+) (\S+) (.+)")


def parse_syslog_line(line: str,
                      corpus: Optional[TemplateCorpus] = None) -> SyslogMessage:
    """Parse one ``<pri>`` prefixed syslog line (pri, ISO timestamp, device,
    text) and template-match it when a corpus is given."""
    m = _SYSLOG_LINE.fullmatch(line.strip())
    if m is None:
        raise SyslogParseError(f"unparseable syslog line: {line!r}")
    pri, stamp, device, text = m.groups()
    severity = int(pri) % 8
    try:
        micros = int(stamp)
    except ValueError:
        raise SyslogParseError(f"bad syslog timestamp: {stamp!r}")
    template_id = None
    attrs: tuple[tuple[str, str], ...] = ()
    if corpus is not None:
        hit = corpus.match(text)
        if hit is not None:
            template_id = hit.template_id
            attrs = hit.attrs
    return SyslogMessage(device=device, at=Timestamp(micros, SYSLOG_CLOCK),
                         severity=severity, raw=text, template_id=template_id,
                         attrs=attrs)


def format_syslog_line(message: SyslogMessage, facility: int = 23) -> str:
    pri = facility * 8 + message.severity
    return f"<{pri}>{message.at.micros} {message.device} {message.raw}"


# ---------------------------------------------------------------------------
# Causal-rule mining (quasi-experimental design)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MiningConfig:
    bucket_us: int = 1_000_000
    corr_threshold: float = 0.5
    odds_threshold: float = 5.0
    alpha: float = 0.01
    min_support: int = 10
    min_buckets: int = 30
    direction_fraction: float = 0.75


@dataclass
class TemplateTimeseries:
    """Per (template, device) counts per mining bucket, plus the first
    occurrence inside each bucket for direction testing."""

    bucket_us: int
    counts: dict[tuple[str, str], dict[int, int]] = field(default_factory=dict)
    first_occurrence: dict[tuple[str, str], dict[int, int]] = field(default_factory=dict)

    @property
    def bucket_range(self) -> Optional[tuple[int, int]]:
        lo, hi = None, None
        for per_bucket in self.counts.values():
            for b in per_bucket:
                lo = b if lo is None else min(lo, b)
                hi = b if hi is None else max(hi, b)
        if lo is None:
            return None
        return lo, hi


def bucketize(messages: Iterable[SyslogMessage],
              bucket_us: int = 1_000_000) -> TemplateTimeseries:
    ts = TemplateTimeseries(bucket_us=bucket_us)
    for m in messages:
        if m.template_id is None:
            continue
        key = (m.template_id, m.device)
        bucket = m.at.micros // bucket_us
        per = ts.counts.setdefault(key, {})
        per[bucket] = per.get(bucket, 0) + 1
        first = ts.first_occurrence.setdefault(key, {})
        if bucket not in first or m.at.micros < first[bucket]:
            first[bucket] = m.at.micros
    return ts


def _z_test_greater(k1: int, n1: int, k0: int, n0: int) -> float:
    """One-sided two-proportion z-test p-value for p1 > p0."""
    if n1 == 0 or n0 == 0:
        return 1.0
    p1, p0 = k1 / n1, k0 / n0
    pooled = (k1 + k0) / (n1 + n0)
    var = pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n0)
    if var <= 0.0:
        return 0.0 if p1 > p0 else 1.0
    z = (p1 - p0) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mine_causal_rules(ts: TemplateTimeseries,
                      topology: Optional[TopologySnapshot] = None,
                      config: MiningConfig = MiningConfig()) -> list[CausalRule]:
    """Discover directed causal rules between templates.

    Stage 1 screens (template, device) series pairs by Pearson correlation
    of bucketed counts; pairs are intra-device, or inter-device when the
    devices are adjacent in the topology. Stage 2 applies the treated vs
    untreated odds test, a significance test against cause-absent buckets,
    and the within-bucket precedence check that fixes the direction.
    """
    span = ts.bucket_range
    if span is None:
        return []
    lo, hi = span
    n_buckets = hi - lo + 1
    if n_buckets < config.min_buckets:
        return []

    keys = sorted(ts.counts)
    series = np.zeros((len(keys), n_buckets), dtype=np.float64)
    for i, key in enumerate(keys):
        for bucket, count in ts.counts[key].items():
            series[i, bucket - lo] = count
    present = series > 0

    # Degenerate series: never varying (all-zero or constant-on) are skipped.
    stds = series.std(axis=1)
    always_on = present.all(axis=1)

    adjacency: dict[str, frozenset[str]] = {}
    if topology is not None:
        adjacency = topology.neighbors()

    with np.errstate(invalid="ignore"):
        corr = np.corrcoef(series)

    rules: dict[tuple[str, str, RuleScope], CausalRule] = {}
    for i, (t_i, dev_i) in enumerate(keys):
        if stds[i] == 0.0 or always_on[i]:
            continue
        for j, (t_j, dev_j) in enumerate(keys):
            if i == j or stds[j] == 0.0:
                continue
            if dev_i == dev_j:
                if t_i == t_j:
                    continue
                scope = RuleScope.INTRA_DEVICE
            else:
                if dev_j not in adjacency.get(dev_i, frozenset()):
                    continue
                scope = RuleScope.INTER_DEVICE
            c = corr[i, j]
            if not np.isfinite(c) or c < config.corr_threshold:
                continue

            cause_present = present[i]
            effect_present = present[j]
            treated = int(np.count_nonzero(cause_present & effect_present))
            untreated = int(np.count_nonzero(cause_present & ~effect_present))
            if treated < config.min_support:
                continue
            odds = (treated + 0.5) / (untreated + 0.5)
            if odds < config.odds_threshold:
                continue

            n_cause = treated + untreated
            absent = int(np.count_nonzero(~cause_present))
            effect_when_absent = int(np.count_nonzero(~cause_present & effect_present))
            if _z_test_greater(treated, n_cause, effect_when_absent, absent) > config.alpha:
                continue

            first_i = ts.first_occurrence[(t_i, dev_i)]
            first_j = ts.first_occurrence[(t_j, dev_j)]
            co_buckets = [b + lo for b in np.nonzero(cause_present & effect_present)[0]]
            ordered = sum(1 for b in co_buckets if first_i[b] <= first_j[b])
            if ordered / len(co_buckets) < config.direction_fraction:
                continue

            key = (t_i, t_j, scope)
            rule = CausalRule(cause=t_i, effect=t_j, scope=scope,
                              score=float(odds), support=treated)
            prior = rules.get(key)
            if prior is None or rule.score > prior.score:
                rules[key] = rule

    return sorted(rules.values(), key=lambda r: (-r.score, r.cause, r.effect,
                                                 r.scope.value))


# ---------------------------------------------------------------------------
# Problem-graph mining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Instance:
    device: str
    template_id: str
    first_us: int
    last_us: int
    min_severity: int


def _window_instances(messages: list[SyslogMessage], start_us: int,
                      end_us: int) -> dict[tuple[str, str], _Instance]:
    grouped: dict[tuple[str, str], list[SyslogMessage]] = {}
    for m in messages:
        if m.template_id is None or not (start_us <= m.at.micros < end_us):
            continue
        grouped.setdefault((m.device, m.template_id), []).append(m)
    out = {}
    for key, msgs in grouped.items():
        out[key] = _Instance(
            device=key[0], template_id=key[1],
            first_us=min(m.at.micros for m in msgs),
            last_us=max(m.at.micros for m in msgs),
            min_severity=min(m.severity for m in msgs))
    return out


def _reaches(adj: dict, src, dst) -> bool:
    stack, seen = [src], {src}
    while stack:
        v = stack.pop()
        if v == dst:
            return True
        for w in adj.get(v, ()):
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return False


def mine_problem_graphs(messages: Iterable[SyslogMessage],
                        rules: Sequence[CausalRule],
                        topology: Optional[TopologySnapshot] = None,
                        config: NetDiagConfig = NetDiagConfig()) -> list[ProblemGraph]:
    """Build problem graphs over overlapping time windows.

    Within each window: intra-device edges first (cause first-occurrence at
    or before effect; ties allowed, same syslog batch), then inter-device
    edges between topology-adjacent devices (strict precedence). Candidate
    edges are added in timestamp order and an edge that would close a cycle
    is dropped. Components of size >= 2 are emitted, plus singleton
    instances at or below the high-severity threshold. The window overlap
    catches cascades straddling a boundary; duplicate components are folded.
    """
    messages = sorted(messages, key=lambda m: (m.at.micros, m.device, m.raw))
    matched = [m for m in messages if m.template_id is not None]
    if not matched:
        return []

    window_us = config.window_s * 1_000_000
    step_us = (config.window_s - config.overlap_s) * 1_000_000
    if step_us <= 0:
        raise ValueError("window must be longer than its overlap")

    intra = {(r.cause, r.effect): r for r in rules if r.scope is RuleScope.INTRA_DEVICE}
    inter = {(r.cause, r.effect): r for r in rules if r.scope is RuleScope.INTER_DEVICE}
    adjacency = topology.neighbors() if topology is not None else {}

    graphs: list[ProblemGraph] = []
    seen_components: set[frozenset] = set()

    # Pre-partition into the (few) overlapping windows each message falls in.
    by_window: dict[int, list[SyslogMessage]] = {}
    for m in matched:
        k_hi = m.at.micros // step_us
        k = max(0, (m.at.micros - window_us) // step_us + 1)
        while k <= k_hi:
            if k * step_us <= m.at.micros < k * step_us + window_us:
                by_window.setdefault(k, []).append(m)
            k += 1

    for k in sorted(by_window):
        start = k * step_us
        end = start + window_us
        instances = _window_instances(by_window[k], start, end)
        if instances:
            edges: list[tuple[tuple, tuple, CausalRule]] = []
            candidates: list[tuple[int, int, int, tuple, tuple, CausalRule]] = []
            for (dev, t_cause), inst_c in sorted(instances.items()):
                for (cause, effect), rule in sorted(intra.items()):
                    if t_cause != cause:
                        continue
                    inst_e = instances.get((dev, effect))
                    if inst_e is None or inst_e is inst_c:
                        continue
                    if inst_c.first_us <= inst_e.first_us:
                        candidates.append((inst_c.first_us, inst_e.first_us, 0,
                                           (dev, cause), (dev, effect), rule))
                for (cause, effect), rule in sorted(inter.items()):
                    if t_cause != cause:
                        continue
                    for peer in sorted(adjacency.get(dev, frozenset())):
                        inst_e = instances.get((peer, effect))
                        if inst_e is None:
                            continue
                        if inst_c.first_us < inst_e.first_us:
                            candidates.append((inst_c.first_us, inst_e.first_us, 1,
                                               (dev, cause), (peer, effect), rule))

            adj: dict[tuple, set[tuple]] = {}
            for _, _, _, src, dst, rule in sorted(
                    candidates, key=lambda c: (c[2], c[0], c[1], c[3], c[4])):
                if _reaches(adj, dst, src):
                    continue  # would close a cycle; dropped
                adj.setdefault(src, set()).add(dst)
                edges.append((src, dst, rule))

            # Weakly-connected components over instances that carry edges.
            parent: dict[tuple, tuple] = {k: k for k in instances}

            def find(x):
                while parent[x] != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x

            for src, dst, _ in edges:
                ra, rb = find(src), find(dst)
                if ra != rb:
                    parent[ra] = rb
            components: dict[tuple, list[tuple]] = {}
            for k in instances:
                components.setdefault(find(k), []).append(k)

            for members in components.values():
                members = sorted(members)
                if len(members) == 1:
                    inst = instances[members[0]]
                    if inst.min_severity > config.high_severity_max:
                        continue
                signature = frozenset(
                    (instances[m].device, instances[m].template_id,
                     instances[m].first_us) for m in members)
                if signature in seen_components:
                    continue
                seen_components.add(signature)
                nodes = tuple(
                    ProblemNode(device=instances[m].device,
                                template_id=instances[m].template_id,
                                first_at=Timestamp(instances[m].first_us, SYSLOG_CLOCK),
                                last_at=Timestamp(instances[m].last_us, SYSLOG_CLOCK))
                    for m in members)
                member_set = set(members)
                graph_edges = tuple(
                    ProblemEdge(cause_device=src[0], cause_template=src[1],
                                effect_device=dst[0], effect_template=dst[1],
                                rule=rule)
                    for src, dst, rule in edges
                    if src in member_set and dst in member_set)
                graphs.append(ProblemGraph(
                    nodes=nodes, edges=graph_edges,
                    window=(Timestamp(start, SYSLOG_CLOCK),
                            Timestamp(end, SYSLOG_CLOCK))))

    graphs.sort(key=lambda g: (g.window[0].micros, g.nodes[0].device,
                               g.nodes[0].template_id))
    return graphs


# ---------------------------------------------------------------------------
# RPC <-> problem-graph correlation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PossibleProblem:
    """A problem graph an RPC *may* have been exposed to (not causation)."""

    label: str
    graph: ProblemGraph
    shared_devices: frozenset[str]


def correlate_rpc_problems(candidates: frozenset[str],
                           graphs: Sequence[ProblemGraph],
                           rpc_interval_us: tuple[int, int]) -> list[PossibleProblem]:
    """Problem graphs whose devices intersect the RPC's candidate set and
    whose window overlaps the RPC interval."""
    start, end = rpc_interval_us
    out = []
    for g in graphs:
        shared = g.devices() & candidates
        if not shared:
            continue
        if g.window[1].micros < start or g.window[0].micros > end:
            continue
        out.append(PossibleProblem(label="possible", graph=g,
                                   shared_devices=frozenset(shared)))
    return out
