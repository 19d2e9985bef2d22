"""Critical-path extraction and per-service latency contributions.

The critical path is the causal root-to-root walk through the execution
graph with the largest total latency, computed by longest-path dynamic
programming over the acyclic causal-link DAG. A walk starts at the root
RPC's request_in, descends into callees, and ends at the root's
response_out; it alternates

* service segments: ``first(outgoing) - last(incoming)`` at one node, taken
  between an outgoing edge event and its proximate causal predecessor (the
  latest-finishing incoming event that causally precedes it: the actual
  blocker), and
* network segments: the (de)serialization window of the RPC edge at the
  caller node.

Serialized sibling pairs therefore contribute both RPCs to the walk, while
parallel siblings contribute only the branch that delayed the join. When
the callee side of an RPC was never observed, the in-flight window at the
caller is used as an opaque network segment and the path is flagged
partial.

Ties between equal-latency walks break to the lexicographically smallest
rpc-id sequence so output is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .causality import ExecutionGraph, LinkKind, RpcEntry
from .model import Direction, RpcEdgeRecord


class ClockAnomalyError(ValueError):
    """A causal pair whose timestamps run backwards on one clock."""

    def __init__(self, message: str, earlier_us: int, later_us: int):
        super().__init__(f"{message}: {earlier_us} vs {later_us}")
        self.earlier_us = earlier_us
        self.later_us = later_us


class UndefinedFractionError(ValueError):
    """Contribution fractions are undefined for zero end-to-end latency."""


def service_latency(e0: RpcEdgeRecord, e1: RpcEdgeRecord) -> int:
    """Computation time between an incoming edge and a causal outgoing edge
    at the same node: ``first(e1) - last(e0)``."""
    if e0.node != e1.node:
        raise ValueError(f"edges observed at different nodes: {e0.node} vs {e1.node}")
    duration = e1.first_byte - e0.last_byte
    if duration < 0:
        raise ClockAnomalyError(f"negative service latency at {e0.node}",
                                e0.last_byte.micros, e1.first_byte.micros)
    return duration


def network_latency(edge: RpcEdgeRecord) -> int:
    """(De)serialization time of one RPC edge at the observing node."""
    return edge.last_byte - edge.first_byte


@dataclass(frozen=True)
class Segment:
    kind: str                   # service | network
    node: str
    rpc_id: int
    duration_us: int
    opaque: bool = False


@dataclass(frozen=True)
class CriticalPath:
    segments: tuple[Segment, ...]
    total_latency_us: int
    partial: bool
    rpc_sequence: tuple[int, ...]
    notes: tuple[str, ...] = ()


_EventKey = tuple


def _service_sources(graph: ExecutionGraph, entry: RpcEntry,
                     out_edge: RpcEdgeRecord,
                     sibling_in: dict[_EventKey, list[RpcEdgeRecord]],
                     redundancy_in: dict[_EventKey, list[RpcEdgeRecord]]) -> list[RpcEdgeRecord]:
    """Proximate causal predecessors of an outgoing edge event."""
    key = out_edge.dedup_key
    if out_edge.direction is Direction.REQUEST_OUT:
        candidates = list(sibling_in.get(key, ()))
        parent = graph.rpcs.get(entry.parent_rpc_id)
        if parent is not None and parent.request_in is not None \
                and parent.request_in.node == out_edge.node:
            candidates.append(parent.request_in)
    elif out_edge.direction is Direction.RESPONSE_OUT:
        candidates = list(redundancy_in.get(key, ()))
        eligible = [c for c in candidates
                    if c.node == out_edge.node
                    and c.last_byte.micros <= out_edge.first_byte.micros]
        if not eligible and entry.request_in is not None:
            candidates = [entry.request_in]
    else:
        return []
    eligible = [c for c in candidates
                if c.node == out_edge.node
                and c.last_byte.micros <= out_edge.first_byte.micros]
    if not eligible:
        return []
    latest = max(c.last_byte.micros for c in eligible)
    best = [c for c in eligible if c.last_byte.micros == latest]
    return sorted(best, key=lambda c: (c.rpc_id, c.direction.value))


def _build_transitions(graph: ExecutionGraph):
    """Forward adjacency over edge events: key -> [(dst, duration, kind, opaque)].

    Also returns the event objects by key.
    """
    events: dict[_EventKey, RpcEdgeRecord] = {}
    adjacency: dict[_EventKey, list[tuple[_EventKey, int, str, bool]]] = {}

    def register(e: RpcEdgeRecord) -> _EventKey:
        events[e.dedup_key] = e
        adjacency.setdefault(e.dedup_key, [])
        return e.dedup_key

    sibling_in: dict[_EventKey, list[RpcEdgeRecord]] = {}
    redundancy_in: dict[_EventKey, list[RpcEdgeRecord]] = {}
    for link in graph.links:
        if link.kind is LinkKind.SIBLING_SERIALIZATION:
            sibling_in.setdefault(link.dst.dedup_key, []).append(link.src)
        elif link.kind is LinkKind.REDUNDANCY_CONTRIBUTION:
            redundancy_in.setdefault(link.dst.dedup_key, []).append(link.src)

    for rpc_id in sorted(graph.rpcs):
        entry = graph.rpcs[rpc_id]
        for e in ([entry.request_out] if entry.request_out else []) + \
                 ([entry.request_in] if entry.request_in else []) + \
                 list(entry.response_out) + list(entry.response_in):
            register(e)

    for rpc_id in sorted(graph.rpcs):
        entry = graph.rpcs[rpc_id]

        # Service transitions into each outgoing edge event.
        outgoing = ([entry.request_out] if entry.request_out else []) + list(entry.response_out)
        for o in outgoing:
            for src in _service_sources(graph, entry, o, sibling_in, redundancy_in):
                dur = o.first_byte.micros - src.last_byte.micros
                adjacency[src.dedup_key].append((o.dedup_key, dur, "service", False))

        # Network transitions across the wire.
        if entry.request_out is not None:
            if entry.request_in is not None and entry.response_out:
                dur = network_latency(entry.request_out)
                adjacency[entry.request_out.dedup_key].append(
                    (entry.request_in.dedup_key, dur, "network", False))
            else:
                # Callee side unobserved: the whole in-flight window at the
                # caller, send start to receive end (no hidden gaps).
                for r in entry.response_in:
                    dur = r.last_byte.micros - entry.request_out.first_byte.micros
                    if dur >= 0:
                        adjacency[entry.request_out.dedup_key].append(
                            (r.dedup_key, dur, "network", True))
        for r_out in entry.response_out:
            for r_in in entry.response_in:
                adjacency[r_out.dedup_key].append(
                    (r_in.dedup_key, network_latency(r_in), "network", False))

    return events, adjacency


def critical_path(graph: ExecutionGraph) -> CriticalPath:
    """Longest causal root-to-root walk; flagged partial when the graph is
    incomplete and only a best-effort walk exists."""
    root = graph.root_entry()
    if root is None or root.request_in is None:
        return CriticalPath(segments=(), total_latency_us=0, partial=True,
                            rpc_sequence=(), notes=("root request_in missing",))
    events, adjacency = _build_transitions(graph)
    start = root.request_in.dedup_key
    end_keys = {r.dedup_key for r in root.response_out}
    notes: list[str] = []
    if not end_keys:
        notes.append("root response_out missing")

    # Longest path to any end; ties break to the smallest rpc-id sequence.
    memo: dict[_EventKey, Optional[tuple]] = {}

    def best_from(key: _EventKey):
        """(total, rpc_seq, transitions) for the best walk key..end, else None."""
        if key in memo:
            return memo[key]
        memo[key] = None  # cycle guard; causal DAGs should not cycle
        rpc = events[key].rpc_id
        if key in end_keys:
            memo[key] = (0, (rpc,), ())
            return memo[key]
        best = None
        for dst, dur, kind, opaque in adjacency[key]:
            sub = best_from(dst)
            if sub is None:
                continue
            total = dur + sub[0]
            cand = (total, _extend_seq(rpc, sub[1]), ((dst, dur, kind, opaque),) + sub[2])
            if best is None or _better_walk(cand, best):
                best = cand
        memo[key] = best
        return best

    result = best_from(start)
    partial = False
    if result is None:
        partial = True
        notes.append("no complete root-to-root walk; best-effort path")
        result = _best_effort(events, adjacency, start)

    total, seq, transitions = result
    segments = []
    cursor = start
    for dst, dur, kind, opaque in transitions:
        src_event, dst_event = events[cursor], events[dst]
        if kind == "service":
            segments.append(Segment("service", dst_event.node, dst_event.rpc_id, dur))
        else:
            segments.append(Segment("network", src_event.node, dst_event.rpc_id, dur,
                                    opaque=opaque))
            if opaque:
                partial = True
                notes.append(f"rpc {dst_event.rpc_id:x}: callee unobserved, "
                             "in-flight window used")
        cursor = dst
    return CriticalPath(segments=tuple(segments), total_latency_us=total,
                        partial=partial, rpc_sequence=seq, notes=tuple(notes))


def _extend_seq(rpc: int, seq: tuple[int, ...]) -> tuple[int, ...]:
    """Prepend an rpc id to a visit sequence, deduplicating repeats."""
    if seq and seq[0] == rpc:
        return seq
    return (rpc,) + seq


def _better_walk(cand: tuple, best: tuple) -> bool:
    """Maximize total latency; break ties to the smaller rpc-id sequence."""
    if cand[0] != best[0]:
        return cand[0] > best[0]
    return cand[1] < best[1]


def _best_effort(events, adjacency, start):
    """Longest walk from start to anywhere (used when no walk reaches the
    root reply)."""
    memo: dict[_EventKey, tuple] = {}

    def walk(key):
        if key in memo:
            return memo[key]
        rpc = events[key].rpc_id
        memo[key] = (0, (rpc,), ())
        best = (0, (rpc,), ())
        for dst, dur, kind, opaque in adjacency[key]:
            sub = walk(dst)
            cand = (dur + sub[0], _extend_seq(rpc, sub[1]),
                    ((dst, dur, kind, opaque),) + sub[2])
            if _better_walk(cand, best):
                best = cand
        memo[key] = best
        return best

    return walk(start)


def service_of(node: str) -> str:
    """Service component of a ``dc/service/host`` node id."""
    parts = node.split("/")
    return parts[1] if len(parts) == 3 else node


@dataclass(frozen=True)
class ServiceContribution:
    service: str
    latency_us: int
    fraction: float


def service_contributions(graph: ExecutionGraph, path: CriticalPath, *,
                          e2e_us: int,
                          top_k: Optional[int] = None) -> list[ServiceContribution]:
    """Per-service computation sums over the critical path, as fractions of
    end-to-end latency, ranked descending."""
    if e2e_us <= 0:
        raise UndefinedFractionError(f"end-to-end latency must be positive, got {e2e_us}")
    sums: dict[str, int] = {}
    for seg in path.segments:
        if seg.kind == "service":
            svc = service_of(seg.node)
            sums[svc] = sums.get(svc, 0) + seg.duration_us
    ranked = sorted(sums.items(), key=lambda kv: (-kv[1], kv[0]))
    if top_k is not None:
        ranked = ranked[:top_k]
    return [ServiceContribution(svc, latency, latency / e2e_us)
            for svc, latency in ranked]
