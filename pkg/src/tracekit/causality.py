"""Execution-graph construction and happens-before inference between
sibling RPC edges.

The tracing headers give parent-child and request-response causality for
free. Whether sibling RPCs at one node were serialized or concurrent, and
which responses a redundant fanout actually waited for, is inferred offline
from node-local timestamps:

* serialization: a response ``r_i`` causes a later sibling request ``e_j``
  iff ``first(r_i) < first(e_j)``;
* redundancy: a sibling response ``r_i`` contributed to the node's reply
  ``r0`` iff ``first(r_i) < last(r0)``; the rest are explicitly non-causal.

Both predicates compare timestamps observed at a single node, so no clock
correction is involved; that is asserted structurally, not assumed.
Ties are non-causal (strict inequality).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .model import (
    ROOT_PARENT_ID,
    ClockMismatchError,
    Direction,
    RpcEdgeRecord,
    SessionTrace,
)


class LinkKind(str, Enum):
    PARENT_CHILD = "parent_child"
    REQUEST_RESPONSE = "request_response"
    SIBLING_SERIALIZATION = "sibling_serialization"
    REDUNDANCY_CONTRIBUTION = "redundancy_contribution"


@dataclass(frozen=True)
class CausalLink:
    src: RpcEdgeRecord
    dst: RpcEdgeRecord
    kind: LinkKind


@dataclass
class RpcEntry:
    """All observations of one RPC id across both endpoints."""

    rpc_id: int
    parent_rpc_id: int
    request_out: Optional[RpcEdgeRecord] = None
    request_in: Optional[RpcEdgeRecord] = None
    response_out: tuple[RpcEdgeRecord, ...] = ()
    response_in: tuple[RpcEdgeRecord, ...] = ()

    @property
    def caller(self) -> Optional[str]:
        return self.request_out.node if self.request_out else None

    @property
    def callee(self) -> Optional[str]:
        return self.request_in.node if self.request_in else None

    @property
    def is_root(self) -> bool:
        return self.parent_rpc_id == ROOT_PARENT_ID


@dataclass
class ExecutionGraph:
    session_id: int
    rpcs: dict[int, RpcEntry] = field(default_factory=dict)
    links: set[CausalLink] = field(default_factory=set)
    non_causal: set[tuple[RpcEdgeRecord, RpcEdgeRecord]] = field(default_factory=set)
    gaps: list[str] = field(default_factory=list)

    @property
    def nodes(self) -> frozenset[str]:
        names: set[str] = set()
        for entry in self.rpcs.values():
            for e in self._edges_of(entry):
                names.add(e.node)
        return frozenset(names)

    @staticmethod
    def _edges_of(entry: RpcEntry) -> list[RpcEdgeRecord]:
        out = []
        if entry.request_out:
            out.append(entry.request_out)
        if entry.request_in:
            out.append(entry.request_in)
        out.extend(entry.response_out)
        out.extend(entry.response_in)
        return out

    def root_entry(self) -> Optional[RpcEntry]:
        roots = sorted((e for e in self.rpcs.values() if e.is_root),
                       key=lambda e: e.rpc_id)
        return roots[0] if roots else None

    def children_of(self, rpc_id: int) -> list[RpcEntry]:
        return sorted((e for e in self.rpcs.values() if e.parent_rpc_id == rpc_id),
                      key=lambda e: e.rpc_id)

    def links_of(self, kind: LinkKind) -> list[CausalLink]:
        return sorted((l for l in self.links if l.kind is kind),
                      key=lambda l: (l.src.rpc_id, l.dst.rpc_id,
                                     l.src.direction.value, l.dst.direction.value))

    def has_link(self, src: RpcEdgeRecord, dst: RpcEdgeRecord, kind: LinkKind) -> bool:
        return CausalLink(src, dst, kind) in self.links

    def to_dot(self) -> str:
        """Render edge events and causal links as DOT text."""
        def ident(e: RpcEdgeRecord) -> str:
            return f"\"{e.rpc_id:x}:{e.direction.value}@{e.node}\""

        lines = ["digraph execution {", "  rankdir=LR;"]
        seen: set[str] = set()
        for rpc_id in sorted(self.rpcs):
            for e in self._edges_of(self.rpcs[rpc_id]):
                i = ident(e)
                if i not in seen:
                    seen.add(i)
                    lines.append(f"  {i} [label=\"rpc {e.rpc_id:x}\\n"
                                 f"{e.direction.value}\\n{e.node}\"];")
        for link in sorted(self.links, key=lambda l: (l.src.rpc_id, l.dst.rpc_id,
                                                      l.kind.value,
                                                      l.src.direction.value,
                                                      l.dst.direction.value)):
            lines.append(f"  {ident(link.src)} -> {ident(link.dst)} "
                         f"[label=\"{link.kind.value}\"];")
        lines.append("}")
        return "\n".join(lines)


def build_execution_graph(trace: SessionTrace) -> ExecutionGraph:
    """Index a trace into one entry per RPC and install the link kinds the
    headers give directly (parent_child, request_response). Sibling links
    are inferred separately."""
    graph = ExecutionGraph(session_id=trace.session_id)

    for edge in sorted(trace.edges, key=lambda e: (e.rpc_id, e.direction.value,
                                                   e.first_byte.micros, e.node)):
        entry = graph.rpcs.get(edge.rpc_id)
        if entry is None:
            entry = RpcEntry(rpc_id=edge.rpc_id, parent_rpc_id=edge.parent_rpc_id)
            graph.rpcs[edge.rpc_id] = entry
        if edge.direction is Direction.REQUEST_OUT:
            if entry.request_out is None:
                entry.request_out = edge
            else:
                graph.gaps.append(f"duplicate request_out for rpc {edge.rpc_id:x}")
        elif edge.direction is Direction.REQUEST_IN:
            if entry.request_in is None:
                entry.request_in = edge
            else:
                graph.gaps.append(f"duplicate request_in for rpc {edge.rpc_id:x}")
        elif edge.direction is Direction.RESPONSE_OUT:
            entry.response_out = entry.response_out + (edge,)
        else:
            entry.response_in = entry.response_in + (edge,)

    for rpc_id in sorted(graph.rpcs):
        entry = graph.rpcs[rpc_id]
        if not entry.is_root:
            parent = graph.rpcs.get(entry.parent_rpc_id)
            if parent is None:
                graph.gaps.append(f"rpc {rpc_id:x}: parent {entry.parent_rpc_id:x} missing")
            elif entry.request_out is not None:
                if parent.request_in is not None and parent.request_in.node == entry.request_out.node:
                    graph.links.add(CausalLink(parent.request_in, entry.request_out,
                                               LinkKind.PARENT_CHILD))
                else:
                    graph.gaps.append(
                        f"rpc {rpc_id:x}: no parent request_in at {entry.request_out.node}")
        if entry.request_out is not None:
            for r in entry.response_in:
                graph.links.add(CausalLink(entry.request_out, r, LinkKind.REQUEST_RESPONSE))
        if entry.request_in is not None:
            for r in entry.response_out:
                graph.links.add(CausalLink(entry.request_in, r, LinkKind.REQUEST_RESPONSE))
        if entry.response_in and entry.request_out is None:
            graph.gaps.append(f"rpc {rpc_id:x}: response_in without request_out")

    return graph


def _require_node_clock(edge: RpcEdgeRecord, node: str) -> None:
    # Structural no-cross-clock guarantee for the predicates below.
    if edge.node != node or edge.first_byte.clock_id != node:
        raise ClockMismatchError(
            f"edge {edge.describe()} is not observed on {node}'s clock")


def infer_sibling_causality(graph: ExecutionGraph, node: str) -> ExecutionGraph:
    """Add serialization links between sibling RPCs dispatched at ``node``.

    For every sibling response ``r_i`` and sibling request ``e_j`` at the
    node (same parent, ``i != j``): link ``r_i -> e_j`` iff
    ``first(r_i) < first(e_j)``. Responses whose request record was lost are
    excluded and flagged.
    """
    by_parent: dict[int, list[RpcEntry]] = {}
    for rpc_id in sorted(graph.rpcs):
        entry = graph.rpcs[rpc_id]
        if entry.request_out is not None and entry.request_out.node == node:
            by_parent.setdefault(entry.parent_rpc_id, []).append(entry)

    for parent_id in sorted(by_parent):
        siblings = by_parent[parent_id]
        if len(siblings) < 2:
            continue
        for src_entry in siblings:
            for r in src_entry.response_in:
                if r.node != node:
                    continue
                _require_node_clock(r, node)
                for dst_entry in siblings:
                    if dst_entry.rpc_id == src_entry.rpc_id:
                        continue
                    e = dst_entry.request_out
                    _require_node_clock(e, node)
                    if r.first_byte.micros < e.first_byte.micros:
                        graph.links.add(CausalLink(r, e, LinkKind.SIBLING_SERIALIZATION))

    # Responses with no matching request never join sibling inference.
    for rpc_id in sorted(graph.rpcs):
        entry = graph.rpcs[rpc_id]
        if entry.request_out is None and any(r.node == node for r in entry.response_in):
            graph.gaps.append(
                f"rpc {rpc_id:x}: response without request excluded from sibling inference")
    return graph


def infer_redundancy(graph: ExecutionGraph, node: str,
                     reply: Optional[RpcEdgeRecord]) -> ExecutionGraph:
    """Mark which sibling responses contributed to ``reply`` (the node's
    response_out to its caller): ``r_i`` contributes iff
    ``first(r_i) < last(reply)``; the others are recorded as non-causal."""
    if reply is None:
        graph.gaps.append(f"missing reply at {node}: redundancy inference skipped")
        return graph
    _require_node_clock(reply, node)
    for child in graph.children_of(reply.rpc_id):
        for r in child.response_in:
            if r.node != node:
                continue
            _require_node_clock(r, node)
            if r.first_byte.micros < reply.last_byte.micros:
                graph.links.add(CausalLink(r, reply, LinkKind.REDUNDANCY_CONTRIBUTION))
            else:
                graph.non_causal.add((r, reply))
    return graph


def infer_session_causality(graph: ExecutionGraph) -> ExecutionGraph:
    """Run sibling and redundancy inference at every dispatching node."""
    dispatch_nodes = sorted({
        entry.request_out.node
        for entry in graph.rpcs.values()
        if entry.request_out is not None
    })
    for node in dispatch_nodes:
        infer_sibling_causality(graph, node)
    for rpc_id in sorted(graph.rpcs):
        entry = graph.rpcs[rpc_id]
        if not graph.children_of(rpc_id):
            continue
        dispatch_node = next((c.request_out.node for c in graph.children_of(rpc_id)
                              if c.request_out is not None), None)
        if dispatch_node is None:
            continue
        replies = [r for r in entry.response_out if r.node == dispatch_node]
        if replies:
            for reply in sorted(replies, key=lambda r: r.first_byte.micros):
                infer_redundancy(graph, dispatch_node, reply)
        else:
            infer_redundancy(graph, dispatch_node, None)
    return graph


def acyclic_core(graph: ExecutionGraph) -> bool:
    """True iff links restricted to parent_child, request_response, and
    sibling_serialization form a DAG over edge events."""
    core = [l for l in graph.links if l.kind is not LinkKind.REDUNDANCY_CONTRIBUTION]
    adj: dict[tuple, list[tuple]] = {}
    for l in core:
        adj.setdefault(l.src.dedup_key, []).append(l.dst.dedup_key)
    state: dict[tuple, int] = {}

    def visit(v: tuple) -> bool:
        state[v] = 1
        for w in adj.get(v, ()):
            s = state.get(w, 0)
            if s == 1:
                return False
            if s == 0 and not visit(w):
                return False
        state[v] = 2
        return True

    return all(state.get(v, 0) == 2 or visit(v) for v in list(adj))
