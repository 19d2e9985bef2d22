"""Shared builders and independent oracles used across the test modules."""

from __future__ import annotations

from tracekit.causality import ExecutionGraph, LinkKind
from tracekit.model import Direction, RpcEdgeRecord, SessionTrace, Timestamp

SID = 0x1234


def ts(micros: int, clock: str) -> Timestamp:
    return Timestamp(micros, clock)


def edge(rpc, parent, node, direction, first, last=None, *, peer="", sid=SID,
         payload=0) -> RpcEdgeRecord:
    if last is None:
        last = first
    return RpcEdgeRecord(
        session_id=sid, rpc_id=rpc, parent_rpc_id=parent, node=node, peer=peer,
        direction=direction, first_byte=ts(first, node), last_byte=ts(last, node),
        payload_bytes=payload)


def rpc_quad(rpc, parent, caller, callee, *, send, send_end=None, arrive=None,
             arrive_end=None, reply, reply_end=None, back=None, back_end=None,
             sid=SID):
    """The four observations of one RPC with zero-width or given windows."""
    send_end = send if send_end is None else send_end
    arrive = send_end if arrive is None else arrive
    arrive_end = arrive if arrive_end is None else arrive_end
    reply_end = reply if reply_end is None else reply_end
    back = reply_end if back is None else back
    back_end = back if back_end is None else back_end
    return [
        edge(rpc, parent, caller, Direction.REQUEST_OUT, send, send_end, sid=sid),
        edge(rpc, parent, callee, Direction.REQUEST_IN, arrive, arrive_end, sid=sid),
        edge(rpc, parent, callee, Direction.RESPONSE_OUT, reply, reply_end, sid=sid),
        edge(rpc, parent, caller, Direction.RESPONSE_IN, back, back_end, sid=sid),
    ]


def serialized_toy_trace() -> SessionTrace:
    """Root at A; A calls B (round trip 30) then C (40) serialized; A compute
    10 + 5 + 5. Expected critical path total: 90 with both RPCs."""
    edges = [edge(1, 0, "A", Direction.REQUEST_IN, 0),
             edge(1, 0, "A", Direction.RESPONSE_OUT, 90)]
    edges += rpc_quad(2, 1, "A", "B", send=10, arrive=10, reply=40, back=40)
    edges += rpc_quad(3, 1, "A", "C", send=45, arrive=45, reply=85, back=85)
    return SessionTrace(session_id=SID, edges=tuple(edges))


def parallel_toy_trace() -> SessionTrace:
    """Root at A; A calls B (30) and C (40) in parallel; A compute 10 + 5.
    Expected critical path total: 55 through the C branch only."""
    edges = [edge(1, 0, "A", Direction.REQUEST_IN, 0),
             edge(1, 0, "A", Direction.RESPONSE_OUT, 55)]
    edges += rpc_quad(2, 1, "A", "B", send=10, arrive=10, reply=40, back=40)
    edges += rpc_quad(3, 1, "A", "C", send=10, arrive=10, reply=50, back=50)
    return SessionTrace(session_id=SID, edges=tuple(edges))


# ---------------------------------------------------------------------------
# Independent walk enumerator (oracle for the critical-path DP)
# ---------------------------------------------------------------------------

def _outgoing_sources(graph: ExecutionGraph, entry, out_edge):
    """Proximate causal predecessors, re-derived from first principles."""
    if out_edge.direction is Direction.REQUEST_OUT:
        candidates = []
        parent = graph.rpcs.get(entry.parent_rpc_id)
        if parent is not None and parent.request_in is not None \
                and parent.request_in.node == out_edge.node:
            candidates.append(parent.request_in)
        for link in graph.links:
            if link.kind is LinkKind.SIBLING_SERIALIZATION and link.dst == out_edge:
                candidates.append(link.src)
    elif out_edge.direction is Direction.RESPONSE_OUT:
        candidates = [link.src for link in graph.links
                      if link.kind is LinkKind.REDUNDANCY_CONTRIBUTION
                      and link.dst == out_edge]
        candidates = [c for c in candidates
                      if c.last_byte.micros <= out_edge.first_byte.micros]
        if not candidates and entry.request_in is not None:
            candidates = [entry.request_in]
    else:
        return []
    eligible = [c for c in candidates if c.node == out_edge.node
                and c.last_byte.micros <= out_edge.first_byte.micros]
    if not eligible:
        return []
    latest = max(c.last_byte.micros for c in eligible)
    return [c for c in eligible if c.last_byte.micros == latest]


def enumerate_causal_walks(graph: ExecutionGraph):
    """Yield (total_us, rpc_sequence) for every complete root-to-root causal
    walk, by naive recursion over the transition relation."""
    root = graph.root_entry()
    assert root is not None and root.request_in is not None
    start = root.request_in
    ends = set(r.dedup_key for r in root.response_out)

    # Build the forward relation by scanning every outgoing edge's sources.
    transitions: dict[tuple, list[tuple[object, int]]] = {}

    def add(src, dst, dur):
        transitions.setdefault(src.dedup_key, []).append((dst, dur))

    for rpc_id, entry in graph.rpcs.items():
        outgoing = ([entry.request_out] if entry.request_out else []) \
            + list(entry.response_out)
        for o in outgoing:
            for src in _outgoing_sources(graph, entry, o):
                add(src, o, o.first_byte.micros - src.last_byte.micros)
        if entry.request_out is not None:
            if entry.request_in is not None and entry.response_out:
                add(entry.request_out, entry.request_in,
                    entry.request_out.last_byte.micros
                    - entry.request_out.first_byte.micros)
            else:
                for r in entry.response_in:
                    dur = r.last_byte.micros - entry.request_out.first_byte.micros
                    if dur >= 0:
                        add(entry.request_out, r, dur)
        for r_out in entry.response_out:
            for r_in in entry.response_in:
                add(r_out, r_in, r_in.last_byte.micros - r_in.first_byte.micros)

    def dedup(seq, rpc):
        return seq if seq and seq[-1] == rpc else seq + (rpc,)

    def walk(event, total, seq):
        seq = dedup(seq, event.rpc_id)
        if event.dedup_key in ends:
            yield total, seq
            return
        for nxt, dur in transitions.get(event.dedup_key, ()):
            yield from walk(nxt, total + dur, seq)

    yield from walk(start, 0, ())


def best_walk(graph: ExecutionGraph):
    """(total, rpc_sequence) of the longest walk; ties to smallest sequence."""
    walks = list(enumerate_causal_walks(graph))
    assert walks, "no complete walk"
    best = walks[0]
    for cand in walks[1:]:
        if cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
            best = cand
    return best
