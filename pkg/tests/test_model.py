"""Core type invariants, trace validation, and JSONL round-trips."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import SID, edge, rpc_quad, ts
from tracekit.model import (
    AnnotationRecord,
    CausalRule,
    ClockMismatchError,
    DecodeError,
    Device,
    DeviceTier,
    Direction,
    NavEvent,
    NavTimingRecord,
    ProblemEdge,
    ProblemGraph,
    ProblemNode,
    RuleScope,
    SessionTrace,
    SyslogMessage,
    TcpSnapshot,
    Template,
    TemplateLayer,
    Timestamp,
    TopologySnapshot,
    TraceHeader,
    decode_record,
    encode_record,
    validate_trace,
)


def test_timestamp_rejects_negative():
    with pytest.raises(ValueError):
        Timestamp(-1, "a")


def test_timestamp_cross_clock_comparison_forbidden():
    a = Timestamp(10, "node-a")
    b = Timestamp(20, "node-b")
    with pytest.raises(ClockMismatchError):
        _ = a < b
    with pytest.raises(ClockMismatchError):
        _ = a - b
    assert Timestamp(10, "node-a") < Timestamp(11, "node-a")
    assert Timestamp(11, "node-a") - Timestamp(10, "node-a") == 1


def test_trace_header_invariants():
    with pytest.raises(ValueError):
        TraceHeader(session_id=1, rpc_id=7, parent_rpc_id=7)
    with pytest.raises(ValueError):
        TraceHeader(session_id=1, rpc_id=0, parent_rpc_id=1)
    header = TraceHeader(session_id=1, rpc_id=7, parent_rpc_id=0)
    assert header.is_root


def well_formed_trace() -> SessionTrace:
    edges = [edge(1, 0, "A", Direction.REQUEST_IN, 0),
             edge(1, 0, "A", Direction.RESPONSE_OUT, 50)]
    edges += rpc_quad(2, 1, "A", "B", send=10, arrive=12, reply=30, back=32)
    return SessionTrace(session_id=SID, edges=tuple(edges))


def test_validate_well_formed_trace_is_clean():
    assert validate_trace(well_formed_trace()) == []


def test_validate_reports_dangling_parent():
    bad = well_formed_trace().edges + (
        edge(9, 5, "A", Direction.REQUEST_OUT, 40),)
    violations = validate_trace(SessionTrace(session_id=SID, edges=bad))
    assert any(v.field == "parent_rpc_id" and "dangling" in v.message
               for v in violations)


def test_validate_reports_timestamp_order():
    bad = well_formed_trace().edges + (
        edge(3, 1, "A", Direction.REQUEST_OUT, 40, 35),)
    violations = validate_trace(SessionTrace(session_id=SID, edges=bad))
    assert any(v.message.startswith("timestamp order") for v in violations)


def test_validate_reports_duplicates_and_clock_mismatch():
    e = edge(2, 1, "A", Direction.REQUEST_OUT, 10)
    wrong_clock = e.__class__(
        session_id=e.session_id, rpc_id=3, parent_rpc_id=1, node="A", peer="",
        direction=Direction.REQUEST_OUT, first_byte=ts(11, "B"),
        last_byte=ts(12, "B"))
    trace = SessionTrace(session_id=SID, edges=(
        edge(1, 0, "A", Direction.REQUEST_IN, 0), e, e, wrong_clock))
    violations = validate_trace(trace)
    assert any(v.field == "dedup_key" for v in violations)
    assert any("clock" in v.message for v in violations)


def test_validate_is_order_insensitive_and_idempotent():
    edges = list(well_formed_trace().edges) + [
        edge(3, 1, "A", Direction.REQUEST_OUT, 40, 35)]
    forward = validate_trace(SessionTrace(session_id=SID, edges=tuple(edges)))
    backward = validate_trace(SessionTrace(session_id=SID,
                                           edges=tuple(reversed(edges))))
    assert forward == backward
    assert forward == validate_trace(SessionTrace(session_id=SID,
                                                  edges=tuple(edges)))


def test_validate_navtiming_and_tcp():
    nav = NavTimingRecord(session_id=SID, events=(
        NavEvent("dns", ts(0, "user"), ts(10_000, "user")),
        NavEvent("connect", ts(10_000, "user"), ts(90_000, "user")),
    ), onload_ms=50)  # connect ends at 90ms > onload 50ms
    snap = TcpSnapshot(session_id=SID, connection_id="c1", at=ts(5, "A"),
                       srtt_us=1000, rttvar_us=100, rto_us=500,
                       retrans_segments=0, reordering_events=0,
                       cwnd_segments=10, send_window_bytes=1, recv_window_bytes=1)
    trace = SessionTrace(session_id=SID, edges=well_formed_trace().edges,
                         navtiming=nav, tcp_snapshots=(snap,))
    violations = validate_trace(trace)
    assert any(v.field == "onload_ms" for v in violations)
    assert any(v.field == "rto_us" for v in violations)


# -- JSONL round-trips --------------------------------------------------------

def test_round_trip_all_types():
    rule = CausalRule("A_T", "B_T", RuleScope.INTER_DEVICE, 7.25, 42)
    records = [
        edge(2, 1, "A", Direction.REQUEST_OUT, 10, 15, payload=128),
        AnnotationRecord(session_id=SID, rpc_id=2, node="A", key="lock_wait",
                         value="1200us", at=ts(11, "A")),
        NavTimingRecord(session_id=SID, events=(
            NavEvent("dns", ts(0, "user"), ts(10_000, "user")),
            NavEvent("connect", ts(10_000, "user"), ts(30_000, "user"))),
            onload_ms=1000),
        TcpSnapshot(session_id=SID, connection_id="c1", at=ts(5, "A"),
                    srtt_us=1000, rttvar_us=100, rto_us=20_000,
                    retrans_segments=1, reordering_events=2, cwnd_segments=10,
                    send_window_bytes=65535, recv_window_bytes=65535),
        SyslogMessage(device="tor-0-0", at=ts(123, "datacenter"), severity=3,
                      raw="Interface eth1/3 link down", template_id="LINK_DOWN",
                      attrs=(("interface", "eth1/3"),)),
        Template("LINK_DOWN", r"Interface (?P<interface>\S+) link down",
                 TemplateLayer.PHY, "link_state"),
        rule,
        ProblemGraph(
            nodes=(ProblemNode("tor-0-0", "A_T", ts(1, "datacenter"),
                               ts(2, "datacenter")),
                   ProblemNode("agg-0-0", "B_T", ts(3, "datacenter"),
                               ts(4, "datacenter"))),
            edges=(ProblemEdge("tor-0-0", "A_T", "agg-0-0", "B_T", rule),),
            window=(ts(0, "datacenter"), ts(60_000_000, "datacenter"))),
        TopologySnapshot(
            devices=(Device("agg-0-0", DeviceTier.AGG),
                     Device("tor-0-0", DeviceTier.TOR)),
            links=(("agg-0-0", "tor-0-0"),),
            host_attachments=(("h000", "tor-0-0"),),
            taken_at=ts(9, "topology")),
        well_formed_trace(),
    ]
    for record in records:
        line = encode_record(record)
        assert decode_record(line) == record


@settings(max_examples=200)
@given(sid=st.integers(min_value=1, max_value=(1 << 128) - 1),
       rpc=st.integers(min_value=1, max_value=(1 << 64) - 1),
       parent=st.integers(min_value=0, max_value=(1 << 64) - 1),
       first=st.integers(min_value=0, max_value=10**15),
       width=st.integers(min_value=0, max_value=10**6),
       payload=st.integers(min_value=0, max_value=10**9),
       direction=st.sampled_from(list(Direction)))
def test_round_trip_random_edges(sid, rpc, parent, first, width, payload,
                                 direction):
    if rpc == parent:
        parent = 0
    record = edge(rpc, parent, "dc1/web/h003", direction, first, first + width,
                  sid=sid, payload=payload)
    assert decode_record(encode_record(record)) == record


def test_decode_rejects_garbage():
    with pytest.raises(DecodeError):
        decode_record("not json at all {")
    with pytest.raises(DecodeError):
        decode_record('{"kind":"martian","v":1}')
    with pytest.raises(DecodeError):
        decode_record('{"kind":"edge","v":99}')
    with pytest.raises(DecodeError):
        decode_record('{"kind":"edge","v":1,"session_id":"xyz"}')
