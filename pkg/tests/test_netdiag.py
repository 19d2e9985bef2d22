"""Network diagnosis: queueing delay, candidate devices vs a networkx
oracle, template matching, QED rule mining vs brute-force counts, and
problem-graph construction."""

import itertools
import math
import random

import networkx as nx
import pytest

from helpers import SID, edge
from tracekit.model import (
    CausalRule,
    Device,
    DeviceTier,
    Direction,
    RuleScope,
    SyslogMessage,
    Template,
    TemplateLayer,
    Timestamp,
    TopologySnapshot,
)
from tracekit.netdiag import (
    SYSLOG_CLOCK,
    CorpusValidationError,
    DelayHistory,
    EmptyHistoryError,
    MiningConfig,
    NetDiagConfig,
    SyslogParseError,
    TemplateCorpus,
    UnattachedHostError,
    bucketize,
    candidate_devices,
    correlate_rpc_problems,
    detect_rpc_problem,
    format_syslog_line,
    match_template,
    mine_causal_rules,
    mine_problem_graphs,
    observe_and_estimate,
    parse_syslog_line,
    queueing_delay,
)
from tracekit import sim


# -- queueing delay ---------------------------------------------------------------

def pair(rpc, delta, send_at, *, src="dc1/a/h0", dst="dc1/b/h1"):
    e_out = edge(rpc, 1, src, Direction.REQUEST_OUT, send_at)
    e_in = edge(rpc, 1, dst, Direction.REQUEST_IN, send_at + delta)
    return e_out, e_in


def test_queueing_delay_subtracts_window_min():
    history = DelayHistory()
    for i, delta in enumerate((40, 42, 41)):
        observe_and_estimate(*pair(10 + i, delta, 1_000_000 + i * 1000), history)
    e_out, e_in = pair(99, 52, 2_000_000)
    assert queueing_delay(e_out, e_in, history) == 12


def test_queueing_delay_zero_at_window_min():
    history = DelayHistory()
    observe_and_estimate(*pair(10, 40, 1_000_000), history)
    e_out, e_in = pair(11, 40, 1_100_000)
    assert queueing_delay(e_out, e_in, history) == 0


def test_queueing_delay_never_negative():
    history = DelayHistory()
    observe_and_estimate(*pair(10, 50, 1_000_000), history)
    e_out, e_in = pair(11, 40, 1_100_000)  # faster than everything prior
    assert queueing_delay(e_out, e_in, history) == 0


def test_queueing_delay_requires_history():
    with pytest.raises(EmptyHistoryError):
        queueing_delay(*pair(10, 40, 1_000_000), DelayHistory())


def test_queueing_delay_prunes_old_entries():
    history = DelayHistory(window_us=60_000_000)
    observe_and_estimate(*pair(10, 10, 1_000_000), history)       # will age out
    observe_and_estimate(*pair(11, 40, 100_000_000), history)
    e_out, e_in = pair(12, 52, 130_000_000)
    assert queueing_delay(e_out, e_in, history) == 12  # min is 40, not 10


def test_clock_offset_cancellation_exact():
    """Shifting the receiver's clock by any constant leaves estimates
    bit-identical."""
    deltas = [(10 + i, 40 + (i * 7) % 13, 1_000_000 + i * 50_000)
              for i in range(40)]
    for shift in (0, 123_456, -37_000, 5_000_000):
        history = DelayHistory()
        estimates = []
        for rpc, delta, at in deltas:
            e_out = edge(rpc, 1, "dc1/a/h0", Direction.REQUEST_OUT, at)
            e_in = edge(rpc, 1, "dc1/b/h1", Direction.REQUEST_IN,
                        at + delta + shift)
            estimates.append(observe_and_estimate(e_out, e_in, history))
        if shift == 0:
            baseline = estimates
        else:
            assert estimates == baseline


def test_detect_rpc_problem_threshold():
    assert detect_rpc_problem(12_000, 100_000, threshold=0.05)
    assert not detect_rpc_problem(1_000, 100_000, threshold=0.05)
    with pytest.raises(ValueError):
        detect_rpc_problem(1_000, 0)


def test_detect_rpc_problem_monotone_in_threshold():
    flags = [detect_rpc_problem(5_000, 100_000, threshold=t / 100)
             for t in range(1, 20)]
    assert flags == sorted(flags, reverse=True)


# -- candidate devices ---------------------------------------------------------------

def toy_topology():
    return sim.build_topology(sim.TopologyParams(
        pods=2, tors_per_pod=2, aggs_per_pod=2, hosts_per_tor=2, cores=2))


def nx_candidate_oracle(topo: TopologySnapshot, src_host, dst_host):
    """All shortest valley-free (strictly up, then strictly down) paths."""
    rank = {DeviceTier.TOR: 0, DeviceTier.AGG: 1, DeviceTier.CORE: 2}
    tiers = topo.tiers()
    g = nx.Graph()
    g.add_nodes_from(tiers)
    g.add_edges_from(topo.links)
    src, dst = topo.attached_tor(src_host), topo.attached_tor(dst_host)
    if src == dst:
        return frozenset({src})

    def valley_free(path):
        ranks = [rank[tiers[d]] for d in path]
        peak = ranks.index(max(ranks))
        return (all(b == a + 1 for a, b in zip(ranks[:peak+1], ranks[1:peak+1]))
                and all(b == a - 1 for a, b in zip(ranks[peak:], ranks[peak+1:])))

    paths = [p for p in nx.all_simple_paths(g, src, dst, cutoff=5)
             if valley_free(p)]
    shortest = min(len(p) for p in paths)
    return frozenset(itertools.chain.from_iterable(
        p for p in paths if len(p) == shortest))


def test_same_tor_hosts():
    topo = toy_topology()
    assert candidate_devices(topo, "h000", "h001") == frozenset({"tor-0-0"})


def test_sibling_tors_two_aggs():
    topo = toy_topology()
    got = candidate_devices(topo, "h000", "h002")  # tor-0-0 vs tor-0-1
    assert got == frozenset({"tor-0-0", "tor-0-1", "agg-0-0", "agg-0-1"})
    assert got == nx_candidate_oracle(topo, "h000", "h002")


def test_cross_pod_includes_core():
    topo = toy_topology()
    got = candidate_devices(topo, "h000", "h004")
    assert "core-0" in got and "core-1" in got
    assert got == nx_candidate_oracle(topo, "h000", "h004")


def test_candidate_devices_match_oracle_everywhere():
    topo = toy_topology()
    hosts = [h for h, _ in topo.host_attachments]
    for src, dst in itertools.combinations(hosts, 2):
        assert candidate_devices(topo, src, dst) == \
            nx_candidate_oracle(topo, src, dst), (src, dst)


def test_unattached_host_error():
    with pytest.raises(UnattachedHostError):
        candidate_devices(toy_topology(), "h000", "ghost")


# -- templates and syslog parsing --------------------------------------------------

def test_match_template_extracts_attrs():
    corpus = TemplateCorpus(sim.BUILTIN_TEMPLATES)
    message = SyslogMessage(device="tor-0-0", at=Timestamp(0, SYSLOG_CLOCK),
                            severity=3, raw="Interface eth1/3 link down")
    hit = match_template(message, corpus)
    assert hit.template_id == "LINK_DOWN"
    assert dict(hit.attrs) == {"interface": "eth1/3"}


def test_unmatched_line_returns_none():
    corpus = TemplateCorpus(sim.BUILTIN_TEMPLATES)
    assert corpus.match("completely novel text") is None


def test_overlapping_corpus_rejected_at_load():
    overlapping = [
        Template("T1", r"Interface (?P<a>\S+) link down", TemplateLayer.PHY, "x"),
        Template("T2", r"Interface (?P<b>\S+) link (?P<c>\S+)", TemplateLayer.PHY, "y"),
    ]
    with pytest.raises(CorpusValidationError):
        TemplateCorpus(overlapping, probe_lines=["Interface eth0 link down"])


def test_overlapping_match_detected_lazily():
    corpus = TemplateCorpus([
        Template("T1", r"Interface (?P<a>\S+) link down", TemplateLayer.PHY, "x"),
        Template("T2", r"Interface (?P<b>\S+) link (?P<c>\S+)", TemplateLayer.PHY, "y"),
    ])
    with pytest.raises(CorpusValidationError):
        corpus.match("Interface eth0 link down")


def test_syslog_line_round_trip():
    corpus = TemplateCorpus(sim.BUILTIN_TEMPLATES)
    message = SyslogMessage(device="agg-1-0", at=Timestamp(17, SYSLOG_CLOCK),
                            severity=4, raw="STP topology change on vlan 120")
    parsed = parse_syslog_line(format_syslog_line(message), corpus)
    assert parsed.device == "agg-1-0"
    assert parsed.at.micros == 17
    assert parsed.severity == 4
    assert parsed.template_id == "STP_CHANGE"


def test_malformed_syslog_line_raises():
    with pytest.raises(SyslogParseError):
        parse_syslog_line("not a syslog line")


# -- causal-rule mining (QED) ---------------------------------------------------------

def planted_messages(seed, buckets=600, cause_rate=0.35, follow_p=0.9):
    """One device, templates C_T -> E_T planted, independent N_T noise."""
    rng = random.Random(seed)
    messages = []
    for b in range(buckets):
        base = b * 1_000_000
        if rng.random() < cause_rate:
            at = base + rng.randrange(200_000)
            messages.append(SyslogMessage("dev0", Timestamp(at, SYSLOG_CLOCK),
                                          3, "cause", template_id="C_T"))
            if rng.random() < follow_p:
                messages.append(SyslogMessage(
                    "dev0", Timestamp(at + 300_000, SYSLOG_CLOCK), 3,
                    "effect", template_id="E_T"))
        if rng.random() < 0.05:
            messages.append(SyslogMessage(
                "dev0", Timestamp(base + rng.randrange(1_000_000), SYSLOG_CLOCK),
                3, "effect-bg", template_id="E_T"))
        if rng.random() < 0.3:
            messages.append(SyslogMessage(
                "dev0", Timestamp(base + rng.randrange(1_000_000), SYSLOG_CLOCK),
                6, "noise", template_id="N_T"))
    return messages


def brute_force_qed(messages, cause, effect, device, bucket_us=1_000_000):
    """Independent treated/untreated bucket counting."""
    cause_buckets = {m.at.micros // bucket_us for m in messages
                     if m.template_id == cause and m.device == device}
    effect_buckets = {m.at.micros // bucket_us for m in messages
                      if m.template_id == effect and m.device == device}
    treated = len(cause_buckets & effect_buckets)
    untreated = len(cause_buckets - effect_buckets)
    return treated, untreated, (treated + 0.5) / (untreated + 0.5)


def test_planted_rule_mined_with_brute_force_score():
    messages = planted_messages(seed=5)
    rules = mine_causal_rules(bucketize(messages), None, MiningConfig())
    assert [(r.cause, r.effect) for r in rules] == [("C_T", "E_T")]
    treated, untreated, odds = brute_force_qed(messages, "C_T", "E_T", "dev0")
    assert rules[0].support == treated
    assert rules[0].score == pytest.approx(odds)


def test_reverse_direction_not_mined():
    messages = planted_messages(seed=6)
    rules = mine_causal_rules(bucketize(messages), None, MiningConfig())
    assert ("E_T", "C_T") not in [(r.cause, r.effect) for r in rules]


def test_constant_on_template_skipped_as_degenerate():
    messages = []
    for b in range(100):
        messages.append(SyslogMessage("dev0", Timestamp(b * 1_000_000 + 1,
                                                        SYSLOG_CLOCK),
                                      3, "x", template_id="ALWAYS"))
        if b % 2 == 0:
            messages.append(SyslogMessage("dev0", Timestamp(b * 1_000_000 + 2,
                                                            SYSLOG_CLOCK),
                                          3, "y", template_id="OTHER"))
    rules = mine_causal_rules(bucketize(messages), None, MiningConfig())
    assert all(r.cause != "ALWAYS" for r in rules)


def test_independent_streams_yield_no_rules():
    rng = random.Random(99)
    messages = []
    for b in range(500):
        for tid in ("I1", "I2", "I3"):
            if rng.random() < 0.3:
                messages.append(SyslogMessage(
                    "dev0",
                    Timestamp(b * 1_000_000 + rng.randrange(1_000_000),
                              SYSLOG_CLOCK), 3, tid, template_id=tid))
    assert mine_causal_rules(bucketize(messages), None, MiningConfig()) == []


def test_too_few_buckets_yields_nothing():
    messages = planted_messages(seed=5, buckets=10)
    assert mine_causal_rules(bucketize(messages), None, MiningConfig()) == []


def test_inter_device_rule_requires_adjacency():
    topo = toy_topology()
    rng = random.Random(3)
    messages = []
    for b in range(400):
        if rng.random() < 0.4:
            at = b * 1_000_000 + rng.randrange(100_000)
            messages.append(SyslogMessage("tor-0-0", Timestamp(at, SYSLOG_CLOCK),
                                          3, "c", template_id="C_T"))
            messages.append(SyslogMessage("agg-0-0",
                                          Timestamp(at + 200_000, SYSLOG_CLOCK),
                                          3, "e", template_id="E_T"))
    rules = mine_causal_rules(bucketize(messages), topo, MiningConfig())
    assert [(r.cause, r.effect, r.scope) for r in rules] == [
        ("C_T", "E_T", RuleScope.INTER_DEVICE)]
    # Without the topology the devices are not known adjacent: nothing mined.
    assert mine_causal_rules(bucketize(messages), None, MiningConfig()) == []


# -- problem graphs ---------------------------------------------------------------

def _msg(device, at_us, severity, text, template_id, attrs=()):
    return SyslogMessage(device=device, at=Timestamp(at_us, SYSLOG_CLOCK),
                         severity=severity, raw=text, template_id=template_id,
                         attrs=tuple(attrs))


def cascade_messages(base_us=10_000_000):
    return [
        _msg("tor-0-0", base_us, 2, "Module 3 failure detected", "MODULE_FAIL"),
        _msg("tor-0-0", base_us + 100_000, 3, "Interface eth2/1 link down",
             "LINK_DOWN"),
        _msg("tor-0-0", base_us + 220_000, 4, "STP topology change on vlan 101",
             "STP_CHANGE"),
        _msg("agg-0-0", base_us + 300_000, 4,
             "Interface eth2/1 status changed to down", "IF_STATUS_CHANGE"),
    ]


def test_multi_device_cascade_graph():
    topo = toy_topology()
    graphs = mine_problem_graphs(cascade_messages(), sim.BUILTIN_RULES, topo)
    assert len(graphs) == 1
    g = graphs[0]
    assert g.devices() == {"tor-0-0", "agg-0-0"}
    assert len(g.nodes) == 4
    directed = {(e.cause_template, e.effect_template) for e in g.edges}
    assert directed == {("MODULE_FAIL", "LINK_DOWN"),
                        ("LINK_DOWN", "STP_CHANGE"),
                        ("LINK_DOWN", "IF_STATUS_CHANGE")}
    roots = g.root_nodes()
    assert [r.template_id for r in roots] == ["MODULE_FAIL"]


def test_l2_flap_single_intra_device_graph():
    messages = []
    at = 5_000_000
    for _ in range(5):
        messages.append(_msg("tor-1-1", at, 3, "Interface eth1/7 link down",
                             "LINK_DOWN"))
        messages.append(_msg("tor-1-1", at + 400_000, 5,
                             "Interface eth1/7 link up", "LINK_UP"))
        at += 2_000_000
    graphs = mine_problem_graphs(messages, sim.BUILTIN_RULES, toy_topology())
    assert len(graphs) == 1
    g = graphs[0]
    assert g.devices() == {"tor-1-1"}
    assert {(e.cause_template, e.effect_template) for e in g.edges} == {
        ("LINK_DOWN", "LINK_UP")}
    span = g.nodes[0].last_at.micros - g.nodes[0].first_at.micros
    assert span >= 8_000_000  # the flapping repeats are folded into one node


def test_empty_rule_corpus_keeps_only_high_severity_singletons():
    graphs = mine_problem_graphs(cascade_messages(), [], toy_topology())
    # MODULE_FAIL (2) and LINK_DOWN (3) clear the severity bar; the rest do not.
    assert {g.nodes[0].template_id for g in graphs} == {"MODULE_FAIL", "LINK_DOWN"}
    assert all(len(g.nodes) == 1 and not g.edges for g in graphs)


def test_cycle_closing_edge_dropped():
    rules = [
        CausalRule("A_T", "B_T", RuleScope.INTRA_DEVICE, 9.0, 10),
        CausalRule("B_T", "A_T", RuleScope.INTRA_DEVICE, 9.0, 10),
    ]
    messages = [_msg("tor-0-0", 1_000_000, 3, "a", "A_T"),
                _msg("tor-0-0", 1_200_000, 3, "b", "B_T")]
    graphs = mine_problem_graphs(messages, rules, toy_topology())
    assert len(graphs) == 1
    assert {(e.cause_template, e.effect_template) for e in graphs[0].edges} == {
        ("A_T", "B_T")}
    # acyclic by construction
    assert len(graphs[0].edges) == 1


def test_graphs_deterministic():
    topo = toy_topology()
    a = mine_problem_graphs(cascade_messages(), sim.BUILTIN_RULES, topo)
    b = mine_problem_graphs(list(reversed(cascade_messages())),
                            sim.BUILTIN_RULES, topo)
    assert a == b


# -- correlation -------------------------------------------------------------------

def test_correlate_by_device_and_time():
    topo = toy_topology()
    [graph] = mine_problem_graphs(cascade_messages(), sim.BUILTIN_RULES, topo)
    window_start = graph.window[0].micros
    inside = (window_start + 1000, window_start + 2000)
    hits = correlate_rpc_problems(frozenset({"tor-0-0"}), [graph], inside)
    assert len(hits) == 1 and hits[0].label == "possible"
    assert hits[0].shared_devices == frozenset({"tor-0-0"})

    assert correlate_rpc_problems(frozenset({"core-0"}), [graph], inside) == []
    far = (graph.window[1].micros + 10_000_000,
           graph.window[1].micros + 20_000_000)
    assert correlate_rpc_problems(frozenset({"tor-0-0"}), [graph], far) == []
