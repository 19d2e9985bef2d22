"""Command-line front end: simulate, ingest, mine-rules, diagnose, report,
graph.

Option precedence per setting: environment variables prefixed ``TRACEKIT_``
override command-line flags, which override the ``--config`` TOML file,
which overrides built-in defaults.

Exit codes: 0 success, 1 fatal, 2 success with quarantined input.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib
from pathlib import Path
from typing import Optional

from . import sim
from .causality import build_execution_graph, infer_session_causality
from .detect import BaselineStore, DetectorConfig
from .ingest import EventStore, IngestConfig
from .model import (
    CausalRule,
    DiagnosisReport,
    Template,
    TopologySnapshot,
    decode_record,
    encode_record,
    format_session_id,
)
from .netdiag import (
    MiningConfig,
    NetDiagConfig,
    SyslogParseError,
    TemplateCorpus,
    bucketize,
    mine_causal_rules,
    mine_problem_graphs,
    parse_syslog_line,
)
from .pipeline import PipelineConfig, diagnose_sessions
from .rootcause import parse_rules


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _resolve(args, name: str, config: dict, default, cast):
    """env TRACEKIT_<NAME> > flag > config file > default."""
    env = os.environ.get(f"TRACEKIT_{name.upper()}")
    if env is not None:
        return cast(env)
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config:
        return cast(config[name])
    return default


def _read_lines(path: Path):
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield line


def _load_topology(path: Optional[str]) -> Optional[TopologySnapshot]:
    if not path:
        return None
    for line in _read_lines(Path(path)):
        record = decode_record(line)
        if isinstance(record, TopologySnapshot):
            return record
    raise ValueError(f"no topology record in {path}")


def _load_templates(path: Optional[str]) -> list[Template]:
    if not path:
        return []
    out = []
    for line in _read_lines(Path(path)):
        record = decode_record(line)
        if isinstance(record, Template):
            out.append(record)
    return out


def _load_causal_rules(path: Optional[str]) -> list[CausalRule]:
    if not path:
        return []
    out = []
    for line in _read_lines(Path(path)):
        record = decode_record(line)
        if isinstance(record, CausalRule):
            out.append(record)
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    try:
        scenario = sim.load_scenario(Path(args.scenario))
        if args.seed is not None:
            scenario = sim.Scenario(**{**vars(scenario), "seed": args.seed})
        output = sim.generate(scenario)
    except (sim.ScenarioError, OSError) as exc:
        print(f"simulate: {exc}", file=sys.stderr)
        return 1
    output.write(Path(args.out))
    print(f"simulate: {scenario.sessions} sessions, "
          f"{len(output.event_lines)} event lines, "
          f"{len(output.syslog_lines)} syslog lines -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def cmd_ingest(args, config: dict) -> int:
    ingest_config = IngestConfig(
        delta_ms=_resolve(args, "delta_ms", config, 5000, int),
        bias_window_ms=_resolve(args, "bias_window_ms", config, 60_000, int),
        bias_tolerance=_resolve(args, "bias_tolerance", config, 0.1, float),
    )
    store_dir = _resolve(args, "store_dir", config, None, str)
    if store_dir is None:
        print("ingest: --store-dir is required", file=sys.stderr)
        return 1
    store = EventStore(Path(store_dir), ingest_config)
    fed = 0
    if args.listen:
        host, _, port = args.listen.rpartition(":")
        with socket.create_server((host or "127.0.0.1", int(port))) as server:
            conn, _ = server.accept()
            with conn, conn.makefile("r", encoding="utf-8") as fh:
                for line in fh:
                    store.ingest_event(line)
                    fed += 1
    else:
        paths = [Path(p) for p in args.paths]
        if not paths:
            print("ingest: no input files", file=sys.stderr)
            return 1
        for path in paths:
            if not path.exists():
                print(f"ingest: no such file {path}", file=sys.stderr)
                return 1
            for line in _read_lines(path):
                store.ingest_event(line)
                fed += 1
        if fed == 0:
            print("ingest: inputs were empty", file=sys.stderr)
            return 1
    store.close()
    print(f"ingest: {fed} lines, {store.accepted} accepted, "
          f"{store.duplicates} duplicates, {store.quarantined} quarantined, "
          f"{len(store.session_ids())} sessions")
    return 2 if store.quarantined else 0


# ---------------------------------------------------------------------------
# mine-rules
# ---------------------------------------------------------------------------

def cmd_mine_rules(args, config: dict) -> int:
    templates = _load_templates(args.templates)
    corpus = TemplateCorpus(templates)
    topology = _load_topology(args.topology)
    mining = MiningConfig(
        bucket_us=int(_resolve(args, "bucket_s", config, 1.0, float) * 1_000_000),
        corr_threshold=_resolve(args, "corr_threshold", config, 0.5, float),
        odds_threshold=_resolve(args, "odds_threshold", config, 5.0, float),
        alpha=_resolve(args, "alpha", config, 0.01, float),
        min_support=_resolve(args, "min_support", config, 10, int),
    )
    messages = []
    malformed = 0
    for path in args.syslog:
        for line in _read_lines(Path(path)):
            try:
                messages.append(parse_syslog_line(line, corpus))
            except SyslogParseError:
                malformed += 1
    rules = mine_causal_rules(bucketize(messages, mining.bucket_us),
                              topology, mining)
    out = Path(args.out)
    out.write_text("".join(encode_record(r) + "\n" for r in rules))
    unmatched = sum(1 for m in messages if m.template_id is None)
    print(f"mine-rules: {len(messages)} messages ({malformed} malformed skipped, "
          f"{unmatched} unmatched), {len(rules)} rules -> {out}")
    return 0


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------

def _report_table(reports: list[DiagnosisReport]) -> str:
    header = (f"{'session':34} {'flag':12} {'e2e_ms':>10} {'top contributor':22} "
              f"{'bottleneck':12} pathologies")
    lines = [header, "-" * len(header)]
    for r in reports:
        top = r.contributions[0].service if r.contributions else "-"
        bottleneck = r.internet_findings.bottleneck if r.internet_findings else "-"
        lines.append(
            f"{format_session_id(r.session_id):34} {r.detected.flag:12} "
            f"{r.e2e_us / 1000.0:>10.1f} {top:22} {bottleneck:12} "
            f"{','.join(r.pathologies) or '-'}")
    return "\n".join(lines)


def cmd_diagnose(args, config: dict) -> int:
    store_dir = _resolve(args, "store_dir", config, None, str)
    if store_dir is None or not Path(store_dir).exists():
        print("diagnose: --store-dir is required and must exist", file=sys.stderr)
        return 1
    if not args.rules or not Path(args.rules).exists():
        print("diagnose: --rules file is required and must exist", file=sys.stderr)
        return 1
    try:
        ruleset = parse_rules(Path(args.rules).read_text())
    except ValueError as exc:
        print(f"diagnose: bad rules file: {exc}", file=sys.stderr)
        return 1

    ingest_config = IngestConfig(
        delta_ms=_resolve(args, "delta_ms", config, 5000, int),
        bias_window_ms=_resolve(args, "bias_window_ms", config, 60_000, int),
        bias_tolerance=_resolve(args, "bias_tolerance", config, 0.1, float),
    )
    store = EventStore(Path(store_dir), ingest_config)

    detector = DetectorConfig(
        iqr_k=_resolve(args, "iqr_k", config, 1.5, float),
        min_samples=_resolve(args, "min_samples", config, 20, int),
        content_threshold=_resolve(args, "content_threshold", config, 0.25, float),
    )
    pipeline_config = PipelineConfig(
        detector=detector,
        netdiag=NetDiagConfig(
            rpc_threshold=_resolve(args, "rpc_threshold", config, 0.05, float)),
        top_k=_resolve(args, "top_k", config, 5, int),
        assume_complete=bool(args.assume_complete),
    )

    topology = _load_topology(args.topology)
    problem_graphs = []
    if args.syslog and args.templates and args.causal_rules:
        corpus = TemplateCorpus(_load_templates(args.templates))
        messages = []
        for path in args.syslog:
            for line in _read_lines(Path(path)):
                try:
                    messages.append(parse_syslog_line(line, corpus))
                except SyslogParseError:
                    continue
        problem_graphs = mine_problem_graphs(
            messages, _load_causal_rules(args.causal_rules), topology,
            NetDiagConfig(window_s=_resolve(args, "window_s", config, 60, int)))

    baselines = None
    if args.baselines and Path(args.baselines).exists():
        baselines = BaselineStore.load_jsonl(Path(args.baselines).read_text(),
                                             detector)

    reports = diagnose_sessions(
        store, ruleset, config=pipeline_config, topology=topology,
        problem_graphs=problem_graphs, baselines=baselines)
    reports.sort(key=lambda r: format_session_id(r.session_id))

    if args.baselines and baselines is not None:
        Path(args.baselines).write_text(baselines.dump_jsonl())

    rendered = ("".join(encode_record(r) + "\n" for r in reports)
                if args.format == "jsonl" else _report_table(reports) + "\n")
    if args.out:
        Path(args.out).write_text(rendered)
        print(f"diagnose: {len(reports)} sessions -> {args.out}")
    else:
        sys.stdout.write(rendered)
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def load_reports(path: Path) -> list[DiagnosisReport]:
    reports = []
    for line in _read_lines(path):
        record = decode_record(line)
        if isinstance(record, DiagnosisReport):
            reports.append(record)
    return reports


def _parse_graph_summary(summary: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in summary.split(";") if "=" in part)


def rollup(reports: list[DiagnosisReport], group_by: str) -> dict[str, dict]:
    """Aggregate per-session reports; every figure is recomputable from the
    per-session records."""
    out: dict[str, dict] = {}

    def bucket(name: str) -> dict:
        return out.setdefault(name, {"sessions": 0, "latency_us": 0,
                                     "detected_high": 0})

    if group_by == "service":
        for r in reports:
            seen = set()
            for c in r.contributions:
                b = bucket(c.service)
                b["latency_us"] += c.latency_us
                if c.service not in seen:
                    b["sessions"] += 1
                    seen.add(c.service)
                if r.detected.flag == "high":
                    b["detected_high"] += 1
    elif group_by == "tier":
        for r in reports:
            for f in r.network_findings:
                for summary in f.possible_graphs:
                    tier = _parse_graph_summary(summary).get("tier", "unknown")
                    b = bucket(tier)
                    b["sessions"] += 1
                    if f.queueing_delay_us:
                        b["latency_us"] += f.queueing_delay_us
    elif group_by == "bottleneck":
        for r in reports:
            name = r.internet_findings.bottleneck if r.internet_findings else "none"
            b = bucket(name)
            b["sessions"] += 1
            b["latency_us"] += r.e2e_us
            if r.detected.flag == "high":
                b["detected_high"] += 1
    elif group_by == "pathology":
        for r in reports:
            for p in r.pathologies or ("none",):
                b = bucket(p)
                b["sessions"] += 1
                b["latency_us"] += r.e2e_us
    else:
        raise ValueError(f"unknown group-by {group_by!r}")
    return out


def cmd_report(args) -> int:
    reports = load_reports(Path(args.bundle))
    if args.window:
        lo, _, hi = args.window.partition(":")
        lo_us, hi_us = int(lo), int(hi)
        reports = [r for r in reports if lo_us <= r.session_start_us < hi_us]
    grouped = rollup(reports, args.group_by)
    if args.format == "jsonl":
        for name in sorted(grouped):
            row = {"group": name}
            row.update(grouped[name])
            sys.stdout.write(json.dumps(row, sort_keys=True,
                                        separators=(",", ":")) + "\n")
    else:
        header = f"{'group':24} {'sessions':>10} {'latency_us':>14} {'high':>6}"
        print(header)
        print("-" * len(header))
        for name in sorted(grouped):
            g = grouped[name]
            print(f"{name:24} {g['sessions']:>10} {g['latency_us']:>14} "
                  f"{g['detected_high']:>6}")
    return 0


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

def cmd_graph(args, config: dict) -> int:
    store_dir = _resolve(args, "store_dir", config, None, str)
    if store_dir is None or not Path(store_dir).exists():
        print("graph: --store-dir is required and must exist", file=sys.stderr)
        return 1
    store = EventStore(Path(store_dir))
    session_id = int(args.session_id, 16)
    try:
        trace = store.assemble_session(session_id)
    except KeyError as exc:
        print(f"graph: {exc}", file=sys.stderr)
        return 1
    graph = infer_session_causality(build_execution_graph(trace))
    sys.stdout.write(graph.to_dot() + "\n")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracekit",
        description="Session trace diagnosis: simulate, ingest, mine, diagnose.")
    parser.add_argument("--config", help="TOML config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a scenario with ground truth")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("ingest", help="ingest JSONL event files into a store")
    p.add_argument("paths", nargs="*")
    p.add_argument("--store-dir", dest="store_dir")
    p.add_argument("--delta-ms", dest="delta_ms", type=int)
    p.add_argument("--bias-window-ms", dest="bias_window_ms", type=int)
    p.add_argument("--bias-tolerance", dest="bias_tolerance", type=float)
    p.add_argument("--listen", help="host:port; ingest one line-delimited feed")

    p = sub.add_parser("mine-rules", help="mine causal rules from syslogs")
    p.add_argument("--syslog", nargs="+", required=True)
    p.add_argument("--templates", required=True)
    p.add_argument("--topology")
    p.add_argument("--out", required=True)
    p.add_argument("--bucket-s", dest="bucket_s", type=float)
    p.add_argument("--corr-threshold", dest="corr_threshold", type=float)
    p.add_argument("--odds-threshold", dest="odds_threshold", type=float)
    p.add_argument("--alpha", dest="alpha", type=float)
    p.add_argument("--min-support", dest="min_support", type=int)

    p = sub.add_parser("diagnose", help="diagnose every ready session")
    p.add_argument("--store-dir", dest="store_dir")
    p.add_argument("--rules", required=False)
    p.add_argument("--out")
    p.add_argument("--format", choices=("jsonl", "table"), default="jsonl")
    p.add_argument("--topology")
    p.add_argument("--templates")
    p.add_argument("--causal-rules", dest="causal_rules")
    p.add_argument("--syslog", nargs="*")
    p.add_argument("--baselines", help="baseline store JSONL; read and updated")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--iqr-k", dest="iqr_k", type=float)
    p.add_argument("--min-samples", dest="min_samples", type=int)
    p.add_argument("--content-threshold", dest="content_threshold", type=float)
    p.add_argument("--rpc-threshold", dest="rpc_threshold", type=float)
    p.add_argument("--window-s", dest="window_s", type=int)
    p.add_argument("--delta-ms", dest="delta_ms", type=int)
    p.add_argument("--bias-window-ms", dest="bias_window_ms", type=int)
    p.add_argument("--bias-tolerance", dest="bias_tolerance", type=float)
    p.add_argument("--assume-complete", action="store_true",
                   help="batch replay: skip the readiness delay")
    p.add_argument("--jobs", type=int, default=1,
                   help="diagnosis worker count (reports stay ordered)")

    p = sub.add_parser("report", help="aggregate a report bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--group-by", dest="group_by", required=True,
                   choices=("service", "tier", "bottleneck", "pathology"))
    p.add_argument("--window", help="start_us:end_us filter on session start")
    p.add_argument("--format", choices=("jsonl", "table"), default="table")

    p = sub.add_parser("graph", help="emit a session's execution graph as DOT")
    p.add_argument("session_id", help="32-hex session id")
    p.add_argument("--store-dir", dest="store_dir")
    p.add_argument("--dot", action="store_true", default=True)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config = _load_config(args.config)
    if args.command == "simulate":
        return cmd_simulate(args)
    if args.command == "ingest":
        return cmd_ingest(args, config)
    if args.command == "mine-rules":
        return cmd_mine_rules(args, config)
    if args.command == "diagnose":
        return cmd_diagnose(args, config)
    if args.command == "report":
        return cmd_report(args)
    if args.command == "graph":
        return cmd_graph(args, config)
    return 1


if __name__ == "__main__":
    sys.exit(main())
