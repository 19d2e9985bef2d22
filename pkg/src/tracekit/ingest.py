"""Event ingestion: turns a lossy, duplicated, out-of-order stream into
assembled session traces.

Transport semantics are asynchronous, so inserts are idempotent (keyed
dedup; duplicates counted, never stored twice) and assembly is insensitive
to arrival order. Analysis of a session is triggered only after a quiet
period of ``delta_ms`` since its last arrival; a straggler re-arms the
delay and bumps the session's revision so diagnoses are recomputed rather
than silently stale.

Volume accounting guards against transport bias: per (service, datacenter)
the store tracks events per window and flags a window whose observed volume
falls short of the expectation learned from prior windows. Biased windows
defer analysis instead of producing skewed statistics.

Storage is an append-only record log under a directory; reopening replays
the log. Because duplicates are dropped before the log is written, re-
ingesting the same inputs leaves the directory byte-identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .model import (
    AnnotationRecord,
    DecodeError,
    Direction,
    NavTimingRecord,
    RpcEdgeRecord,
    SessionTrace,
    TcpSnapshot,
    decode_record,
    encode_record,
)

BIAS_UNBIASED = "unbiased"
BIAS_BIASED = "biased"


@dataclass(frozen=True)
class IngestConfig:
    delta_ms: int = 5000
    bias_window_ms: int = 60_000
    bias_tolerance: float = 0.1
    ewma_alpha: float = 0.3

    def __post_init__(self) -> None:
        if self.delta_ms <= 0:
            raise ValueError("delta_ms must be positive")
        if not (0.0 < self.bias_tolerance < 1.0):
            raise ValueError("bias_tolerance must be inside (0, 1)")


@dataclass(frozen=True)
class BiasVerdict:
    status: str                  # unbiased | biased
    deficit_fraction: float = 0.0
    note: str = ""


def service_and_datacenter(node: str) -> tuple[str, str]:
    """Split a ``dc/service/host`` node id; degenerate ids map to themselves
    under a default datacenter."""
    parts = node.split("/")
    if len(parts) == 3:
        return parts[1], parts[0]
    return node, "default"


@dataclass
class _SessionState:
    records: dict[tuple, object] = field(default_factory=dict)
    last_arrival_ms: int = 0
    revision: int = 0


class EventStore:
    """Idempotent event store with per-session readiness and assembly.

    ``store_dir=None`` keeps everything in memory (tests, one-shot runs).
    """

    def __init__(self, store_dir: Optional[Path] = None,
                 config: IngestConfig = IngestConfig(),
                 clock_ms=None):
        self.config = config
        self.clock_ms = clock_ms if clock_ms is not None else (
            lambda: time.time_ns() // 1_000_000)
        self.duplicates = 0
        self.quarantined = 0
        self.accepted = 0
        self._sessions: dict[int, _SessionState] = {}
        self._volume: dict[tuple[str, str], dict[int, int]] = {}
        self._log = None
        self.store_dir = Path(store_dir) if store_dir is not None else None
        if self.store_dir is not None:
            self.store_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.store_dir / "events.log"
            if log_path.exists():
                with log_path.open() as fh:
                    for line in fh:
                        self._insert_line(line.rstrip("\n"), persist=False)
            self._log = log_path.open("a")
            self._quarantine_path = self.store_dir / "quarantine.log"

    # -- ingestion ----------------------------------------------------------

    def ingest_event(self, raw_line: str) -> None:
        """Decode and insert one record; undecodable lines are quarantined
        with a reason and the stream continues."""
        self._insert_line(raw_line, persist=True)

    def ingest_lines(self, lines: Iterable[str]) -> None:
        for line in lines:
            line = line.strip()
            if line:
                self.ingest_event(line)

    def _insert_line(self, line: str, persist: bool) -> None:
        line = line.strip()
        if not line:
            return
        try:
            record = decode_record(line)
        except DecodeError as exc:
            self.quarantined += 1
            if self.store_dir is not None and persist:
                with self._quarantine_path.open("a") as fh:
                    fh.write(f"{exc}\t{line}\n")
            return
        if not isinstance(record, (RpcEdgeRecord, AnnotationRecord,
                                   NavTimingRecord, TcpSnapshot)):
            self.quarantined += 1
            if self.store_dir is not None and persist:
                with self._quarantine_path.open("a") as fh:
                    fh.write(f"not a session event record\t{line}\n")
            return

        state = self._sessions.setdefault(record.session_id, _SessionState())
        state.last_arrival_ms = self.clock_ms()
        key = record.dedup_key
        if key in state.records:
            self.duplicates += 1
            return
        state.records[key] = record
        state.revision += 1
        self.accepted += 1
        self._account_volume(record)
        if self._log is not None and persist:
            self._log.write(encode_record(record) + "\n")
            self._log.flush()

    def _account_volume(self, record) -> None:
        if isinstance(record, RpcEdgeRecord):
            node, at_us = record.node, record.first_byte.micros
        elif isinstance(record, AnnotationRecord):
            node, at_us = record.node, record.at.micros
        else:
            return
        service, dc = service_and_datacenter(node)
        window = at_us // (self.config.bias_window_ms * 1000)
        per = self._volume.setdefault((service, dc), {})
        per[window] = per.get(window, 0) + 1

    # -- readiness ----------------------------------------------------------

    def session_ids(self) -> list[int]:
        return sorted(self._sessions)

    def session_revision(self, session_id: int) -> int:
        state = self._sessions.get(session_id)
        return state.revision if state else 0

    def session_ready(self, session_id: int, now_ms: Optional[int] = None) -> bool:
        """True once ``delta_ms`` has elapsed since the session's last
        arrival; unknown sessions are never ready."""
        state = self._sessions.get(session_id)
        if state is None or not state.records:
            return False
        if now_ms is None:
            now_ms = self.clock_ms()
        return now_ms - state.last_arrival_ms >= self.config.delta_ms

    # -- assembly -----------------------------------------------------------

    def assemble_session(self, session_id: int) -> SessionTrace:
        """Deduplicated, per-node time-sorted trace. ``assembled_complete``
        is false when a response lacks its request or parent linkage is
        broken; ``assembly_gaps`` lists the reasons."""
        state = self._sessions.get(session_id)
        if state is None or not state.records:
            raise KeyError(f"no events for session {session_id:032x}")
        edges, annotations, navtiming, snapshots = [], [], None, []
        for record in state.records.values():
            if isinstance(record, RpcEdgeRecord):
                edges.append(record)
            elif isinstance(record, AnnotationRecord):
                annotations.append(record)
            elif isinstance(record, NavTimingRecord):
                navtiming = record
            else:
                snapshots.append(record)
        edges.sort(key=lambda e: (e.node, e.first_byte.micros, e.direction.value,
                                  e.rpc_id))
        annotations.sort(key=lambda a: (a.node, a.at.micros, a.key))
        snapshots.sort(key=lambda s: (s.connection_id, s.at.micros))

        gaps = assembly_gaps(edges)
        self._last_gaps = {session_id: gaps}
        return SessionTrace(
            session_id=session_id,
            edges=tuple(edges),
            annotations=tuple(annotations),
            navtiming=navtiming,
            tcp_snapshots=tuple(snapshots),
            assembled_complete=not gaps,
        )

    def assembly_gaps(self, session_id: int) -> list[str]:
        state = self._sessions.get(session_id)
        if state is None:
            return []
        edges = [r for r in state.records.values() if isinstance(r, RpcEdgeRecord)]
        return assembly_gaps(edges)

    # -- volume bias ----------------------------------------------------------

    def volume_windows(self, service: str, datacenter: str) -> dict[int, int]:
        return dict(self._volume.get((service, datacenter), {}))

    def volume_bias(self, service: str, datacenter: str, window: int) -> BiasVerdict:
        """Compare a window's observed volume against the expectation from
        prior windows (exponentially weighted mean). Short volume beyond the
        tolerance is a bias: analysis for that window should not trigger."""
        per = self._volume.get((service, datacenter))
        if not per:
            return BiasVerdict(BIAS_UNBIASED, note="untrained")
        prior = sorted(w for w in per if w < window)
        if not prior:
            return BiasVerdict(BIAS_UNBIASED, note="untrained")
        expected = float(per[prior[0]])
        for w in prior[1:]:
            expected = (self.config.ewma_alpha * per[w]
                        + (1.0 - self.config.ewma_alpha) * expected)
        observed = per.get(window, 0)
        if expected > 0 and observed < (1.0 - self.config.bias_tolerance) * expected:
            return BiasVerdict(BIAS_BIASED, deficit_fraction=1.0 - observed / expected)
        return BiasVerdict(BIAS_UNBIASED)

    def biased_windows(self) -> dict[tuple[str, str], list[int]]:
        """Every (service, datacenter) window flagged biased."""
        out: dict[tuple[str, str], list[int]] = {}
        for (service, dc), per in sorted(self._volume.items()):
            flagged = [w for w in sorted(per)
                       if self.volume_bias(service, dc, w).status == BIAS_BIASED]
            if flagged:
                out[(service, dc)] = flagged
        return out

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None


def assembly_gaps(edges: Iterable[RpcEdgeRecord]) -> list[str]:
    """Completeness check: every response_in needs a request_out for the
    same RPC, and every non-root parent id must resolve to some edge."""
    edges = list(edges)
    request_out_ids = {e.rpc_id for e in edges if e.direction is Direction.REQUEST_OUT}
    all_ids = {e.rpc_id for e in edges}
    gaps = []
    seen: set[str] = set()
    for e in sorted(edges, key=lambda e: (e.rpc_id, e.direction.value,
                                          e.first_byte.micros)):
        if e.direction is Direction.RESPONSE_IN and e.rpc_id not in request_out_ids:
            msg = f"response_in without request_out for rpc {e.rpc_id:x}"
            if msg not in seen:
                seen.add(msg)
                gaps.append(msg)
        if e.parent_rpc_id != 0 and e.parent_rpc_id not in all_ids:
            msg = f"rpc {e.rpc_id:x} references missing parent {e.parent_rpc_id:x}"
            if msg not in seen:
                seen.add(msg)
                gaps.append(msg)
    return gaps
