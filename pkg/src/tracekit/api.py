"""In-process tracing library called by services at each RPC edge.

Usage mirrors the lifecycle of serving one RPC::

    tracer = Tracer(emitter)
    ctx = tracer.create(in_header, node="dc1/web/h003")
    out = tracer.sendtonext(ctx)          # header for a downstream call
    tracer.recvfromnext(ctx, resp_header) # downstream response arrived
    tracer.annotate(ctx, "lock_wait", "1200us")
    reply = tracer.sendtoprev(ctx)        # respond to the caller
    tracer.close(ctx)

The library is stateless across sessions: everything a node needs lives in
the ``SessionContext`` it holds or rides the wire inside the serialized
header, so no synchronization or session-keyed lookup happens on the hot
path. Emission is asynchronous through an injected sink and never blocks
the caller beyond the enqueue cost.

Edge-emitting calls take optional ``first_byte_at``/``last_byte_at``
microsecond overrides (on the node's clock) for hosts that know the actual
(de)serialization window of the message; by default both are stamped from a
single clock reading at call time. The simulator drives the same API with
explicit windows.
"""

from __future__ import annotations

import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Protocol, Union

from .model import (
    ROOT_PARENT_ID,
    AnnotationRecord,
    Direction,
    RpcEdgeRecord,
    Timestamp,
    TraceHeader,
)

#: fixed-width wire encoding: "s:<32hex>;r:<16hex>;p:<16hex>"
HEADER_LENGTH = 72

EmittedEvent = Union[RpcEdgeRecord, AnnotationRecord]


class UsageError(RuntimeError):
    """API call violated the context lifecycle (closed context, bad key...)."""


class CorrelationError(UsageError):
    """A response arrived that no prior request from this context explains."""


class HeaderDecodeError(ValueError):
    """Malformed wire header; ``offset`` is the first offending byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_header(header: TraceHeader) -> str:
    return (f"s:{header.session_id:032x}"
            f";r:{header.rpc_id:016x}"
            f";p:{header.parent_rpc_id:016x}")


def _hex_field(text: str, start: int, width: int, tag: str) -> int:
    prefix = text[start:start + 2]
    if prefix != tag + ":":
        raise HeaderDecodeError(f"expected {tag!r} field tag", start)
    value = text[start + 2:start + 2 + width]
    if len(value) != width:
        raise HeaderDecodeError(f"truncated {tag} field", start + 2 + len(value))
    for i, c in enumerate(value):
        if c not in "0123456789abcdef":
            raise HeaderDecodeError(f"non-hex digit {c!r} in {tag} field", start + 2 + i)
    return int(value, 16)


def decode_header(text: str) -> TraceHeader:
    """Decode the fixed-width header triple; errors name the byte offset."""
    if len(text) != HEADER_LENGTH:
        raise HeaderDecodeError(
            f"header must be {HEADER_LENGTH} bytes, got {len(text)}",
            min(len(text), HEADER_LENGTH))
    session_id = _hex_field(text, 0, 32, "s")
    if text[34] != ";":
        raise HeaderDecodeError("expected ';' separator", 34)
    rpc_id = _hex_field(text, 35, 16, "r")
    if text[53] != ";":
        raise HeaderDecodeError("expected ';' separator", 53)
    parent_rpc_id = _hex_field(text, 54, 16, "p")
    try:
        return TraceHeader(session_id=session_id, rpc_id=rpc_id,
                           parent_rpc_id=parent_rpc_id)
    except ValueError as exc:
        raise HeaderDecodeError(str(exc), 0) from exc


# ---------------------------------------------------------------------------
# Emitter sinks
# ---------------------------------------------------------------------------

class EmitterSink(Protocol):
    def emit(self, event: EmittedEvent) -> None: ...


class NullEmitter:
    """Discards everything; used for overhead measurement."""

    def emit(self, event: EmittedEvent) -> None:
        pass


class CollectingEmitter:
    """Unbounded in-memory sink; safe for concurrent emitters."""

    def __init__(self) -> None:
        self.records: list[EmittedEvent] = []
        self._lock = threading.Lock()

    def emit(self, event: EmittedEvent) -> None:
        with self._lock:
            self.records.append(event)

    def drain(self) -> list[EmittedEvent]:
        with self._lock:
            out, self.records = self.records, []
            return out


class BoundedQueueEmitter:
    """Bounded queue sink: on overflow the incoming event is dropped and
    counted, never blocking the caller. Downstream ingest tolerates loss."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.dropped = 0
        self.flushes = 0
        self._queue: deque[EmittedEvent] = deque()
        self._lock = threading.Lock()

    def emit(self, event: EmittedEvent) -> None:
        with self._lock:
            if len(self._queue) >= self.capacity:
                self.dropped += 1
            else:
                self._queue.append(event)

    def drain(self) -> list[EmittedEvent]:
        with self._lock:
            out = list(self._queue)
            self._queue.clear()
            return out

    def flush(self) -> None:
        with self._lock:
            self.flushes += 1


class SystemClock:
    """Monotonic clock anchored to wall time at construction."""

    def __init__(self) -> None:
        self._offset_us = time.time_ns() // 1000 - time.monotonic_ns() // 1000

    def now(self) -> int:
        return time.monotonic_ns() // 1000 + self._offset_us


@dataclass
class SessionContext:
    """Per-RPC handle; immutable after create except the ``open`` flag.

    Child-id allocation bookkeeping (the counter and the issued set) is
    context-local, so distinct contexts never synchronize.
    """

    header: TraceHeader
    node: str
    created_at: Timestamp
    open: bool = True
    _child_prefix: int = 0
    _next_child_seq: int = 1
    _issued: set = field(default_factory=set)


class Tracer:
    """Factory and operations for session contexts.

    Holds only process-wide collaborators (sink, clock, id entropy); no
    session-keyed state of any kind.
    """

    def __init__(self, emitter: EmitterSink, clock=None,
                 rng: Optional[random.Random] = None):
        self.emitter = emitter
        self.clock = clock if clock is not None else SystemClock()
        self.rng = rng if rng is not None else random.Random()

    # -- helpers ----------------------------------------------------------

    def _window(self, node: str, first_byte_at: Optional[int],
                last_byte_at: Optional[int]) -> tuple[Timestamp, Timestamp]:
        if first_byte_at is None:
            now = self.clock.now()
            first_byte_at = now
            last_byte_at = now if last_byte_at is None else last_byte_at
        elif last_byte_at is None:
            last_byte_at = first_byte_at
        return (Timestamp(first_byte_at, node), Timestamp(last_byte_at, node))

    @staticmethod
    def _require_open(ctx: SessionContext) -> None:
        if not ctx.open:
            raise UsageError("operation on closed session context")

    def _mint_nonzero(self, bits: int) -> int:
        value = self.rng.getrandbits(bits)
        while value == 0:
            value = self.rng.getrandbits(bits)
        return value

    # -- operations -------------------------------------------------------

    def create(self, in_header: str, node: str, *, peer: str = "",
               payload_bytes: int = 0, first_byte_at: Optional[int] = None,
               last_byte_at: Optional[int] = None) -> SessionContext:
        """Open a context for an incoming RPC and record its request_in edge.

        An empty ``in_header`` marks a session origin: a fresh session id is
        minted and the context carries the root-sentinel parent.
        """
        if in_header:
            header = decode_header(in_header)
        else:
            header = TraceHeader(
                session_id=self._mint_nonzero(128),
                rpc_id=self._mint_nonzero(64),
                parent_rpc_id=ROOT_PARENT_ID,
            )
        first, last = self._window(node, first_byte_at, last_byte_at)
        ctx = SessionContext(header=header, node=node, created_at=first,
                             _child_prefix=self.rng.getrandbits(48))
        self.emitter.emit(RpcEdgeRecord(
            session_id=header.session_id, rpc_id=header.rpc_id,
            parent_rpc_id=header.parent_rpc_id, node=node, peer=peer,
            direction=Direction.REQUEST_IN, first_byte=first, last_byte=last,
            payload_bytes=payload_bytes))
        return ctx

    def _allocate_child(self, ctx: SessionContext) -> int:
        while True:
            seq = ctx._next_child_seq
            if seq > 0xFFFF:
                raise UsageError("child rpc id space exhausted (65535 per context)")
            ctx._next_child_seq = seq + 1
            child = (ctx._child_prefix << 16) | seq
            if child != ctx.header.rpc_id and child != ROOT_PARENT_ID:
                ctx._issued.add(child)
                return child

    def sendtonext(self, ctx: SessionContext, *, peer: str = "",
                   payload_bytes: int = 0, first_byte_at: Optional[int] = None,
                   last_byte_at: Optional[int] = None) -> str:
        """Allocate a child RPC id, emit its request_out edge, and return the
        header to serialize into the outgoing call. Consecutive calls return
        strictly increasing child ids, preserving call order."""
        self._require_open(ctx)
        child = self._allocate_child(ctx)
        first, last = self._window(ctx.node, first_byte_at, last_byte_at)
        self.emitter.emit(RpcEdgeRecord(
            session_id=ctx.header.session_id, rpc_id=child,
            parent_rpc_id=ctx.header.rpc_id, node=ctx.node, peer=peer,
            direction=Direction.REQUEST_OUT, first_byte=first, last_byte=last,
            payload_bytes=payload_bytes))
        return encode_header(TraceHeader(
            session_id=ctx.header.session_id, rpc_id=child,
            parent_rpc_id=ctx.header.rpc_id))

    def recvfromnext(self, ctx: SessionContext, in_header: str, *, peer: str = "",
                     payload_bytes: int = 0, first_byte_at: Optional[int] = None,
                     last_byte_at: Optional[int] = None) -> None:
        """Record the response_in edge for a downstream response.

        The response header echoes the child RPC's ids, so its rpc_id must be
        one this context issued; anything else is a correlation error
        (a response without a matching request). Duplicate responses for the
        same child are accepted: redundant fanout and at-least-once transports
        both produce them legitimately.
        """
        self._require_open(ctx)
        header = decode_header(in_header)
        if header.session_id != ctx.header.session_id:
            raise CorrelationError(
                f"response for foreign session {header.session_id:032x}")
        if header.rpc_id not in ctx._issued:
            raise CorrelationError(
                f"response for child rpc {header.rpc_id:016x} never issued here")
        first, last = self._window(ctx.node, first_byte_at, last_byte_at)
        self.emitter.emit(RpcEdgeRecord(
            session_id=ctx.header.session_id, rpc_id=header.rpc_id,
            parent_rpc_id=ctx.header.rpc_id, node=ctx.node, peer=peer,
            direction=Direction.RESPONSE_IN, first_byte=first, last_byte=last,
            payload_bytes=payload_bytes))

    def sendtoprev(self, ctx: SessionContext, *, peer: str = "",
                   payload_bytes: int = 0, first_byte_at: Optional[int] = None,
                   last_byte_at: Optional[int] = None) -> str:
        """Emit the response_out edge for this RPC and return the header to
        serialize into the reply (an exact echo of the incoming ids)."""
        self._require_open(ctx)
        first, last = self._window(ctx.node, first_byte_at, last_byte_at)
        self.emitter.emit(RpcEdgeRecord(
            session_id=ctx.header.session_id, rpc_id=ctx.header.rpc_id,
            parent_rpc_id=ctx.header.parent_rpc_id, node=ctx.node, peer=peer,
            direction=Direction.RESPONSE_OUT, first_byte=first, last_byte=last,
            payload_bytes=payload_bytes))
        return encode_header(ctx.header)

    def annotate(self, ctx: SessionContext, key: str, value: str, *,
                 at: Optional[int] = None) -> None:
        self._require_open(ctx)
        if not key:
            raise UsageError("annotation key must be non-empty")
        ts = Timestamp(at if at is not None else self.clock.now(), ctx.node)
        self.emitter.emit(AnnotationRecord(
            session_id=ctx.header.session_id, rpc_id=ctx.header.rpc_id,
            node=ctx.node, key=key, value=value, at=ts))

    def close(self, ctx: SessionContext) -> None:
        if not ctx.open:
            raise UsageError("context already closed")
        ctx.open = False
        flush = getattr(self.emitter, "flush", None)
        if flush is not None:
            flush()
