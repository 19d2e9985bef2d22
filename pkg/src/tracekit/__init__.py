"""tracekit: per-session performance diagnosis for multi-tier serving
stacks, with a ground-truth simulator for verification."""

from .model import (
    AnnotationRecord,
    CausalRule,
    DiagnosisReport,
    Direction,
    NavTimingRecord,
    ProblemGraph,
    RpcEdgeRecord,
    SessionTrace,
    SyslogMessage,
    TcpSnapshot,
    Template,
    Timestamp,
    TopologySnapshot,
    TraceHeader,
    decode_record,
    encode_record,
    validate_trace,
)
from .api import Tracer, decode_header, encode_header

__version__ = "0.1.0"

__all__ = [
    "AnnotationRecord",
    "CausalRule",
    "DiagnosisReport",
    "Direction",
    "NavTimingRecord",
    "ProblemGraph",
    "RpcEdgeRecord",
    "SessionTrace",
    "SyslogMessage",
    "TcpSnapshot",
    "Template",
    "Timestamp",
    "TopologySnapshot",
    "TraceHeader",
    "Tracer",
    "decode_header",
    "decode_record",
    "encode_header",
    "encode_record",
    "validate_trace",
    "__version__",
]
