"""Internet-path diagnosis from CDN-side transport snapshots.

Kernel TCP statistics measure the wide-area path as the flow sampled it,
untainted by user-host problems; that isolation is the point. Browser-side
timing alone mixes user-host and path effects.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import TcpSnapshot

BOTTLENECK_INTERNET = "internet"
BOTTLENECK_CDN_BACKEND = "cdn_backend"


class ZeroSrttError(ValueError):
    """RTT variation is undefined for a zero smoothed RTT."""


@dataclass(frozen=True)
class RpcLatencyDecomposition:
    """First-byte delay split into user, CDN, backend, and retransmission
    components, all microseconds. ``delta_be_us`` is zero on a cache hit."""

    delta_fb_us: int
    delta_cdn_us: int
    delta_be_us: int
    delta_rto_us: int
    cache_hit: bool

    def __post_init__(self) -> None:
        for name in ("delta_fb_us", "delta_cdn_us", "delta_be_us", "delta_rto_us"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def rtt_variation(snapshot: TcpSnapshot) -> float:
    """Path-stability indicator: RTT variance over smoothed RTT."""
    if snapshot.srtt_us <= 0:
        raise ZeroSrttError(f"srtt_us must be positive, got {snapshot.srtt_us}")
    return snapshot.rttvar_us / snapshot.srtt_us


def classify_bottleneck(decomp: RpcLatencyDecomposition,
                        snapshot: TcpSnapshot) -> str:
    """Split RPCs into Internet-bottlenecked vs CDN/backend-bottlenecked.

    The path component is the smoothed RTT plus retransmission-attributed
    delay (one RTO per retransmitted segment, capped at the first-byte gap
    left after server components); the server component is CDN plus backend
    time. The larger side wins; ties go to the server side so the verdict
    is deterministic.
    """
    observed_gap = max(0, decomp.delta_fb_us - decomp.delta_cdn_us - decomp.delta_be_us)
    retrans_delay = min(snapshot.retrans_segments * snapshot.rto_us, observed_gap)
    path_component = snapshot.srtt_us + retrans_delay
    server_component = decomp.delta_cdn_us + decomp.delta_be_us
    if path_component > server_component:
        return BOTTLENECK_INTERNET
    return BOTTLENECK_CDN_BACKEND


def download_stack_bound(decomp: RpcLatencyDecomposition) -> int:
    """Lower bound on user-host download-stack latency: first-byte delay
    minus server components and the RTO as a conservative path estimate,
    truncated at zero."""
    bound = (decomp.delta_fb_us - decomp.delta_cdn_us - decomp.delta_be_us
             - decomp.delta_rto_us)
    return max(0, bound)
