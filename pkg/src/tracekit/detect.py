"""Session-level problem detection against historic IQR baselines, plus
user-side content diagnosis.

Baselines are conditioned on pre-defined confounders (a baseline key is an
ordered tuple such as page attribute, user cluster, hour-of-day bucket);
sessions under different keys never share history. A session is flagged
high when its latency exceeds ``q3 + k*IQR`` and low below ``q1 - k*IQR``.
Both directions are reported: unusually fast sessions are as informative as
slow ones.

Quartiles use linear interpolation between order statistics over a bounded
FIFO reservoir of recent samples, recomputed exactly on every update.
"""

from __future__ import annotations

import bisect
import json
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .model import ContentFinding, NavTimingRecord

FLAG_NORMAL = "normal"
FLAG_HIGH = "high"
FLAG_LOW = "low"
FLAG_INSUFFICIENT = "insufficient_data"

BaselineKey = tuple[str, ...]


class ZeroOnloadError(ValueError):
    """Content fractions are undefined for a zero page-load time."""


@dataclass(frozen=True)
class DetectorConfig:
    iqr_k: float = 1.5
    min_samples: int = 20
    content_threshold: float = 0.25
    reservoir: int = 4096
    key_arity: int = 3


@dataclass(frozen=True)
class Baseline:
    key: BaselineKey
    q1: float
    q3: float
    n: int


@dataclass(frozen=True)
class Detection:
    flag: str
    latency: float
    baseline: Optional[Baseline]
    low_fence: Optional[float]
    high_fence: Optional[float]


def quantile(sorted_values, p: float) -> float:
    """Linear-interpolation quantile (h = (n-1)p) over pre-sorted values."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("quantile of empty history")
    h = (n - 1) * p
    lo = int(h)
    frac = h - lo
    if lo + 1 >= n:
        return float(sorted_values[-1])
    return sorted_values[lo] + frac * (sorted_values[lo + 1] - sorted_values[lo])


class BaselineStore:
    """Keyed latency histories with exact streaming quartiles.

    Each key holds a FIFO reservoir (oldest evicted on overflow) and a
    parallel sorted array, so quartiles always equal a brute-force sort of
    the retained window.
    """

    def __init__(self, config: DetectorConfig = DetectorConfig()):
        self.config = config
        self._windows: dict[BaselineKey, deque] = {}
        self._sorted: dict[BaselineKey, list] = {}

    def _check_key(self, key: BaselineKey) -> BaselineKey:
        key = tuple(key)
        if len(key) != self.config.key_arity:
            raise ValueError(
                f"baseline key arity {len(key)} != configured {self.config.key_arity}")
        return key

    def update_baseline(self, key: BaselineKey, latency: float) -> None:
        key = self._check_key(key)
        if latency <= 0:
            raise ValueError(f"latency must be positive, got {latency}")
        window = self._windows.get(key)
        if window is None:
            window = self._windows[key] = deque()
            self._sorted[key] = []
        ordered = self._sorted[key]
        if len(window) >= self.config.reservoir:
            oldest = window.popleft()
            del ordered[bisect.bisect_left(ordered, oldest)]
        window.append(latency)
        bisect.insort(ordered, latency)

    def quartiles(self, key: BaselineKey) -> tuple[float, float, int]:
        key = self._check_key(key)
        ordered = self._sorted.get(key)
        if not ordered:
            raise KeyError(f"no history for key {key}")
        return quantile(ordered, 0.25), quantile(ordered, 0.75), len(ordered)

    def baseline(self, key: BaselineKey) -> Optional[Baseline]:
        key = self._check_key(key)
        if not self._sorted.get(key):
            return None
        q1, q3, n = self.quartiles(key)
        return Baseline(key=key, q1=q1, q3=q3, n=n)

    def detect_session(self, key: BaselineKey, observed_latency: float) -> Detection:
        """IQR-fence verdict: high above ``q3 + k*IQR``, low below
        ``q1 - k*IQR``, insufficient_data under the sample floor."""
        key = self._check_key(key)
        base = self.baseline(key)
        if base is None or base.n < self.config.min_samples:
            return Detection(FLAG_INSUFFICIENT, observed_latency, base, None, None)
        iqr = base.q3 - base.q1
        high_fence = base.q3 + self.config.iqr_k * iqr
        low_fence = base.q1 - self.config.iqr_k * iqr
        if observed_latency > high_fence:
            flag = FLAG_HIGH
        elif observed_latency < low_fence:
            flag = FLAG_LOW
        else:
            flag = FLAG_NORMAL
        return Detection(flag, observed_latency, base, low_fence, high_fence)

    # -- persistence (JSONL, one key per line) -----------------------------

    def dump_jsonl(self) -> str:
        lines = []
        for key in sorted(self._windows):
            lines.append(json.dumps(
                {"key": list(key), "window": list(self._windows[key])},
                sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def load_jsonl(cls, text: str,
                   config: DetectorConfig = DetectorConfig()) -> "BaselineStore":
        store = cls(config)
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            key = tuple(str(k) for k in obj["key"])
            for value in obj["window"]:
                store.update_baseline(key, float(value))
        return store


def content_diagnosis(nav: NavTimingRecord, *,
                      threshold: float = 0.25) -> list[ContentFinding]:
    """Per-event share of page load time; user-side events form a serial
    causal chain, so every event is on the user-side critical path."""
    if nav.onload_ms <= 0:
        raise ZeroOnloadError(f"onload_ms must be positive, got {nav.onload_ms}")
    onload_us = nav.onload_ms * 1000
    findings = []
    for ev in nav.events:
        duration = ev.end.micros - ev.start.micros
        fraction = duration / onload_us
        findings.append(ContentFinding(
            event=ev.name, duration_us=duration, fraction=fraction,
            significant=fraction >= threshold))
    return findings
