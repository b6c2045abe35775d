"""Byte-exact accounting of tensor buffer lifetimes.

Every tensor allocation and release in the engine reports here exactly once.
The ledger keeps running live-byte counts per category, peak trackers, and
per-step summaries. It never samples or estimates: numbers are derived from
actual buffer sizes at actual alloc/free points, which is what makes the
complexity-model conformance checks meaningful.

Categories are fixed:
  weights, activations, gradients, optimizer_state, dp_buffers, scratch
Phases are fixed:
  forward, backward, clip, optimize
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import LeakError, StateError

CATEGORIES = ("weights", "activations", "gradients", "optimizer_state", "dp_buffers", "scratch")
PHASES = ("forward", "backward", "clip", "optimize")

# Categories that are allowed to stay live between steps and after a run.
PERSISTENT_CATEGORIES = ("weights", "optimizer_state")


@dataclass
class MemEvent:
    tensor_id: int
    nbytes: int
    category: str
    direction: str  # "alloc" or "free"
    step: int
    phase: str


@dataclass
class StepStats:
    step: int
    peak_bytes: int
    peak_by_category: dict[str, int]
    # live bytes sampled at the four phase boundaries, for the mean-live figure
    phase_samples: dict[str, int] = field(default_factory=dict)


@dataclass
class MemReport:
    peak_bytes: int
    peak_by_category: dict[str, int]
    mean_live_bytes: float
    end_live_bytes: int
    end_live_by_category: dict[str, int]
    persistent_bytes: int
    transient_peak_bytes: int
    alloc_count: int
    free_count: int
    alloc_bytes_total: int
    free_bytes_total: int
    steps: list[StepStats] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "peak_bytes": self.peak_bytes,
            "peak_by_category": dict(self.peak_by_category),
            "mean_live_bytes": self.mean_live_bytes,
            "end_live_bytes": self.end_live_bytes,
            "end_live_by_category": dict(self.end_live_by_category),
            "persistent_bytes": self.persistent_bytes,
            "transient_peak_bytes": self.transient_peak_bytes,
            "alloc_count": self.alloc_count,
            "free_count": self.free_count,
            "alloc_bytes_total": self.alloc_bytes_total,
            "free_bytes_total": self.free_bytes_total,
            "per_step": [
                {
                    "step": s.step,
                    "peak_bytes": s.peak_bytes,
                    "peak_by_category": dict(s.peak_by_category),
                    "phase_samples": dict(s.phase_samples),
                }
                for s in self.steps
            ],
        }

    def per_step_csv(self) -> str:
        """Per-step peak table as CSV text."""
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["step", "peak_bytes"] + [f"peak_{c}" for c in CATEGORIES])
        for s in self.steps:
            w.writerow([s.step, s.peak_bytes] + [s.peak_by_category.get(c, 0) for c in CATEGORIES])
        return buf.getvalue()


class MemoryLedger:
    """Tracks live bytes by category with peak and per-step stats.

    record_events=True additionally keeps the full MemEvent list; off by
    default because long runs produce millions of events.
    """

    def __init__(self, record_events: bool = False):
        self.record_events = record_events
        self.events: list[MemEvent] = []
        self._live: dict[int, tuple[int, str]] = {}  # tensor_id -> (nbytes, category)
        self.live_bytes = 0
        self.live_by_category = {c: 0 for c in CATEGORIES}
        self.peak_bytes = 0
        self.peak_by_category = {c: 0 for c in CATEGORIES}
        self.alloc_count = 0
        self.free_count = 0
        self.alloc_bytes_total = 0
        self.free_bytes_total = 0
        self.step = 0
        self.phase = "forward"
        self._in_step = False
        self._step_stats: list[StepStats] = []
        self._cur: StepStats | None = None
        self._live_samples: list[int] = []

    # -- engine hooks ------------------------------------------------------

    def on_alloc(self, tensor_id: int, nbytes: int, category: str) -> None:
        if category not in CATEGORIES:
            raise ValueError(f"unknown ledger category {category!r}")
        if tensor_id in self._live:
            raise StateError(f"tensor id {tensor_id} reported alloc twice")
        self._live[tensor_id] = (nbytes, category)
        self.live_bytes += nbytes
        self.live_by_category[category] += nbytes
        self.alloc_count += 1
        self.alloc_bytes_total += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        if self.live_by_category[category] > self.peak_by_category[category]:
            self.peak_by_category[category] = self.live_by_category[category]
        if self._cur is not None:
            if self.live_bytes > self._cur.peak_bytes:
                self._cur.peak_bytes = self.live_bytes
            if self.live_by_category[category] > self._cur.peak_by_category[category]:
                self._cur.peak_by_category[category] = self.live_by_category[category]
        if self.record_events:
            self.events.append(MemEvent(tensor_id, nbytes, category, "alloc", self.step, self.phase))

    def on_free(self, tensor_id: int) -> None:
        rec = self._live.pop(tensor_id, None)
        if rec is None:
            raise StateError(f"tensor id {tensor_id} freed but not live")
        nbytes, category = rec
        self.live_bytes -= nbytes
        self.live_by_category[category] -= nbytes
        self.free_count += 1
        self.free_bytes_total += nbytes
        if self.record_events:
            self.events.append(MemEvent(tensor_id, nbytes, category, "free", self.step, self.phase))

    # -- phase / step structure -------------------------------------------

    def set_phase(self, phase: str) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        # sample live bytes when leaving a phase: 4 samples per step
        if self._cur is not None and self.phase != phase:
            self._cur.phase_samples[self.phase] = self.live_bytes
        self.phase = phase

    def begin_step(self) -> None:
        if self._in_step:
            raise StateError("begin_step called twice without end_step")
        self._in_step = True
        self.step += 1
        self._cur = StepStats(
            step=self.step,
            peak_bytes=self.live_bytes,
            peak_by_category=dict(self.live_by_category),
        )
        self.phase = "forward"

    def end_step(self) -> None:
        if not self._in_step:
            raise StateError("end_step without begin_step")
        self._cur.phase_samples[self.phase] = self.live_bytes
        self._live_samples.extend(self._cur.phase_samples.values())
        self._step_stats.append(self._cur)
        self._cur = None
        self._in_step = False

    # -- results -----------------------------------------------------------

    def persistent_bytes(self) -> int:
        return sum(self.live_by_category[c] for c in PERSISTENT_CATEGORIES)

    def check_balanced(self, allow_live_categories: tuple[str, ...] = PERSISTENT_CATEGORIES) -> None:
        """Raise LeakError if non-persistent tensors are still live."""
        bad = [
            (tid, nbytes, cat)
            for tid, (nbytes, cat) in sorted(self._live.items())
            if cat not in allow_live_categories
        ]
        if bad:
            head = ", ".join(f"id={t} {c} {b}B" for t, b, c in bad[:20])
            more = "" if len(bad) <= 20 else f" (+{len(bad) - 20} more)"
            raise LeakError(f"{len(bad)} non-persistent tensors still live: {head}{more}")

    def report(self) -> MemReport:
        mean_live = (
            sum(self._live_samples) / len(self._live_samples) if self._live_samples else float(self.live_bytes)
        )
        return MemReport(
            peak_bytes=self.peak_bytes,
            peak_by_category=dict(self.peak_by_category),
            mean_live_bytes=mean_live,
            end_live_bytes=self.live_bytes,
            end_live_by_category=dict(self.live_by_category),
            persistent_bytes=self.persistent_bytes(),
            transient_peak_bytes=self.peak_bytes - self.persistent_bytes(),
            alloc_count=self.alloc_count,
            free_count=self.free_count,
            alloc_bytes_total=self.alloc_bytes_total,
            free_bytes_total=self.free_bytes_total,
            steps=list(self._step_stats),
        )
