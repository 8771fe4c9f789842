"""Event sink, run statistics and tree export.

Events are appended under a lock, so executors running on other threads may
emit too. On disk a log is JSON lines, one event per line, ordered by
``(at, seq)``.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .scheduler import ScheduleTrace, makespan
from .tree import NodeState, ResearchTree, RunStats

SCHEMA_VERSION = 1


class IntegrityError(Exception):
    pass


class EventKind(str, Enum):
    SPAWNED = "Spawned"
    EXECUTION_STARTED = "ExecutionStarted"
    EXECUTION_FINISHED = "ExecutionFinished"
    PLANNED = "Planned"
    MONITOR_TICK = "MonitorTick"
    TERMINATED = "Terminated"
    PRUNED = "Pruned"
    INTERRUPTED = "Interrupted"
    BUDGET_CUTOFF = "BudgetCutoff"
    COMPLETED = "Completed"


@dataclass(frozen=True)
class OrchestrationEvent:
    at: float
    node: str
    kind: EventKind
    payload: Dict[str, Any] = field(default_factory=dict)
    seq: int = 0

    def to_dict(self) -> dict:
        return {"seq": self.seq, "at": round(self.at, 6), "node": self.node,
                "kind": self.kind.value, "payload": self.payload}

    @classmethod
    def from_dict(cls, d: dict) -> "OrchestrationEvent":
        return cls(d["at"], d["node"], EventKind(d["kind"]), d.get("payload", {}), d.get("seq", 0))


@dataclass
class TraceLog:
    events: List[OrchestrationEvent] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def of_kind(self, kind: EventKind) -> List[OrchestrationEvent]:
        return [e for e in self.events if e.kind == kind]

    def for_node(self, node: str) -> List[OrchestrationEvent]:
        return [e for e in self.events if e.node == node]

    def ordered(self) -> List[OrchestrationEvent]:
        return sorted(self.events, key=lambda e: (e.at, e.seq))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.ordered())

    @classmethod
    def from_jsonl(cls, text: str) -> "TraceLog":
        return cls([OrchestrationEvent.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()])


class EventSink:
    """Append-only collector. With ``path`` set, events are also flushed to a
    JSON-lines file whenever ``buffer_size`` unflushed events accumulate."""

    def __init__(self, path: Optional[Union[str, Path]] = None, buffer_size: int = 256):
        self.log = TraceLog()
        self.path = Path(path) if path else None
        self.buffer_size = buffer_size
        self._lock = threading.Lock()
        self._seq = 0
        self._flushed = 0
        if self.path is not None:
            self.path.write_text("")

    def record(self, event: OrchestrationEvent) -> OrchestrationEvent:
        with self._lock:
            if event.seq != self._seq:
                event = OrchestrationEvent(event.at, event.node, event.kind, event.payload, self._seq)
            self._seq += 1
            self.log.events.append(event)
            pending = len(self.log.events) - self._flushed
        if self.path is not None and pending >= self.buffer_size:
            self.flush()
        return event

    def emit(self, at: float, node: str, kind: EventKind, **payload: Any) -> OrchestrationEvent:
        return self.record(OrchestrationEvent(at, node, kind, payload))

    def flush(self) -> None:
        if self.path is None:
            return
        with self._lock:
            batch = self.log.events[self._flushed:]
            self._flushed = len(self.log.events)
        with self.path.open("a") as fh:
            for e in batch:
                fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def record(sink: EventSink, event: OrchestrationEvent) -> OrchestrationEvent:
    return sink.record(event)


def diff_logs(a: TraceLog, b: TraceLog) -> Optional[int]:
    """Index of the first differing serialized event, or None if identical."""
    la, lb = a.to_jsonl().splitlines(), b.to_jsonl().splitlines()
    for i, (x, y) in enumerate(zip(la, lb)):
        if x != y:
            return i
    return None if len(la) == len(lb) else min(len(la), len(lb))


_STARTED_CLOSERS = {EventKind.EXECUTION_FINISHED, EventKind.INTERRUPTED, EventKind.PRUNED, EventKind.TERMINATED}


def compute_stats(log: TraceLog, tree: ResearchTree, trace: Optional[ScheduleTrace] = None,
                  sequential_trace: Optional[ScheduleTrace] = None) -> RunStats:
    if not any(e.kind == EventKind.COMPLETED and e.node == tree.root for e in log):
        raise IntegrityError("log has no run-completion event")
    open_exec = set()
    for e in log.ordered():
        if e.kind == EventKind.EXECUTION_STARTED:
            open_exec.add(e.node)
        elif e.kind in _STARTED_CLOSERS:
            open_exec.discard(e.node)
    if open_exec:
        raise IntegrityError(f"executions never closed: {sorted(open_exec)}")

    stats = tree.stats()
    times = [e.at for e in log]
    stats.wall_latency = (max(times) - min(times)) if times else 0.0
    stats.research_processed = sum(1 for e in log.of_kind(EventKind.EXECUTION_FINISHED))
    if trace is not None and sequential_trace is not None:
        stats.speedup_vs_sequential = speedup(sequential_trace, trace)
    return stats


def speedup(sequential: ScheduleTrace, other: ScheduleTrace) -> float:
    return makespan(sequential) / makespan(other)


# -- tree export --------------------------------------------------------------

def _dot_escape(text: str, limit: int = 60) -> str:
    text = text if len(text) <= limit else text[: limit - 3] + "..."
    return text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")


def snapshot_to_dot(snapshot: dict) -> str:
    """DOT for a ``ResearchTree.snapshot()`` document."""
    lines = ["digraph research_tree {", "  rankdir=TB;"]
    for n in snapshot["nodes"]:
        attrs = [f'label="{_dot_escape(n["id"] + ": " + n["query"])}"',
                 "shape=box" if n["kind"] == "planning" else "shape=ellipse"]
        if n["state"] == NodeState.TERMINATED.value:
            attrs.append("style=dashed")
        lines.append(f'  "{n["id"]}" [{", ".join(attrs)}];')
    for n in snapshot["nodes"]:
        for cid in n["children"]:
            lines.append(f'  "{n["id"]}" -> "{cid}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def tree_to_dot(tree: ResearchTree) -> str:
    return snapshot_to_dot(tree.snapshot())


def export_tree(tree: ResearchTree, format: str = "json") -> str:
    if format == "json":
        return json.dumps(tree.snapshot(), indent=2, sort_keys=True) + "\n"
    if format == "dot":
        return tree_to_dot(tree)
    raise ValueError(f"unknown tree format {format!r}")


def write_json(path: Union[str, Path], obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def stats_dict(stats: RunStats) -> dict:
    return {"schema": SCHEMA_VERSION, **stats.to_dict()}


__all__ = ["EventKind", "OrchestrationEvent", "TraceLog", "EventSink", "IntegrityError", "record",
           "compute_stats", "export_tree", "tree_to_dot", "snapshot_to_dot", "diff_logs", "speedup", "stats_dict"]
