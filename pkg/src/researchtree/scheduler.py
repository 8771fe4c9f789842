"""Global task pool with parent-completion gating.

Tasks enter the pool as soon as they are known. A task whose parent has not
finished its work waits in ``Blocked``; when the parent completes, all of its
blocked children become ``Ready`` in one step. Ready tasks are dispatched in
submission order, subject to the scheduling mode and the worker limit:

* ``Sequential``: one task in flight at a time.
* ``LayerParallel``: only tasks at the shallowest unfinished depth may run.
* ``Pooled``: any ready task runs as soon as a worker is free.

The pool runs on whatever event loop is current, so it works unchanged with
:class:`~researchtree.clock.VirtualClock` and real time.
"""

from __future__ import annotations

import asyncio
import heapq
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Awaitable, Callable, Dict, Iterable, List, Optional

from .clock import Clock, VirtualClock


class SchedulerError(Exception):
    pass


class DuplicateTask(SchedulerError):
    pass


class UnknownTask(SchedulerError, KeyError):
    pass


class TaskStatus(str, Enum):
    BLOCKED = "Blocked"
    READY = "Ready"
    DISPATCHED = "Dispatched"
    DONE = "Done"
    CANCELLED = "Cancelled"


_TERMINAL = (TaskStatus.DONE, TaskStatus.CANCELLED)


class SchedulingMode(str, Enum):
    SEQUENTIAL = "sequential"
    LAYER_PARALLEL = "layer"
    POOLED = "pooled"

    @classmethod
    def parse(cls, value: "str | SchedulingMode") -> "SchedulingMode":
        if isinstance(value, cls):
            return value
        aliases = {"layerparallel": "layer", "layer_parallel": "layer", "layer-parallel": "layer"}
        return cls(aliases.get(value.lower(), value.lower()))


class CancelToken:
    """Cooperative interruption signal handed to each dispatched task."""

    def __init__(self) -> None:
        self._cancelled = False
        self._event: Optional[asyncio.Event] = None

    @property
    def cancelled(self) -> bool:
        return self._cancelled

    def cancel(self) -> None:
        self._cancelled = True
        if self._event is not None:
            self._event.set()

    async def wait(self) -> None:
        if self._event is None:
            self._event = asyncio.Event()
            if self._cancelled:
                self._event.set()
        await self._event.wait()

    async def sleep(self, clock: Clock, seconds: float) -> bool:
        """Sleep for ``seconds`` unless cancelled first. True if cancelled."""
        if self._cancelled:
            return True
        sleeper = asyncio.ensure_future(clock.sleep(seconds))
        waiter = asyncio.ensure_future(self.wait())
        try:
            await asyncio.wait({sleeper, waiter}, return_when=asyncio.FIRST_COMPLETED)
        finally:
            for t in (sleeper, waiter):
                if not t.done():
                    t.cancel()
            await asyncio.gather(sleeper, waiter, return_exceptions=True)
        return self._cancelled


@dataclass
class Task:
    task_id: str
    parent_id: Optional[str] = None
    depth: int = 0
    query: str = ""
    duration: float = 0.0
    status: TaskStatus = TaskStatus.BLOCKED
    start: Optional[float] = None
    end: Optional[float] = None
    seq: int = -1
    token: CancelToken = field(default_factory=CancelToken, repr=False)


@dataclass(frozen=True)
class TraceEntry:
    task_id: str
    parent_id: Optional[str]
    depth: int
    start: Optional[float]
    end: Optional[float]
    status: str

    def to_dict(self) -> dict:
        ms = lambda t: None if t is None else int(round(t * 1000))  # noqa: E731
        return {"task_id": self.task_id, "parent_id": self.parent_id, "depth": self.depth,
                "start_ms": ms(self.start), "end_ms": ms(self.end), "status": self.status}


class ScheduleTrace(list):
    """Ordered ``TraceEntry`` list (dispatch order, then never-dispatched tasks)."""

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self)

    @classmethod
    def from_jsonl(cls, text: str) -> "ScheduleTrace":
        out = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            sec = lambda v: None if v is None else v / 1000.0  # noqa: E731
            out.append(TraceEntry(d["task_id"], d.get("parent_id"), d.get("depth", 0),
                                  sec(d.get("start_ms")), sec(d.get("end_ms")), d["status"]))
        return out

    def makespan(self) -> float:
        return makespan(self)


def makespan(trace: Iterable[TraceEntry]) -> float:
    ran = [e for e in trace if e.start is not None and e.end is not None]
    if not ran:
        raise SchedulerError("makespan of an empty trace")
    return max(e.end for e in ran) - min(e.start for e in ran)


Work = Callable[[Task, CancelToken], Awaitable[Any]]


class TaskPool:
    def __init__(self, mode: SchedulingMode = SchedulingMode.POOLED, worker_limit: Optional[int] = None,
                 clock: Optional[Clock] = None,
                 on_dispatch: Optional[Callable[[Task], None]] = None,
                 on_ready: Optional[Callable[[Task], None]] = None,
                 on_finish: Optional[Callable[[Task, Any, Optional[BaseException]], None]] = None):
        self.mode = SchedulingMode.parse(mode)
        self.worker_limit = worker_limit
        self.clock: Clock = clock or VirtualClock()
        self.on_dispatch = on_dispatch
        self.on_ready = on_ready
        # Runs before the task is marked Done, i.e. before children are released.
        self.on_finish = on_finish
        self.tasks: Dict[str, Task] = {}
        self._work: Dict[str, Optional[Work]] = {}
        self._children: Dict[str, List[str]] = defaultdict(list)
        self._ready: Dict[int, List[tuple]] = defaultdict(list)  # depth -> heap of (seq, id)
        self._live_by_depth: Counter = Counter()
        self._running: Dict[str, asyncio.Task] = {}
        self._waiters: Dict[str, List[asyncio.Future]] = defaultdict(list)
        self._results: Dict[str, Any] = {}
        self._dispatch_order: List[str] = []
        self._idle: Optional[asyncio.Event] = None
        self._seq = 0
        self.closed = False
        self.max_in_flight = 0
        self._loop: Optional[asyncio.AbstractEventLoop] = None

    # -- submission --------------------------------------------------------

    def submit(self, task: Task, work: Optional[Work] = None) -> None:
        if task.task_id in self.tasks:
            raise DuplicateTask(task.task_id)
        parent = None
        if task.parent_id is not None:
            parent = self.tasks.get(task.parent_id)
            if parent is None:
                raise UnknownTask(f"parent {task.parent_id} of {task.task_id} was never submitted")
        task.seq = self._seq
        self._seq += 1
        self.tasks[task.task_id] = task
        self._work[task.task_id] = work
        if parent is not None:
            self._children[parent.task_id].append(task.task_id)
        if self.closed or (parent is not None and parent.status == TaskStatus.CANCELLED):
            task.status = TaskStatus.CANCELLED
            self._finalize(task.task_id, None)
            return
        self._live_by_depth[task.depth] += 1
        if parent is None or parent.status == TaskStatus.DONE:
            self._make_ready(task)
        else:
            task.status = TaskStatus.BLOCKED
        self._pump()

    def _make_ready(self, task: Task) -> None:
        task.status = TaskStatus.READY
        heapq.heappush(self._ready[task.depth], (task.seq, task.task_id))
        if self.on_ready is not None:
            self.on_ready(task)

    # -- dispatch ----------------------------------------------------------

    def _loop_running(self) -> bool:
        try:
            self._loop = asyncio.get_running_loop()
            return True
        except RuntimeError:
            return False

    def call_threadsafe(self, fn: Callable[..., Any], *args: Any) -> None:
        """Run a pool method (``submit``, ``cancel_subtree``...) from another thread.

        The pool itself is confined to its event loop; this hands the call over."""
        if self._loop is None:
            raise SchedulerError("pool has not started on an event loop yet")
        self._loop.call_soon_threadsafe(fn, *args)

    def _next_candidate(self) -> Optional[str]:
        for depth in list(self._ready):
            heap = self._ready[depth]
            while heap and self.tasks[heap[0][1]].status != TaskStatus.READY:
                heapq.heappop(heap)
            if not heap:
                del self._ready[depth]
        if not self._ready:
            return None
        if self.mode == SchedulingMode.LAYER_PARALLEL:
            layer = min(d for d, n in self._live_by_depth.items() if n > 0)
            heap = self._ready.get(layer)
            return heap[0][1] if heap else None
        return min(h[0] for h in self._ready.values())[1]

    def _has_capacity(self) -> bool:
        if self.mode == SchedulingMode.SEQUENTIAL:
            return not self._running
        return self.worker_limit is None or len(self._running) < self.worker_limit

    def _pump(self) -> None:
        if self.closed or not self._loop_running():
            return
        while self._has_capacity():
            tid = self._next_candidate()
            if tid is None:
                return
            heapq.heappop(self._ready[self.tasks[tid].depth])
            self._dispatch(self.tasks[tid])

    def _dispatch(self, task: Task) -> None:
        task.status = TaskStatus.DISPATCHED
        task.start = self.clock.now()
        self._dispatch_order.append(task.task_id)
        self._running[task.task_id] = asyncio.ensure_future(self._run(task))
        self.max_in_flight = max(self.max_in_flight, len(self._running))
        if self.on_dispatch is not None:
            self.on_dispatch(task)

    async def _default_work(self, task: Task, token: CancelToken) -> bool:
        return await token.sleep(self.clock, task.duration)

    async def _run(self, task: Task) -> None:
        work = self._work[task.task_id] or self._default_work
        result: Any = None
        error: Optional[BaseException] = None
        try:
            result = await work(task, task.token)
        except asyncio.CancelledError:
            raise
        except Exception as exc:  # surfaced to waiters
            error = exc
        task.end = self.clock.now()
        del self._running[task.task_id]
        if self.on_finish is not None:
            self.on_finish(task, result, error)
        if task.status == TaskStatus.DISPATCHED:
            self._complete(task)
        self._finalize(task.task_id, result, error)
        self._pump()

    # -- completion and cancellation --------------------------------------

    def notify_complete(self, task_id: str) -> None:
        task = self.tasks.get(task_id)
        if task is None:
            raise UnknownTask(task_id)
        if task.status in _TERMINAL:
            return
        if task.status != TaskStatus.DISPATCHED:
            raise SchedulerError(f"{task_id} is {task.status.value}, not Dispatched")
        self._complete(task)
        self._pump()

    def _complete(self, task: Task) -> None:
        task.status = TaskStatus.DONE
        if task.end is None:
            task.end = self.clock.now()
        self._live_by_depth[task.depth] -= 1
        for cid in self._children.get(task.task_id, ()):
            child = self.tasks[cid]
            if child.status == TaskStatus.BLOCKED:
                self._make_ready(child)
        self._check_idle()

    def cancel_subtree(self, task_id: str) -> List[str]:
        if task_id not in self.tasks:
            raise UnknownTask(task_id)
        cancelled: List[str] = []
        frontier = [task_id]
        while frontier:
            tid = frontier.pop(0)
            task = self.tasks[tid]
            if task.status not in _TERMINAL:
                self._cancel_one(task)
                cancelled.append(tid)
            frontier.extend(self._children.get(tid, ()))
        self._pump()
        return cancelled

    def _cancel_one(self, task: Task) -> None:
        was_dispatched = task.status == TaskStatus.DISPATCHED
        task.status = TaskStatus.CANCELLED
        task.token.cancel()
        self._live_by_depth[task.depth] -= 1
        if not was_dispatched:
            self._finalize(task.task_id, None)
        self._check_idle()

    def close(self) -> List[str]:
        """Cancel every live task and refuse further dispatch (budget cutoff)."""
        self.closed = True
        cancelled = []
        for task in sorted(self.tasks.values(), key=lambda t: t.seq):
            if task.status not in _TERMINAL:
                self._cancel_one(task)
                cancelled.append(task.task_id)
        return cancelled

    # -- waiting -----------------------------------------------------------

    def _finalize(self, task_id: str, result: Any, error: Optional[BaseException] = None) -> None:
        self._results[task_id] = error if error is not None else result
        for fut in self._waiters.pop(task_id, ()):
            if fut.done():
                continue
            if error is not None:
                fut.set_exception(error)
            else:
                fut.set_result(result)
        self._check_idle()

    async def wait(self, task_id: str) -> Any:
        """Result of the task's work; ``None`` if cancelled before dispatch."""
        if task_id not in self.tasks:
            raise UnknownTask(task_id)
        if task_id in self._results:
            res = self._results[task_id]
            if isinstance(res, Exception):
                raise res
            return res
        fut = asyncio.get_running_loop().create_future()
        self._waiters[task_id].append(fut)
        return await fut

    def live(self) -> int:
        return sum(1 for t in self.tasks.values() if t.status not in _TERMINAL) + len(self._running)

    def _check_idle(self) -> None:
        if self._idle is not None and self.live() == 0:
            self._idle.set()

    async def join(self) -> None:
        """Start dispatching (if not yet) and wait until nothing is live."""
        self._pump()
        if self.live() == 0:
            return
        self._idle = asyncio.Event()
        await self._idle.wait()
        self._idle = None

    def status(self, task_id: str) -> TaskStatus:
        if task_id not in self.tasks:
            raise UnknownTask(task_id)
        return self.tasks[task_id].status

    def trace(self) -> ScheduleTrace:
        out = ScheduleTrace()
        order = self._dispatch_order + [t.task_id for t in sorted(self.tasks.values(), key=lambda t: t.seq)
                                        if t.start is None]
        for tid in order:
            t = self.tasks[tid]
            out.append(TraceEntry(t.task_id, t.parent_id, t.depth, t.start, t.end, t.status.value))
        return out


def submit(pool: TaskPool, task: Task, work: Optional[Work] = None) -> None:
    pool.submit(task, work)


def notify_complete(pool: TaskPool, task_id: str) -> None:
    pool.notify_complete(task_id)


def cancel_subtree(pool: TaskPool, task_id: str) -> List[str]:
    return pool.cancel_subtree(task_id)


def run_to_completion(pool: TaskPool, mode: "SchedulingMode | str", clock: Optional[Clock] = None) -> ScheduleTrace:
    """Drive a pool of pre-submitted tasks until every task is terminal."""
    pool.mode = SchedulingMode.parse(mode)
    pool.clock = clock or VirtualClock()
    pool.clock.run(pool.join())
    return pool.trace()


def fixture_pool(spec: Iterable[tuple], worker_limit: Optional[int] = None,
                 clock: Optional[Clock] = None) -> TaskPool:
    """Build a pool from ``(task_id, parent_id, duration)`` tuples; depth is inferred."""
    pool = TaskPool(worker_limit=worker_limit, clock=clock)
    depth: Dict[Optional[str], int] = {None: 0}
    for tid, parent, duration in spec:
        depth[tid] = depth[parent] + 1
        pool.submit(Task(tid, parent, depth[tid], tid, float(duration)))
    return pool
