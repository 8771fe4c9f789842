"""Real-time orchestration of a research tree.

Every research node gets one orchestrator coroutine which

1. submits the node's execution to the global task pool (interruptible),
2. plans child queries concurrently and launches a child orchestrator for each
   planned subquery right away (the pool holds their execution until this
   node's own execution has finished),
3. runs a monitor that scores the subtree every ``eval_interval`` seconds and,
   once both scores clear their thresholds, interrupts the node and prunes all
   of its descendants, and
4. returns when its own work and every child subtree are finished.

A separate watcher enforces the global time budget: at the deadline every live
task is interrupted, every monitor is stopped and synthesis runs on whatever was
gathered.
"""

from __future__ import annotations

import asyncio
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .clock import Clock, VirtualClock
from .executor import ExecutionOutcome, Executor, SimExecutor
from .policy import (OrchestrationVerdict, PolicyBackend, ScriptedPolicy, decide_depth,
                     evaluate_progress, plan_breadth)
from .scenario import Scenario
from .scheduler import CancelToken, ScheduleTrace, SchedulingMode, Task, TaskPool, TaskStatus
from .synthesis import Report, Synthesizer, synthesize
from .telemetry import EventKind, EventSink, TraceLog
from .tree import (ROOT_ID, ContextItem, Finding, NodeId, NodeState, ResearchNode,
                   ResearchTree, TreeConfig)

logger = logging.getLogger(__name__)


@dataclass
class MonitorHandle:
    node: NodeId
    next_eval_at: float
    should_terminate: bool = False
    last_verdict: Optional[OrchestrationVerdict] = None
    closed: bool = False
    wake: asyncio.Event = field(default_factory=asyncio.Event, repr=False)

    def terminate(self) -> None:
        self.should_terminate = True
        self.wake.set()


@dataclass
class RunBudget:
    started_at: float
    t_max: float

    @property
    def deadline(self) -> float:
        return self.started_at + self.t_max


@dataclass
class RunResult:
    tree: ResearchTree
    log: TraceLog
    trace: ScheduleTrace
    contexts: Dict[str, ContextItem]
    findings: Dict[str, Finding]
    report: Report
    budget_cutoff: bool
    started_at: float
    ended_at: float
    mode: SchedulingMode

    @property
    def query(self) -> str:
        return self.tree.node(ROOT_ID).query

    def research_completed(self) -> int:
        """Research nodes whose execution finished inside the budget."""
        return len(self.log.of_kind(EventKind.EXECUTION_FINISHED))


class Orchestrator:
    def __init__(self, tree: ResearchTree, policy: PolicyBackend, executor: Executor, clock: Clock,
                 sink: Optional[EventSink] = None, mode: SchedulingMode = SchedulingMode.POOLED,
                 synthesizer: Optional[Synthesizer] = None):
        self.tree = tree
        self.config = tree.config
        self.policy = policy
        self.executor = executor
        self.clock = clock
        self.sink = sink or EventSink()
        self.synthesizer = synthesizer
        self.pool = TaskPool(mode, tree.config.worker_limit, clock, on_dispatch=self._on_dispatch,
                             on_ready=self._on_ready, on_finish=self._on_finish)
        self.handles: Dict[NodeId, MonitorHandle] = {}
        self.children: Dict[NodeId, List[asyncio.Task]] = {}
        self.exec_closed: Dict[NodeId, bool] = {}
        self.budget: Optional[RunBudget] = None
        self.cutoff = False

    # -- helpers -----------------------------------------------------------

    def emit(self, node: NodeId, kind: EventKind, **payload: Any) -> None:
        self.sink.emit(self.clock.now(), node, kind, **payload)

    def _wake(self, node_id: Optional[NodeId]) -> None:
        h = self.handles.get(node_id) if node_id else None
        if h is not None:
            h.wake.set()

    def _research_parent(self, node_id: NodeId) -> Optional[NodeId]:
        planner = self.tree.node(node_id).parent
        return self.tree.node(planner).parent if planner else None

    def _stopped(self, handle: MonitorHandle) -> bool:
        return handle.should_terminate or self.cutoff

    # -- pool hooks (synchronous, run inside the pool's bookkeeping) -------

    def _on_ready(self, task: Task) -> None:
        node = self.tree.nodes.get(task.task_id)
        if node is not None and node.state == NodeState.PENDING:
            self.tree.set_state(task.task_id, NodeState.ELIGIBLE)

    def _on_dispatch(self, task: Task) -> None:
        self.tree.set_state(task.task_id, NodeState.RUNNING)
        self.emit(task.task_id, EventKind.EXECUTION_STARTED)

    def _on_finish(self, task: Task, result: Any, error: Optional[BaseException]) -> None:
        nid = task.task_id
        node = self.tree.research(nid)
        self.exec_closed[nid] = True
        if error is not None:
            node.error = f"{type(error).__name__}: {error}"
            if node.state == NodeState.RUNNING:
                self.tree.set_state(nid, NodeState.COMPLETED)
            self.emit(nid, EventKind.EXECUTION_FINISHED, error=node.error, n_contexts=0, n_findings=0)
        elif isinstance(result, ExecutionOutcome):
            if node.state != NodeState.TERMINATED and (result.contexts or result.findings):
                self.tree.record_results(nid, result.contexts, result.findings)
            if result.interrupted:
                # Pruned nodes already logged Pruned; cutoff/self-stop logged Interrupted.
                if node.state == NodeState.RUNNING:
                    self.tree.set_state(nid, NodeState.INTERRUPTED)
                    self.emit(nid, EventKind.INTERRUPTED, reason="cancelled")
            else:
                if node.state == NodeState.RUNNING:
                    self.tree.set_state(nid, NodeState.COMPLETED)
                self.emit(nid, EventKind.EXECUTION_FINISHED, n_contexts=len(result.contexts),
                          n_findings=len(result.findings), elapsed=round(result.elapsed, 6))
        self._wake(nid)

    async def _work(self, task: Task, token: CancelToken) -> ExecutionOutcome:
        node = self.tree.research(task.task_id)
        return await self.executor.execute(node.query, node.id, node.depth, token)

    # -- per-node orchestration ---------------------------------------------

    async def orchestrate_node(self, node_id: NodeId) -> Tuple[Dict[str, ContextItem], Dict[str, Finding]]:
        node = self.tree.research(node_id)
        if node.state.terminal or self.cutoff:
            return dict(node.contexts), dict(node.findings)
        first = self.config.eval_interval
        if self.clock.kind == "real":
            first *= 1.0 + random.Random(node_id).uniform(-0.1, 0.1)
        handle = MonitorHandle(node_id, next_eval_at=self.clock.now() + first)
        self.handles[node_id] = handle
        self.children[node_id] = []

        self.pool.submit(Task(node_id, self._research_parent(node_id), node.depth, node.query), self._work)
        plan_task = asyncio.ensure_future(self._plan_children(node_id, handle))
        plan_task.add_done_callback(lambda _: handle.wake.set())
        try:
            completed = await self._monitor(handle, plan_task)
        finally:
            if not plan_task.done():
                plan_task.cancel()
            await asyncio.gather(plan_task, return_exceptions=True)
        await asyncio.gather(*self.children[node_id], return_exceptions=True)
        handle.closed = True
        if completed:
            self.emit(node_id, EventKind.COMPLETED, n_findings=len(node.findings))
        return dict(node.contexts), dict(node.findings)

    async def _exec_settled(self, node_id: NodeId) -> Optional[ExecutionOutcome]:
        try:
            result = await self.pool.wait(node_id)
        except Exception:
            return None
        return result if isinstance(result, ExecutionOutcome) else None

    async def _plan_children(self, node_id: NodeId, handle: MonitorHandle) -> None:
        node = self.tree.research(node_id)
        if not self.config.speculative_planning:
            outcome = await self._exec_settled(node_id)
            if outcome is None or outcome.interrupted or node.error:
                return
        if self._stopped(handle):
            return
        depth = await decide_depth(node.query, node.findings.values(), node.depth, self.config, self.policy)
        if self._stopped(handle):
            return
        if not depth.go_deeper:
            self.emit(node_id, EventKind.PLANNED, go_deeper=False, marginal_gain=depth.marginal_gain,
                      fallback=depth.fallback, children=[])
            return
        breadth = await plan_breadth(node.query, node.findings.values(), self.config, self.policy)
        if self._stopped(handle):
            return
        planner = self.tree.add_planner(node_id)
        for state in (NodeState.ELIGIBLE, NodeState.RUNNING):
            self.tree.set_state(planner, state)
        ids = self.tree.attach_research_children(planner, list(breadth.subqueries))
        self.tree.set_state(planner, NodeState.COMPLETED)
        self.emit(node_id, EventKind.PLANNED, go_deeper=True, marginal_gain=depth.marginal_gain,
                  planner=planner, breadth=breadth.breadth, utility=breadth.utility_estimate,
                  fallback=breadth.fallback or depth.fallback, children=ids)
        self._spawn(node_id, ids)

    def _spawn(self, parent: NodeId, ids: List[NodeId]) -> None:
        for cid in ids:
            self.emit(cid, EventKind.SPAWNED, parent=parent, query=self.tree.node(cid).query,
                      depth=self.tree.node(cid).depth)
            t = asyncio.ensure_future(self.orchestrate_node(cid))
            if parent in self.handles:
                self.children[parent].append(t)
                t.add_done_callback(lambda _, p=parent: self._wake(p))
            else:
                self.children.setdefault(parent, []).append(t)

    def _subtree_done(self, node_id: NodeId, plan_task: asyncio.Future) -> bool:
        return (self.exec_closed.get(node_id, False) and plan_task.done()
                and all(t.done() for t in self.children[node_id]))

    async def _monitor(self, handle: MonitorHandle, plan_task: asyncio.Future) -> bool:
        """Run until the flag is set. Returns True on natural completion."""
        interval = self.config.eval_interval
        while not self._stopped(handle):
            if self._subtree_done(handle.node, plan_task):
                handle.should_terminate = True
                return True
            if self.clock.now() >= handle.next_eval_at - 1e-9:
                await self.monitor_tick(handle, plan_task)
                handle.next_eval_at += interval
                continue
            handle.wake.clear()
            try:
                await asyncio.wait_for(handle.wake.wait(), handle.next_eval_at - self.clock.now())
            except asyncio.TimeoutError:
                pass
        return False

    async def monitor_tick(self, handle: MonitorHandle, plan_task: Optional[asyncio.Future] = None) -> OrchestrationVerdict:
        node = self.tree.research(handle.node)
        verdict = await evaluate_progress(node.query, node.contexts.values(), node.findings.values(),
                                          self.config, self.policy)
        if self._stopped(handle):
            return verdict
        handle.last_verdict = verdict
        self.emit(node.id, EventKind.MONITOR_TICK, delta=verdict.delta, phi=verdict.phi, psi=verdict.psi,
                  n_findings=len(node.findings), fallback=verdict.fallback)
        if (verdict.delta == 0 and verdict.phi >= self.config.phi_min
                and verdict.psi >= self.config.psi_min):
            # Completion wins over a same-instant satisfaction.
            await self.clock.settle()
            if self._stopped(handle) or (plan_task is not None and self._subtree_done(node.id, plan_task)):
                return verdict
            self.terminate_subtree(node.id, verdict)
        return verdict

    def terminate_subtree(self, node_id: NodeId, verdict: Optional[OrchestrationVerdict] = None) -> List[NodeId]:
        """Stop ``node_id`` and prune every descendant. Idempotent."""
        handle = self.handles.get(node_id)
        if handle is not None and handle.should_terminate:
            return []
        if handle is not None:
            handle.terminate()
        node = self.tree.research(node_id)
        task = self.pool.tasks.get(node_id)
        was_running = task is not None and task.status == TaskStatus.DISPATCHED
        if task is not None:
            self.pool.cancel_subtree(node_id)
        if was_running and node.state == NodeState.RUNNING:
            self.tree.set_state(node_id, NodeState.INTERRUPTED)
            self.emit(node_id, EventKind.INTERRUPTED, reason="satisfied")
        elif not node.state.terminal:
            self.tree.set_state(node_id, NodeState.TERMINATED)
        payload = verdict.to_dict() if verdict else {}
        self.emit(node_id, EventKind.TERMINATED, **payload)

        pruned = []
        for d in self.tree.descendants(node_id):
            n = self.tree.nodes[d]
            h = self.handles.get(d)
            live_monitor = h is None or not h.closed
            if h is not None:
                h.terminate()
            if not n.state.terminal:
                self.tree.set_state(d, NodeState.TERMINATED)
            if isinstance(n, ResearchNode) and live_monitor:
                self.emit(d, EventKind.PRUNED, by=node_id)
                pruned.append(d)
        return pruned

    # -- budget ----------------------------------------------------------------

    def enforce_budget(self) -> None:
        """Hard cutoff: interrupt live work and stop every monitor."""
        if self.cutoff:
            return
        self.cutoff = True
        self.emit(ROOT_ID, EventKind.BUDGET_CUTOFF,
                  deadline=round(self.budget.deadline, 6) if self.budget else 0.0)
        running = [t.task_id for t in self.pool.tasks.values() if t.status == TaskStatus.DISPATCHED]
        self.pool.close()
        for nid in running:
            if self.tree.nodes[nid].state == NodeState.RUNNING:
                self.tree.set_state(nid, NodeState.INTERRUPTED)
                self.emit(nid, EventKind.INTERRUPTED, reason="budget")
        for h in self.handles.values():
            h.terminate()

    async def _budget_watch(self) -> None:
        await self.clock.sleep(self.config.t_max)
        self.enforce_budget()

    # -- whole run -----------------------------------------------------------

    async def run(self) -> RunResult:
        started = self.clock.now()
        self.budget = RunBudget(started, self.config.t_max)
        root = self.tree.node(ROOT_ID)
        watcher = None
        if self.config.t_max <= 0:
            self.enforce_budget()
        else:
            watcher = asyncio.ensure_future(self._budget_watch())
        if not self.cutoff:
            for state in (NodeState.ELIGIBLE, NodeState.RUNNING):
                self.tree.set_state(ROOT_ID, state)
            breadth = await plan_breadth(root.query, [], self.config, self.policy)
            if not self.cutoff:
                ids = self.tree.attach_research_children(ROOT_ID, list(breadth.subqueries))
                self.tree.set_state(ROOT_ID, NodeState.COMPLETED)
                self.emit(ROOT_ID, EventKind.PLANNED, go_deeper=True, planner=ROOT_ID, breadth=breadth.breadth,
                          utility=breadth.utility_estimate, fallback=breadth.fallback, children=ids)
                self._spawn(ROOT_ID, ids)
            else:
                self.tree.set_state(ROOT_ID, NodeState.INTERRUPTED)
        await asyncio.gather(*self.children.get(ROOT_ID, []))
        await self.pool.join()
        if watcher is not None:
            watcher.cancel()
            await asyncio.gather(watcher, return_exceptions=True)

        contexts, findings = self.tree.aggregate_all()
        ended = self.clock.now()
        report = await synthesize(root.query, contexts, findings, self.synthesizer,
                                  truncated=self.cutoff, generated_at=ended)
        self.emit(ROOT_ID, EventKind.COMPLETED, budget_cutoff=self.cutoff,
                  n_contexts=len(contexts), n_findings=len(findings))
        return RunResult(self.tree, self.sink.log, self.pool.trace(), contexts, findings, report,
                         self.cutoff, started, ended, self.pool.mode)


async def run_research_async(root_query: str, config: TreeConfig, policy: PolicyBackend, executor: Executor,
                             clock: Clock, sink: Optional[EventSink] = None,
                             mode: SchedulingMode = SchedulingMode.POOLED,
                             synthesizer: Optional[Synthesizer] = None) -> RunResult:
    tree = ResearchTree(root_query, config)
    return await Orchestrator(tree, policy, executor, clock, sink, mode, synthesizer).run()


def run_research(root_query: str, config: TreeConfig, policy: PolicyBackend, executor: Executor,
                 clock: Clock, sink: Optional[EventSink] = None,
                 mode: SchedulingMode = SchedulingMode.POOLED,
                 synthesizer: Optional[Synthesizer] = None) -> RunResult:
    """Blocking entry point: runs the whole research on ``clock``'s loop."""
    return clock.run(run_research_async(root_query, config, policy, executor, clock, sink,
                                        SchedulingMode.parse(mode), synthesizer))


def config_for(scenario: Scenario, **overrides: Any) -> TreeConfig:
    values = {**scenario.config, **{k: v for k, v in overrides.items() if v is not None}}
    return TreeConfig(**values).validate()


def simulate(scenario: Scenario, query: Optional[str] = None, config: Optional[TreeConfig] = None,
             mode: "SchedulingMode | str" = SchedulingMode.POOLED, seed: int = 0,
             sink: Optional[EventSink] = None) -> RunResult:
    """Deterministic virtual-clock run of a scenario with scripted policies."""
    clock = VirtualClock()
    config = config or config_for(scenario)
    query = query or scenario.root_query or scenario.name
    return run_research(query, config, ScriptedPolicy(scenario), SimExecutor(scenario, clock, seed),
                        clock, sink, SchedulingMode.parse(mode))
