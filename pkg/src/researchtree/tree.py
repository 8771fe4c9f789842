"""Research tree data model.

A tree alternates planning nodes (which split a query into subqueries) and
research nodes (which gather contexts and findings for one subquery). The root
is always a planning node. Research node ids are dotted paths (``R1``,
``R1.2``, ...) and the planner under research node ``R1.2`` is ``P1.2``; the
root planner is ``P0``. Path ids keep a run's naming independent of timing.

All mutation happens on the event loop that owns the tree; the tree itself does
no locking.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple, Union

NodeId = str
ROOT_ID: NodeId = "P0"


class TreeError(Exception):
    pass


class ConfigError(TreeError):
    pass


class BoundsError(TreeError):
    pass


class DepthCapError(TreeError):
    """Children would exceed ``max_depth``; the caller treats the node as a leaf."""


class NodeNotFound(TreeError, KeyError):
    pass


class LifecycleError(TreeError):
    pass


class NodeState(str, Enum):
    PENDING = "Pending"
    ELIGIBLE = "Eligible"
    RUNNING = "Running"
    COMPLETED = "Completed"
    TERMINATED = "Terminated"
    INTERRUPTED = "Interrupted"

    @property
    def terminal(self) -> bool:
        return self in _TERMINAL


_TERMINAL = {NodeState.COMPLETED, NodeState.TERMINATED, NodeState.INTERRUPTED}

_ALLOWED = {
    NodeState.PENDING: {NodeState.ELIGIBLE, NodeState.TERMINATED},
    NodeState.ELIGIBLE: {NodeState.RUNNING, NodeState.TERMINATED},
    NodeState.RUNNING: {NodeState.COMPLETED, NodeState.INTERRUPTED, NodeState.TERMINATED},
}


def content_id(source: str, body: str) -> str:
    digest = hashlib.sha256(f"{source}\x1f{body}".encode("utf-8")).hexdigest()
    return digest[:16]


@dataclass(frozen=True)
class ContextItem:
    id: str
    source: str
    body: str
    retrieved_at: float = 0.0

    @classmethod
    def make(cls, source: str, body: str, retrieved_at: float = 0.0) -> "ContextItem":
        return cls(content_id(source, body), source, body, retrieved_at)

    def to_dict(self) -> dict:
        return {"id": self.id, "source": self.source, "body": self.body,
                "retrieved_at": self.retrieved_at}


@dataclass(frozen=True)
class Finding:
    id: str
    origin_node: NodeId
    body: str
    depth: int
    sources: Tuple[str, ...] = ()

    @classmethod
    def make(cls, origin_node: NodeId, body: str, depth: int,
             sources: Iterable[str] = ()) -> "Finding":
        return cls(content_id(origin_node, body), origin_node, body, depth, tuple(sources))

    def to_dict(self) -> dict:
        return {"id": self.id, "origin_node": self.origin_node, "body": self.body,
                "depth": self.depth, "sources": list(self.sources)}


@dataclass
class TreeConfig:
    """Limits and thresholds for one run. Durations are in seconds."""

    max_depth: int = 10
    max_breadth: int = 4
    flex_breadth: int = 2
    phi_min: float = 0.8
    psi_min: float = 0.8
    tau: float = 0.1
    eval_interval: float = 8.0
    t_max: float = 120.0
    worker_limit: Optional[int] = None
    # Plan children as soon as a node spawns instead of after its results land.
    speculative_planning: bool = False

    @property
    def breadth_cap(self) -> int:
        return self.max_breadth + self.flex_breadth

    def validate(self) -> "TreeConfig":
        if not isinstance(self.max_depth, int) or self.max_depth < 1:
            raise ConfigError(f"max_depth must be a positive integer, got {self.max_depth!r}")
        if not isinstance(self.max_breadth, int) or self.max_breadth < 1:
            raise ConfigError(f"max_breadth must be a positive integer, got {self.max_breadth!r}")
        if not isinstance(self.flex_breadth, int) or self.flex_breadth < 0:
            raise ConfigError(f"flex_breadth must be >= 0, got {self.flex_breadth!r}")
        for name in ("phi_min", "psi_min", "tau"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value!r}")
        if self.eval_interval <= 0:
            raise ConfigError("eval_interval must be positive")
        if self.t_max < 0:
            raise ConfigError("t_max must be >= 0")
        if self.worker_limit is not None and self.worker_limit < 1:
            raise ConfigError("worker_limit must be positive or None (unlimited)")
        return self

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PlanningNode:
    id: NodeId
    query: str
    parent: Optional[NodeId] = None
    depth: int = 0
    breadth: int = 0
    children: List[NodeId] = field(default_factory=list)
    state: NodeState = NodeState.PENDING

    kind = "planning"


@dataclass
class ResearchNode:
    id: NodeId
    query: str
    parent: NodeId
    depth: int
    contexts: Dict[str, ContextItem] = field(default_factory=dict)
    findings: Dict[str, Finding] = field(default_factory=dict)
    child_planner: Optional[NodeId] = None
    state: NodeState = NodeState.PENDING
    error: Optional[str] = None

    kind = "research"

    @property
    def children(self) -> List[NodeId]:
        return [self.child_planner] if self.child_planner else []


Node = Union[PlanningNode, ResearchNode]


@dataclass
class RunStats:
    nodes_total: int = 0
    planning_nodes: int = 0
    research_nodes: int = 0
    nodes_completed: int = 0
    nodes_terminated: int = 0
    nodes_interrupted: int = 0
    nodes_pending: int = 0
    research_processed: int = 0
    wall_latency: float = 0.0
    realized_depth: int = 0
    realized_max_breadth: int = 0
    speedup_vs_sequential: Optional[float] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class ResearchTree:
    def __init__(self, root_query: str, config: Optional[TreeConfig] = None):
        if not root_query or not root_query.strip():
            raise TreeError("root query must be nonempty")
        self.config = (config or TreeConfig()).validate()
        self.root: NodeId = ROOT_ID
        self.nodes: Dict[NodeId, Node] = {ROOT_ID: PlanningNode(ROOT_ID, root_query)}
        self.created_at = time.time()

    def __contains__(self, node_id: NodeId) -> bool:
        return node_id in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: NodeId) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NodeNotFound(node_id) from None

    def research(self, node_id: NodeId) -> ResearchNode:
        node = self.node(node_id)
        if not isinstance(node, ResearchNode):
            raise TreeError(f"{node_id} is not a research node")
        return node

    def research_nodes(self) -> List[ResearchNode]:
        return [n for n in self.nodes.values() if isinstance(n, ResearchNode)]

    def planning_nodes(self) -> List[PlanningNode]:
        return [n for n in self.nodes.values() if isinstance(n, PlanningNode)]

    @property
    def edges(self) -> Dict[NodeId, List[NodeId]]:
        return {nid: list(n.children) for nid, n in self.nodes.items() if n.children}

    def set_state(self, node_id: NodeId, state: NodeState) -> None:
        node = self.node(node_id)
        if node.state == state:
            return
        if state not in _ALLOWED.get(node.state, set()):
            raise LifecycleError(f"{node_id}: illegal transition {node.state.value} -> {state.value}")
        node.state = state

    def add_planner(self, research_id: NodeId) -> NodeId:
        """Create the single child planning node under a research node."""
        parent = self.research(research_id)
        if parent.child_planner is not None:
            raise TreeError(f"{research_id} already has a child planner")
        pid = "P" + research_id[1:]
        self.nodes[pid] = PlanningNode(pid, parent.query, parent=research_id, depth=parent.depth)
        parent.child_planner = pid
        return pid

    def attach_research_children(self, planner: NodeId, subqueries: List[str]) -> List[NodeId]:
        node = self.node(planner)
        if not isinstance(node, PlanningNode):
            raise TreeError(f"{planner} is not a planning node")
        if node.children:
            raise TreeError(f"{planner} already planned")
        cap = self.config.breadth_cap
        if not 1 <= len(subqueries) <= cap:
            raise BoundsError(f"breadth {len(subqueries)} outside [1, {cap}]")
        depth = node.depth + 1
        if depth > self.config.max_depth:
            raise DepthCapError(f"children of {planner} would sit at depth {depth} > {self.config.max_depth}")
        prefix = "R" if planner == ROOT_ID else "R" + planner[1:] + "."
        ids = []
        for i, q in enumerate(subqueries, start=1):
            nid = f"{prefix}{i}"
            self.nodes[nid] = ResearchNode(nid, q, parent=planner, depth=depth)
            ids.append(nid)
        node.children = ids
        node.breadth = len(ids)
        return ids

    def research_ancestors(self, node_id: NodeId) -> List[ResearchNode]:
        out = []
        cur = self.node(node_id).parent
        while cur is not None:
            n = self.nodes[cur]
            if isinstance(n, ResearchNode):
                out.append(n)
            cur = n.parent
        return out

    def descendants(self, node_id: NodeId) -> List[NodeId]:
        """All descendants in breadth-first order (planning nodes included)."""
        out: List[NodeId] = []
        frontier = list(self.node(node_id).children)
        while frontier:
            nid = frontier.pop(0)
            out.append(nid)
            frontier.extend(self.nodes[nid].children)
        return out

    def record_results(self, node_id: NodeId, contexts: Iterable[ContextItem],
                       findings: Iterable[Finding]) -> None:
        node = self.research(node_id)
        if node.state == NodeState.TERMINATED:
            raise LifecycleError(f"cannot record on terminated node {node_id}")
        contexts = list(contexts)
        findings = list(findings)
        for target in [node, *self.research_ancestors(node_id)]:
            for c in contexts:
                target.contexts.setdefault(c.id, c)
            for f in findings:
                target.findings.setdefault(f.id, f)

    def aggregate_all(self) -> Tuple[Dict[str, ContextItem], Dict[str, Finding]]:
        contexts: Dict[str, ContextItem] = {}
        findings: Dict[str, Finding] = {}
        for n in self.research_nodes():
            for c in n.contexts.values():
                contexts.setdefault(c.id, c)
            for f in n.findings.values():
                findings.setdefault(f.id, f)
        return contexts, findings

    def realized_depth(self) -> int:
        return max((n.depth for n in self.research_nodes()), default=0)

    def stats(self) -> RunStats:
        research = self.research_nodes()
        counts = {s: 0 for s in NodeState}
        for n in self.nodes.values():
            counts[n.state] += 1
        return RunStats(
            nodes_total=len(self.nodes),
            planning_nodes=len(self.nodes) - len(research),
            research_nodes=len(research),
            nodes_completed=counts[NodeState.COMPLETED],
            nodes_terminated=counts[NodeState.TERMINATED],
            nodes_interrupted=counts[NodeState.INTERRUPTED],
            nodes_pending=counts[NodeState.PENDING] + counts[NodeState.ELIGIBLE]
            + counts[NodeState.RUNNING],
            realized_depth=self.realized_depth(),
            realized_max_breadth=max((p.breadth for p in self.planning_nodes()), default=0),
        )

    def snapshot(self) -> dict:
        nodes = []
        for nid, n in self.nodes.items():
            is_research = isinstance(n, ResearchNode)
            nodes.append({
                "id": nid,
                "kind": n.kind,
                "query": n.query,
                "state": n.state.value,
                "depth": n.depth,
                "parent": n.parent,
                "children": list(n.children),
                "n_contexts": len(n.contexts) if is_research else 0,
                "n_findings": len(n.findings) if is_research else 0,
            })
        return {"root": self.root, "config": self.config.to_dict(), "nodes": nodes}

    def check_invariants(self) -> None:
        """Raise ``TreeError`` if alternation, connectivity or depth bounds fail."""
        seen = set()
        stack = [self.root]
        while stack:
            nid = stack.pop()
            if nid in seen:
                raise TreeError(f"cycle through {nid}")
            seen.add(nid)
            node = self.nodes[nid]
            for cid in node.children:
                child = self.nodes[cid]
                if child.kind == node.kind:
                    raise TreeError(f"edge {nid}->{cid} does not alternate")
                if child.parent != nid:
                    raise TreeError(f"{cid}.parent != {nid}")
                stack.append(cid)
            if isinstance(node, ResearchNode) and node.depth > self.config.max_depth:
                raise TreeError(f"{nid} exceeds max depth")
        if seen != set(self.nodes):
            raise TreeError("tree is not connected")


def new_tree(root_query: str, config: Optional[TreeConfig] = None) -> ResearchTree:
    return ResearchTree(root_query, config)


def attach_research_children(tree: ResearchTree, planner: NodeId, subqueries: List[str]) -> List[NodeId]:
    return tree.attach_research_children(planner, subqueries)


def record_results(tree: ResearchTree, node: NodeId, contexts: Iterable[ContextItem],
                   findings: Iterable[Finding]) -> None:
    tree.record_results(node, contexts, findings)


def aggregate_all(tree: ResearchTree) -> Tuple[Dict[str, ContextItem], Dict[str, Finding]]:
    return tree.aggregate_all()


def tree_stats(tree: ResearchTree) -> RunStats:
    return tree.stats()
