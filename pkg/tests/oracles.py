"""Independent reference implementations used by the tests.

Nothing here imports the scheduler or the orchestrator; the oracles work from
plain tuples and re-derive every quantity from first principles.
"""

from __future__ import annotations

import random
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Set, Tuple

Spec = Sequence[Tuple[str, Optional[str], float]]  # (task_id, parent_id, duration)


# -- closed forms -------------------------------------------------------------

def _depths(spec: Spec) -> Dict[str, int]:
    depth: Dict[Optional[str], int] = {None: 0}
    for tid, parent, _ in spec:
        depth[tid] = depth[parent] + 1
    del depth[None]
    return depth


def sequential_closed_form(spec: Spec) -> float:
    return sum(d for _, _, d in spec)


def layer_closed_form(spec: Spec) -> float:
    """Each layer starts once the previous one is fully done: sum of per-layer maxima."""
    depth = _depths(spec)
    per_layer: Dict[int, float] = defaultdict(float)
    for tid, _, d in spec:
        per_layer[depth[tid]] = max(per_layer[depth[tid]], d)
    return sum(per_layer.values())


def pooled_closed_form(spec: Spec) -> float:
    """Unlimited workers, parent gate only: the longest root-to-leaf path."""
    finish: Dict[Optional[str], float] = {None: 0.0}
    for tid, parent, d in spec:
        finish[tid] = finish[parent] + d
    return max(v for k, v in finish.items() if k is not None)


# -- event simulation ---------------------------------------------------------

def event_sim(spec: Spec, mode: str, workers: Optional[int] = None) -> Dict[str, Tuple[float, float]]:
    """Discrete-event simulation of the three pool modes.

    Ready tasks start in submission order. ``sequential`` runs one task at a
    time; ``layer`` only starts tasks at the shallowest depth that still has
    unfinished tasks; ``pooled`` starts every ready task (up to ``workers``).
    Returns ``{task_id: (start, end)}``.
    """
    order = {tid: i for i, (tid, _, _) in enumerate(spec)}
    parent = {tid: p for tid, p, _ in spec}
    dur = {tid: d for tid, _, d in spec}
    depth = _depths(spec)
    done: Set[str] = set()
    running: Dict[str, float] = {}  # id -> end time
    times: Dict[str, Tuple[float, float]] = {}
    now = 0.0
    cap = 1 if mode == "sequential" else (workers or len(spec))
    while len(done) < len(spec):
        ready = sorted((t for t in dur if t not in done and t not in running
                        and (parent[t] is None or parent[t] in done)), key=order.get)
        if mode == "layer":
            live = [depth[t] for t in dur if t not in done]
            ready = [t for t in ready if depth[t] == min(live)]
        for t in ready:
            if len(running) >= cap:
                break
            running[t] = now + dur[t]
            times[t] = (now, now + dur[t])
        if not running:
            raise RuntimeError("oracle deadlock")
        now = min(running.values())
        for t in [t for t, e in running.items() if e == now]:
            del running[t]
            done.add(t)
    return times


def event_sim_makespan(spec: Spec, mode: str, workers: Optional[int] = None) -> float:
    times = event_sim(spec, mode, workers)
    return max(e for _, e in times.values()) - min(s for s, _ in times.values())


# -- random fixtures ----------------------------------------------------------

def random_tree_spec(rng: random.Random, max_depth: int = 5, max_breadth: int = 4,
                     lat: Tuple[int, int] = (1, 10), max_nodes: int = 60,
                     integer_latency: bool = True) -> List[Tuple[str, Optional[str], float]]:
    """Random task tree in BFS submission order."""
    spec: List[Tuple[str, Optional[str], float]] = []

    def latency() -> float:
        return float(rng.randint(*lat)) if integer_latency else round(rng.uniform(*lat), 3)

    frontier: List[Tuple[Optional[str], int]] = [(None, 0)]
    while frontier and len(spec) < max_nodes:
        parent, d = frontier.pop(0)
        if d >= max_depth:
            continue
        width = rng.randint(1, max_breadth) if parent is None else rng.choice(
            [0, 0] + list(range(1, max_breadth + 1)))
        for i in range(width):
            if len(spec) >= max_nodes:
                break
            tid = f"T{len(spec)}"
            spec.append((tid, parent, latency()))
            frontier.append((tid, d + 1))
    return spec


def spec_to_scenario(spec: Spec, root_query: str = "root") -> dict:
    """Scenario document reproducing a static task tree through the orchestrator.

    Task ids double as queries; leaves get gain 0 so they stop, inner nodes get
    gain 1. Monitors never satisfy."""
    children: Dict[Optional[str], List[str]] = defaultdict(list)
    for tid, parent, _ in spec:
        children[parent].append(tid)
    breadth = {root_query: children[None]}
    breadth.update({tid: children[tid] for tid, _, _ in spec if children[tid]})
    return {
        "schema": 1,
        "name": "spec",
        "root_query": root_query,
        "breadth_script": breadth,
        "depth_script": {**{tid: (1.0 if children[tid] else 0.0) for tid, _, _ in spec}, "default": 0.0},
        "verdict_script": {"default": [0.0, 0.0]},
        "executor_script": {tid: {"latency": d, "contexts": 1, "findings": 1} for tid, _, d in spec},
        "config": {"max_depth": 10, "t_max": 1e6},
    }


# -- sequential reference interpreter of the recursive orchestrator ----------

def reference_orchestrate(doc: dict, seed: int, items_fn, max_depth: int = 10,
                          tau: float = 0.1, breadth_cap: int = 6) -> Dict[str, Tuple[Set[str], Set[str]]]:
    """Straight-line recursion over a scenario document.

    For every research node: execute (failures yield nothing), then if the
    depth policy's gain exceeds ``tau`` and the depth cap allows, plan children
    with the breadth script and recurse. A node's result is the union of its
    own yield and its children's. Monitors are assumed never to fire, which is
    what the fixtures guarantee. ``items_fn`` is the scenario's pure data
    function ``(query, node, depth, seed, n_ctx, n_find, shared) ->
    (contexts, findings)``. Returns ``{node_id: (context_ids, finding_ids)}``.
    """
    breadth = doc.get("breadth_script", {})
    depth_s = doc.get("depth_script", {})
    execs = doc.get("executor_script", {})
    base = {"latency": 5.0, "contexts": 2, "findings": 1}
    default_exec = {**base, **execs.get("default", {})}

    def subqueries(q: str) -> List[str]:
        entry = breadth.get(q, breadth.get("default", "identity"))
        if entry == "identity":
            entry = [q]
        if isinstance(entry, dict):
            entry = entry["subqueries"]
        out, seen = [], set()
        for s in entry:
            key = " ".join(s.lower().split())
            if s.strip() and key not in seen:
                seen.add(key)
                out.append(s.strip())
        return out[:breadth_cap] or [q]

    def gain(q: str, d: int) -> float:
        entry = depth_s.get(q, depth_s.get("default", 0.5))
        if isinstance(entry, dict):
            entry = entry.get(str(d), entry.get("*", depth_s.get("default", 0.5)))
        return float(entry)

    results: Dict[str, Tuple[Set[str], Set[str]]] = {}

    def visit(node: str, q: str, d: int) -> Tuple[Set[str], Set[str]]:
        e = {**base, **execs[q]} if q in execs else default_exec
        ctx: Set[str] = set()
        fnd: Set[str] = set()
        ok = not e.get("fail", False)
        if ok:
            c, f = items_fn(q, node, d, seed, e["contexts"], e["findings"], tuple(e.get("shared_contexts", ())))
            ctx |= {x.id for x in c}
            fnd |= {x.id for x in f}
        if ok and d < max_depth and gain(q, d) > tau:
            for i, sq in enumerate(subqueries(q), 1):
                cc, cf = visit(f"{node}.{i}", sq, d + 1)
                ctx |= cc
                fnd |= cf
        results[node] = (ctx, fnd)
        return ctx, fnd

    root = doc["root_query"]
    for i, sq in enumerate(subqueries(root), 1):
        visit(f"R{i}", sq, 1)
    return results
