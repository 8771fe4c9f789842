import json
import threading

import pydot
import pytest

from conftest import run_named
from researchtree.telemetry import (EventKind, EventSink, IntegrityError, OrchestrationEvent, TraceLog,
                                    compute_stats, diff_logs, export_tree, record, speedup, stats_dict,
                                    tree_to_dot)
from researchtree.tree import NodeState, attach_research_children, new_tree


def parse_dot(text):
    (graph,) = pydot.graph_from_dot_data(text)
    nodes = [n for n in graph.get_nodes() if n.get_name().strip('"') not in ("node", "edge", "graph")]
    return graph, nodes, graph.get_edges()


# -- sink ----------------------------------------------------------------------

def test_thousand_events_replayable():
    sink = EventSink()
    for i in range(1000):
        record(sink, OrchestrationEvent(i * 0.5, f"R{i % 7 + 1}", EventKind.MONITOR_TICK, {"i": i}))
    back = TraceLog.from_jsonl(sink.log.to_jsonl())
    assert len(back) == 1000
    assert [e.payload["i"] for e in back] == list(range(1000))


def test_concurrent_emitters_exactly_once():
    sink = EventSink()

    def producer(t):
        for i in range(500):
            sink.emit(0.0, f"R{t}", EventKind.MONITOR_TICK, i=i)

    threads = [threading.Thread(target=producer, args=(t,)) for t in range(8)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert len(sink.log) == 4000
    assert sorted(e.seq for e in sink.log) == list(range(4000))
    for t in range(8):
        # Per-node order survives interleaving.
        assert [e.payload["i"] for e in sink.log.for_node(f"R{t}")] == list(range(500))


def test_arrival_order_preserved_across_nodes():
    sink = EventSink()
    sink.emit(1.0, "R2", EventKind.SPAWNED)
    sink.emit(1.0, "R1", EventKind.SPAWNED)
    sink.emit(1.0, "R2", EventKind.EXECUTION_STARTED)
    assert [(e.node, e.kind) for e in sink.log.ordered()] == [
        ("R2", EventKind.SPAWNED), ("R1", EventKind.SPAWNED), ("R2", EventKind.EXECUTION_STARTED)]


def test_file_sink_flushes_in_batches(tmp_path):
    path = tmp_path / "run.events.jsonl"
    sink = EventSink(path, buffer_size=10)
    for i in range(25):
        sink.emit(float(i), "R1", EventKind.MONITOR_TICK)
    assert len(path.read_text().splitlines()) == 20
    sink.flush()
    assert path.read_text() == sink.log.to_jsonl()


def test_diff_logs():
    a = run_named("prune").log
    b = run_named("prune").log
    c = run_named("prune", seed=1).log
    assert diff_logs(a, b) is None
    assert diff_logs(a, c) is not None


# -- stats ---------------------------------------------------------------------

def test_speedup_from_figure_traces():
    seq = run_named("fig-parallel", "sequential")
    pooled = run_named("fig-parallel", "pooled")
    assert speedup(seq.trace, pooled.trace) == pytest.approx(2.1)
    stats = compute_stats(pooled.log, pooled.tree, pooled.trace, seq.trace)
    assert stats.speedup_vs_sequential == pytest.approx(2.1)
    assert stats.nodes_interrupted == 0 and stats.research_processed == 6


def test_zero_budget_counts_root_only():
    r = run_named("chain", t_max=0)
    s = compute_stats(r.log, r.tree)
    assert (s.nodes_total, s.research_nodes, s.research_processed) == (1, 0, 0)


@pytest.mark.parametrize("name", ["prune", "budget", "broad", "narrow", "chain", "throughput"])
def test_stats_conservation(name):
    r = run_named(name)
    s = compute_stats(r.log, r.tree)
    assert s.nodes_total == s.nodes_completed + s.nodes_terminated + s.nodes_interrupted + s.nodes_pending
    snap = r.tree.snapshot()["nodes"]
    assert s.nodes_total == len(snap)
    assert s.nodes_terminated == sum(n["state"] == "Terminated" for n in snap)
    assert stats_dict(s)["schema"] == 1


def test_integrity_errors():
    r = run_named("narrow")
    events = r.log.events
    no_completion = TraceLog([e for e in events if not (e.node == "P0" and e.kind == EventKind.COMPLETED)])
    with pytest.raises(IntegrityError):
        compute_stats(no_completion, r.tree)
    dangling = TraceLog(events + [OrchestrationEvent(99.0, "R9", EventKind.EXECUTION_STARTED, {}, 10_000)])
    with pytest.raises(IntegrityError):
        compute_stats(dangling, r.tree)


# -- export -------------------------------------------------------------------

def test_root_only_dot():
    _, nodes, edges = parse_dot(tree_to_dot(new_tree("lonely")))
    assert len(nodes) == 1 and len(edges) == 0


def test_seven_node_dot():
    tree = new_tree("q")
    attach_research_children(tree, "P0", ["a", "b"])
    attach_research_children(tree, tree.add_planner("R1"), ["x", "y", "z"])
    assert len(tree) == 7
    _, nodes, edges = parse_dot(tree_to_dot(tree))
    assert len(nodes) == 7 and len(edges) == 6
    shapes = {n.get_name().strip('"'): n.get("shape") for n in nodes}
    assert shapes["P0"] == shapes["P1"] == "box" and shapes["R1.2"] == "ellipse"


def test_dashed_exactly_on_terminated():
    r = run_named("prune")
    _, nodes, edges = parse_dot(export_tree(r.tree, "dot"))
    dashed = {n.get_name().strip('"') for n in nodes if n.get("style") == "dashed"}
    terminated = {nid for nid, n in r.tree.nodes.items() if n.state == NodeState.TERMINATED}
    assert dashed == terminated and dashed
    assert len(edges) == len(nodes) - 1


def test_dot_escapes_quotes():
    tree = new_tree('say "hi" \\ now')
    _, nodes, _ = parse_dot(tree_to_dot(tree))
    assert len(nodes) == 1


def test_json_export_matches_snapshot():
    r = run_named("narrow")
    assert json.loads(export_tree(r.tree, "json")) == r.tree.snapshot()
    with pytest.raises(ValueError):
        export_tree(r.tree, "svg")
