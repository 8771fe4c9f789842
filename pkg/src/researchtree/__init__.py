"""Orchestration engine for tree-structured deep research."""

from .clock import RealClock, VirtualClock, make_clock
from .orchestrator import Orchestrator, RunResult, run_research, run_research_async, simulate
from .policy import LLMPolicy, ScriptedPolicy, decide_depth, evaluate_progress, plan_breadth
from .scenario import Scenario, load_scenario, scenario_from_dict
from .scheduler import SchedulingMode, Task, TaskPool, makespan, run_to_completion
from .synthesis import Report, synthesize
from .telemetry import EventKind, EventSink, TraceLog, compute_stats, export_tree
from .tree import ResearchTree, TreeConfig, new_tree

__version__ = "0.1.0"

__all__ = [
    "EventKind", "EventSink", "LLMPolicy", "Orchestrator", "RealClock", "Report", "ResearchTree", "RunResult",
    "Scenario", "SchedulingMode", "ScriptedPolicy", "Task", "TaskPool", "TraceLog", "TreeConfig",
    "VirtualClock", "compute_stats", "decide_depth", "evaluate_progress", "export_tree", "load_scenario",
    "make_clock", "makespan", "new_tree", "plan_breadth", "run_research", "run_research_async",
    "run_to_completion", "scenario_from_dict", "simulate", "synthesize",
]
