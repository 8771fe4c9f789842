"""Command-line entry point.

    researchtree run [QUERY] --mode sim --scenario scenarios/fig-parallel.json --out runs/demo
    researchtree compare scenarios/throughput.json --budget 600
    researchtree export runs/demo tree --format dot

Exit codes: 0 success, 1 configuration error, 2 runtime integrity failure,
3 artifact not found.
"""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .clients import ChatClient, ConfigurationError, EndpointConfig, SearchClient
from .clock import RealClock, VirtualClock
from .executor import SimExecutor, WebExecutor
from .orchestrator import RunResult, run_research_async
from .policy import LLMPolicy, ScriptedPolicy
from .scenario import Scenario, ScenarioError, load_scenario
from .scheduler import SchedulerError, SchedulingMode
from .synthesis import LLMSynthesizer
from .telemetry import (EventSink, IntegrityError, TraceLog, compute_stats, export_tree, snapshot_to_dot,
                        stats_dict, write_json)
from .tree import ConfigError, TreeConfig, TreeError

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY, EXIT_NOT_FOUND = 0, 1, 2, 3

# Flag name -> TreeConfig field. Also read from FT_<FIELD> env vars and the config file.
_CONFIG_FLAGS = {
    "budget": "t_max",
    "max_depth": "max_depth",
    "max_breadth": "max_breadth",
    "flex_breadth": "flex_breadth",
    "phi_min": "phi_min",
    "psi_min": "psi_min",
    "tau": "tau",
    "eval_interval": "eval_interval",
    "workers": "worker_limit",
}
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TreeConfig)}

ARTIFACTS = {
    "tree": "tree.json",
    "trace": "events.jsonl",
    "stats": "stats.json",
    "schedule": "schedule.jsonl",
}


class CliConfigError(Exception):
    pass


@dataclass
class RunManifest:
    config: TreeConfig
    mode: str
    scheduling: SchedulingMode
    scenario_path: Optional[Path]
    seed: int
    output_dir: Path

    def validate(self) -> None:
        if self.mode == "sim" and self.scenario_path is None:
            raise CliConfigError("sim mode requires --scenario")
        if self.mode not in ("sim", "live"):
            raise CliConfigError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "mode": self.mode, "scheduling": self.scheduling.value,
                "scenario_path": str(self.scenario_path) if self.scenario_path else None,
                "seed": self.seed, "output_dir": str(self.output_dir)}


# -- configuration ------------------------------------------------------------

def _coerce(field_name: str, raw: Any) -> Any:
    if raw is None or (isinstance(raw, str) and raw.lower() in ("none", "unlimited", "")):
        return None if field_name == "worker_limit" else raw
    kind = str(_FIELD_TYPES.get(field_name, ""))
    try:
        if "bool" in kind:
            return raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except (TypeError, ValueError):
        raise CliConfigError(f"bad value for {field_name}: {raw!r}") from None
    return raw


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliConfigError("config file must hold a JSON object")
    for section in ("llm", "search"):
        if "api_key" in doc.get(section, {}):
            raise CliConfigError("API keys are read from the environment only")
    return doc


def resolve_config(args: argparse.Namespace, file_doc: Dict[str, Any], scenario: Optional[Scenario] = None,
                   env: Optional[Dict[str, str]] = None) -> TreeConfig:
    """defaults < scenario config < config file < environment < flags."""
    env = os.environ if env is None else env
    values: Dict[str, Any] = {}
    if scenario is not None:
        values.update(scenario.config)
    unknown = set(file_doc.get("tree", {})) - set(_FIELD_TYPES)
    if unknown:
        raise CliConfigError(f"unknown config keys: {sorted(unknown)}")
    values.update(file_doc.get("tree", {}))
    for name in _FIELD_TYPES:
        key = f"FT_{name.upper()}"
        if key in env:
            values[name] = env[key]
    for flag, name in _CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    values = {k: _coerce(k, v) for k, v in values.items()}
    try:
        return TreeConfig(**values).validate()
    except (TypeError, ConfigError) as exc:
        raise CliConfigError(str(exc)) from exc


def _endpoint(prefix: str, section: Dict[str, Any], need_model: bool) -> EndpointConfig:
    """Env vars win over the config file; the API key comes from the env only."""
    base = os.environ.get(f"{prefix}_BASE_URL") or section.get("base_url")
    key = os.environ.get(f"{prefix}_API_KEY")
    model = os.environ.get(f"{prefix}_MODEL") or section.get("model")
    missing = [n for n, v in (("BASE_URL", base), ("API_KEY", key)) if not v]
    if need_model and not model:
        missing.append("MODEL")
    if missing:
        raise ConfigurationError("missing endpoint settings: " + ", ".join(f"{prefix}_{m}" for m in missing))
    return EndpointConfig(str(base).rstrip("/"), key, model,
                          timeout=float(section.get("timeout", 60.0)),
                          max_in_flight=int(section.get("max_in_flight", 8)))


# -- artifacts -----------------------------------------------------------------

def write_artifacts(result: RunResult, out: Path, manifest: Optional[RunManifest] = None) -> Dict[str, Any]:
    out.mkdir(parents=True, exist_ok=True)
    stats = compute_stats(result.log, result.tree, result.trace)
    (out / "report.md").write_text(result.report.to_markdown())
    (out / "report.json").write_text(result.report.to_json())
    (out / "events.jsonl").write_text(result.log.to_jsonl())
    (out / "schedule.jsonl").write_text(result.trace.to_jsonl())
    (out / "tree.json").write_text(export_tree(result.tree, "json"))
    (out / "tree.dot").write_text(export_tree(result.tree, "dot"))
    doc = stats_dict(stats)
    write_json(out / "stats.json", doc)
    if manifest is not None:
        write_json(out / "manifest.json", manifest.to_dict())
    return doc


# -- commands ------------------------------------------------------------------

def _sim_run(scenario: Scenario, query: str, config: TreeConfig, mode: SchedulingMode, seed: int) -> RunResult:
    clock = VirtualClock()
    return clock.run(run_research_async(query, config, ScriptedPolicy(scenario),
                                        SimExecutor(scenario, clock, seed), clock, EventSink(), mode))


async def _live_run(query: str, config: TreeConfig, mode: SchedulingMode, clock: RealClock,
                    llm_cfg: EndpointConfig, search_cfg: EndpointConfig) -> RunResult:
    llm, search = ChatClient(llm_cfg), SearchClient(search_cfg)
    try:
        return await run_research_async(query, config, LLMPolicy(llm, query), WebExecutor(search, llm, clock),
                                        clock, EventSink(), mode, LLMSynthesizer(llm))
    finally:
        await llm.aclose()
        await search.aclose()


def _load_scenario(path: str) -> Scenario:
    if not Path(path).is_file():
        raise CliConfigError(f"scenario not found: {path}")
    return load_scenario(path)


def cmd_run(args: argparse.Namespace) -> int:
    file_doc = load_config_file(args.config)
    scenario = _load_scenario(args.scenario) if args.scenario else None
    config = resolve_config(args, file_doc, scenario)
    manifest = RunManifest(config, args.mode, SchedulingMode.parse(args.sched),
                           Path(args.scenario) if args.scenario else None, args.seed, Path(args.out))
    manifest.validate()
    query = args.query or (scenario.root_query if scenario else None)
    if not query:
        raise CliConfigError("no query given and the scenario has no root_query")
    if args.mode == "live":
        # Fail before any work if endpoints are not configured.
        llm_cfg = _endpoint("FT_LLM", file_doc.get("llm", {}), need_model=True)
        search_cfg = _endpoint("FT_SEARCH", file_doc.get("search", {}), need_model=False)
        clock = RealClock()
        result = clock.run(_live_run(query, config, manifest.scheduling, clock, llm_cfg, search_cfg))
    else:
        result = _sim_run(scenario, query, config, manifest.scheduling, args.seed)
    stats = write_artifacts(result, manifest.output_dir, manifest)
    print(f"{stats['research_processed']} research nodes processed in {result.ended_at:.3f}s "
          f"({'budget cutoff' if result.budget_cutoff else 'natural completion'}); "
          f"artifacts in {manifest.output_dir}")
    return EXIT_OK


def compare_modes(scenario: Scenario, config: TreeConfig, seed: int = 0, query: Optional[str] = None) -> List[dict]:
    query = query or scenario.root_query or scenario.name
    rows = []
    for mode in (SchedulingMode.SEQUENTIAL, SchedulingMode.LAYER_PARALLEL, SchedulingMode.POOLED):
        r = _sim_run(scenario, query, config, mode, seed)
        try:
            span = r.trace.makespan()
        except SchedulerError:
            span = 0.0
        rows.append({"mode": mode.value, "makespan": span, "nodes_completed": r.research_completed(),
                     "budget_cutoff": r.budget_cutoff})
    base = rows[0]
    for row in rows:
        row["speedup"] = base["makespan"] / row["makespan"] if row["makespan"] else 1.0
        row["throughput_ratio"] = (row["nodes_completed"] / base["nodes_completed"]
                                   if base["nodes_completed"] else 0.0)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    head = f"{'mode':<12}{'makespan_s':>12}{'nodes':>8}{'speedup':>10}{'node_ratio':>12}{'cutoff':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['mode']:<12}{r['makespan']:>12.3f}{r['nodes_completed']:>8d}{r['speedup']:>10.2f}"
                     f"{r['throughput_ratio']:>12.2f}{'yes' if r['budget_cutoff'] else 'no':>8}")
    return "\n".join(lines)


def cmd_compare(args: argparse.Namespace) -> int:
    scenario = _load_scenario(args.scenario)
    config = resolve_config(args, load_config_file(args.config), scenario)
    rows = compare_modes(scenario, config, args.seed, args.query)
    print(json.dumps(rows, indent=2, sort_keys=True) if args.json else format_table(rows))
    return EXIT_OK


def render_export(run_dir: Path, what: str, fmt: str) -> str:
    path = run_dir / ARTIFACTS[what]
    if not path.is_file():
        raise FileNotFoundError(str(path))
    text = path.read_text()
    if what == "tree":
        snap = json.loads(text)
        if fmt == "dot":
            return snapshot_to_dot(snap)
        return json.dumps(snap, indent=2, sort_keys=True) + "\n"
    if what == "trace":
        log = TraceLog.from_jsonl(text)
        if fmt == "jsonl":
            return log.to_jsonl()
        return json.dumps([e.to_dict() for e in log.ordered()], indent=2, sort_keys=True) + "\n"
    return json.dumps(json.loads(text), indent=2, sort_keys=True) + "\n"


_EXPORT_FORMATS = {"tree": ("json", "dot"), "trace": ("json", "jsonl"), "stats": ("json",),
                   "schedule": ("json",)}


def cmd_export(args: argparse.Namespace) -> int:
    if args.format not in _EXPORT_FORMATS[args.what]:
        raise CliConfigError(f"{args.what} cannot be exported as {args.format}")
    try:
        if args.what == "schedule":
            path = Path(args.run_dir) / ARTIFACTS["schedule"]
            if not path.is_file():
                raise FileNotFoundError(str(path))
            rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
            text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
        else:
            text = render_export(Path(args.run_dir), args.what, args.format)
    except FileNotFoundError as exc:
        print(f"error: artifact not found: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file ({'tree': {...}, 'llm': {...}, 'search': {...}})")
    p.add_argument("--budget", type=float, help="time budget t_max in seconds (default 120)")
    p.add_argument("--max-depth", type=int)
    p.add_argument("--max-breadth", type=int)
    p.add_argument("--flex-breadth", type=int)
    p.add_argument("--phi-min", type=float)
    p.add_argument("--psi-min", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--eval-interval", type=float)
    p.add_argument("--workers", type=int, help="worker limit (default unlimited)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="researchtree", description="Tree-structured deep research orchestration")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one research query")
    run.add_argument("query", nargs="?")
    run.add_argument("--mode", choices=("sim", "live"), default="sim")
    run.add_argument("--sched", default="pooled", help="sequential | layer | pooled")
    run.add_argument("--scenario")
    run.add_argument("--out", default="runs/latest")
    _add_config_flags(run)
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="simulate a scenario under every scheduling mode")
    cmp_.add_argument("scenario")
    cmp_.add_argument("--query")
    cmp_.add_argument("--json", action="store_true")
    _add_config_flags(cmp_)
    cmp_.set_defaults(func=cmd_compare)

    exp = sub.add_parser("export", help="re-emit a run artifact")
    exp.add_argument("run_dir")
    exp.add_argument("what", choices=sorted(_EXPORT_FORMATS))
    exp.add_argument("--format", default="json")
    exp.add_argument("-o", "--output")
    exp.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliConfigError, ConfigurationError, ScenarioError, ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrityError, TreeError, SchedulerError, asyncio.InvalidStateError) as exc:
        print(f"integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
