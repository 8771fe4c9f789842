"""Scenario files: deterministic scripts for policies and the simulated executor.

A scenario is a JSON document::

    {
      "schema": 1,
      "name": "fig-parallel",
      "root_query": "optional default query for the CLI",
      "breadth_script": {"<query>": ["sub 1", "sub 2"], "default": "identity"},
      "depth_script":   {"<query>": 0.4, "<other>": {"1": 0.3, "*": 0.0}, "default": 0.5},
      "verdict_script": {"<query>": [{"min_findings": 3, "phi": 0.9, "psi": 0.85}],
                         "default": [0.0, 0.0]},
      "executor_script": {"<query>": {"latency": 2.0, "contexts": 3, "findings": 2,
                                       "fail": false, "jitter": 0.0,
                                       "shared_contexts": ["key"]},
                          "default": {"latency": 5.0, "contexts": 2, "findings": 1}},
      "config": {"max_depth": 3}
    }

Every map may carry a ``default`` entry used for unmatched keys. A breadth
entry may also be ``{"subqueries": [...], "utility": 0.7}``. Verdict entries
are bucketed by the number of findings the node has accumulated: the entry with
the largest ``min_findings`` not exceeding the count wins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

SCHEMA_VERSION = 1

DEFAULT_GAIN = 0.5
DEFAULT_VERDICT = (0.0, 0.0)
DEFAULT_UTILITY = 0.5


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class SimExecEntry:
    latency: float = 5.0
    contexts: int = 2
    findings: int = 1
    fail: bool = False
    jitter: float = 0.0
    shared_contexts: Tuple[str, ...] = ()

    @classmethod
    def from_obj(cls, obj: Dict[str, Any], where: str) -> "SimExecEntry":
        unknown = set(obj) - {"latency", "contexts", "findings", "fail", "jitter", "shared_contexts"}
        if unknown:
            raise ScenarioError(f"{where}: unknown executor fields {sorted(unknown)}")
        entry = cls(
            latency=float(obj.get("latency", cls.latency)),
            contexts=int(obj.get("contexts", cls.contexts)),
            findings=int(obj.get("findings", cls.findings)),
            fail=bool(obj.get("fail", False)),
            jitter=float(obj.get("jitter", 0.0)),
            shared_contexts=tuple(obj.get("shared_contexts", ())),
        )
        if entry.latency < 0 or entry.contexts < 0 or entry.findings < 0:
            raise ScenarioError(f"{where}: latency and yield counts must be >= 0")
        if not 0.0 <= entry.jitter < 1.0:
            raise ScenarioError(f"{where}: jitter must lie in [0, 1)")
        return entry


@dataclass(frozen=True)
class VerdictBucket:
    min_findings: int
    phi: float
    psi: float


@dataclass
class Scenario:
    name: str = "scenario"
    root_query: Optional[str] = None
    breadth: Dict[str, Tuple[List[str], float]] = field(default_factory=dict)
    breadth_default: Union[str, List[str]] = "identity"
    depth: Dict[str, Dict[str, float]] = field(default_factory=dict)
    depth_default: float = DEFAULT_GAIN
    verdicts: Dict[str, List[VerdictBucket]] = field(default_factory=dict)
    verdict_default: Tuple[float, float] = DEFAULT_VERDICT
    executor: Dict[str, SimExecEntry] = field(default_factory=dict)
    executor_default: SimExecEntry = field(default_factory=SimExecEntry)
    config: Dict[str, Any] = field(default_factory=dict)
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)

    # lookups -------------------------------------------------------------

    def breadth_for(self, query: str) -> Tuple[List[str], float]:
        if query in self.breadth:
            subs, utility = self.breadth[query]
            return list(subs), utility
        if self.breadth_default == "identity":
            return [query], DEFAULT_UTILITY
        return list(self.breadth_default), DEFAULT_UTILITY

    def gain_for(self, query: str, depth: int) -> float:
        table = self.depth.get(query)
        if table is None:
            return self.depth_default
        if str(depth) in table:
            return table[str(depth)]
        return table.get("*", self.depth_default)

    def verdict_for(self, query: str, n_findings: int) -> Tuple[float, float]:
        chosen = None
        for bucket in self.verdicts.get(query, ()):
            if bucket.min_findings <= n_findings:
                chosen = bucket
        if chosen is None:
            return self.verdict_default
        return chosen.phi, chosen.psi

    def exec_entry(self, query: str) -> SimExecEntry:
        return self.executor.get(query, self.executor_default)

    def validate(self, breadth_cap: int) -> None:
        for q, (subs, _) in self.breadth.items():
            if not 1 <= len(subs) <= breadth_cap:
                raise ScenarioError(f"breadth_script[{q!r}] has {len(subs)} subqueries; bound is [1, {breadth_cap}]")
        if isinstance(self.breadth_default, list) and not 1 <= len(self.breadth_default) <= breadth_cap:
            raise ScenarioError("breadth_script default violates breadth bounds")

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def _unit(x: Any, where: str) -> float:
    try:
        v = float(x)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: expected a number, got {x!r}") from None
    return v


def _parse_breadth(obj: Any, where: str) -> Tuple[List[str], float]:
    if isinstance(obj, dict):
        subs = obj.get("subqueries")
        utility = _unit(obj.get("utility", DEFAULT_UTILITY), where)
    else:
        subs, utility = obj, DEFAULT_UTILITY
    if not isinstance(subs, list) or not subs or not all(isinstance(s, str) and s.strip() for s in subs):
        raise ScenarioError(f"{where}: expected a nonempty list of nonempty strings")
    return list(subs), utility


def _parse_buckets(obj: Any, where: str) -> List[VerdictBucket]:
    if isinstance(obj, dict):
        obj = [obj]
    if not isinstance(obj, list):
        raise ScenarioError(f"{where}: expected a list of verdict buckets")
    out = []
    for i, b in enumerate(obj):
        if isinstance(b, dict):
            bucket = VerdictBucket(int(b.get("min_findings", 0)), _unit(b["phi"], where), _unit(b["psi"], where))
        elif isinstance(b, (list, tuple)) and len(b) == 3:
            bucket = VerdictBucket(int(b[0]), _unit(b[1], where), _unit(b[2], where))
        else:
            raise ScenarioError(f"{where}[{i}]: bad verdict bucket {b!r}")
        out.append(bucket)
    return sorted(out, key=lambda b: b.min_findings)


def scenario_from_dict(doc: Dict[str, Any]) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    if doc.get("schema") != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported scenario schema {doc.get('schema')!r}; expected {SCHEMA_VERSION}")
    sc = Scenario(name=str(doc.get("name", "scenario")), root_query=doc.get("root_query"),
                  config=dict(doc.get("config", {})), raw=doc)

    for q, entry in dict(doc.get("breadth_script", {})).items():
        if q == "default":
            if entry is None or entry == "identity":
                sc.breadth_default = "identity"
            else:
                sc.breadth_default = _parse_breadth(entry, "breadth_script.default")[0]
        else:
            sc.breadth[q] = _parse_breadth(entry, f"breadth_script[{q!r}]")

    for q, entry in dict(doc.get("depth_script", {})).items():
        if q == "default":
            sc.depth_default = _unit(entry, "depth_script.default")
        elif isinstance(entry, dict):
            sc.depth[q] = {str(k): _unit(v, f"depth_script[{q!r}]") for k, v in entry.items()}
        else:
            sc.depth[q] = {"*": _unit(entry, f"depth_script[{q!r}]")}

    for q, entry in dict(doc.get("verdict_script", {})).items():
        if q == "default":
            if not isinstance(entry, (list, tuple)) or len(entry) != 2:
                raise ScenarioError("verdict_script.default must be [phi, psi]")
            sc.verdict_default = (_unit(entry[0], "verdict default"), _unit(entry[1], "verdict default"))
        else:
            sc.verdicts[q] = _parse_buckets(entry, f"verdict_script[{q!r}]")

    for q, entry in dict(doc.get("executor_script", {})).items():
        if not isinstance(entry, dict):
            raise ScenarioError(f"executor_script[{q!r}] must be an object")
        parsed = SimExecEntry.from_obj(entry, f"executor_script[{q!r}]")
        if q == "default":
            sc.executor_default = parsed
        else:
            sc.executor[q] = parsed
    return sc


def load_scenario(path: Union[str, Path]) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    return scenario_from_dict(doc)
