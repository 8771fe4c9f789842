"""Breadth, depth and orchestration policies.

Each policy is a thin rule wrapped around a backend. The backend proposes raw
values (subqueries, a marginal gain, a pair of scores); the functions here apply
the bounds, thresholds and fallbacks so that every backend obeys the same
contract. Two backends ship: :class:`ScriptedPolicy` reads a scenario file and
:class:`LLMPolicy` prompts a chat model.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, List, Protocol, Sequence, Tuple

from .clients import ChatClient, ClientError
from .scenario import Scenario
from .tree import ContextItem, Finding, TreeConfig

logger = logging.getLogger(__name__)


class PolicyError(Exception):
    """Backend failed; the caller applies the fallback decision."""


class ParseError(PolicyError):
    pass


@dataclass(frozen=True)
class BreadthDecision:
    breadth: int
    subqueries: Tuple[str, ...]
    utility_estimate: float
    fallback: bool = False


@dataclass(frozen=True)
class DepthDecision:
    go_deeper: bool
    marginal_gain: float
    fallback: bool = False


@dataclass(frozen=True)
class OrchestrationVerdict:
    delta: int
    phi: float
    psi: float
    fallback: bool = False

    @property
    def satisfied(self) -> bool:
        return self.delta == 0

    def to_dict(self) -> dict:
        return {"delta": self.delta, "phi": self.phi, "psi": self.psi, "fallback": self.fallback}


def clamp(x: float, lo: float = 0.0, hi: float = 1.0) -> float:
    return lo if x < lo else hi if x > hi else x


def monitor_delta(phi: float, psi: float, phi_min: float, psi_min: float) -> int:
    """0 (stop) when both scores clear their thresholds, else 1 (continue)."""
    return 0 if (phi >= phi_min and psi >= psi_min) else 1


def normalize_query(text: str) -> str:
    return " ".join(text.split()).casefold()


class PolicyBackend(Protocol):
    async def propose_breadth(self, query: str, findings: Sequence[Finding],
                              config: TreeConfig) -> Tuple[List[str], float]: ...

    async def estimate_gain(self, query: str, findings: Sequence[Finding], depth: int,
                            config: TreeConfig) -> float: ...

    async def score_progress(self, query: str, contexts: Sequence[ContextItem],
                             findings: Sequence[Finding], config: TreeConfig) -> Tuple[float, float]: ...


# -- policy rules -------------------------------------------------------------

async def plan_breadth(query: str, accumulated_findings: Iterable[Finding], config: TreeConfig,
                       backend: PolicyBackend) -> BreadthDecision:
    if not query or not query.strip():
        raise ValueError("query must be nonempty")
    try:
        raw, utility = await backend.propose_breadth(query, list(accumulated_findings), config)
    except Exception as exc:  # any backend failure maps to the fallback
        logger.warning("breadth policy failed for %r: %s", query, exc)
        return BreadthDecision(1, (query,), 0.0, fallback=True)

    seen = set()
    subqueries: List[str] = []
    for q in raw:
        if not isinstance(q, str) or not q.strip():
            continue
        key = normalize_query(q)
        if key in seen:
            continue
        seen.add(key)
        subqueries.append(q.strip())
    if not subqueries:
        return BreadthDecision(1, (query,), 0.0, fallback=True)
    # Over-long proposals are truncated, not rejected.
    subqueries = subqueries[: config.breadth_cap]
    return BreadthDecision(len(subqueries), tuple(subqueries), clamp(float(utility)))


async def decide_depth(query: str, local_findings: Iterable[Finding], depth: int, config: TreeConfig,
                       backend: PolicyBackend) -> DepthDecision:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if depth >= config.max_depth:
        return DepthDecision(False, 0.0)
    try:
        gain = await backend.estimate_gain(query, list(local_findings), depth, config)
    except Exception as exc:  # any backend failure maps to the fallback
        logger.warning("depth policy failed for %r: %s", query, exc)
        return DepthDecision(False, 0.0, fallback=True)
    gain = clamp(float(gain), -1.0, 1.0)
    return DepthDecision(gain > config.tau, gain)


async def evaluate_progress(query: str, contexts: Iterable[ContextItem], findings: Iterable[Finding],
                            config: TreeConfig, backend: PolicyBackend) -> OrchestrationVerdict:
    try:
        phi, psi = await backend.score_progress(query, list(contexts), list(findings), config)
    except Exception as exc:  # any backend failure maps to the fallback
        logger.warning("orchestration policy failed for %r: %s", query, exc)
        return OrchestrationVerdict(1, 0.0, 0.0, fallback=True)
    phi, psi = clamp(float(phi)), clamp(float(psi))
    return OrchestrationVerdict(monitor_delta(phi, psi, config.phi_min, config.psi_min), phi, psi)


# -- response parsing ---------------------------------------------------------

_JSON_OBJECT = re.compile(r"\{.*\}", re.DOTALL)


def _extract_object(raw: str) -> dict:
    try:
        obj = json.loads(raw)
    except (TypeError, json.JSONDecodeError):
        match = _JSON_OBJECT.search(raw or "")
        if not match:
            raise ParseError("no JSON object in response") from None
        try:
            obj = json.loads(match.group(0))
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError("response is not a JSON object")
    return obj


def _number(obj: dict, key: str) -> float:
    if key not in obj:
        raise ParseError(f"missing field {key!r}")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        try:
            value = float(value)
        except (TypeError, ValueError):
            raise ParseError(f"field {key!r} is not numeric") from None
    return float(value)


def parse_policy_response(raw: str, expected: str):
    """Parse a model reply for ``expected`` in {"breadth", "depth", "verdict", "findings"}.

    Returns ``(subqueries, utility)``, a gain, ``(phi, psi)`` or a list of
    ``(text, sources)`` respectively. Scores are clamped into range.
    """
    obj = _extract_object(raw)
    if expected == "verdict":
        return clamp(_number(obj, "phi")), clamp(_number(obj, "psi"))
    if expected == "depth":
        return clamp(_number(obj, "marginal_gain"), -1.0, 1.0)
    if expected == "breadth":
        subs = obj.get("subqueries")
        if not isinstance(subs, list) or not subs:
            raise ParseError("missing or empty 'subqueries' list")
        utility = clamp(_number(obj, "utility")) if "utility" in obj else 0.5
        return [str(s) for s in subs], utility
    if expected == "findings":
        items = obj.get("findings")
        if not isinstance(items, list):
            raise ParseError("missing 'findings' list")
        out = []
        for item in items:
            if isinstance(item, dict) and isinstance(item.get("text"), str):
                out.append((item["text"], [str(s) for s in item.get("sources", [])]))
        return out
    raise ValueError(f"unknown policy kind {expected!r}")


# -- backends -----------------------------------------------------------------

class ScriptedPolicy:
    """Reads decisions from a scenario. Pure and deterministic."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.calls = {"breadth": 0, "depth": 0, "verdict": 0}

    async def propose_breadth(self, query, findings, config):
        self.calls["breadth"] += 1
        return self.scenario.breadth_for(query)

    async def estimate_gain(self, query, findings, depth, config):
        self.calls["depth"] += 1
        return self.scenario.gain_for(query, depth)

    async def score_progress(self, query, contexts, findings, config):
        self.calls["verdict"] += 1
        return self.scenario.verdict_for(query, len(findings))


def load_prompt(name: str) -> str:
    return resources.files("researchtree.prompts").joinpath(f"{name}.txt").read_text()


def render_breadth_prompt(initial_query: str, findings: Sequence[Finding], config: TreeConfig) -> str:
    learnings = "; ".join(f.body for f in findings) if findings else "none"
    return (load_prompt("breadth_planner")
            .replace("[max_breadth+flex_breadth]", str(config.breadth_cap))
            .replace("[initial_query]", initial_query)
            .replace("[accumulated_learnings]", learnings))


def _digest(contexts: Sequence[ContextItem], findings: Sequence[Finding], limit: int = 40) -> str:
    lines = [f"- {f.body}" for f in findings[:limit]]
    sources = sorted({c.source for c in contexts})
    return ("FINDINGS:\n" + ("\n".join(lines) or "(none)")
            + f"\n\nSOURCES ({len(sources)}):\n" + ("\n".join(sources[:limit]) or "(none)"))


class LLMPolicy:
    """Prompts a chat model. ``initial_query`` is the run's root query."""

    def __init__(self, client: ChatClient, initial_query: str):
        self.client = client
        self.initial_query = initial_query

    async def _ask(self, system: str, user: str, kind: str):
        try:
            reply = await self.client.complete([{"role": "system", "content": system},
                                                {"role": "user", "content": user}])
        except ClientError as exc:
            raise PolicyError(str(exc)) from exc
        return parse_policy_response(reply, kind)

    async def propose_breadth(self, query, findings, config):
        system = render_breadth_prompt(self.initial_query, findings, config)
        return await self._ask(system, f"Query to decompose: {query}", "breadth")

    async def estimate_gain(self, query, findings, depth, config):
        user = f"Research question: {query}\nCurrent depth: {depth}\n\n{_digest([], findings)}"
        return await self._ask(load_prompt("depth"), user, "depth")

    async def score_progress(self, query, contexts, findings, config):
        user = f"Research goal: {query}\n\n{_digest(contexts, findings)}"
        return await self._ask(load_prompt("orchestration"), user, "verdict")


__all__ = [
    "BreadthDecision", "DepthDecision", "OrchestrationVerdict", "PolicyError", "ParseError",
    "PolicyBackend", "ScriptedPolicy", "LLMPolicy", "plan_breadth", "decide_depth",
    "evaluate_progress", "parse_policy_response", "monitor_delta", "normalize_query",
    "render_breadth_prompt", "load_prompt",
]
