"""Research-node execution backends.

``SimExecutor`` reads latency and yield counts from a scenario and fabricates
deterministic contexts and findings; it never touches the network.
``WebExecutor`` runs one search call and one summarization call per node.
Both honour the node's :class:`~researchtree.scheduler.CancelToken`.
"""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass
from typing import List, Protocol, Tuple

from .clients import ChatClient, ClientError, SearchClient
from .clock import Clock
from .policy import ParseError, load_prompt, parse_policy_response
from .scenario import Scenario
from .scheduler import CancelToken
from .tree import ContextItem, Finding, NodeId

logger = logging.getLogger(__name__)


class ExecutorError(Exception):
    pass


@dataclass(frozen=True)
class ExecutionOutcome:
    contexts: Tuple[ContextItem, ...] = ()
    findings: Tuple[Finding, ...] = ()
    elapsed: float = 0.0
    interrupted: bool = False


@dataclass(frozen=True)
class SearchQuery:
    text: str
    max_results: int = 5

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("search query must be nonempty")
        if self.max_results < 1:
            raise ValueError("max_results must be >= 1")


@dataclass(frozen=True)
class SearchHit:
    url: str
    title: str = ""
    snippet: str = ""


class Executor(Protocol):
    async def execute(self, query: str, node: NodeId, depth: int, cancel: CancelToken) -> ExecutionOutcome: ...


def _tag(*parts: object) -> str:
    return hashlib.sha256("\x1f".join(map(str, parts)).encode()).hexdigest()[:12]


def sim_items(query: str, node: NodeId, depth: int, seed: int, n_contexts: int, n_findings: int,
              shared: Tuple[str, ...] = (), at: float = 0.0) -> Tuple[Tuple[ContextItem, ...], Tuple[Finding, ...]]:
    """Synthetic yield for one node; a pure function of its arguments."""
    contexts = [
        ContextItem.make(f"sim://{node}/{i}", f"Context {i} for {query!r} [{_tag(seed, node, query, 'c', i)}]", at)
        for i in range(n_contexts)
    ]
    contexts += [ContextItem.make(f"scenario://{key}", f"Shared context {key!r}", at) for key in shared]
    cited = [c.id for c in contexts]
    findings = [
        Finding.make(node, f"Finding {i} on {query!r} [{_tag(seed, node, query, 'f', i)}]", depth,
                     cited[i % len(cited):i % len(cited) + 1] if cited else ())
        for i in range(n_findings)
    ]
    return tuple(contexts), tuple(findings)


class SimExecutor:
    def __init__(self, scenario: Scenario, clock: Clock, seed: int = 0):
        self.scenario = scenario
        self.clock = clock
        self.seed = seed

    def latency_for(self, query: str, node: NodeId) -> float:
        entry = self.scenario.exec_entry(query)
        if not entry.jitter:
            return entry.latency
        u = random.Random(f"{self.seed}:{node}").uniform(-1.0, 1.0)
        return entry.latency * (1.0 + entry.jitter * u)

    async def execute(self, query: str, node: NodeId, depth: int, cancel: CancelToken) -> ExecutionOutcome:
        entry = self.scenario.exec_entry(query)
        start = self.clock.now()
        interrupted = await cancel.sleep(self.clock, self.latency_for(query, node))
        elapsed = self.clock.now() - start
        if interrupted:
            return ExecutionOutcome((), (), elapsed, True)
        if entry.fail:
            raise ExecutorError(f"scripted failure for {query!r}")
        contexts, findings = sim_items(query, node, depth, self.seed, entry.contexts, entry.findings,
                                       entry.shared_contexts, at=self.clock.now())
        return ExecutionOutcome(contexts, findings, elapsed, False)


async def web_search(q: SearchQuery, client: SearchClient) -> List[SearchHit]:
    raw = await client.search(q.text, q.max_results)
    hits: List[SearchHit] = []
    seen = set()
    for r in raw:
        url = (r.get("url") or "").strip() if isinstance(r, dict) else ""
        if not url or url in seen:
            continue
        seen.add(url)
        hits.append(SearchHit(url, r.get("title", ""), r.get("snippet") or r.get("content") or ""))
        if len(hits) >= q.max_results:
            break
    return hits


async def summarize_findings(query: str, hits: List[SearchHit], llm: ChatClient, node: NodeId = "R?",
                             depth: int = 1, max_findings: int = 5) -> List[Finding]:
    if not hits:
        raise ValueError("summarize_findings needs at least one hit")
    listing = "\n".join(f"[{i}] {h.url}\n{h.title}\n{h.snippet}" for i, h in enumerate(hits, 1))
    messages = [{"role": "system", "content": load_prompt("summarize")},
                {"role": "user", "content": f"Research question: {query}\n\nSearch results:\n{listing}"}]
    try:
        reply = await llm.complete(messages)
        items = parse_policy_response(reply, "findings")
    except (ClientError, ParseError) as exc:
        logger.warning("no findings extracted for %r: %s", query, exc)
        return []
    urls = {h.url for h in hits}
    findings: List[Finding] = []
    for text, sources in items:
        cited = [s for s in sources if s in urls]
        if not cited or not text.strip():
            continue
        findings.append(Finding.make(node, text.strip(), depth, cited))
        if len(findings) >= max_findings:
            break
    if not findings:
        logger.info("model reply for %r yielded no cited findings", query)
    return findings


class WebExecutor:
    def __init__(self, search: SearchClient, llm: ChatClient, clock: Clock,
                 max_results: int = 5, max_findings: int = 5):
        self.search = search
        self.llm = llm
        self.clock = clock
        self.max_results = max_results
        self.max_findings = max_findings

    async def execute(self, query: str, node: NodeId, depth: int, cancel: CancelToken) -> ExecutionOutcome:
        start = self.clock.now()
        try:
            hits = await web_search(SearchQuery(query, self.max_results), self.search)
        except ClientError as exc:
            raise ExecutorError(f"search failed for {query!r}: {exc}") from exc
        if cancel.cancelled:
            return ExecutionOutcome((), (), self.clock.now() - start, True)
        now = self.clock.now()
        contexts = tuple(ContextItem.make(h.url, h.snippet or h.title, now) for h in hits)
        findings: List[Finding] = []
        if hits:
            findings = await summarize_findings(query, hits, self.llm, node, depth, self.max_findings)
        if cancel.cancelled:
            # Only the retrieval step finished before the interruption point.
            return ExecutionOutcome(contexts, (), self.clock.now() - start, True)
        return ExecutionOutcome(contexts, tuple(findings), self.clock.now() - start, False)


async def execute_research(query: str, node: NodeId, cancel: CancelToken, backend: Executor,
                           depth: int = 1) -> ExecutionOutcome:
    return await backend.execute(query, node, depth, cancel)


__all__ = ["ExecutionOutcome", "ExecutorError", "SearchQuery", "SearchHit", "SimExecutor",
           "WebExecutor", "web_search", "summarize_findings", "execute_research", "sim_items"]
