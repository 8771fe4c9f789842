"""Final report synthesis from the aggregated contexts and findings."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from itertools import groupby
from typing import Iterable, Mapping, Optional, Protocol, Tuple

from .clients import ChatClient, ClientError
from .policy import load_prompt
from .tree import ContextItem, Finding

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Report:
    query: str
    body: str
    sources: Tuple[ContextItem, ...]
    findings_used: Tuple[Finding, ...]
    generated_at: float = 0.0
    truncated_by_budget: bool = False
    backend: str = "template"

    def to_markdown(self) -> str:
        return self.body

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "generated_at": round(self.generated_at, 6),
            "truncated_by_budget": self.truncated_by_budget,
            "backend": self.backend,
            "sources": [c.to_dict() for c in self.sources],
            "findings": [f.to_dict() for f in self.findings_used],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _node_key(node_id: str):
    # "R1.10" sorts after "R1.9".
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"[.]", node_id.lstrip("RP")))


def _as_sets(contexts, findings):
    if isinstance(contexts, Mapping):
        contexts = contexts.values()
    if isinstance(findings, Mapping):
        findings = findings.values()
    ctx = {c.id: c for c in contexts}
    fnd = {f.id: f for f in findings}
    return ctx, fnd


def ordered_findings(findings: Iterable[Finding]) -> Tuple[Finding, ...]:
    return tuple(sorted(findings, key=lambda f: (f.depth, _node_key(f.origin_node), f.origin_node, f.id)))


def ordered_sources(contexts: Iterable[ContextItem]) -> Tuple[ContextItem, ...]:
    return tuple(sorted(contexts, key=lambda c: (c.source, c.id)))


def template_report(query: str, contexts, findings, truncated: bool = False,
                    generated_at: float = 0.0) -> Report:
    ctx, fnd = _as_sets(contexts, findings)
    sources = ordered_sources(ctx.values())
    used = ordered_findings(fnd.values())
    lines = [f"# Research report: {query}", ""]
    summary = f"{len(used)} findings from {len(sources)} sources."
    if truncated:
        summary += " Research stopped at the time budget; results are partial."
    lines += [summary, ""]
    if not used:
        lines += ["No findings were gathered.", ""]
    for depth, group in groupby(used, key=lambda f: f.depth):
        lines += [f"## Depth {depth}", ""]
        for f in group:
            cites = [s for s in f.sources if s in ctx]
            suffix = " " + " ".join(f"[{s}]" for s in cites) if cites else ""
            lines.append(f"- ({f.origin_node}) {f.body}{suffix}")
        lines.append("")
    if sources:
        lines += ["## Sources", ""]
        lines += [f"- [{c.id}] {c.source}" for c in sources]
        lines.append("")
    return Report(query, "\n".join(lines), sources, used, generated_at, truncated, "template")


class Synthesizer(Protocol):
    async def write(self, query: str, sources: Tuple[ContextItem, ...],
                    findings: Tuple[Finding, ...]) -> str: ...


class LLMSynthesizer:
    def __init__(self, client: ChatClient):
        self.client = client

    async def write(self, query, sources, findings) -> str:
        listing = "\n".join(f"- {f.body} (sources: {', '.join(f.sources) or 'none'})" for f in findings)
        srcs = "\n".join(f"[{c.id}] {c.source}" for c in sources)
        text = await self.client.complete([
            {"role": "system", "content": load_prompt("synthesis")},
            {"role": "user", "content": f"Question: {query}\n\nFindings:\n{listing}\n\nSources:\n{srcs}"},
        ])
        if not text or not text.strip():
            raise ClientError("empty synthesis")
        return text


async def synthesize(query: str, contexts, findings, backend: Optional[Synthesizer] = None,
                     truncated: bool = False, generated_at: float = 0.0) -> Report:
    """Never raises for backend trouble: any LLM failure falls back to the template."""
    base = template_report(query, contexts, findings, truncated, generated_at)
    if backend is None:
        return base
    try:
        text = await backend.write(query, base.sources, base.findings_used)
    except Exception as exc:
        logger.warning("LLM synthesis failed, using template: %s", exc)
        return base
    tail = "\n".join(f"- [{c.id}] {c.source}" for c in base.sources)
    body = text.rstrip() + ("\n\n## Sources\n\n" + tail + "\n" if tail else "\n")
    return Report(query, body, base.sources, base.findings_used, generated_at, truncated, "llm")
