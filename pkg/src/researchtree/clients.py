"""HTTP clients for live runs: chat completions and web search.

Both clients go through ``httpx.AsyncClient``. Tests swap the network layer for
a :class:`CassetteTransport`, which replays JSON request/response pairs stored
on disk keyed by a hash of the request.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import httpx
from tenacity import (AsyncRetrying, RetryError, retry_if_exception_type,
                      stop_after_attempt, wait_exponential)

logger = logging.getLogger(__name__)

RETRY_ATTEMPTS = 3
RETRY_INITIAL_WAIT = 0.5


class ClientError(Exception):
    """Transport or protocol failure after retries were exhausted."""


class ConfigurationError(ClientError):
    pass


class RetriableError(ClientError):
    pass


@dataclass
class EndpointConfig:
    base_url: str
    api_key: str
    model: Optional[str] = None
    timeout: float = 60.0
    max_in_flight: int = 8

    @classmethod
    def from_env(cls, prefix: str, need_model: bool = False) -> "EndpointConfig":
        base = os.environ.get(f"{prefix}_BASE_URL")
        key = os.environ.get(f"{prefix}_API_KEY")
        model = os.environ.get(f"{prefix}_MODEL")
        missing = [name for name, v in ((f"{prefix}_BASE_URL", base), (f"{prefix}_API_KEY", key)) if not v]
        if need_model and not model:
            missing.append(f"{prefix}_MODEL")
        if missing:
            raise ConfigurationError("missing environment variables: " + ", ".join(missing))
        return cls(base_url=base.rstrip("/"), api_key=key, model=model)


def request_key(method: str, url: str, body: bytes) -> str:
    h = hashlib.sha256()
    h.update(method.upper().encode())
    h.update(b"\n")
    h.update(url.encode())
    h.update(b"\n")
    h.update(body)
    return h.hexdigest()[:24]


class CassetteTransport(httpx.AsyncBaseTransport):
    """Replays (or records) HTTP exchanges from a JSON cassette file.

    The cassette maps ``request_key`` to ``{"request": ..., "response": {"status",
    "json"}}``. In record mode unmatched requests go to ``inner`` and the
    exchange is appended; in replay mode they raise ``KeyError``.
    """

    def __init__(self, path: Union[str, Path], inner: Optional[httpx.AsyncBaseTransport] = None):
        self.path = Path(path)
        self.inner = inner
        self.entries: Dict[str, Any] = json.loads(self.path.read_text()) if self.path.exists() else {}
        self.calls = 0

    async def handle_async_request(self, request: httpx.Request) -> httpx.Response:
        self.calls += 1
        body = await request.aread()
        key = request_key(request.method, str(request.url), body)
        entry = self.entries.get(key)
        if entry is None:
            if self.inner is None:
                raise KeyError(f"no cassette entry for {request.method} {request.url} ({key})")
            response = await self.inner.handle_async_request(request)
            await response.aread()
            entry = {
                "request": {"method": request.method, "url": str(request.url),
                            "body": json.loads(body or b"null")},
                "response": {"status": response.status_code, "json": response.json()},
            }
            self.entries[key] = entry
            self.path.write_text(json.dumps(self.entries, indent=2, sort_keys=True))
        resp = entry["response"]
        return httpx.Response(resp["status"], json=resp.get("json"), request=request)


def _retrying() -> AsyncRetrying:
    return AsyncRetrying(
        stop=stop_after_attempt(RETRY_ATTEMPTS),
        wait=wait_exponential(multiplier=RETRY_INITIAL_WAIT, min=RETRY_INITIAL_WAIT),
        retry=retry_if_exception_type(RetriableError),
        reraise=True,
    )


class _BaseClient:
    def __init__(self, config: EndpointConfig, transport: Optional[httpx.AsyncBaseTransport] = None):
        self.config = config
        self._transport = transport
        self._http: Optional[httpx.AsyncClient] = None
        self._sem: Optional[asyncio.Semaphore] = None
        self.requests_sent = 0

    def _client(self) -> httpx.AsyncClient:
        if self._http is None:
            self._http = httpx.AsyncClient(
                transport=self._transport,
                timeout=self.config.timeout,
                headers={"Authorization": f"Bearer {self.config.api_key}"},
            )
        return self._http

    async def _post_json(self, url: str, payload: dict) -> Any:
        if self._sem is None:
            self._sem = asyncio.Semaphore(self.config.max_in_flight)

        async def attempt() -> Any:
            self.requests_sent += 1
            try:
                resp = await self._client().post(url, json=payload)
            except httpx.TransportError as exc:
                raise RetriableError(str(exc)) from exc
            if resp.status_code == 429 or resp.status_code >= 500:
                raise RetriableError(f"HTTP {resp.status_code} from {url}")
            if resp.status_code >= 400:
                raise ClientError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ClientError(f"non-JSON response from {url}") from exc

        async with self._sem:
            try:
                async for state in _retrying():
                    with state:
                        return await attempt()
            except RetryError as exc:  # pragma: no cover - reraise=True makes this rare
                raise ClientError(str(exc)) from exc
            except RetriableError as exc:
                raise ClientError(f"gave up after {RETRY_ATTEMPTS} attempts: {exc}") from exc

    async def aclose(self) -> None:
        if self._http is not None:
            await self._http.aclose()
            self._http = None


class ChatClient(_BaseClient):
    """OpenAI-compatible ``/chat/completions`` client."""

    async def complete(self, messages: List[Dict[str, str]], temperature: float = 0.0) -> str:
        payload = {"model": self.config.model, "messages": messages, "temperature": temperature}
        data = await self._post_json(f"{self.config.base_url}/chat/completions", payload)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ClientError("malformed chat completion response") from exc


class SearchClient(_BaseClient):
    """Search endpoint taking ``{"query", "max_results"}`` and returning
    ``{"results": [{"url", "title", "snippet"|"content"}]}``."""

    async def search(self, query: str, max_results: int) -> List[Dict[str, Any]]:
        data = await self._post_json(f"{self.config.base_url}/search",
                                     {"query": query, "max_results": max_results})
        results = data.get("results") if isinstance(data, dict) else None
        if not isinstance(results, list):
            raise ClientError("search response lacks a 'results' list")
        return results
