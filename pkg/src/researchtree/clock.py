"""Real and virtual time sources.

Both clocks drive an asyncio event loop, so the scheduler and orchestrator are
written once as coroutines. The virtual clock swaps in a loop whose selector
jumps straight to the next pending timer instead of sleeping; a run of several
simulated minutes finishes in milliseconds and is fully deterministic.
"""

from __future__ import annotations

import asyncio
import selectors
from typing import Any, Awaitable, Optional, TypeVar

T = TypeVar("T")

#: Virtual timers are quantized to this granule (seconds).
GRANULE = 0.001


class DeadlockError(RuntimeError):
    """The virtual loop went idle while coroutines were still awaiting."""


def quantize(seconds: float) -> float:
    return round(max(0.0, seconds) / GRANULE) * GRANULE


class _VirtualSelector(selectors.BaseSelector):
    """Polls real fds without blocking; advances virtual time otherwise."""

    def __init__(self, loop: "VirtualEventLoop"):
        self._loop = loop
        self._real = selectors.DefaultSelector()

    def register(self, fileobj, events, data=None):
        return self._real.register(fileobj, events, data)

    def unregister(self, fileobj):
        return self._real.unregister(fileobj)

    def modify(self, fileobj, events, data=None):
        return self._real.modify(fileobj, events, data)

    def get_map(self):
        return self._real.get_map()

    def close(self):
        self._real.close()

    def select(self, timeout=None):
        ready = self._real.select(0)
        if ready or timeout == 0:
            return ready
        if timeout is None:
            raise DeadlockError(
                "virtual clock idle: no timers pending but coroutines still waiting"
            )
        self._loop._advance(timeout)
        return []


class VirtualEventLoop(asyncio.SelectorEventLoop):
    def __init__(self) -> None:
        self._vtime = 0.0
        super().__init__(selector=_VirtualSelector(self))

    def time(self) -> float:
        return self._vtime

    def _advance(self, timeout: float) -> None:
        # Land exactly on the head timer so equal timestamps stay equal.
        scheduled = self._scheduled  # type: ignore[attr-defined]
        if scheduled and scheduled[0].when() - self._vtime <= timeout + 1e-9:
            self._vtime = max(self._vtime, scheduled[0].when())
        else:
            self._vtime += timeout

    def busy_now(self) -> bool:
        """True while callbacks or timers are due at the current instant."""
        scheduled = self._scheduled  # type: ignore[attr-defined]
        return bool(self._ready) or bool(scheduled and scheduled[0].when() <= self._vtime)  # type: ignore[attr-defined]


class Clock:
    """Common surface: ``now()``, ``await sleep()``, ``run(coro)``."""

    kind: str = "abstract"

    def __init__(self) -> None:
        self.loop: Optional[asyncio.AbstractEventLoop] = None
        self._origin = 0.0

    def now(self) -> float:
        """Seconds since the clock's run started."""
        if self.loop is None:
            return 0.0
        return self.loop.time() - self._origin

    async def sleep(self, seconds: float) -> None:
        await asyncio.sleep(max(0.0, seconds))

    async def sleep_until(self, deadline: float) -> None:
        await self.sleep(deadline - self.now())

    async def settle(self) -> None:
        """Let other work due at this instant run before continuing."""
        await asyncio.sleep(0)

    def _new_loop(self) -> asyncio.AbstractEventLoop:
        raise NotImplementedError

    def run(self, main: Awaitable[T]) -> T:
        loop = self._new_loop()
        self.loop = loop
        self._origin = loop.time()
        asyncio.set_event_loop(loop)
        try:
            return loop.run_until_complete(main)
        finally:
            try:
                _cancel_leftovers(loop)
                loop.run_until_complete(loop.shutdown_asyncgens())
            finally:
                asyncio.set_event_loop(None)
                loop.close()


class VirtualClock(Clock):
    """Deterministic simulated time; sleeps are quantized to milliseconds."""

    kind = "virtual"

    def _new_loop(self) -> asyncio.AbstractEventLoop:
        return VirtualEventLoop()

    async def sleep(self, seconds: float) -> None:
        await asyncio.sleep(quantize(seconds))

    async def settle(self, limit: int = 10_000) -> None:
        loop = asyncio.get_running_loop()
        await asyncio.sleep(0)
        for _ in range(limit):
            if not isinstance(loop, VirtualEventLoop) or not loop.busy_now():
                return
            await asyncio.sleep(0)


class RealClock(Clock):
    kind = "real"

    def _new_loop(self) -> asyncio.AbstractEventLoop:
        return asyncio.new_event_loop()


def make_clock(kind: str) -> Clock:
    if kind == "virtual":
        return VirtualClock()
    if kind == "real":
        return RealClock()
    raise ValueError(f"unknown clock kind: {kind!r}")


def _cancel_leftovers(loop: asyncio.AbstractEventLoop) -> None:
    pending: Any = [t for t in asyncio.all_tasks(loop) if not t.done()]
    if not pending:
        return
    for task in pending:
        task.cancel()
    loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
