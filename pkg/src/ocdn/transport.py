"""Transport and clock abstractions.

Role objects never open sockets themselves; they call a transport with
(address, verb, path, headers, body) and dispatch incoming messages from
whatever carries them.  Two carriers exist: the in-process network below
(hermetic, instrumentable, deterministic) and real sockets in
:mod:`ocdn.netserve`.  The same role code runs over both.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field


class TransportError(Exception):
    """Destination unreachable, connection refused, or timeout (retryable)."""


class SystemClock:
    """Wall clock."""

    def now(self) -> float:
        return time.time()


class VirtualClock:
    """Manually advanced clock for deterministic runs."""

    def __init__(self, start: float = 1_700_000_000.0):
        self._t = start
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._t

    def advance(self, dt_s: float) -> None:
        if dt_s < 0:
            raise ValueError("clock cannot run backwards")
        with self._lock:
            self._t += dt_s


@dataclass
class Response:
    status: int
    headers: dict[str, str]
    body: bytes


def get_header(headers: dict[str, str], name: str) -> str | None:
    """Case-insensitive header lookup over a plain dict."""
    for k, v in headers.items():
        if k.lower() == name.lower():
            return v
    return None


@dataclass(frozen=True)
class HopEvent:
    """One message transmission, recorded for the timing model."""

    src: str
    dst: str
    verb: str
    path: str
    nbytes: int


class InProcNet:
    """In-process message fabric: address -> dispatcher registry.

    Dispatchers are objects with ``dispatch(verb, path, headers, body,
    peer) -> (status, headers, body)``; line handlers are callables
    ``str -> str`` (the newline-delimited JSON key protocol).  Every
    transmission is appended to ``trace`` when tracing is on, which is what
    the harness folds into per-request timings.
    """

    def __init__(self):
        self._nodes: dict[str, object] = {}
        self._line_handlers: dict[str, object] = {}
        self.trace: list[HopEvent] | None = None
        self.down: set[str] = set()
        self._lock = threading.Lock()

    def register(self, addr: str, node) -> None:
        self._nodes[addr] = node

    def register_line(self, addr: str, handler) -> None:
        self._line_handlers[addr] = handler

    def _record(self, ev: HopEvent) -> None:
        if self.trace is not None:
            with self._lock:
                self.trace.append(ev)

    def request(
        self,
        dst: str,
        verb: str,
        path: str,
        headers: dict[str, str] | None = None,
        body: bytes = b"",
        src: str = "local",
    ) -> Response:
        if dst in self.down or dst not in self._nodes:
            raise TransportError(f"no route to {dst}")
        self._record(HopEvent(src, dst, verb, path, len(body)))
        node = self._nodes[dst]
        status, resp_headers, resp_body = node.dispatch(verb, path, dict(headers or {}), body, src)
        self._record(HopEvent(dst, src, verb, path + ":resp", len(resp_body)))
        return Response(status, resp_headers, resp_body)

    def query_line(self, dst: str, line: str, src: str = "local") -> str:
        if dst in self.down or dst not in self._line_handlers:
            raise TransportError(f"no route to {dst}")
        self._record(HopEvent(src, dst, "LINE", "-", len(line)))
        reply = self._line_handlers[dst](line)
        self._record(HopEvent(dst, src, "LINE", "-", len(reply)))
        return reply


@dataclass
class OpEvent:
    node: str
    op: str
    nbytes: int
    native_s: float


class OpsRecorder:
    """Collects named operation timings (native wall time per op).

    The harness pairs these with a deterministic cost model; outside the
    harness a recorder is optional and roles fall back to a no-op.
    """

    def __init__(self):
        self.events: list[OpEvent] = []
        self._lock = threading.Lock()

    def timed(self, node: str, op: str, nbytes: int = 0):
        return _Timed(self, node, op, nbytes)

    def reset(self) -> list[OpEvent]:
        with self._lock:
            out, self.events = self.events, []
        return out


class _Timed:
    def __init__(self, rec: OpsRecorder, node: str, op: str, nbytes: int):
        self.rec, self.node, self.op, self.nbytes = rec, node, op, nbytes

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        dt = time.perf_counter() - self._t0
        with self.rec._lock:
            self.rec.events.append(OpEvent(self.node, self.op, self.nbytes, dt))
        return False


class _NullTimed:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


class NullOpsRecorder:
    events: list = []

    def timed(self, node: str, op: str, nbytes: int = 0):
        return _NullTimed()

    def reset(self):
        return []


NULL_OPS = NullOpsRecorder()
