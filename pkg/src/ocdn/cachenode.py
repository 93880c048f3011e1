"""Stand-in CDN edge server: an oblivious object store over HTTP.

The node accepts only 32-byte identifiers and opaque envelope bytes, so
obliviousness is structural: nothing it stores or logs can contain a URL
or a plaintext byte of content.  Writes are origin-authenticated; every
request leaves exactly one record in an append-only access log, which is
the interface a log-subpoena adversary gets.

A second, deliberately non-oblivious surface (``/plain/...``) emulates a
traditional CDN for partial-deployment and baseline comparisons.

HTTP surface:

    GET  /cache/<id-hex>           -> 200 envelope bytes | 404
    PUT  /cache/<id-hex>           -> 204; headers X-OCDN-Origin (base64
                                      public key), X-OCDN-Sig (base64)
    GET  /plain/<token>            -> 200 | 404   (token: URL-safe base64)
    PUT  /plain/<token>            -> 204
    GET  /admin/log                -> JSON lines, loopback peers only
"""

from __future__ import annotations

import base64
import json
import threading
from collections import OrderedDict
from dataclasses import dataclass

from . import core
from .transport import SystemClock, get_header

H_ORIGIN = "X-OCDN-Origin"
H_SIG = "X-OCDN-Sig"


class CacheRejection(core.OcdnError):
    """A write failed its authentication or origin-consistency check."""


@dataclass(frozen=True)
class AccessLogRecord:
    time: float
    peer: str
    verb: str
    id_hex: str

    def as_dict(self) -> dict:
        return {"time": self.time, "peer": self.peer, "verb": self.verb, "id": self.id_hex}


@dataclass
class CacheEntry:
    id_hex: str
    envelope_bytes: bytes
    origin_fingerprint: bytes
    stored_at: float


def _is_loopback(peer: str) -> bool:
    host = peer.rsplit(":", 1)[0] if ":" in peer and not peer.startswith("::") else peer
    return peer == "local" or host.startswith("127.") or host in ("::1", "localhost")


class CacheNode:
    """Oblivious key-value store with LRU eviction and an access log.

    Without a trusted-origin allowlist the first writer of an identifier
    binds its origin key; later updates must come from the same origin.
    With ``trusted_origins`` set, first writes are additionally restricted
    to the listed key fingerprints.
    """

    def __init__(self, clock=None, capacity: int | None = None,
                 trusted_origins: list[bytes] | None = None):
        self.clock = clock or SystemClock()
        self.capacity = capacity
        self.trusted_origins = set(trusted_origins) if trusted_origins is not None else None
        self._entries: OrderedDict[str, CacheEntry] = OrderedDict()
        self._plain: OrderedDict[str, bytes] = OrderedDict()
        self._log: list[AccessLogRecord] = []
        self._lock = threading.RLock()

    # -- core operations ----------------------------------------------------

    def put_object(self, oid: core.ObfuscatedId, envelope_bytes: bytes,
                   origin_pub_der: bytes, signature: bytes, peer: str = "local") -> None:
        self._append_log("PUT", oid.hex, peer)
        env = core.ContentEnvelope.from_bytes(envelope_bytes)
        pub = core.load_public_key(origin_pub_der)
        if not core.verify_update(pub, oid, env, signature):
            raise CacheRejection("bad update signature")
        fingerprint = core.key_fingerprint(origin_pub_der)
        with self._lock:
            existing = self._entries.get(oid.hex)
            if existing is not None:
                if existing.origin_fingerprint != fingerprint:
                    raise CacheRejection("update signed by a different origin")
            elif self.trusted_origins is not None and fingerprint not in self.trusted_origins:
                raise CacheRejection("origin not on the trusted list")
            self._entries[oid.hex] = CacheEntry(
                oid.hex, envelope_bytes, fingerprint, self.clock.now()
            )
            self._entries.move_to_end(oid.hex)
            self._evict()

    def get_object(self, oid: core.ObfuscatedId, peer: str = "local") -> bytes | None:
        self._append_log("GET", oid.hex, peer)
        with self._lock:
            entry = self._entries.get(oid.hex)
            if entry is None:
                return None
            self._entries.move_to_end(oid.hex)
            return entry.envelope_bytes

    def dump_log(self) -> tuple[AccessLogRecord, ...]:
        with self._lock:
            return tuple(self._log)

    # -- plaintext comparator surface ----------------------------------------

    def put_plain(self, token: str, data: bytes, peer: str = "local") -> None:
        self._append_log("PUT", f"plain:{token}", peer)
        with self._lock:
            self._plain[token] = data
            self._plain.move_to_end(token)

    def get_plain(self, token: str, peer: str = "local") -> bytes | None:
        self._append_log("GET", f"plain:{token}", peer)
        with self._lock:
            return self._plain.get(token)

    # -- internals ------------------------------------------------------------

    def _append_log(self, verb: str, id_hex: str, peer: str) -> None:
        with self._lock:
            self._log.append(AccessLogRecord(self.clock.now(), peer, verb, id_hex))

    def _evict(self) -> None:
        if self.capacity is None:
            return
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def entries_snapshot(self) -> list[CacheEntry]:
        with self._lock:
            return list(self._entries.values())

    def plain_snapshot(self) -> list[tuple[str, bytes]]:
        with self._lock:
            return list(self._plain.items())

    # -- wire dispatch ---------------------------------------------------------

    def dispatch(self, verb: str, path: str, headers: dict[str, str], body: bytes,
                 peer: str) -> tuple[int, dict[str, str], bytes]:
        try:
            return self._dispatch(verb, path, headers, body, peer)
        except CacheRejection as exc:
            return 403, {}, str(exc).encode()
        except core.MalformedError as exc:
            return 400, {}, str(exc).encode()

    def _dispatch(self, verb, path, headers, body, peer):
        if path.startswith("/cache/"):
            oid = core.ObfuscatedId.from_hex(path[len("/cache/"):])
            if verb == "GET":
                data = self.get_object(oid, peer)
                if data is None:
                    return 404, {}, b"not found"
                return 200, {"Content-Type": "application/octet-stream"}, data
            if verb == "PUT":
                origin_b64 = get_header(headers, H_ORIGIN)
                sig_b64 = get_header(headers, H_SIG)
                if not origin_b64 or not sig_b64:
                    return 400, {}, b"missing origin or signature header"
                self.put_object(
                    oid, body, base64.b64decode(origin_b64), base64.b64decode(sig_b64), peer
                )
                return 204, {}, b""
        if path.startswith("/plain/"):
            token = path[len("/plain/"):]
            if verb == "GET":
                data = self.get_plain(token, peer)
                return (200, {}, data) if data is not None else (404, {}, b"not found")
            if verb == "PUT":
                self.put_plain(token, body, peer)
                return 204, {}, b""
        if path == "/admin/log" and verb == "GET":
            if not _is_loopback(peer):
                return 403, {}, b"admin interface is loopback only"
            lines = "\n".join(json.dumps(r.as_dict(), sort_keys=True) for r in self.dump_log())
            return 200, {"Content-Type": "application/x-ndjson"}, lines.encode()
        return 404, {}, b"no such endpoint"
