"""Shared-key distribution, modeled on SRV-record answers from an
authoritative DNS.

The origin runs a key directory: given a query naming a URL and carrying
the asking proxy's self-certifying identity plus public key, it certifies
the proxy against its host id, checks that the proxy actually owns the
URL's circle position under some published encoding, and answers with the
shared key sealed to the proxy's key.  Exit proxies cache answers until
the earlier of the key's expiry and a fetch TTL.

Wire protocol: one JSON object per line over a TCP connection.

    query:    {"qname": url, "proxy_id": "ip:hex", "proxy_pub": b64}
    response: {"status": "OK", "srv": {"sealed_key": b64, "key_id": hex,
               "expires_at": unix, "encodings": n, "url_pattern": prefix}}
            | {"status": "REFUSED", "code": "BAD_ID"|"NOT_OWNER"|"UNKNOWN"}
"""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass, field

from . import core, ring as ring_mod
from .transport import SystemClock

BAD_ID = "BAD_ID"
NOT_OWNER = "NOT_OWNER"
UNKNOWN = "UNKNOWN"

DEFAULT_FETCH_TTL_S = 300.0


class Refusal(core.OcdnError):
    def __init__(self, code: str):
        super().__init__(f"key query refused: {code}")
        self.code = code


@dataclass(frozen=True)
class KeyQuery:
    url: core.CanonicalUrl
    proxy_id: ring_mod.SelfCertifyingId
    proxy_pub_der: bytes

    def to_line(self) -> str:
        return json.dumps(
            {
                "qname": self.url.text,
                "proxy_id": self.proxy_id.display,
                "proxy_pub": base64.b64encode(self.proxy_pub_der).decode(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_line(cls, line: str) -> "KeyQuery":
        try:
            obj = json.loads(line)
            return cls(
                core.CanonicalUrl.parse(obj["qname"]),
                ring_mod.SelfCertifyingId.parse(obj["proxy_id"]),
                base64.b64decode(obj["proxy_pub"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise core.MalformedError(f"bad key query: {exc}") from exc


@dataclass(frozen=True)
class KeyRecord:
    """SRV-style answer: the shared key sealed to one proxy, plus the
    published encoding count the proxy needs to pick identifiers."""

    url_pattern: str
    sealed_key: bytes
    key_id: bytes
    expires_at: float
    encodings: int

    def to_line(self) -> str:
        return json.dumps(
            {
                "status": "OK",
                "srv": {
                    "sealed_key": base64.b64encode(self.sealed_key).decode(),
                    "key_id": self.key_id.hex(),
                    "expires_at": self.expires_at,
                    "encodings": self.encodings,
                    "url_pattern": self.url_pattern,
                },
            },
            sort_keys=True,
        )


def refusal_line(code: str) -> str:
    return json.dumps({"status": "REFUSED", "code": code}, sort_keys=True)


class KeyDirectory:
    """Origin-side authoritative key service over an immutable key table.

    ``keys`` maps url prefixes (scheme://host/) to their current shared
    key; ``published`` maps exact URL texts to the number of encodings the
    origin pushed.  The ring snapshot tells it which proxies own what.
    """

    def __init__(self, ring: ring_mod.Ring | None = None):
        self.ring = ring
        self.keys: dict[str, core.SharedKey] = {}
        self.published: dict[str, int] = {}
        self._lock = threading.Lock()
        self.queries_answered = 0

    def key_for(self, url: core.CanonicalUrl) -> core.SharedKey | None:
        return self.keys.get(url.prefix)

    def answer_key_query(self, q: KeyQuery) -> KeyRecord:
        try:
            pub = core.load_public_key(q.proxy_pub_der)
        except core.MalformedError:
            raise Refusal(BAD_ID) from None
        if not ring_mod.verify_member(q.proxy_id, pub):
            raise Refusal(BAD_ID)
        key = self.key_for(q.url)
        if key is None:
            raise Refusal(UNKNOWN)
        # Key grants are per prefix (DNS answers for domains, not paths), so a
        # URL the origin never listed still resolves under encoding 0; the
        # lookup then simply misses at the cache.
        n = self.published.get(q.url.text, 1)
        if self.ring is None:
            raise Refusal(NOT_OWNER)
        owned = any(
            q.proxy_id in self.ring.owners_of(ring_mod.position_of_url(q.url, i))
            for i in range(n)
        )
        if not owned:
            raise Refusal(NOT_OWNER)
        sealed = pub.encrypt(key.key_bytes, core._OAEP)
        return KeyRecord(q.url.prefix, sealed, key.key_id, key.expires_at, n)

    def handle_line(self, line: str) -> str:
        """Wire entry point; always answers with a single JSON line."""
        with self._lock:
            self.queries_answered += 1
        try:
            q = KeyQuery.from_line(line)
        except core.MalformedError:
            return refusal_line(UNKNOWN)
        try:
            return self.answer_key_query(q).to_line()
        except Refusal as r:
            return refusal_line(r.code)


@dataclass
class CachedKey:
    key: core.SharedKey
    encodings: int
    url_pattern: str
    valid_until: float


class KeyFetcher:
    """Proxy-side key client with expiry-aware caching.

    Concurrent fetches for the same URL are coalesced behind a per-URL
    lock so a thundering herd produces one wire round trip.
    """

    def __init__(
        self,
        proxy_id: ring_mod.SelfCertifyingId,
        keypair: core.KeyPair,
        directory_addr,
        transport,
        clock=None,
        fetch_ttl_s: float = DEFAULT_FETCH_TTL_S,
        src_addr: str = "local",
    ):
        self.proxy_id = proxy_id
        self.keypair = keypair
        # Either a single address or a list of (url-prefix, address) pairs.
        self.directory_addr = directory_addr
        self.transport = transport
        self.clock = clock or SystemClock()
        self.fetch_ttl_s = fetch_ttl_s
        self.src_addr = src_addr
        self._cache: dict[str, CachedKey] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self.wire_queries: dict[str, int] = {}

    def _resolve_directory(self, url: core.CanonicalUrl) -> str:
        if isinstance(self.directory_addr, str):
            return self.directory_addr
        best = None
        for prefix, addr in self.directory_addr:
            if url.text.startswith(prefix) and (best is None or len(prefix) > len(best[0])):
                best = (prefix, addr)
        if best is None:
            raise core.OcdnError(f"no key directory configured for {url.text}")
        return best[1]

    def _lock_for(self, url_text: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(url_text, threading.Lock())

    def fetch_record(self, url: core.CanonicalUrl) -> CachedKey:
        cached = self._cache.get(url.text)
        if cached is not None and self.clock.now() < cached.valid_until:
            return cached
        with self._lock_for(url.text):
            cached = self._cache.get(url.text)
            now = self.clock.now()
            if cached is not None and now < cached.valid_until:
                return cached
            record = self._query_wire(url)
            key_bytes = self.keypair.private_key.decrypt(record.sealed_key, core._OAEP)
            key = core.SharedKey(key_bytes, record.expires_at)
            if key.key_id != record.key_id:
                raise core.TamperError("key id in answer does not match sealed key")
            entry = CachedKey(
                key, record.encodings, record.url_pattern,
                min(record.expires_at, now + self.fetch_ttl_s),
            )
            self._cache[url.text] = entry
            return entry

    def fetch_key(self, url: core.CanonicalUrl) -> core.SharedKey:
        return self.fetch_record(url).key

    def _query_wire(self, url: core.CanonicalUrl) -> KeyRecord:
        addr = self._resolve_directory(url)
        q = KeyQuery(url, self.proxy_id, self.keypair.public_der)
        self.wire_queries[url.text] = self.wire_queries.get(url.text, 0) + 1
        reply = self.transport.query_line(addr, q.to_line(), src=self.src_addr)
        try:
            obj = json.loads(reply)
        except ValueError as exc:
            raise core.MalformedError(f"bad key answer: {exc}") from exc
        if obj.get("status") == "REFUSED":
            raise Refusal(obj.get("code", "UNKNOWN"))
        if obj.get("status") != "OK" or "srv" not in obj:
            raise core.MalformedError(f"bad key answer: {reply!r}")
        srv = obj["srv"]
        try:
            return KeyRecord(
                srv.get("url_pattern", url.prefix),
                base64.b64decode(srv["sealed_key"]),
                bytes.fromhex(srv["key_id"]),
                float(srv["expires_at"]),
                int(srv.get("encodings", 1)),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise core.MalformedError(f"bad SRV payload: {exc}") from exc

    def invalidate(self, url: core.CanonicalUrl) -> None:
        self._cache.pop(url.text, None)
