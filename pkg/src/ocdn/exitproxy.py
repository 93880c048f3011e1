"""The key-holding exit proxy.

Terminates source routes: unseals the session key, recovers the plaintext
URL, translates it to an obfuscated identifier under a uniformly chosen
published encoding, fetches the envelope from a cache node, re-encrypts
the plaintext under the session key and delivers the response to every
route member.  The proxy keeps per-request state only between receipt and
fan-out, and that state never distinguishes which member originated the
request.

HTTP surface:

    POST /ocdn/relay    headers X-OCDN (b64 sealed session key),
                        X-OCDN-Route (addr1,addr2,...),
                        X-OCDN-Req (hex request id);
                        body = encrypted URL bytes

Fan-out: POST /ocdn/deliver to each route member, echoing X-OCDN-Req,
body = session-key-encrypted (status, content).
"""

from __future__ import annotations

import base64
import threading
from collections import deque
from dataclasses import dataclass

from . import core
from .keydist import KeyFetcher, Refusal
from .ring import SelfCertifyingId
from .transport import NULL_OPS, SystemClock, TransportError, get_header

H_SESSION = "X-OCDN"
H_ROUTE = "X-OCDN-Route"
H_REQ = "X-OCDN-Req"

FLASH_WINDOW_S = 10.0
FLASH_THRESHOLD_RPS = 50.0
FLASH_TTL_S = 30.0


@dataclass
class PendingRequest:
    request_id: bytes
    session_key: core.SessionKey
    route: tuple[str, ...]
    received_at: float


class FlashcrowdGate:
    """Sliding-window rate estimator plus a short-TTL envelope cache.

    While an identifier's request rate exceeds the threshold, its envelope
    is served from here and the cache node never sees the surge.
    """

    def __init__(self, clock, window_s: float = FLASH_WINDOW_S,
                 threshold_rps: float = FLASH_THRESHOLD_RPS, ttl_s: float = FLASH_TTL_S):
        self.clock = clock
        self.window_s = window_s
        self.threshold_rps = threshold_rps
        self.ttl_s = ttl_s
        self._arrivals: dict[str, deque[float]] = {}
        self._cache: dict[str, tuple[bytes, float]] = {}
        self._lock = threading.Lock()

    def note_request(self, id_hex: str) -> float:
        """Record an arrival; returns the current estimated rate (req/s)."""
        now = self.clock.now()
        with self._lock:
            q = self._arrivals.setdefault(id_hex, deque())
            q.append(now)
            while q and q[0] < now - self.window_s:
                q.popleft()
            return len(q) / self.window_s

    def admitted(self, id_hex: str) -> bool:
        with self._lock:
            q = self._arrivals.get(id_hex)
            if not q:
                return False
            now = self.clock.now()
            while q and q[0] < now - self.window_s:
                q.popleft()
            return len(q) / self.window_s > self.threshold_rps

    def lookup(self, id_hex: str) -> bytes | None:
        with self._lock:
            hit = self._cache.get(id_hex)
            if hit is None:
                return None
            data, inserted = hit
            if self.clock.now() - inserted > self.ttl_s:
                del self._cache[id_hex]
                return None
            return data

    def store(self, id_hex: str, data: bytes) -> None:
        with self._lock:
            self._cache[id_hex] = (data, self.clock.now())


class ExitProxy:
    """One exit proxy instance, addressable at ``addr``."""

    def __init__(
        self,
        addr: str,
        member_id: SelfCertifyingId,
        keypair: core.KeyPair,
        fetcher: KeyFetcher,
        cache_addrs: list[str],
        transport,
        rng=None,
        clock=None,
        ops=NULL_OPS,
        observer=None,
        flash_gate: FlashcrowdGate | None = None,
    ):
        self.addr = addr
        self.member_id = member_id
        self.keypair = keypair
        self.fetcher = fetcher
        self.cache_addrs = list(cache_addrs)
        self.transport = transport
        self.rng = rng if rng is not None else core._SYSTEM_RNG
        self.clock = clock or SystemClock()
        self.ops = ops
        self.observer = observer  # adversarial-exit hook: called with (req hex, route, peer)
        self.flash = flash_gate or FlashcrowdGate(self.clock)
        self.pending: dict[str, PendingRequest] = {}
        self._pending_lock = threading.Lock()
        self._cache_rr = 0

    # -- content path --------------------------------------------------------

    def refresh_on_expiry(self, url: core.CanonicalUrl) -> core.SharedKey:
        """Fetch (or re-fetch, if expired) the shared key for a URL."""
        return self.fetcher.fetch_key(url)

    def _get_envelope(self, id_hex: str) -> bytes | None:
        """Fetch from the flashcrowd cache when hot, else from a cache node."""
        self.flash.note_request(id_hex)
        hot = self.flash.admitted(id_hex)
        if hot:
            cached = self.flash.lookup(id_hex)
            if cached is not None:
                return cached
        data = self._cache_node_get(id_hex)
        if hot and data is not None:
            self.flash.store(id_hex, data)
        return data

    def _cache_node_get(self, id_hex: str) -> bytes | None:
        last_err: Exception | None = None
        for k in range(len(self.cache_addrs)):
            addr = self.cache_addrs[(self._cache_rr + k) % len(self.cache_addrs)]
            try:
                resp = self.transport.request(
                    addr, "GET", f"/cache/{id_hex}", {}, b"", src=self.addr
                )
            except TransportError as exc:
                last_err = exc
                continue
            self._cache_rr = (self._cache_rr + k + 1) % len(self.cache_addrs)
            if resp.status == 404:
                return None
            if resp.status == 200:
                return resp.body
            last_err = core.OcdnError(f"cache answered HTTP {resp.status}")
        raise last_err or TransportError("no cache nodes configured")

    def fetch_for(self, url: core.CanonicalUrl) -> bytes:
        """URL -> plaintext, via key fetch, id derivation and cache lookup.

        Raises Refusal, FileNotFoundError, TamperError or TransportError;
        the relay handler maps these onto response statuses.
        """
        record = self.fetcher.fetch_record(url)
        with self.ops.timed(self.addr, "hmac_derive", len(url.text)):
            i = self.rng.randrange(record.encodings)
            oid = core.derive_obfuscated_id(record.key, url, i)
        raw = self._get_envelope(oid.hex)
        if raw is None:
            raise FileNotFoundError(oid.hex)
        env = core.ContentEnvelope.from_bytes(raw)
        with self.ops.timed(self.addr, "shared_key_decrypt", env.padded_len):
            return core.open_content(record.key, env)

    # -- relay handling --------------------------------------------------------

    def handle_relay(self, headers: dict[str, str], body: bytes,
                     peer: str) -> tuple[int, dict[str, str], bytes]:
        route_raw = get_header(headers, H_ROUTE) or ""
        req_hex = get_header(headers, H_REQ) or ""
        sealed_b64 = get_header(headers, H_SESSION) or ""
        route = tuple(h for h in route_raw.split(",") if h)
        if len(route) < 2 or not req_hex or not sealed_b64:
            return 400, {}, b"malformed relay message"
        if route[-1] != self.addr:
            return 400, {}, b"not the terminal hop of this route"
        members = route[:-1]
        if self.observer is not None:
            self.observer(req_hex, route, peer)

        with self.ops.timed(self.addr, "session_key_unseal", core.SEALED_KEY_LEN):
            try:
                skey = core.open_session_key(
                    self.keypair.private_key, base64.b64decode(sealed_b64)
                )
            except (core.TamperError, ValueError):
                skey = None
        if skey is None:
            # No session key, so nothing can be said to anyone: deliver the
            # same opaque noise to the whole route and forget the request.
            self._fan_out(members, req_hex, self.rng.randbytes(48))
            return 204, {}, b""

        try:
            request_id = bytes.fromhex(req_hex)
        except ValueError:
            request_id = b""
        entry = PendingRequest(request_id, skey, route, self.clock.now())
        with self._pending_lock:
            self.pending[req_hex] = entry

        status, payload = self._serve(skey, body)
        with self.ops.timed(self.addr, "session_key_encrypt", len(payload)):
            resp = core.seal_response(skey, status, payload, self.rng)
        self._fan_out(members, req_hex, resp)
        with self._pending_lock:
            self.pending.pop(req_hex, None)
        return 204, {}, b""

    def _serve(self, skey: core.SessionKey, body: bytes) -> tuple[int, bytes]:
        with self.ops.timed(self.addr, "url_decrypt", len(body)):
            try:
                url = core.decrypt_url(skey, body)
            except (core.TamperError, core.MalformedError):
                return core.STATUS_BAD_REQUEST, b""
        try:
            plaintext = self.fetch_for(url)
        except Refusal:
            return core.STATUS_UPSTREAM_ERROR, b""
        except TransportError:
            return core.STATUS_UPSTREAM_ERROR, b""
        except FileNotFoundError:
            return core.STATUS_NOT_FOUND, b""
        except (core.TamperError, core.MalformedError):
            return core.STATUS_INTEGRITY_ERROR, b""
        return core.STATUS_OK, plaintext

    def _fan_out(self, members: tuple[str, ...], req_hex: str, body: bytes) -> None:
        """Deliver the same payload to every route member, best effort."""
        for member in members:
            try:
                self.transport.request(
                    member, "POST", "/ocdn/deliver", {H_REQ: req_hex}, body, src=self.addr
                )
            except TransportError:
                continue

    # -- wire dispatch -----------------------------------------------------------

    def dispatch(self, verb: str, path: str, headers: dict[str, str], body: bytes,
                 peer: str) -> tuple[int, dict[str, str], bytes]:
        if verb == "POST" and path == "/ocdn/relay":
            return self.handle_relay(headers, body, peer)
        return 404, {}, b"no such endpoint"
