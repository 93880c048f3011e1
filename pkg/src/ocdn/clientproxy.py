"""Peer node run by every client.

A client node plays three parts at once: it originates requests (session
key, encrypted URL, source route with an optional spoofed prefix), it
forwards other peers' requests unchanged to the next hop, and it accepts
multicast deliveries, decrypting the ones whose session key it holds and
silently discarding the rest.

Route shapes (terminal hop is always the exit proxy):

    direct              [self, exit]                 sent to exit
    routed(k)           [self, p1..pk, exit]         sent to p1
    spoofed_direct(p)   [d1..dp, self, exit]         sent straight to exit

A spoofed-direct message is structurally identical to a routed message
arriving at hop index p; nothing on the wire encodes the prefix length.

Membership is a minimal static-seed + signed-announcement design with
pairwise anti-entropy table exchange (POST /ocdn/peers).
"""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519

from . import core
from .exitproxy import H_REQ, H_ROUTE, H_SESSION
from .ring import Ring, Roster, SelfCertifyingId, position_of_url
from .transport import NULL_OPS, SystemClock, TransportError, get_header

PEER_EXPIRY_S = 600.0
ANTI_ENTROPY_INTERVAL_S = 30.0


class RouteError(core.OcdnError):
    pass


class InsufficientPeersError(RouteError):
    pass


class RequestFailed(core.OcdnError):
    def __init__(self, status: int):
        super().__init__(f"request failed with status {status}")
        self.status = status


@dataclass(frozen=True)
class SourceRoute:
    """Ordered hop list; ``spoofed_prefix_len`` is local knowledge only and
    never appears on the wire."""

    hops: tuple[str, ...]
    spoofed_prefix_len: int = 0

    def __post_init__(self):
        if len(self.hops) < 2:
            raise RouteError("route needs at least an originator and an exit")
        if len(set(self.hops)) != len(self.hops):
            raise RouteError("route hops must be distinct")
        if not 0 <= self.spoofed_prefix_len < len(self.hops) - 1:
            raise RouteError("spoofed prefix must be shorter than the route")

    @property
    def terminal(self) -> str:
        return self.hops[-1]

    def header_value(self) -> str:
        return ",".join(self.hops)


class ExitDirectory:
    """Ring snapshot + roster, resolving a URL to the exit that owns it.

    ``encodings`` (url text -> published count) lets a client spread its
    lookups across all encodings of a URL; absent an entry it uses
    encoding 0, which is always published.
    """

    def __init__(self, ring: Ring, roster: Roster, encodings: dict[str, int] | None = None):
        self.ring = ring
        self.roster = roster
        self.encodings = dict(encodings or {})

    def n_for(self, url: core.CanonicalUrl) -> int:
        return self.encodings.get(url.text, 1)

    def owner_member(self, url: core.CanonicalUrl, encoding_index: int = 0) -> SelfCertifyingId:
        return self.ring.owners_of(position_of_url(url, encoding_index))[0]

    def lookup(self, url: core.CanonicalUrl, encoding_index: int = 0) -> str:
        return self.roster.address_of(self.owner_member(url, encoding_index))

    def public_key_for(self, url: core.CanonicalUrl, encoding_index: int = 0):
        return self.roster.public_key_of(self.owner_member(url, encoding_index))


# ---------------------------------------------------------------------------
# Membership
# ---------------------------------------------------------------------------


def _announcement_payload(addr: str, kind: str, ts: float) -> bytes:
    return json.dumps({"addr": addr, "kind": kind, "ts": ts}, sort_keys=True).encode()


def make_announcement(addr: str, kind: str, ts: float,
                      signing_key: ed25519.Ed25519PrivateKey) -> dict:
    if kind not in ("join", "leave"):
        raise ValueError("announcement kind must be join or leave")
    sig = signing_key.sign(_announcement_payload(addr, kind, ts))
    pub = signing_key.public_key().public_bytes_raw()
    return {
        "addr": addr,
        "kind": kind,
        "ts": ts,
        "pub": base64.b64encode(pub).decode(),
        "sig": base64.b64encode(sig).decode(),
    }


@dataclass
class PeerRecord:
    addr: str
    kind: str
    ts: float
    pub_raw: bytes
    announcement: dict


class PeerTable:
    """Known peers with newest-announcement-wins merge semantics.

    A peer's first verified announcement pins its signing key; later
    announcements for the same address must verify under the same key.
    Entries expire after the inactivity window; malformed or badly signed
    announcements are ignored.
    """

    def __init__(self, self_addr: str, clock=None, expiry_s: float = PEER_EXPIRY_S):
        self.self_addr = self_addr
        self.clock = clock or SystemClock()
        self.expiry_s = expiry_s
        self._records: dict[str, PeerRecord] = {}
        self._lock = threading.Lock()

    def merge(self, announcements: list[dict]) -> None:
        for ann in announcements:
            rec = self._verify(ann)
            if rec is None:
                continue
            with self._lock:
                current = self._records.get(rec.addr)
                if current is not None and current.ts >= rec.ts:
                    continue
                if current is not None and current.pub_raw != rec.pub_raw:
                    continue  # key substitution for a known peer
                self._records[rec.addr] = rec
        self._prune()

    def _verify(self, ann: dict) -> PeerRecord | None:
        try:
            addr, kind, ts = ann["addr"], ann["kind"], float(ann["ts"])
            pub_raw = base64.b64decode(ann["pub"])
            sig = base64.b64decode(ann["sig"])
            pub = ed25519.Ed25519PublicKey.from_public_bytes(pub_raw)
            pub.verify(sig, _announcement_payload(addr, kind, ts))
        except (KeyError, TypeError, ValueError, InvalidSignature):
            return None
        if kind not in ("join", "leave"):
            return None
        return PeerRecord(addr, kind, ts, pub_raw, dict(ann))

    def _prune(self) -> None:
        cutoff = self.clock.now() - self.expiry_s
        with self._lock:
            stale = [a for a, r in self._records.items() if r.ts < cutoff]
            for a in stale:
                del self._records[a]

    def add_static(self, addrs: list[str]) -> None:
        """Seed peers known out-of-band (no announcement to verify)."""
        now = self.clock.now()
        with self._lock:
            for a in addrs:
                if a != self.self_addr and a not in self._records:
                    self._records[a] = PeerRecord(a, "join", now, b"", {})

    def peers(self) -> list[str]:
        self._prune()
        with self._lock:
            return sorted(
                a for a, r in self._records.items()
                if r.kind == "join" and a != self.self_addr
            )

    def announcements(self) -> list[dict]:
        with self._lock:
            return [r.announcement for r in self._records.values() if r.announcement]


# ---------------------------------------------------------------------------
# Client node
# ---------------------------------------------------------------------------


@dataclass
class _PendingEntry:
    session_key: core.SessionKey
    event: threading.Event = field(default_factory=threading.Event)
    result: tuple[int, bytes] | None = None
    t_first: float | None = None
    t_done: float | None = None


class ClientNode:
    """One peer: originator, forwarder and delivery sink in a single node."""

    def __init__(
        self,
        addr: str,
        directory: ExitDirectory,
        transport,
        rng=None,
        clock=None,
        ops=NULL_OPS,
        signing_key: ed25519.Ed25519PrivateKey | None = None,
        is_exit: bool = False,
        perf=None,
    ):
        self.addr = addr
        self.directory = directory
        self.transport = transport
        self.rng = rng if rng is not None else core._SYSTEM_RNG
        self.clock = clock or SystemClock()
        self.ops = ops
        self.signing_key = signing_key or ed25519.Ed25519PrivateKey.generate()
        self.is_exit = is_exit
        self.peer_table = PeerTable(addr, self.clock)
        self.pending: dict[str, _PendingEntry] = {}
        self._pending_lock = threading.Lock()
        self.refresh_directory = None  # optional hook: () -> ExitDirectory
        import time as _time
        self.perf = perf or _time.perf_counter

    # -- request construction ---------------------------------------------------

    def _pick_peers(self, count: int, exclude: tuple[str, ...]) -> list[str]:
        candidates = [p for p in self.peer_table.peers() if p not in exclude]
        if len(candidates) < count:
            raise InsufficientPeersError(
                f"mode needs {count} peers, only {len(candidates)} known"
            )
        # rng.sample keeps runs reproducible under an injected generator
        idx = sorted(range(len(candidates)), key=lambda _: self.rng.randbytes(8))
        return [candidates[i] for i in idx[:count]]

    def build_route(self, exit_addr: str, mode: str) -> SourceRoute:
        kind, k = parse_mode(mode)
        if kind == "direct":
            return SourceRoute((self.addr, exit_addr))
        if kind == "routed":
            peers = self._pick_peers(k, (self.addr, exit_addr))
            return SourceRoute((self.addr, *peers, exit_addr))
        peers = self._pick_peers(k, (self.addr, exit_addr))
        return SourceRoute((*peers, self.addr, exit_addr), spoofed_prefix_len=k)

    def build_request(
        self, url: core.CanonicalUrl, mode: str
    ) -> tuple[str, str, dict[str, str], bytes]:
        """Returns (request id hex, first wire hop, headers, body)."""
        with self.ops.timed(self.addr, "exit_lookup", 0):
            n = self.directory.n_for(url)
            j = self.rng.randrange(n) if n > 1 else 0
            exit_addr = self.directory.lookup(url, j)
            exit_pub = self.directory.public_key_for(url, j)
        route = self.build_route(exit_addr, mode)
        skey = core.new_session_key(self.rng)
        request_id = self.rng.randbytes(16)
        req_hex = request_id.hex()
        headers = {
            H_SESSION: base64.b64encode(core.seal_session_key(exit_pub, skey)).decode(),
            H_ROUTE: route.header_value(),
            H_REQ: req_hex,
        }
        body = core.encrypt_url(skey, url, self.rng)
        kind, _ = parse_mode(mode)
        first_hop = route.hops[1] if kind == "routed" else route.terminal
        with self._pending_lock:
            self.pending[req_hex] = _PendingEntry(skey)
        return req_hex, first_hop, headers, body

    def fetch(self, url: core.CanonicalUrl, mode: str = "direct",
              timeout_s: float = 10.0) -> tuple[str, _PendingEntry | None]:
        """Send one request and block for its delivery.

        Returns (request id hex, pending entry); the entry is None when the
        first hop was unreachable or nothing arrived within the timeout.
        """
        req_hex, first_hop, headers, body = self.build_request(url, mode)
        try:
            self.transport.request(first_hop, "POST", "/ocdn/relay", headers, body,
                                   src=self.addr)
        except TransportError:
            with self._pending_lock:
                self.pending.pop(req_hex, None)
            return req_hex, None
        return req_hex, self._wait(req_hex, timeout_s)

    def get(self, url: core.CanonicalUrl, mode: str = "direct",
            timeout_s: float = 10.0, _retried: bool = False) -> bytes:
        """Fetch a URL through the network; blocks until delivery."""
        req_hex, entry = self.fetch(url, mode, timeout_s)
        if entry is None or entry.result is None:
            raise TransportError(f"no delivery for request {req_hex} within {timeout_s}s")
        status, payload = entry.result
        if status == core.STATUS_OK:
            return payload
        if status == core.STATUS_UPSTREAM_ERROR and self.refresh_directory and not _retried:
            self.directory = self.refresh_directory()
            return self.get(url, mode, timeout_s, _retried=True)
        raise RequestFailed(status)

    def _wait(self, req_hex: str, timeout_s: float) -> _PendingEntry | None:
        with self._pending_lock:
            entry = self.pending.get(req_hex)
        if entry is None:
            return None
        entry.event.wait(timeout_s)
        with self._pending_lock:
            self.pending.pop(req_hex, None)
        return entry if entry.event.is_set() else None

    # -- forwarding ---------------------------------------------------------------

    def forward(self, headers: dict[str, str], body: bytes) -> tuple[int, dict, bytes]:
        """Pass a relay message unchanged to the successor hop.

        Keeps no state; unreachable successors are dropped (best effort).
        """
        route_raw = get_header(headers, H_ROUTE) or ""
        route = tuple(h for h in route_raw.split(",") if h)
        if self.addr not in route:
            return 204, {}, b""  # misdelivered; drop without comment
        if route[-1] == self.addr:
            if not self.is_exit:
                return 204, {}, b""  # never terminate a route unless an exit
            return 400, {}, b"exit role not active on this node"
        successor = route[route.index(self.addr) + 1]
        try:
            self.transport.request(successor, "POST", "/ocdn/relay", headers, body,
                                   src=self.addr)
        except TransportError:
            pass
        return 204, {}, b""

    # -- delivery ------------------------------------------------------------------

    def accept_delivery(self, headers: dict[str, str], body: bytes) -> tuple[int, dict, bytes]:
        """Decrypt a delivery if we originated it, else discard silently.

        The wire behavior is identical in every case (204, empty), so a
        watcher cannot tell the originator from the other route members.
        """
        req_hex = get_header(headers, H_REQ) or ""
        with self._pending_lock:
            entry = self.pending.get(req_hex)
        if entry is None or entry.result is not None:
            return 204, {}, b""
        t_first = self.perf()
        with self.ops.timed(self.addr, "client_decrypt", len(body)):
            try:
                status, payload = core.open_response(entry.session_key, body)
            except (core.TamperError, core.MalformedError):
                return 204, {}, b""
        entry.t_first = t_first
        entry.result = (status, payload)
        entry.t_done = self.perf()
        entry.event.set()
        return 204, {}, b""

    # -- membership -------------------------------------------------------------------

    def announce(self, kind: str = "join") -> dict:
        ann = make_announcement(self.addr, kind, self.clock.now(), self.signing_key)
        self.peer_table.merge([ann])
        return ann

    def membership_sync(self, peer_addr: str) -> None:
        """Pairwise anti-entropy: swap full announcement tables."""
        mine = json.dumps(self.peer_table.announcements()).encode()
        try:
            resp = self.transport.request(
                peer_addr, "POST", "/ocdn/peers", {}, mine, src=self.addr
            )
        except TransportError:
            return
        if resp.status == 200:
            try:
                self.peer_table.merge(json.loads(resp.body.decode()))
            except ValueError:
                pass

    def handle_peers(self, body: bytes) -> tuple[int, dict, bytes]:
        try:
            theirs = json.loads(body.decode())
        except ValueError:
            return 400, {}, b"bad announcement list"
        if isinstance(theirs, list):
            self.peer_table.merge(theirs)
        return 200, {}, json.dumps(self.peer_table.announcements()).encode()

    # -- wire dispatch -------------------------------------------------------------------

    def dispatch(self, verb: str, path: str, headers: dict[str, str], body: bytes,
                 peer: str) -> tuple[int, dict[str, str], bytes]:
        if verb == "POST" and path == "/ocdn/relay":
            return self.forward(headers, body)
        if verb == "POST" and path == "/ocdn/deliver":
            return self.accept_delivery(headers, body)
        if verb == "POST" and path == "/ocdn/peers":
            return self.handle_peers(body)
        return 404, {}, b"no such endpoint"


def parse_mode(mode: str) -> tuple[str, int]:
    """Parse ``direct`` | ``routed:K`` | ``spoofed_direct:K``."""
    if mode == "direct":
        return "direct", 0
    kind, _, arg = mode.partition(":")
    if kind in ("routed", "spoofed_direct") and arg.isdigit() and int(arg) >= 1:
        return kind, int(arg)
    raise ValueError(f"unknown mode {mode!r}")
