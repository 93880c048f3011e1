"""Origin-server pipeline: obfuscate, encode and push content to cache
nodes; manage updates, key rotation, URL encodings and partial
participation.

One shared key covers one url prefix (scheme://host/).  Every object can
be published under several URL encodings, giving several unlinkable cache
entries for the same bytes; the encoding counts can be chosen from a
popularity profile so the request distribution an adversary sees over
identifiers flattens toward uniform.
"""

from __future__ import annotations

import base64
import threading
from dataclasses import dataclass, field

from . import core
from .cachenode import H_ORIGIN, H_SIG
from .keydist import KeyDirectory
from .transport import SystemClock, TransportError

DEFAULT_KEY_TTL_S = 24 * 3600.0

PARTICIPATION_MODES = ("encrypted", "plaintext", "both")


class PublishError(core.OcdnError):
    pass


class PartialRotationError(core.OcdnError):
    """A rotation re-push failed on some nodes; old entries remain there
    until a retry overwrites them."""

    def __init__(self, prefix: str, unpushed: list[tuple[str, str]]):
        super().__init__(f"rotation of {prefix} left {len(unpushed)} pushes undone")
        self.unpushed = unpushed


def plain_token(url: core.CanonicalUrl) -> str:
    """Cache path token for the non-oblivious comparator surface."""
    return base64.urlsafe_b64encode(url.text.encode()).decode().rstrip("=")


@dataclass
class PublishPlan:
    """What to publish where.

    ``encodings`` maps url text -> number of encodings (default 1);
    ``participation`` maps url text -> encrypted | plaintext | both.
    """

    objects: list[tuple[core.CanonicalUrl, bytes]]
    cache_targets: list[str]
    encodings: dict[str, int] = field(default_factory=dict)
    participation: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.cache_targets:
            raise ValueError("need at least one cache target")
        for url_text, n in self.encodings.items():
            if not 1 <= n <= core.MAX_ENCODINGS:
                raise ValueError(f"{url_text}: encoding count {n} out of range")
        for url_text, mode in self.participation.items():
            if mode not in PARTICIPATION_MODES:
                raise ValueError(f"{url_text}: bad participation mode {mode!r}")

    def n_for(self, url: core.CanonicalUrl) -> int:
        return self.encodings.get(url.text, 1)

    def participation_for(self, url: core.CanonicalUrl) -> str:
        return self.participation.get(url.text, "encrypted")


@dataclass
class PublishRecord:
    url: str
    encoding_index: int
    id_hex: str
    targets_ok: list[str]


@dataclass
class PublishReport:
    records: list[PublishRecord] = field(default_factory=list)
    failures: list[tuple[str, str, str]] = field(default_factory=list)  # (url, target, reason)

    @property
    def ok(self) -> bool:
        """Publish counts as successful when every (url, encoding) landed
        on at least one target."""
        return bool(self.records) and all(r.targets_ok for r in self.records)


class Origin:
    """Origin server state: keypair, shared keys, published index, and the
    authoritative key directory it answers queries from."""

    def __init__(self, keypair: core.KeyPair, directory: KeyDirectory, transport,
                 rng=None, clock=None, key_ttl_s: float = DEFAULT_KEY_TTL_S,
                 addr: str = "origin", pad_min_rung: int = core.MIN_RUNG,
                 pad_step: int = core.LADDER_STEP):
        self.keypair = keypair
        self.directory = directory
        self.transport = transport
        self.rng = rng
        self.clock = clock or SystemClock()
        self.key_ttl_s = key_ttl_s
        self.addr = addr
        self.pad_min_rung = pad_min_rung
        self.pad_step = pad_step
        self.content: dict[str, bytes] = {}
        self.index: dict[tuple[str, int], core.ObfuscatedId] = {}
        self.cache_targets: list[str] = []
        self.participation: dict[str, str] = {}
        self._key_locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    # -- keys -------------------------------------------------------------

    def _lock_for_prefix(self, prefix: str) -> threading.Lock:
        with self._guard:
            return self._key_locks.setdefault(prefix, threading.Lock())

    def ensure_key(self, url: core.CanonicalUrl) -> core.SharedKey:
        prefix = url.prefix
        with self._lock_for_prefix(prefix):
            key = self.directory.keys.get(prefix)
            if key is None:
                key = core.new_shared_key(self.rng, now=self.clock.now(), ttl_s=self.key_ttl_s)
                self.directory.keys[prefix] = key
            return key

    # -- publishing ---------------------------------------------------------

    def publish(self, plan: PublishPlan) -> PublishReport:
        report = PublishReport()
        self.cache_targets = list(plan.cache_targets)
        for url, data in plan.objects:
            n = plan.n_for(url)
            mode = plan.participation_for(url)
            self.content[url.text] = data
            self.participation[url.text] = mode
            if mode in ("encrypted", "both"):
                key = self.ensure_key(url)
                self.directory.published[url.text] = n
                for i in range(n):
                    self._push_encoding(report, plan.cache_targets, key, url, data, i)
            if mode in ("plaintext", "both"):
                self._push_plain(report, plan.cache_targets, url, data)
        return report

    def _push_encoding(self, report, targets, key, url, data, i) -> None:
        oid = core.derive_obfuscated_id(key, url, i)
        env = core.seal_content(key, data, self.rng,
                                min_rung=self.pad_min_rung, step=self.pad_step)
        raw = env.to_bytes()
        sig = core.sign_update(self.keypair.private_key, oid, env)
        headers = {
            H_ORIGIN: base64.b64encode(self.keypair.public_der).decode(),
            H_SIG: base64.b64encode(sig).decode(),
        }
        ok: list[str] = []
        for target in targets:
            try:
                resp = self.transport.request(
                    target, "PUT", f"/cache/{oid.hex}", headers, raw, src=self.addr
                )
            except TransportError as exc:
                report.failures.append((url.text, target, str(exc)))
                continue
            if resp.status in (200, 204):
                ok.append(target)
            else:
                report.failures.append((url.text, target, f"HTTP {resp.status}"))
        self.index[(url.text, i)] = oid
        report.records.append(PublishRecord(url.text, i, oid.hex, ok))

    def _push_plain(self, report, targets, url, data) -> None:
        token = plain_token(url)
        ok = []
        for target in targets:
            try:
                resp = self.transport.request(
                    target, "PUT", f"/plain/{token}", {}, data, src=self.addr
                )
                if resp.status in (200, 204):
                    ok.append(target)
                else:
                    report.failures.append((url.text, target, f"HTTP {resp.status}"))
            except TransportError as exc:
                report.failures.append((url.text, target, str(exc)))
        report.records.append(PublishRecord(url.text, -1, f"plain:{token}", ok))

    def update_content(self, url: core.CanonicalUrl, data: bytes) -> PublishReport:
        """Re-seal changed bytes under the existing key; identifiers stay put."""
        if url.text not in self.content:
            raise PublishError(f"{url.text} was never published")
        self.content[url.text] = data
        report = PublishReport()
        mode = self.participation.get(url.text, "encrypted")
        if mode in ("encrypted", "both"):
            key = self.directory.keys.get(url.prefix)
            if key is None:
                raise PublishError(f"no shared key for {url.prefix}")
            n = self.directory.published.get(url.text, 1)
            for i in range(n):
                self._push_encoding(report, self.cache_targets, key, url, data, i)
        if mode in ("plaintext", "both"):
            self._push_plain(report, self.cache_targets, url, data)
        return report

    # -- key rotation --------------------------------------------------------

    def rotate_key(self, prefix: str, force: bool = False) -> core.SharedKey:
        """Swap in a fresh key for a prefix and re-push everything under it.

        Old cache entries stay (under identifiers nobody derives any more)
        until overwritten or evicted.  On partial push failure the new key
        is already live, so the caller retries the pushes.
        """
        with self._lock_for_prefix(prefix):
            old = self.directory.keys.get(prefix)
            if old is None:
                raise PublishError(f"no key for {prefix}")
            if not force and self.clock.now() < old.expires_at:
                raise PublishError(f"key for {prefix} has not expired; use force")
            new_key = core.new_shared_key(self.rng, now=self.clock.now(), ttl_s=self.key_ttl_s)
            self.directory.keys[prefix] = new_key
        report = PublishReport()
        for url_text, data in self.content.items():
            url = core.CanonicalUrl.parse(url_text)
            if url.prefix != prefix:
                continue
            if self.participation.get(url_text, "encrypted") == "plaintext":
                continue
            n = self.directory.published.get(url_text, 1)
            for i in range(n):
                self._push_encoding(report, self.cache_targets, new_key, url, data, i)
        unpushed = [(u, t) for (u, t, _reason) in report.failures]
        if unpushed:
            raise PartialRotationError(prefix, unpushed)
        return new_key


def choose_encoding_counts(popularity: dict[str, float],
                           cap: int = core.MAX_ENCODINGS) -> dict[str, int]:
    """Encoding counts proportional to request share, clamped to [1, cap].

    Splitting a popular URL across n identifiers divides its per-identifier
    share by n, so scaling counts by share flattens what an adversary sees.
    Exact uniformity is out of reach with a bounded cap; the result is a
    strictly smaller max/min per-identifier ratio.
    """
    if not popularity:
        raise ValueError("popularity mapping is empty")
    total = sum(popularity.values())
    if any(s < 0 for s in popularity.values()):
        raise ValueError("shares must be nonnegative")
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"shares must sum to 1, got {total}")
    positive = [s for s in popularity.values() if s > 0]
    if not positive:
        raise ValueError("at least one share must be positive")
    floor = min(positive)
    return {
        u: max(1, min(cap, round(s / floor))) if s > 0 else 1
        for u, s in popularity.items()
    }
