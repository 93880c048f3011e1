"""Consistent-hash circle assigning URLs to exit proxies.

Both proxies and URLs hash onto a 2^256 identifier circle; a URL belongs
to the first proxy point at or after its own position, walking clockwise.
Each member contributes V virtual points so load stays even at small
member counts, and the R distinct successors of a position form its
replica owner list.

Membership is distributed as a signed, line-oriented roster document
(``.roster``): one entry per exit proxy carrying its self-certifying
identity, public key and transport address.
"""

from __future__ import annotations

import base64
import bisect
import hashlib
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import rsa

from . import core

RING_BITS = 256
RING_MOD = 1 << RING_BITS
DEFAULT_VIRTUAL_POINTS = 64

ROSTER_HEADER = "OCDN-ROSTER v1"


class InsufficientMembersError(Exception):
    """Raised when a ring holds fewer members than the replication factor."""


@dataclass(frozen=True)
class SelfCertifyingId:
    """``IP:hostID`` proxy identity where hostID binds a public key.

    Anyone holding the identity and a claimed public key can check the
    binding locally: the hostID is the hash of the key's canonical
    serialization, no third party involved.
    """

    ip: str
    host_id: bytes

    def __post_init__(self):
        if len(self.host_id) != 32:
            raise ValueError("host id must be 32 bytes")

    @property
    def display(self) -> str:
        return f"{self.ip}:{self.host_id.hex()}"

    @classmethod
    def from_public_key(cls, ip: str, pub: rsa.RSAPublicKey) -> "SelfCertifyingId":
        return cls(ip, core.key_fingerprint(core.public_key_der(pub)))

    @classmethod
    def parse(cls, display: str) -> "SelfCertifyingId":
        ip, _, hexid = display.rpartition(":")
        if not ip:
            raise ValueError(f"bad self-certifying id: {display!r}")
        return cls(ip, bytes.fromhex(hexid))


def verify_member(member: SelfCertifyingId, pub: rsa.RSAPublicKey) -> bool:
    """Accept iff the hash of the public key equals the member's host id."""
    return core.key_fingerprint(core.public_key_der(pub)) == member.host_id


@dataclass(frozen=True, order=True)
class RingPosition:
    point: int

    def __post_init__(self):
        if not 0 <= self.point < RING_MOD:
            raise ValueError("point outside identifier circle")

    @classmethod
    def from_bytes(cls, data: bytes) -> "RingPosition":
        return cls(int.from_bytes(hashlib.sha256(data).digest(), "big"))


def position_of_url(url: core.CanonicalUrl, encoding_index: int = 0) -> RingPosition:
    """Circle point of a URL under one of its encodings.

    Uses the same encoded message as identifier derivation, so the party
    that owns a URL's position is the one that can serve its identifier.
    """
    return RingPosition.from_bytes(core.encode_url(url, encoding_index))


def virtual_point(member: SelfCertifyingId, j: int) -> RingPosition:
    return RingPosition.from_bytes(member.display.encode() + b"\x00" + struct.pack(">I", j))


class Ring:
    """Immutable snapshot of the identifier circle.

    Updates produce a new snapshot (``with_member`` / ``without_member``);
    readers holding an old one just see slightly stale ownership, bounded
    by the roster refresh interval.
    """

    def __init__(
        self,
        members: tuple[SelfCertifyingId, ...] | list[SelfCertifyingId] = (),
        virtual_points: int = DEFAULT_VIRTUAL_POINTS,
        replication_factor: int = 1,
    ):
        if virtual_points < 1 or replication_factor < 1:
            raise ValueError("virtual points and replication factor must be >= 1")
        self.members = tuple(dict.fromkeys(members))
        self.virtual_points = virtual_points
        self.replication_factor = replication_factor
        points: list[tuple[int, SelfCertifyingId]] = []
        for m in self.members:
            for j in range(virtual_points):
                points.append((virtual_point(m, j).point, m))
        points.sort(key=lambda pm: (pm[0], pm[1].display))
        self._points = points
        self._keys = [p for p, _ in points]

    def __len__(self) -> int:
        return len(self.members)

    def with_member(self, member: SelfCertifyingId) -> "Ring":
        return Ring(self.members + (member,), self.virtual_points, self.replication_factor)

    def without_member(self, member: SelfCertifyingId) -> "Ring":
        kept = tuple(m for m in self.members if m != member)
        return Ring(kept, self.virtual_points, self.replication_factor)

    def owners_of(self, pos: RingPosition, r: int | None = None) -> list[SelfCertifyingId]:
        """First ``r`` distinct members at or after ``pos``, in walk order."""
        r = self.replication_factor if r is None else r
        if len(self.members) < r:
            raise InsufficientMembersError(
                f"need {r} members, ring has {len(self.members)}"
            )
        start = bisect.bisect_left(self._keys, pos.point)
        owners: list[SelfCertifyingId] = []
        seen = set()
        n = len(self._points)
        for step in range(n):
            _, member = self._points[(start + step) % n]
            if member not in seen:
                seen.add(member)
                owners.append(member)
                if len(owners) == r:
                    break
        return owners

    def owner_of(self, pos: RingPosition) -> SelfCertifyingId:
        return self.owners_of(pos, 1)[0]


def diff_on_change(
    before: Ring, after: Ring, positions: list[RingPosition]
) -> list[RingPosition]:
    """Sampled positions whose owner list differs between two snapshots."""
    if before.virtual_points != after.virtual_points:
        raise ValueError("rings use different hash parameters")
    if before.replication_factor != after.replication_factor:
        raise ValueError("rings use different replication factors")
    return [p for p in positions if before.owners_of(p) != after.owners_of(p)]


# ---------------------------------------------------------------------------
# Signed roster document
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RosterEntry:
    member: SelfCertifyingId
    public_key_der: bytes
    address: str

    def line(self) -> str:
        return (
            f"entry: {self.member.display} "
            f"{base64.b64encode(self.public_key_der).decode()} {self.address}"
        )


@dataclass(frozen=True)
class Roster:
    """Versioned exit-proxy membership list, signed by a roster authority."""

    version: int
    entries: tuple[RosterEntry, ...]

    def body_text(self) -> str:
        lines = [ROSTER_HEADER, f"version: {self.version}"]
        lines += [e.line() for e in self.entries]
        return "\n".join(lines) + "\n"

    def signed_text(self, authority_priv: rsa.RSAPrivateKey) -> str:
        sig = authority_priv.sign(
            self.body_text().encode(), core._PSS, hashes.SHA256()
        )
        return self.body_text() + f"sig: {base64.b64encode(sig).decode()}\n"

    def with_entry(self, entry: RosterEntry) -> "Roster":
        return Roster(self.version + 1, self.entries + (entry,))

    def ring(self, virtual_points: int = DEFAULT_VIRTUAL_POINTS, replication_factor: int = 1) -> Ring:
        return Ring([e.member for e in self.entries], virtual_points, replication_factor)

    def address_of(self, member: SelfCertifyingId) -> str:
        for e in self.entries:
            if e.member == member:
                return e.address
        raise KeyError(member.display)

    def public_key_of(self, member: SelfCertifyingId) -> rsa.RSAPublicKey:
        for e in self.entries:
            if e.member == member:
                return core.load_public_key(e.public_key_der)
        raise KeyError(member.display)


def parse_roster(text: str, authority_pub: rsa.RSAPublicKey | None = None) -> Roster:
    """Parse (and, given the authority key, verify) a roster document.

    Every entry's host id is checked against its public key on load, so a
    roster can never introduce an identity its key does not certify.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != ROSTER_HEADER:
        raise core.MalformedError("not a roster document")
    if not lines[1].startswith("version: "):
        raise core.MalformedError("roster missing version line")
    version = int(lines[1].split(": ", 1)[1])
    sig: bytes | None = None
    entries: list[RosterEntry] = []
    for ln in lines[2:]:
        if ln.startswith("sig: "):
            sig = base64.b64decode(ln.split(": ", 1)[1])
        elif ln.startswith("entry: "):
            fields = ln.split(" ")
            if len(fields) != 4:
                raise core.MalformedError(f"bad roster entry: {ln!r}")
            member = SelfCertifyingId.parse(fields[1])
            der = base64.b64decode(fields[2])
            if core.key_fingerprint(der) != member.host_id:
                raise core.MalformedError(f"roster entry fails self-certification: {fields[1]}")
            entries.append(RosterEntry(member, der, fields[3]))
        else:
            raise core.MalformedError(f"unrecognized roster line: {ln!r}")
    roster = Roster(version, tuple(entries))
    if authority_pub is not None:
        if sig is None:
            raise core.TamperError("roster is unsigned")
        try:
            authority_pub.verify(sig, roster.body_text().encode(), core._PSS, hashes.SHA256())
        except InvalidSignature as exc:
            raise core.TamperError("roster signature invalid") from exc
    return roster
