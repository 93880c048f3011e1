"""Cryptographic and codec primitives shared by every role.

Everything in this module is a pure function over value types: randomness
comes in through an explicit generator argument and time through explicit
timestamps, so the primitives are safe to use concurrently with no shared
mutable state.

Wire format of a content envelope (all integers big-endian):

    magic "OCDN" (4) | version u8 = 1 | key_id (8) | salt (16)
    | padded_len u64 | block ciphertexts, concatenated

Each block ciphertext is its plaintext slice plus a 16-byte authentication
tag; every block of one envelope has the same wire length.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass
from urllib.parse import urlsplit, urlunsplit

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding as _rsa_padding
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_LEN = 32
KEY_ID_LEN = 8
SALT_LEN = 16
BLOCK_SIZE = 4096
GCM_TAG_LEN = 16
LEN_HEADER = 8  # u64 original length, travels inside the encrypted payload
MIN_RUNG = 1024
MAX_POW2_RUNG = 64 * 1024
LADDER_STEP = 64 * 1024
MAX_OBJECT_SIZE = 256 * 1024 * 1024
MAX_ENCODINGS = 16
URL_PAD_QUANTUM = 64
RSA_BITS = 2048
SEALED_KEY_LEN = RSA_BITS // 8
ENVELOPE_MAGIC = b"OCDN"
ENVELOPE_VERSION = 1
_HEADER_LEN = len(ENVELOPE_MAGIC) + 1 + KEY_ID_LEN + SALT_LEN + 8

_URL_AAD = b"ocdn-url-v1"
_RESP_AAD = b"ocdn-resp-v1"
_BLOCK_NONCE_TAG = b"ocdn-blk-v1"
_UPDATE_SIG_TAG = b"ocdn-update-v1"

# Status codes carried inside a session-key-encrypted response payload.
STATUS_OK = 0
STATUS_NOT_FOUND = 1
STATUS_UPSTREAM_ERROR = 2
STATUS_INTEGRITY_ERROR = 3
STATUS_BAD_REQUEST = 4


class OcdnError(Exception):
    """Base class for protocol-level failures."""


class TamperError(OcdnError):
    """Authenticated decryption or signature verification failed."""


class MalformedError(OcdnError):
    """A wire message or envelope violates its structural contract."""


class SystemRng:
    """Default randomness source (the operating system CSPRNG).

    Any object with ``randbytes(n)`` and ``randrange(n)`` can be passed
    instead, e.g. a seeded ``random.Random`` when a run must be
    reproducible.
    """

    def randbytes(self, n: int) -> bytes:
        return os.urandom(n)

    def randrange(self, n: int) -> int:
        import secrets

        return secrets.randbelow(n)


_SYSTEM_RNG = SystemRng()


def _rng_or_default(rng):
    return rng if rng is not None else _SYSTEM_RNG


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# Key material
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SharedKey:
    """Origin<->exit symmetric key with an absolute expiry time.

    The public handle ``key_id`` is the first 8 bytes of the key's hash, so
    two parties holding the same key bytes agree on the handle without any
    extra exchange.
    """

    key_bytes: bytes
    expires_at: float

    def __post_init__(self):
        if len(self.key_bytes) != KEY_LEN:
            raise ValueError(f"shared key must be {KEY_LEN} bytes")

    @property
    def key_id(self) -> bytes:
        return sha256(self.key_bytes)[:KEY_ID_LEN]


def new_shared_key(rng=None, *, now: float, ttl_s: float) -> SharedKey:
    """Generate a fresh shared key expiring ``ttl_s`` seconds from ``now``."""
    if ttl_s <= 0:
        raise ValueError("key lifetime must be positive")
    return SharedKey(_rng_or_default(rng).randbytes(KEY_LEN), now + ttl_s)


@dataclass(frozen=True)
class SessionKey:
    """Per-request symmetric key between a client and an exit proxy."""

    key_bytes: bytes

    def __post_init__(self):
        if len(self.key_bytes) != KEY_LEN:
            raise ValueError(f"session key must be {KEY_LEN} bytes")


def new_session_key(rng=None) -> SessionKey:
    return SessionKey(_rng_or_default(rng).randbytes(KEY_LEN))


@dataclass(frozen=True)
class KeyPair:
    """2048-bit RSA keypair used for sealing and update signatures."""

    private_key: rsa.RSAPrivateKey
    public_key: rsa.RSAPublicKey

    @classmethod
    def generate(cls) -> "KeyPair":
        priv = rsa.generate_private_key(public_exponent=65537, key_size=RSA_BITS)
        return cls(priv, priv.public_key())

    @property
    def public_der(self) -> bytes:
        return public_key_der(self.public_key)


def public_key_der(pub: rsa.RSAPublicKey) -> bytes:
    """Canonical serialization (DER SubjectPublicKeyInfo) of a public key."""
    return pub.public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )


def load_public_key(der: bytes) -> rsa.RSAPublicKey:
    try:
        pub = serialization.load_der_public_key(der)
    except Exception as exc:
        raise MalformedError(f"bad public key encoding: {exc}") from exc
    if not isinstance(pub, rsa.RSAPublicKey):
        raise MalformedError("public key is not RSA")
    return pub


def key_fingerprint(pub_der: bytes) -> bytes:
    """32-byte identity of a public key: hash of its canonical serialization."""
    return sha256(pub_der)


def private_key_pem(priv: rsa.RSAPrivateKey) -> bytes:
    return priv.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def load_private_key_pem(pem: bytes) -> KeyPair:
    priv = serialization.load_pem_private_key(pem, password=None)
    if not isinstance(priv, rsa.RSAPrivateKey):
        raise MalformedError("private key is not RSA")
    return KeyPair(priv, priv.public_key())


# ---------------------------------------------------------------------------
# URLs and obfuscated identifiers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CanonicalUrl:
    """Absolute URL in canonical form: scheme and host lowercased, no
    fragment, path never empty.  Canonicalization is idempotent, which is
    what lets a client and an exit proxy derive identical identifiers."""

    text: str

    @classmethod
    def parse(cls, text: str) -> "CanonicalUrl":
        if "\x00" in text:
            raise ValueError("URL must not contain NUL")
        parts = urlsplit(text)
        if not parts.scheme or not parts.netloc:
            raise ValueError(f"not an absolute URL: {text!r}")
        canon = urlunsplit(
            (
                parts.scheme.lower(),
                parts.netloc.lower(),
                parts.path or "/",
                parts.query,
                "",  # fragment dropped
            )
        )
        return cls(canon)

    @property
    def prefix(self) -> str:
        """Key-granularity prefix: ``scheme://host/``."""
        parts = urlsplit(self.text)
        return f"{parts.scheme}://{parts.netloc}/"


@dataclass(frozen=True)
class ObfuscatedId:
    """Fixed-length keyed identifier a cache node stores content under."""

    mac_bytes: bytes

    def __post_init__(self):
        if len(self.mac_bytes) != 32:
            raise ValueError("obfuscated id must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.mac_bytes.hex()

    @classmethod
    def from_hex(cls, h: str) -> "ObfuscatedId":
        try:
            raw = bytes.fromhex(h)
        except ValueError as exc:
            raise MalformedError(f"bad id hex: {h!r}") from exc
        if len(raw) != 32:
            raise MalformedError("obfuscated id must be 32 bytes")
        return cls(raw)


def encode_url(url: CanonicalUrl, encoding_index: int, max_encodings: int = MAX_ENCODINGS) -> bytes:
    """One of ``max_encodings`` injective byte encodings of a URL.

    Index 0 is the URL text itself; index i > 0 appends a NUL separator and
    the single index byte.  Distinctness of the derived identifiers then
    follows from the MAC being a PRF.
    """
    if not 0 <= encoding_index < max_encodings:
        raise ValueError(f"encoding index {encoding_index} out of range [0, {max_encodings})")
    raw = url.text.encode()
    if encoding_index == 0:
        return raw
    return raw + b"\x00" + bytes([encoding_index])


def derive_obfuscated_id(
    key: SharedKey,
    url: CanonicalUrl,
    encoding_index: int = 0,
    max_encodings: int = MAX_ENCODINGS,
) -> ObfuscatedId:
    """HMAC-SHA-256 of the encoded URL under the shared key."""
    msg = encode_url(url, encoding_index, max_encodings)
    return ObfuscatedId(hmac.new(key.key_bytes, msg, hashlib.sha256).digest())


# ---------------------------------------------------------------------------
# Padding ladder and the content envelope
# ---------------------------------------------------------------------------


def pad_length(orig_len: int, *, min_rung: int = MIN_RUNG, step: int = LADDER_STEP) -> int:
    """Smallest padding rung that fits ``orig_len`` plus the length header.

    The ladder runs in powers of two from ``min_rung`` up to ``step``, then
    in multiples of ``step``: small objects pay at most 2x overhead, large
    ones at most one step.
    """
    if orig_len < 0:
        raise ValueError("length must be nonnegative")
    need = orig_len + LEN_HEADER
    if need <= min_rung:
        return min_rung
    if need <= step:
        return 1 << (need - 1).bit_length()
    return -(-need // step) * step


@dataclass(frozen=True)
class ContentEnvelope:
    """Padded, block-encrypted object as stored at cache nodes.

    The original length travels inside the first encrypted block; nothing
    in the clear reveals more than the padded size class.
    """

    key_id: bytes
    salt: bytes
    padded_len: int
    blocks: tuple[bytes, ...]

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    @property
    def wire_size(self) -> int:
        return _HEADER_LEN + sum(len(b) for b in self.blocks)

    def header_bytes(self) -> bytes:
        return (
            ENVELOPE_MAGIC
            + bytes([ENVELOPE_VERSION])
            + self.key_id
            + self.salt
            + struct.pack(">Q", self.padded_len)
        )

    def to_bytes(self) -> bytes:
        return self.header_bytes() + b"".join(self.blocks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ContentEnvelope":
        if len(raw) < _HEADER_LEN:
            raise MalformedError("envelope shorter than header")
        if raw[:4] != ENVELOPE_MAGIC:
            raise MalformedError("bad envelope magic")
        if raw[4] != ENVELOPE_VERSION:
            raise MalformedError(f"unsupported envelope version {raw[4]}")
        key_id = raw[5 : 5 + KEY_ID_LEN]
        salt = raw[5 + KEY_ID_LEN : 5 + KEY_ID_LEN + SALT_LEN]
        (padded_len,) = struct.unpack(">Q", raw[_HEADER_LEN - 8 : _HEADER_LEN])
        if padded_len < LEN_HEADER or padded_len > MAX_OBJECT_SIZE + LADDER_STEP:
            raise MalformedError(f"implausible padded length {padded_len}")
        sizes = _block_plain_sizes(padded_len)
        body = raw[_HEADER_LEN:]
        if len(body) != sum(s + GCM_TAG_LEN for s in sizes):
            raise MalformedError("envelope body length inconsistent with padded length")
        blocks = []
        off = 0
        for s in sizes:
            blocks.append(body[off : off + s + GCM_TAG_LEN])
            off += s + GCM_TAG_LEN
        return cls(key_id, salt, padded_len, tuple(blocks))


def _block_plain_sizes(padded_len: int) -> list[int]:
    full, rem = divmod(padded_len, BLOCK_SIZE)
    sizes = [BLOCK_SIZE] * full
    if rem:
        sizes.append(rem)
    return sizes


def _block_nonce(key_id: bytes, salt: bytes, index: int) -> bytes:
    material = _BLOCK_NONCE_TAG + key_id + salt + struct.pack(">Q", index)
    return sha256(material)[:12]


def seal_content(key: SharedKey, plaintext: bytes, rng=None, *,
                 min_rung: int = MIN_RUNG, step: int = LADDER_STEP) -> ContentEnvelope:
    """Pad, split into fixed blocks and encrypt under the shared key.

    An 8-byte length header is prepended before zero-padding so the exact
    size can be recovered; each block is sealed with AES-256-GCM under a
    nonce derived from (key id, per-object salt, block index) and with the
    envelope header bound in as associated data.
    """
    if len(plaintext) > MAX_OBJECT_SIZE:
        raise ValueError(f"object exceeds {MAX_OBJECT_SIZE} byte limit")
    padded_len = pad_length(len(plaintext), min_rung=min_rung, step=step)
    payload = struct.pack(">Q", len(plaintext)) + plaintext
    payload += b"\x00" * (padded_len - len(payload))
    salt = _rng_or_default(rng).randbytes(SALT_LEN)
    key_id = key.key_id
    header = (
        ENVELOPE_MAGIC + bytes([ENVELOPE_VERSION]) + key_id + salt + struct.pack(">Q", padded_len)
    )
    aead = AESGCM(key.key_bytes)
    blocks = []
    for idx, off in enumerate(range(0, padded_len, BLOCK_SIZE)):
        chunk = payload[off : off + BLOCK_SIZE]
        aad = header + struct.pack(">Q", idx)
        blocks.append(aead.encrypt(_block_nonce(key_id, salt, idx), chunk, aad))
    return ContentEnvelope(key_id, salt, padded_len, tuple(blocks))


def open_content(key: SharedKey, env: ContentEnvelope) -> bytes:
    """Authenticated decryption of every block; strips header and padding."""
    if env.key_id != key.key_id:
        raise TamperError("envelope sealed under a different key")
    aead = AESGCM(key.key_bytes)
    header = env.header_bytes()
    expected_sizes = _block_plain_sizes(env.padded_len)
    if len(expected_sizes) != len(env.blocks):
        raise MalformedError("block count inconsistent with padded length")
    payload = bytearray()
    for idx, block in enumerate(env.blocks):
        aad = header + struct.pack(">Q", idx)
        try:
            payload += aead.decrypt(_block_nonce(env.key_id, env.salt, idx), block, aad)
        except InvalidTag as exc:
            raise TamperError(f"block {idx} failed authentication") from exc
    (orig_len,) = struct.unpack(">Q", bytes(payload[:LEN_HEADER]))
    if orig_len + LEN_HEADER > env.padded_len:
        raise MalformedError("declared length exceeds padded payload")
    return bytes(payload[LEN_HEADER : LEN_HEADER + orig_len])


# ---------------------------------------------------------------------------
# Session-key sealing and URL / response encryption
# ---------------------------------------------------------------------------

_OAEP = _rsa_padding.OAEP(
    mgf=_rsa_padding.MGF1(algorithm=hashes.SHA256()),
    algorithm=hashes.SHA256(),
    label=None,
)

_PSS = _rsa_padding.PSS(
    mgf=_rsa_padding.MGF1(hashes.SHA256()),
    salt_length=32,
)


def seal_session_key(proxy_pub: rsa.RSAPublicKey, skey: SessionKey) -> bytes:
    """Encrypt a session key to the exit proxy; always 256 bytes on the wire."""
    return proxy_pub.encrypt(skey.key_bytes, _OAEP)


def open_session_key(proxy_priv: rsa.RSAPrivateKey, sealed: bytes) -> SessionKey:
    try:
        raw = proxy_priv.decrypt(sealed, _OAEP)
    except ValueError as exc:
        raise TamperError("session key unseal failed") from exc
    if len(raw) != KEY_LEN:
        raise TamperError("sealed payload is not a session key")
    return SessionKey(raw)


def _session_encrypt(skey: SessionKey, payload: bytes, aad: bytes, rng) -> bytes:
    nonce = _rng_or_default(rng).randbytes(12)
    return nonce + AESGCM(skey.key_bytes).encrypt(nonce, payload, aad)


def _session_decrypt(skey: SessionKey, blob: bytes, aad: bytes) -> bytes:
    if len(blob) < 12 + GCM_TAG_LEN:
        raise MalformedError("ciphertext too short")
    try:
        return AESGCM(skey.key_bytes).decrypt(blob[:12], blob[12:], aad)
    except InvalidTag as exc:
        raise TamperError("session decryption failed") from exc


def encrypt_url(skey: SessionKey, url: CanonicalUrl, rng=None) -> bytes:
    """Encrypt a request URL, padded to a 64-byte multiple first so the
    ciphertext leaks only a coarse length class.  URLs cannot contain NUL,
    so zero padding strips unambiguously."""
    raw = url.text.encode()
    raw += b"\x00" * (-len(raw) % URL_PAD_QUANTUM)
    return _session_encrypt(skey, raw, _URL_AAD, rng)


def decrypt_url(skey: SessionKey, blob: bytes) -> CanonicalUrl:
    raw = _session_decrypt(skey, blob, _URL_AAD).rstrip(b"\x00")
    try:
        return CanonicalUrl.parse(raw.decode())
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedError(f"decrypted bytes are not a URL: {exc}") from exc


def seal_response(skey: SessionKey, status: int, body: bytes, rng=None) -> bytes:
    """Encrypt a (status, body) response payload under the session key."""
    if not 0 <= status <= 255:
        raise ValueError("status must fit one byte")
    return _session_encrypt(skey, bytes([status]) + body, _RESP_AAD, rng)


def open_response(skey: SessionKey, blob: bytes) -> tuple[int, bytes]:
    payload = _session_decrypt(skey, blob, _RESP_AAD)
    if not payload:
        raise MalformedError("empty response payload")
    return payload[0], payload[1:]


# ---------------------------------------------------------------------------
# Content update signatures
# ---------------------------------------------------------------------------


def _update_message(oid: ObfuscatedId, env: ContentEnvelope) -> bytes:
    return _UPDATE_SIG_TAG + oid.mac_bytes + env.to_bytes()


def sign_update(origin_priv: rsa.RSAPrivateKey, oid: ObfuscatedId, env: ContentEnvelope) -> bytes:
    """Origin signature over (identifier, canonical envelope serialization)."""
    return origin_priv.sign(_update_message(oid, env), _PSS, hashes.SHA256())


def verify_update(
    origin_pub: rsa.RSAPublicKey, oid: ObfuscatedId, env: ContentEnvelope, signature: bytes
) -> bool:
    try:
        origin_pub.verify(signature, _update_message(oid, env), _PSS, hashes.SHA256())
        return True
    except InvalidSignature:
        return False
