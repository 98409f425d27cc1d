"""Hashing, Base58Check addresses, service markers, and canonical
transaction serialization.

Everything here is a pure function over immutable inputs. Addresses follow
the classic versioned format: Base58(version byte + 20-byte payload +
4-byte double-SHA256 checksum). A service marker is an ordinary key-hash
address whose payload is HASH160 of a service URL instead of a public key,
so it parses and checksums like any address while nobody can hold its key.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

from .errors import (
    ChecksumError,
    InvalidPayloadError,
    InvalidServiceError,
    MalformedAddressError,
)

try:  # hashlib only has ripemd160 when OpenSSL's legacy provider is loaded
    hashlib.new("ripemd160")
    _HASHLIB_RIPEMD = True
except ValueError:
    _HASHLIB_RIPEMD = False

if not _HASHLIB_RIPEMD:
    from ._ripemd160 import ripemd160 as _ripemd160_py


B58_ALPHABET = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"
_B58_INDEX = {c: i for i, c in enumerate(B58_ALPHABET)}

PAYLOAD_LEN = 20
CHECKSUM_LEN = 4

# Version bytes: key-hash addresses (and service markers, which share the
# format) encode with a leading '1'; 2-of-2 script-hash addresses with '3'.
VERSION_KEYHASH = 0x00
VERSION_SCRIPTHASH = 0x05


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256d(data: bytes) -> bytes:
    """Double SHA-256, used for checksums, txids, and block digests."""
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


def ripemd160(data: bytes) -> bytes:
    if _HASHLIB_RIPEMD:
        return hashlib.new("ripemd160", data).digest()
    return _ripemd160_py(data)


def hash160(data: bytes) -> bytes:
    """RIPEMD-160 of SHA-256: the 20-byte digest behind every address."""
    return ripemd160(sha256(data))


# --- Base58 / Base58Check ----------------------------------------------


def base58_encode(raw: bytes) -> str:
    zeros = 0
    for b in raw:
        if b != 0:
            break
        zeros += 1

    num = int.from_bytes(raw, "big")
    digits = []
    while num > 0:
        num, rem = divmod(num, 58)
        digits.append(B58_ALPHABET[rem])
    return "1" * zeros + "".join(reversed(digits))


def base58_decode(text: str) -> bytes:
    if not text:
        raise MalformedAddressError("empty string")

    num = 0
    for ch in text:
        try:
            num = num * 58 + _B58_INDEX[ch]
        except KeyError:
            raise MalformedAddressError(f"character {ch!r} not in Base58 alphabet") from None

    zeros = 0
    for ch in text:
        if ch != "1":
            break
        zeros += 1

    body = num.to_bytes((num.bit_length() + 7) // 8, "big")
    return b"\x00" * zeros + body


def base58check_encode(version: int, payload: bytes) -> str:
    """Encode version + 20-byte payload with a 4-byte double-SHA256 checksum."""
    if len(payload) != PAYLOAD_LEN:
        raise InvalidPayloadError(f"payload must be {PAYLOAD_LEN} bytes, got {len(payload)}")
    versioned = bytes([version]) + payload
    checksum = sha256d(versioned)[:CHECKSUM_LEN]
    return base58_encode(versioned + checksum)


def base58check_decode(text: str) -> Tuple[int, bytes]:
    """Decode to (version, payload), verifying the checksum."""
    raw = base58_decode(text)
    if len(raw) < 1 + CHECKSUM_LEN:
        raise MalformedAddressError("decoded data too short for version and checksum")
    body, checksum = raw[:-CHECKSUM_LEN], raw[-CHECKSUM_LEN:]
    if sha256d(body)[:CHECKSUM_LEN] != checksum:
        raise ChecksumError("checksum mismatch")
    return body[0], body[1:]


# --- Addresses -----------------------------------------------------------


@dataclass(frozen=True)
class Address:
    """A versioned, checksummed 20-byte identifier in Base58Check text form."""

    version: int
    payload: bytes

    def __post_init__(self):
        if len(self.payload) != PAYLOAD_LEN:
            raise InvalidPayloadError(
                f"address payload must be {PAYLOAD_LEN} bytes, got {len(self.payload)}"
            )

    @property
    def text(self) -> str:
        return base58check_encode(self.version, self.payload)

    @classmethod
    def from_text(cls, text: str) -> "Address":
        version, payload = base58check_decode(text)
        if len(payload) != PAYLOAD_LEN:
            raise InvalidPayloadError(
                f"address payload must be {PAYLOAD_LEN} bytes, got {len(payload)}"
            )
        return cls(version, payload)

    def __str__(self) -> str:
        return self.text


def key_address(keyhash: bytes) -> Address:
    return Address(VERSION_KEYHASH, keyhash)


def multisig_address(keyhash_a: bytes, keyhash_b: bytes) -> Address:
    """Script-hash style address for a 2-of-2 lock, for display purposes."""
    return Address(VERSION_SCRIPTHASH, hash160(keyhash_a + keyhash_b))


def derive_service_address(url: str) -> Address:
    """Derive the service marker address S* for a service URL.

    The payload is HASH160 of the URL's UTF-8 bytes, so the marker is a
    syntactically valid key-hash address that no private key maps to.
    """
    if not url:
        raise InvalidServiceError("service url must be non-empty")
    return Address(VERSION_KEYHASH, hash160(url.encode("utf-8")))


@dataclass(frozen=True)
class AddressInfo:
    """Result of classifying an address string."""

    kind: str  # "key-hash" | "script-hash" | "invalid"
    version: Optional[int] = None
    payload: Optional[bytes] = None
    reason: Optional[str] = None


def validate_address(text: str) -> AddressInfo:
    """Classify address text; never raises."""
    try:
        version, payload = base58check_decode(text)
    except MalformedAddressError as exc:
        return AddressInfo("invalid", reason=f"malformed: {exc}")
    except ChecksumError as exc:
        return AddressInfo("invalid", reason=f"checksum: {exc}")

    if len(payload) != PAYLOAD_LEN:
        return AddressInfo("invalid", version=version, reason="payload length != 20")
    if version == VERSION_KEYHASH:
        return AddressInfo("key-hash", version=version, payload=payload)
    if version == VERSION_SCRIPTHASH:
        return AddressInfo("script-hash", version=version, payload=payload)
    return AddressInfo("invalid", version=version, payload=payload, reason="unknown version byte")


# --- Canonical transaction serialization --------------------------------
#
# Works over any object with the ledger Transaction shape:
#   tx.is_coinbase: bool
#   tx.inputs:  sequence of objects with .txid (bytes), .index (int),
#               .signatures (list of (pubkey bytes, signature bytes))
#   tx.outputs: sequence of objects with .amount (int) and .lock, where
#               lock has .kind (str) and .fields() -> tuple of bytes
#
# Layout: integers as 8-byte little-endian, byte fields prefixed with a
# 4-byte little-endian length. Length prefixes make the layout injective.

_LOCK_TAGS = {"p2kh": 1, "p2m2": 2, "marker": 3}


def _u64(value: int) -> bytes:
    return struct.pack("<Q", value)


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def canonical_serialize(tx) -> bytes:
    """Serialize the signature-free transaction body."""
    parts = [_u64(1 if tx.is_coinbase else 0), _u64(len(tx.inputs))]
    for inp in tx.inputs:
        parts.append(_blob(inp.txid))
        parts.append(_u64(inp.index))
    parts.append(_u64(len(tx.outputs)))
    for out in tx.outputs:
        parts.append(_u64(out.amount))
        parts.append(_u64(_LOCK_TAGS[out.lock.kind]))
        for field in out.lock.fields():
            parts.append(_blob(field))
    return b"".join(parts)


def canonical_serialize_signed(tx) -> bytes:
    """Body plus per-input signature sets, sorted by public key."""
    parts = [canonical_serialize(tx)]
    for inp in tx.inputs:
        sigs = sorted(inp.signatures)
        parts.append(_u64(len(sigs)))
        for pub, sig in sigs:
            parts.append(_blob(pub))
            parts.append(_blob(sig))
    return b"".join(parts)


def txid(tx) -> bytes:
    """32-byte transaction id: double-SHA256 of the signature-free body.

    Covering only the body keeps the id stable while signatures are added,
    so a voucher keeps its identity through co-signing.
    """
    return sha256d(canonical_serialize(tx))


def block_digest(height: int, prev_digest: bytes, txs_signed: Iterable[bytes]) -> bytes:
    """Digest linking blocks; covers height, parent, and full tx bytes."""
    parts = [_u64(height), _blob(prev_digest)]
    count = 0
    body = []
    for raw in txs_signed:
        body.append(_blob(raw))
        count += 1
    parts.append(_u64(count))
    parts.extend(body)
    return sha256d(b"".join(parts))
