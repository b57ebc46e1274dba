"""Unforgeable request tags.

A tag is a 4-byte big-endian request id followed by a 32-byte
HMAC-SHA256 over ``id || IP_1 || ... || IP_n`` where ``IP_i`` is the 4-byte
address of the serving-set member from pool ``i``. On the wire the tag
travels in a 40-byte IP timestamp option block::

    byte 0      option type 68 (timestamp)
    byte 1      length 40
    byte 2      pointer 41 (option full)
    byte 3      overflow/flags 0
    bytes 4-7   request id, big-endian
    bytes 8-39  HMAC
"""

from __future__ import annotations

import enum
import functools
import hashlib
import hmac
import ipaddress
import os
import struct
from dataclasses import dataclass
from typing import Sequence

ID_MODULUS = 1 << 32
KEY_BYTES = 32
MAC_BYTES = 32
PAYLOAD_BYTES = 4 + MAC_BYTES
OPTION_BYTES = 40
OPTION_TYPE = 68
OPTION_POINTER = 41
_HEADER = bytes([OPTION_TYPE, OPTION_BYTES, OPTION_POINTER, 0])


class TagError(ValueError):
    pass


class MalformedOptionError(TagError):
    pass


class TagKey:
    """32-byte HMAC key shared by the scheduling and verification proxies.

    The repr never shows key material.
    """

    __slots__ = ("_secret",)

    def __init__(self, secret: bytes):
        if not isinstance(secret, (bytes, bytearray)) or len(secret) != KEY_BYTES:
            raise TagError(f"tag key must be exactly {KEY_BYTES} bytes")
        self._secret = bytes(secret)

    @classmethod
    def generate(cls) -> "TagKey":
        return cls(os.urandom(KEY_BYTES))

    @classmethod
    def from_hex(cls, text: str) -> "TagKey":
        try:
            return cls(bytes.fromhex(text))
        except ValueError as exc:
            raise TagError("tag key must be 64 hex digits") from exc

    @property
    def secret(self) -> bytes:
        return self._secret

    def __repr__(self):
        return "TagKey(<redacted>)"

    def __eq__(self, other):
        return isinstance(other, TagKey) and hmac.compare_digest(self._secret, other._secret)

    def __hash__(self):
        return hash(TagKey)


@dataclass(frozen=True)
class RequestTag:
    id: int
    mac: bytes

    def __post_init__(self):
        if not 0 <= self.id < ID_MODULUS:
            raise TagError(f"request id {self.id} outside 32-bit range")
        if len(self.mac) != MAC_BYTES:
            raise TagError(f"mac must be {MAC_BYTES} bytes, got {len(self.mac)}")

    def payload(self) -> bytes:
        return struct.pack(">I", self.id) + self.mac

    @classmethod
    def from_payload(cls, data: bytes) -> "RequestTag":
        if len(data) != PAYLOAD_BYTES:
            raise MalformedOptionError(f"tag payload must be {PAYLOAD_BYTES} bytes")
        return cls(struct.unpack(">I", data[:4])[0], bytes(data[4:]))


class TagVerdict(enum.Enum):
    ACCEPT = "accept"
    REJECT_FORGED = "reject-forged"
    REJECT_STALE = "reject-stale"


@functools.lru_cache(maxsize=4096)
def address_bytes(address: str) -> bytes:
    try:
        return ipaddress.IPv4Address(address).packed
    except ipaddress.AddressValueError as exc:
        raise TagError(f"not an IPv4 address: {address!r}") from exc


def compute_mac(request_id: int, addresses: Sequence[str], key: TagKey) -> bytes:
    if not addresses:
        raise TagError("serving set address list is empty")
    msg = struct.pack(">I", request_id) + b"".join(address_bytes(a) for a in addresses)
    return hmac.new(key.secret, msg, hashlib.sha256).digest()


def make_tag(request_id: int, serving_addresses: Sequence[str], key: TagKey) -> RequestTag:
    """Bind ``request_id`` to the serving-set addresses, given in pool order."""
    if not isinstance(key, TagKey):
        key = TagKey(key)
    if not 0 <= request_id < ID_MODULUS:
        raise TagError(f"request id {request_id} outside 32-bit range")
    return RequestTag(request_id, compute_mac(request_id, serving_addresses, key))


def encode_option(tag: RequestTag) -> bytes:
    return _HEADER + tag.payload()


def decode_option(block: bytes) -> RequestTag:
    if len(block) != OPTION_BYTES:
        raise MalformedOptionError(f"option block must be {OPTION_BYTES} bytes, got {len(block)}")
    if bytes(block[:4]) != _HEADER:
        raise MalformedOptionError(f"bad option header {bytes(block[:4]).hex()}")
    return RequestTag.from_payload(bytes(block[4:]))


def in_window(request_id: int, current_counter: int, window: int) -> bool:
    """True if ``request_id`` is among the ``window`` ids ending at ``current_counter``.

    Distances are taken modulo 2**32 so the window survives counter wrap.
    """
    return (current_counter - request_id) % ID_MODULUS < window


def verify_tag(tag: RequestTag, observed_addresses: Sequence[str], key: TagKey,
               current_counter: int, window: int) -> TagVerdict:
    expected = compute_mac(tag.id, observed_addresses, key)
    if not hmac.compare_digest(expected, tag.mac):
        return TagVerdict.REJECT_FORGED
    if not in_window(tag.id, current_counter, window):
        return TagVerdict.REJECT_STALE
    return TagVerdict.ACCEPT
