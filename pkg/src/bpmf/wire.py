"""Byte layout of the inter-node item exchange.

An item message is self-framing: 1 kind byte (0 = user row, 1 = movie
row), a 32-bit little-endian permuted item index, a 32-bit little-endian
iteration number, then K float64 little-endian factor values - exactly
``9 + 8K`` bytes.  Receivers can therefore carve records out of a TCP
stream knowing only K.

Connections open with a fixed 16-byte handshake (version, node count,
rank, seed); any disagreement aborts the run before data flows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadKind, BadLength, HandshakeMismatch

__all__ = [
    "KIND_USER",
    "KIND_MOVIE",
    "PROTOCOL_VERSION",
    "ItemMsg",
    "msg_size",
    "encode_item",
    "decode_item",
    "Handshake",
    "HANDSHAKE_SIZE",
]

KIND_USER = 0
KIND_MOVIE = 1
PROTOCOL_VERSION = 1

_HEADER = struct.Struct("<BII")
_HANDSHAKE = struct.Struct("<HHIQ")
HANDSHAKE_SIZE = _HANDSHAKE.size  # 16 bytes


@dataclass(frozen=True)
class ItemMsg:
    """One freshly sampled factor row in flight."""

    kind: int
    index: int      # permuted position, not the original id
    iteration: int
    values: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, ItemMsg)
            and self.kind == other.kind
            and self.index == other.index
            and self.iteration == other.iteration
            and np.array_equal(self.values, other.values)
        )


def msg_size(k):
    """Encoded byte length of an item message with K factor values."""
    return _HEADER.size + 8 * k


def encode_item(msg: ItemMsg) -> bytes:
    """Serialize; the float payload is written as little-endian f64."""
    values = np.ascontiguousarray(msg.values, dtype="<f8")
    return _HEADER.pack(msg.kind, msg.index, msg.iteration) + values.tobytes()


def decode_item(buf: bytes, k: int) -> ItemMsg:
    """Parse one encoded item message of rank ``k``.

    Raises :class:`BadLength` unless the buffer is exactly
    ``msg_size(k)`` bytes and :class:`BadKind` for unknown kind bytes.
    """
    if len(buf) != msg_size(k):
        raise BadLength(f"expected {msg_size(k)} bytes for k={k}, got {len(buf)}")
    kind, index, iteration = _HEADER.unpack_from(buf)
    if kind not in (KIND_USER, KIND_MOVIE):
        raise BadKind(f"unknown message kind {kind}")
    values = np.frombuffer(buf, dtype="<f8", count=k, offset=_HEADER.size)
    return ItemMsg(kind, index, iteration, values.astype(np.float64))


@dataclass(frozen=True)
class Handshake:
    """Run parameters that every node must agree on."""

    version: int
    p: int
    k: int
    seed: int

    def encode(self) -> bytes:
        return _HANDSHAKE.pack(self.version, self.p, self.k, self.seed)

    @classmethod
    def decode(cls, buf: bytes) -> "Handshake":
        if len(buf) != HANDSHAKE_SIZE:
            raise BadLength(f"handshake must be {HANDSHAKE_SIZE} bytes, got {len(buf)}")
        return cls(*_HANDSHAKE.unpack(buf))

    def check(self, other: "Handshake"):
        """Raise naming the first mismatched field, in wire order."""
        for field in ("version", "p", "k", "seed"):
            mine, theirs = getattr(self, field), getattr(other, field)
            if mine != theirs:
                raise HandshakeMismatch(field, mine, theirs)
