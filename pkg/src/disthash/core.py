"""Shared domain types: node/object identifiers, replicated objects,
locality descriptors and the proximity metric used when peers pick a
super-peer to connect to.

Everything in this module is an immutable value; all functions are pure.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum

ID_BYTES = 20  # 160-bit object identifiers


class Role(str, Enum):
    AGENT = "agent"
    RAGENT = "ragent"
    LUS = "lus"
    CLIENT = "client"


@dataclass(frozen=True, order=True)
class ObjectId:
    """Fixed-width opaque identifier derived from an object's content."""

    value: bytes

    def __post_init__(self):
        if len(self.value) != ID_BYTES:
            raise ValueError(f"ObjectId must be {ID_BYTES} bytes, got {len(self.value)}")

    @property
    def hex(self) -> str:
        return self.value.hex()

    def __repr__(self):
        return f"ObjectId({self.value.hex()[:12]})"


@dataclass(frozen=True, order=True)
class NodeId:
    """Unique node identifier. Ordering is by the string value only; the
    role tag rides along for readability but never affects comparison."""

    value: str
    role: Role = field(default=Role.AGENT, compare=False)

    def __repr__(self):
        return f"NodeId({self.value})"


@dataclass(frozen=True)
class LocalityDescriptor:
    """Where a node sits in the network: four containment tiers, broad
    to narrow when read right-to-left."""

    network_domain: str
    as_domain: str
    country: str
    continent: str

    def __post_init__(self):
        for name in ("network_domain", "as_domain", "country", "continent"):
            if not getattr(self, name):
                raise ValueError(f"LocalityDescriptor.{name} must be non-empty")


class KeyKind(str, Enum):
    EXACT_TYPE = "exact"
    PATTERN = "pattern"


@dataclass(frozen=True, order=True)
class PatternKey:
    """A search key: either an object's exact type tag or one of its
    user-declared access-pattern strings."""

    kind: KeyKind
    key: str


@dataclass(frozen=True)
class DistObject:
    """A replicated typed payload. ``index_keys`` are the user-declared
    search patterns; the payload itself is opaque bytes."""

    id: ObjectId
    type_tag: str
    index_keys: tuple[str, ...]  # sorted, deduplicated
    payload: bytes
    version: int = 0

    def pattern_keys(self) -> list[PatternKey]:
        keys = [PatternKey(KeyKind.EXACT_TYPE, self.type_tag)]
        keys.extend(PatternKey(KeyKind.PATTERN, k) for k in self.index_keys)
        return keys

    def with_payload(self, payload: bytes, version: int) -> "DistObject":
        return DistObject(self.id, self.type_tag, self.index_keys, payload, version)


def canonical_encode(type_tag: str, index_keys, payload: bytes) -> bytes:
    """Encode the identity-bearing fields of an object into a canonical
    byte string: big-endian u32 length prefixes, fields in fixed order
    (type_tag, key count, sorted index keys, payload). Independent of the
    in-memory ordering of the keys; injective over distinct inputs."""
    keys = sorted(set(index_keys))
    parts = [struct.pack(">I", len(type_tag.encode())), type_tag.encode()]
    parts.append(struct.pack(">I", len(keys)))
    for k in keys:
        kb = k.encode()
        parts.append(struct.pack(">I", len(kb)))
        parts.append(kb)
    parts.append(struct.pack(">I", len(payload)))
    parts.append(payload)
    return b"".join(parts)


def derive_object_id(encoded: bytes) -> ObjectId:
    """160-bit content digest of a canonical encoding."""
    if not encoded:
        raise ValueError("cannot derive an id from empty bytes")
    return ObjectId(hashlib.blake2b(encoded, digest_size=ID_BYTES).digest())


def make_object(type_tag: str, index_keys, payload: bytes) -> DistObject:
    """Build a fresh version-0 object with its content-derived id."""
    keys = tuple(sorted(set(index_keys)))
    oid = derive_object_id(canonical_encode(type_tag, keys, payload))
    return DistObject(oid, type_tag, keys, payload, 0)


# Containment tiers scanned broad -> narrow; stop at first mismatch.
_TIERS = ("continent", "country", "as_domain", "network_domain")


def proximity_rank(a: LocalityDescriptor, b: LocalityDescriptor) -> int:
    """Count of matching locality tiers, 0 (different continents) to 4
    (same network domain)."""
    rank = 0
    for tier in _TIERS:
        if getattr(a, tier) != getattr(b, tier):
            break
        rank += 1
    return rank
