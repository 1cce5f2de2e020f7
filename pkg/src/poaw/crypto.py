"""Digest, canonical encoding, simulated signatures and hash commitments.

SHA-256 stands in for the protocol hash.  Signatures are simulated: a
signature is the signer's public id plus a digest binding that id to the
payload, which is enough for the ledger to attribute transactions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Any

DIGEST_SIZE = 32


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest_int(data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(data).digest(), "big")


def _default(obj: Any):
    if isinstance(obj, (bytes, bytearray)):
        return obj.hex()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if hasattr(obj, "to_record"):
        return obj.to_record()
    raise TypeError(f"cannot canonicalise {type(obj).__name__}")


def canonical(obj: Any) -> bytes:
    """Stable byte encoding: sorted keys, no whitespace, bytes as hex."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default).encode()


@dataclass(frozen=True)
class Signature:
    signer: str
    tag: bytes

    def to_record(self) -> dict:
        return {"signer": self.signer, "tag": self.tag.hex()}

    @classmethod
    def from_record(cls, rec: dict) -> "Signature":
        return cls(rec["signer"], bytes.fromhex(rec["tag"]))


def sign(signer: str, payload: bytes) -> Signature:
    return Signature(signer, digest(signer.encode() + b"\x00" + payload))


def verify_signature(sig: Signature, payload: bytes) -> bool:
    return sig == sign(sig.signer, payload)


def hash_commit(solution: bytes, nonce: bytes) -> bytes:
    """Commitment to ``solution``: H(solution || nonce)."""
    return digest(solution + nonce)


def verify_hash_commit(commitment: bytes, solution: bytes, nonce: bytes) -> bool:
    return hash_commit(solution, nonce) == commitment


def keystream(key: bytes, length: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < length:
        out += digest(key + counter.to_bytes(8, "big"))
        counter += 1
    return bytes(out[:length])


def seal_box(key: bytes, plaintext: bytes) -> tuple[bytes, bytes]:
    """Encrypt with a SHA-256 counter-mode stream; the tag binds key and plaintext."""
    ct = bytes(a ^ b for a, b in zip(plaintext, keystream(key, len(plaintext))))
    return ct, digest(b"tag" + key + plaintext)


def open_box(key: bytes, ciphertext: bytes, tag: bytes) -> bytes | None:
    pt = bytes(a ^ b for a, b in zip(ciphertext, keystream(key, len(ciphertext))))
    if digest(b"tag" + key + pt) != tag:
        return None
    return pt
