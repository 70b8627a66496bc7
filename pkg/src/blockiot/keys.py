"""Ed25519 keystore.

Every principal (gateway, provider, patient name key) gets a key pair derived
from the keystore seed, so two gateways sharing a seed sign identically.
"""

from __future__ import annotations

import hashlib
import json
import os
import secrets
import threading
from functools import lru_cache
from pathlib import Path
from typing import Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import AuthError


def patient_principal(patient_key: bytes) -> str:
    return "patient:" + patient_key.hex()


class Keystore:
    def __init__(self, seed: bytes):
        if len(seed) < 16:
            raise ValueError("keystore seed must be at least 16 bytes")
        self._seed = seed
        self._lock = threading.Lock()
        self._private: dict[str, Ed25519PrivateKey] = {}
        self._public: dict[str, bytes] = {}
        self._revoked: set[str] = set()

    @classmethod
    def open(cls, path: str | Path, seed: Optional[bytes] = None) -> "Keystore":
        """Load the seed stored at ``path``; create it (random unless given) if absent."""
        path = Path(path)
        if path.exists():
            doc = json.loads(path.read_text())
            stored = bytes.fromhex(doc["seed"])
            if seed is not None and seed != stored:
                raise AuthError(f"keystore at {path} holds a different seed")
            return cls(stored)
        seed = seed if seed is not None else secrets.token_bytes(32)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"seed": seed.hex()}))
        os.replace(tmp, path)
        return cls(seed)

    def _key(self, principal: str) -> Ed25519PrivateKey:
        with self._lock:
            key = self._private.get(principal)
            if key is None:
                material = hashlib.sha256(self._seed + b"|" + principal.encode("utf-8")).digest()
                key = Ed25519PrivateKey.from_private_bytes(material)
                self._private[principal] = key
                self._public[principal] = key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
            return key

    def register(self, principal: str) -> bytes:
        """Ensure ``principal`` has a key pair; returns the raw public key."""
        self._key(principal)
        self._revoked.discard(principal)
        return self._public[principal]

    def revoke(self, principal: str) -> None:
        self._revoked.add(principal)

    def is_registered(self, principal: str) -> bool:
        return principal in self._public and principal not in self._revoked

    def public_key(self, principal: str) -> bytes:
        if not self.is_registered(principal):
            raise AuthError(f"unregistered signer {principal!r}")
        return self._public[principal]

    def sign(self, principal: str, message: bytes) -> bytes:
        return self._key(principal).sign(message)

    def verify(self, principal: str, message: bytes, signature: bytes) -> bool:
        if not self.is_registered(principal):
            return False
        return verify_signature(self._public[principal], message, signature)


@lru_cache(maxsize=65536)
def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True
