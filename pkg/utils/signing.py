import base64
import struct
from typing import Dict, Iterable, List, Optional, Tuple

import yaml
from cryptography.exceptions import InvalidSignature as CryptoInvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

from models.mechanism import LaplaceSpec, RandomizedResponseSpec
from models.protocol import KeyringEntry, Query, SignedQuery
from utils.random_source import RandomSource

ENCODING_VERSION = b"crowd-gauge/query/v1"


def _field(value) -> bytes:
    if isinstance(value, float):
        raw = repr(value).encode("ascii")
    elif isinstance(value, int):
        raw = str(value).encode("ascii")
    else:
        raw = str(value).encode("utf-8")
    return struct.pack(">I", len(raw)) + raw


def canonical_query_bytes(query: Query) -> bytes:
    """
    Length-prefixed encoding of every query field in a fixed order.
    Floats use repr (shortest round-trip form) so the bytes are stable across runs.
    """
    mech = query.mechanism
    if isinstance(mech, RandomizedResponseSpec):
        mech_fields = [mech.kind, float(mech.coins.p), float(mech.coins.q)]
    elif isinstance(mech, LaplaceSpec):
        mech_fields = [mech.kind, float(mech.epsilon), float(mech.sensitivity)]
    else:
        raise TypeError(f"Unknown mechanism: {mech!r}")

    fields = [
        query.query_id, query.analyst_id, query.poi_id,
        int(query.start_time), int(query.end_time), int(query.epoch_length),
        *mech_fields,
    ]
    return _field(ENCODING_VERSION.decode("ascii")) + b"".join(_field(f) for f in fields)


class Ed25519Scheme:
    """Default detached-signature scheme. Keys are raw 32-byte Ed25519 keys."""
    name = "ed25519"

    def sign(self, private_key: ed25519.Ed25519PrivateKey, message: bytes) -> bytes:
        return private_key.sign(message)

    def verify(self, public_key_bytes: bytes, signature: bytes, message: bytes) -> bool:
        try:
            ed25519.Ed25519PublicKey.from_public_bytes(public_key_bytes).verify(signature, message)
            return True
        except (CryptoInvalidSignature, ValueError):
            return False


DEFAULT_SCHEME = Ed25519Scheme()


def derive_signing_key(seed: int) -> ed25519.Ed25519PrivateKey:
    """Deterministic analyst key from a seed (simulations and demos only)."""
    return ed25519.Ed25519PrivateKey.from_private_bytes(RandomSource(seed).random_bytes(32))


def public_key_bytes(private_key: ed25519.Ed25519PrivateKey) -> bytes:
    return private_key.public_key().public_bytes(
        encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw
    )


def sign_query(query: Query, signing_key: ed25519.Ed25519PrivateKey, public_key_id: str,
               scheme=DEFAULT_SCHEME) -> SignedQuery:
    signature = scheme.sign(signing_key, canonical_query_bytes(query))
    return SignedQuery(query=query, public_key_id=public_key_id, signature=signature)


def verify_signed_query(sq: SignedQuery, public_key: bytes, scheme=DEFAULT_SCHEME) -> bool:
    return scheme.verify(public_key, sq.signature, canonical_query_bytes(sq.query))


class Keyring:
    """Analyst public keys by public_key_id."""

    def __init__(self, entries: Iterable[KeyringEntry] = ()):
        self._keys: Dict[str, Tuple[str, bytes]] = {}
        for entry in entries:
            self.add(entry.analyst_id, entry.public_key_id, base64.b64decode(entry.public_key_base64))

    def add(self, analyst_id: str, public_key_id: str, public_key: bytes) -> None:
        self._keys[public_key_id] = (analyst_id, public_key)

    def add_seeded(self, analyst_id: str, public_key_id: str, seed: int) -> ed25519.Ed25519PrivateKey:
        signing_key = derive_signing_key(seed)
        self.add(analyst_id, public_key_id, public_key_bytes(signing_key))
        return signing_key

    def lookup(self, public_key_id: str) -> Optional[Tuple[str, bytes]]:
        return self._keys.get(public_key_id)

    def entries(self) -> List[KeyringEntry]:
        return [
            KeyringEntry(analyst_id=analyst_id, public_key_id=key_id,
                         public_key_base64=base64.b64encode(key).decode("ascii"))
            for key_id, (analyst_id, key) in sorted(self._keys.items())
        ]

    def __len__(self) -> int:
        return len(self._keys)


def load_keyring(path: str) -> Keyring:
    """Keyring file: JSON array of {analyst_id, public_key_id, public_key_base64}."""
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or []
    if not isinstance(data, list):
        raise ValueError(f"Keyring {path} must hold a list of entries")
    return Keyring(KeyringEntry.model_validate(item) for item in data)
