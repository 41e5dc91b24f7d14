"""Encrypted record store for the data tier.

Records are AES-GCM sealed (96-bit nonce, 128-bit tag) and appended to a log
file. Frame layout, big-endian::

    [u32 frame_len][u16 key_len][record_key][key_id 8][nonce 12][tag 16][ciphertext]

``frame_len`` counts the bytes after itself. The record key and key id are bound
in as associated data, so moving or relabelling a frame fails authentication.
"""
from __future__ import annotations

import hashlib
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .breaker import TierBreaker
from .domain import EventSink, SentinelError, ThreatKind, emit
from .ims import load_key_file, write_key_file

KEY_ID_LEN = 8
NONCE_LEN = 12
TAG_LEN = 16
_HEAD = struct.Struct(">I")
_KLEN = struct.Struct(">H")


class VaultError(SentinelError):
    pass


class NotFound(VaultError):
    pass


class TamperedRecord(VaultError):
    pass


class WrongKey(VaultError):
    pass


@dataclass(frozen=True)
class VaultKey:
    key_bytes: bytes

    def __post_init__(self):
        if len(self.key_bytes) != 32:
            raise ValueError("vault key must be 32 bytes")

    @property
    def key_id(self) -> bytes:
        return hashlib.sha256(self.key_bytes).digest()[:KEY_ID_LEN]

    @classmethod
    def generate(cls) -> "VaultKey":
        return cls(os.urandom(32))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VaultKey":
        return cls(load_key_file(path))

    def save(self, path: Union[str, Path]) -> None:
        write_key_file(path, self.key_bytes)

    def __repr__(self) -> str:
        return f"VaultKey(key_id={self.key_id.hex()})"


@dataclass(frozen=True)
class EncryptedRecord:
    record_key: str
    key_id: bytes
    nonce: bytes
    tag: bytes
    ciphertext: bytes

    def aad(self, key_id: Optional[bytes] = None) -> bytes:
        rk = self.record_key.encode("utf-8")
        return _KLEN.pack(len(rk)) + rk + (self.key_id if key_id is None else key_id)

    def to_bytes(self) -> bytes:
        rk = self.record_key.encode("utf-8")
        body = _KLEN.pack(len(rk)) + rk + self.key_id + self.nonce + self.tag + self.ciphertext
        return _HEAD.pack(len(body)) + body


def parse_frames(data: bytes) -> tuple[list[tuple[int, EncryptedRecord]], Optional[int]]:
    """Split a store image into frames. Returns (frames, offset of first corruption)."""
    frames = []
    pos = 0
    minimum = _KLEN.size + KEY_ID_LEN + NONCE_LEN + TAG_LEN
    while pos < len(data):
        if pos + _HEAD.size > len(data):
            return frames, pos
        (length,) = _HEAD.unpack_from(data, pos)
        body = data[pos + _HEAD.size: pos + _HEAD.size + length]
        if length < minimum or len(body) != length:
            return frames, pos
        (klen,) = _KLEN.unpack_from(body, 0)
        if _KLEN.size + klen + KEY_ID_LEN + NONCE_LEN + TAG_LEN > length:
            return frames, pos
        i = _KLEN.size
        try:
            rk = body[i:i + klen].decode("utf-8")
        except UnicodeDecodeError:
            return frames, pos
        i += klen
        key_id = body[i:i + KEY_ID_LEN]
        i += KEY_ID_LEN
        nonce = body[i:i + NONCE_LEN]
        i += NONCE_LEN
        tag = body[i:i + TAG_LEN]
        i += TAG_LEN
        frames.append((pos, EncryptedRecord(rk, key_id, nonce, tag, body[i:])))
        pos += _HEAD.size + length
    return frames, None


class Vault:
    """Append-only encrypted store with an in-memory index rebuilt on open.

    A store is sealed under a single key. It is bound to ``key`` if given,
    otherwise to the key of the stored frames (or the first key used on an
    empty store); any other key gets ``WrongKey``. Every
    frame must authenticate under the bound key, so a frame that does not is
    tampering wherever it shows up.

    When a breaker is attached every operation runs through its guard, so an
    isolated link refuses tier-2 access outright.
    """

    def __init__(self, path: Union[str, Path], key: Optional[VaultKey] = None, *,
                 breaker: Optional[TierBreaker] = None, events: Optional[EventSink] = None):
        self.path = Path(path)
        self.key_id = key.key_id if key is not None else None
        self.breaker = breaker
        self.events = events
        self._lock = threading.Lock()
        self._index: dict[str, EncryptedRecord] = {}
        self._frames: list[EncryptedRecord] = []
        self._nonces: set = set()
        self._verified: set = set()
        self.corrupt_at: Optional[int] = None
        self.ops = 0  # tier-2 operations actually executed
        self._load()

    def _load(self) -> None:
        data = self.path.read_bytes() if self.path.exists() else b""
        frames, self.corrupt_at = parse_frames(data)
        for _, rec in frames:
            self._frames.append(rec)
            self._index[rec.record_key] = rec
            self._nonces.add(rec.nonce)
        if self.key_id is None and self._frames:
            # an unkeyed open adopts the key the store was sealed under
            self.key_id = self._frames[0].key_id

    def _guarded(self, fn):
        if self.breaker is None:
            return fn()
        return self.breaker.guard_query(fn)

    def put(self, record_key: str, plaintext: bytes, key: VaultKey) -> EncryptedRecord:
        return self._guarded(lambda: self._put(record_key, bytes(plaintext), key))

    def get(self, record_key: str, key: VaultKey, *, now: int = 0, source: str = "") -> bytes:
        return self._guarded(lambda: self._get(record_key, key, now, source))

    def _bind(self, key: VaultKey, record_key: str) -> None:
        if self.key_id is None:
            self.key_id = key.key_id
        elif key.key_id != self.key_id:
            raise WrongKey(record_key)

    def _put(self, record_key: str, plaintext: bytes, key: VaultKey) -> EncryptedRecord:
        aead = AESGCM(key.key_bytes)
        with self._lock:
            self.ops += 1
            self._bind(key, record_key)
            nonce = os.urandom(NONCE_LEN)
            while nonce in self._nonces:
                nonce = os.urandom(NONCE_LEN)
            shell = EncryptedRecord(record_key, key.key_id, nonce, b"", b"")
            sealed = aead.encrypt(nonce, plaintext, shell.aad())
            rec = EncryptedRecord(record_key, key.key_id, nonce, sealed[-TAG_LEN:], sealed[:-TAG_LEN])
            with open(self.path, "ab") as fh:
                fh.write(rec.to_bytes())
                fh.flush()
                os.fsync(fh.fileno())
            self._nonces.add(nonce)
            self._frames.append(rec)
            self._index[record_key] = rec
            self._verified.add(id(rec))
        return rec

    def _open(self, rec: EncryptedRecord, key: VaultKey) -> Optional[bytes]:
        if rec.key_id != key.key_id:
            return None
        try:
            return AESGCM(key.key_bytes).decrypt(rec.nonce, rec.ciphertext + rec.tag, rec.aad())
        except InvalidTag:
            return None

    def _tampered(self, record_key: str, now: int, source: str, why: str) -> TamperedRecord:
        emit(self.events, now, ThreatKind.TAMPERED_RECORD, source, f"{record_key}: {why}")
        return TamperedRecord(record_key)

    def _get(self, record_key: str, key: VaultKey, now: int, source: str) -> bytes:
        with self._lock:
            self.ops += 1
            self._bind(key, record_key)
            rec = self._index.get(record_key)
            if rec is None:
                self._check_miss(record_key, key, now, source)
                raise NotFound(record_key)
            plain = self._open(rec, key)
            if plain is None:
                raise self._tampered(record_key, now, source, "authentication failed")
            self._verified.add(id(rec))
            return plain

    def _check_miss(self, record_key: str, key: VaultKey, now: int, source: str) -> None:
        # absence can only be trusted if every frame in the log is intact
        if self.corrupt_at is not None:
            raise self._tampered(record_key, now, source, f"store corrupt at offset {self.corrupt_at}")
        for rec in self._frames:
            if id(rec) in self._verified:
                continue
            if self._open(rec, key) is None:
                raise self._tampered(record_key, now, source, "a stored frame fails authentication")
            self._verified.add(id(rec))

    def keys(self) -> list[str]:
        return list(self._index)


def open_key(path: Union[str, Path], create: bool = False) -> VaultKey:
    p = Path(path)
    if create and not p.exists():
        key = VaultKey.generate()
        key.save(p)
        return key
    return VaultKey.load(p)
