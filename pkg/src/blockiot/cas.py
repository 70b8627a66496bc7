"""Content-addressed object store with Merkle folders and signed name records.

On-disk layout::

    <root>/objects/<hex-address>     immutable object bytes
    <root>/names/<hex-key>.log       JSON lines, one NameRecord per publish

Objects are written once via rename, so concurrent ``put`` of the same bytes
is harmless. ``publish_name`` is compare-and-set on the sequence number.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

from .core import ContentAddress, PatientIdentity, canonical_json
from .errors import ConflictError, IntegrityError, NotFoundError, ValidationError
from .keys import Keystore, patient_principal

logger = logging.getLogger(__name__)

DIR_MAGIC = b"BKDIR\x01"


@dataclass(frozen=True)
class DirEntry:
    name: str
    address: ContentAddress
    size: int


@dataclass(frozen=True)
class FolderNode:
    entries: tuple[DirEntry, ...]
    kind: str = "directory"

    def encode(self) -> bytes:
        """Entries sorted by name, every field length-prefixed."""
        out = bytearray(DIR_MAGIC)
        out += struct.pack(">I", len(self.entries))
        for e in sorted(self.entries, key=lambda e: e.name.encode("utf-8")):
            name = e.name.encode("utf-8")
            addr = str(e.address).encode("ascii")
            out += struct.pack(">H", len(name)) + name
            out += struct.pack(">H", len(addr)) + addr
            out += struct.pack(">Q", e.size)
        return bytes(out)

    @classmethod
    def decode(cls, data: bytes) -> "FolderNode":
        if not data.startswith(DIR_MAGIC):
            raise ValidationError("not a directory node")
        try:
            pos = len(DIR_MAGIC)
            (count,) = struct.unpack_from(">I", data, pos)
            pos += 4
            entries = []
            for _ in range(count):
                (n,) = struct.unpack_from(">H", data, pos)
                name = data[pos + 2 : pos + 2 + n].decode("utf-8")
                pos += 2 + n
                (n,) = struct.unpack_from(">H", data, pos)
                addr = ContentAddress.parse(data[pos + 2 : pos + 2 + n].decode("ascii"))
                pos += 2 + n
                (size,) = struct.unpack_from(">Q", data, pos)
                pos += 8
                entries.append(DirEntry(name, addr, size))
        except (struct.error, UnicodeDecodeError) as exc:
            raise ValidationError(f"corrupt directory node: {exc}") from exc
        if pos != len(data):
            raise ValidationError("trailing bytes after directory node")
        node = cls(tuple(entries))
        if node.encode() != data:
            raise ValidationError("directory node not in canonical form")
        return node

    def lookup(self, name: str) -> Optional[DirEntry]:
        for e in self.entries:
            if e.name == name:
                return e
        return None


@dataclass(frozen=True)
class NameRecord:
    name_key: bytes
    root: ContentAddress
    sequence: int
    signature: bytes

    def signed_bytes(self) -> bytes:
        return name_record_message(self.name_key, self.root, self.sequence)

    def to_json(self) -> dict:
        return {
            "name_key": self.name_key.hex(),
            "root": str(self.root),
            "sequence": self.sequence,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NameRecord":
        return cls(
            bytes.fromhex(doc["name_key"]),
            ContentAddress.parse(doc["root"]),
            int(doc["sequence"]),
            bytes.fromhex(doc["signature"]),
        )


def name_record_message(name_key: bytes, root: ContentAddress, sequence: int) -> bytes:
    return canonical_json(
        {"name_key": name_key.hex(), "root": str(root), "sequence": sequence}
    )


class ContentStore:
    def __init__(self, root: str | Path, keystore: Keystore):
        self.root = Path(root)
        self.keystore = keystore
        self._objects = self.root / "objects"
        self._names = self.root / "names"
        self._objects.mkdir(parents=True, exist_ok=True)
        self._names.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._name_locks: dict[bytes, threading.Lock] = {}
        self._addresses: set[str] = {p.name for p in self._objects.iterdir() if not p.name.startswith(".")}

    # -- objects ----------------------------------------------------------

    def put(self, content: bytes) -> ContentAddress:
        address = ContentAddress.of(content)
        key = str(address)
        path = self._objects / key
        if key in self._addresses and path.exists():
            return address
        fd, tmp = tempfile.mkstemp(dir=self._objects, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(content)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except OSError:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        with self._lock:
            self._addresses.add(key)
        return address

    def put_json(self, doc) -> ContentAddress:
        return self.put(canonical_json(doc))

    def get(self, address: ContentAddress) -> bytes:
        path = self._objects / str(address)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFoundError(f"no object {address}") from None
        if hashlib.sha256(data).digest() != address.digest:
            raise IntegrityError(f"object {address} fails its digest check")
        return data

    def get_json(self, address: ContentAddress):
        return json.loads(self.get(address))

    def has(self, address: ContentAddress) -> bool:
        return str(address) in self._addresses

    def addresses(self) -> list[str]:
        with self._lock:
            return sorted(self._addresses)

    def digest(self) -> str:
        """Fingerprint of the store: hash of the sorted address list."""
        return hashlib.sha256("\n".join(self.addresses()).encode("ascii")).hexdigest()

    # -- folders ----------------------------------------------------------

    def get_folder(self, address: ContentAddress) -> FolderNode:
        try:
            return FolderNode.decode(self.get(address))
        except ValidationError as exc:
            raise IntegrityError(f"{address}: {exc}") from exc

    def add_entry(
        self, root: Optional[ContentAddress], name: str, child: ContentAddress
    ) -> ContentAddress:
        """New folder root with ``name -> child`` added; the old root is untouched.

        Re-adding an identical entry returns ``root`` itself; the same name
        bound to another child raises ConflictError.
        """
        if not name or "/" in name:
            raise ValidationError(f"invalid entry name {name!r}")
        entries: tuple[DirEntry, ...] = ()
        if root is not None:
            node = self.get_folder(root)
            existing = node.lookup(name)
            if existing is not None:
                if existing.address == child:
                    return root
                raise ConflictError(f"entry {name!r} already bound to {existing.address}")
            entries = node.entries
        size = len(self.get(child))
        node = FolderNode(tuple(sorted(entries + (DirEntry(name, child, size),), key=lambda e: e.name.encode("utf-8"))))
        return self.put(node.encode())

    def walk(self, root: ContentAddress) -> Iterator[tuple[str, ContentAddress]]:
        """Yield (path, address) for every node below ``root`` (pre-order)."""
        stack = [("", root)]
        while stack:
            path, addr = stack.pop()
            yield path, addr
            data = self.get(addr)
            if data.startswith(DIR_MAGIC):
                node = FolderNode.decode(data)
                for e in reversed(node.entries):
                    stack.append((f"{path}/{e.name}", e.address))

    # -- names ------------------------------------------------------------

    def _log_path(self, name_key: bytes) -> Path:
        return self._names / f"{name_key.hex()}.log"

    def _name_lock(self, name_key: bytes) -> threading.Lock:
        with self._lock:
            return self._name_locks.setdefault(name_key, threading.Lock())

    def _read_records(self, name_key: bytes) -> list[NameRecord]:
        path = self._log_path(name_key)
        if not path.exists():
            return []
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(NameRecord.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise IntegrityError(f"{path.name}:{lineno}: unreadable name record ({exc})") from exc
        return records

    def _verify(self, record: NameRecord) -> bool:
        return self.keystore.verify(
            patient_principal(record.name_key), record.signed_bytes(), record.signature
        )

    def latest_sequence(self, name_key: bytes) -> int:
        records = self._read_records(name_key)
        return max((r.sequence for r in records), default=0)

    def publish_name(
        self,
        identity: PatientIdentity | bytes,
        root: ContentAddress,
        expected_sequence: Optional[int] = None,
    ) -> NameRecord:
        """Point the patient's stable name at ``root``.

        ``expected_sequence`` is the caller's view of the current sequence;
        when stale the publish fails with a retryable ConflictError.
        """
        name_key = identity if isinstance(identity, bytes) else identity.patient_key
        principal = patient_principal(name_key)
        self.keystore.register(principal)
        with self._name_lock(name_key):
            current = self.latest_sequence(name_key)
            if expected_sequence is not None and expected_sequence != current:
                raise ConflictError(
                    f"stale sequence {expected_sequence} (current {current})", retryable=True
                )
            seq = current + 1
            signature = self.keystore.sign(principal, name_record_message(name_key, root, seq))
            record = NameRecord(name_key, root, seq, signature)
            self._append(record)
            return record

    def accept_record(self, record: NameRecord) -> None:
        """Store an externally produced record; replays and forgeries are refused."""
        if not self._verify(record):
            raise IntegrityError("name record signature does not verify")
        with self._name_lock(record.name_key):
            current = self.latest_sequence(record.name_key)
            if record.sequence <= current:
                raise ConflictError(f"sequence {record.sequence} not above current {current}")
            self._append(record)

    def _append(self, record: NameRecord) -> None:
        with open(self._log_path(record.name_key), "a") as fh:
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def resolve_record(self, name_key: bytes) -> NameRecord:
        records = self._read_records(name_key)
        if not records:
            raise NotFoundError(f"no name record for {name_key.hex()}")
        best = max(records, key=lambda r: r.sequence)
        if not self._verify(best):
            raise IntegrityError(f"name record {best.sequence} for {name_key.hex()} has an invalid signature")
        return best

    def resolve_name(self, name_key: bytes) -> ContentAddress:
        return self.resolve_record(name_key).root

    def history(self, name_key: bytes) -> list[NameRecord]:
        return sorted(self._read_records(name_key), key=lambda r: r.sequence)

    def names(self) -> list[bytes]:
        return sorted(bytes.fromhex(p.stem) for p in self._names.glob("*.log"))

    # -- audit ------------------------------------------------------------

    def audit(self) -> list[str]:
        """Full integrity sweep; returns a list of problems (empty when clean)."""
        problems = []
        for key in self.addresses():
            try:
                addr = ContentAddress.parse(key)
                data = self.get(addr)
                if data.startswith(DIR_MAGIC):
                    node = FolderNode.decode(data)
                    if ContentAddress.of(node.encode()) != addr:
                        problems.append(f"{key}: directory digest mismatch")
                    for e in node.entries:
                        if not self.has(e.address):
                            problems.append(f"{key}: dangling entry {e.name!r}")
            except (IntegrityError, ValidationError) as exc:
                problems.append(f"{key}: {exc}")
        for name_key in self.names():
            try:
                records = self.history(name_key)
                for rec in records:
                    if not self._verify(rec):
                        problems.append(f"name {name_key.hex()} seq {rec.sequence}: bad signature")
                seqs = [r.sequence for r in self._read_records(name_key)]
                if any(b <= a for a, b in zip(seqs, seqs[1:])):
                    problems.append(f"name {name_key.hex()}: sequence not strictly increasing")
                if records:
                    for _path, _addr in self.walk(records[-1].root):
                        pass
            except (IntegrityError, NotFoundError, ValidationError) as exc:
                problems.append(f"name {name_key.hex()}: {exc}")
        return problems
