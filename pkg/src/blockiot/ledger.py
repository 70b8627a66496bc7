"""Append-only proof-of-work chain and its deterministic replay state.

Blocks are stored one per line in canonical JSON. Contracts run only inside
``apply_block``; see :mod:`blockiot.contracts`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

from .core import ContentAddress, canonical_json, format_time, parse_time, sha256_hex
from .errors import LinkageError, ValidationError
from .keys import Keystore, patient_principal

logger = logging.getLogger(__name__)

TX_KINDS = ("data_transfer", "access_grant", "access_revoke", "alert_event", "summary_published")
ZERO_HASH = "0" * 64
GENESIS_TIME = datetime(2021, 1, 1, tzinfo=timezone.utc)
MAX_DIFFICULTY = 24
GATEWAY_PRINCIPAL = "gateway"


# --------------------------------------------------------------------------
# transactions


@dataclass(frozen=True)
class TransferTransaction:
    tx_id: str
    kind: str
    patient_key: bytes
    payload_address: ContentAddress
    issued_at: datetime
    signer: str
    signature: bytes

    def body(self) -> dict:
        return tx_body(self.kind, self.patient_key, self.payload_address, self.issued_at, self.signer)

    def body_bytes(self) -> bytes:
        return canonical_json(self.body())

    def to_json(self) -> dict:
        doc = self.body()
        doc["tx_id"] = self.tx_id
        doc["signature"] = self.signature.hex()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TransferTransaction":
        if set(doc) != {"tx_id", "kind", "patient_key", "payload_address", "issued_at", "signer", "signature"}:
            raise ValidationError(f"transaction fields {sorted(doc)}")
        return cls(
            tx_id=_hex(doc["tx_id"], 32),
            kind=doc["kind"],
            patient_key=bytes.fromhex(_hex(doc["patient_key"], 32)),
            payload_address=ContentAddress.parse(doc["payload_address"]),
            issued_at=parse_time(doc["issued_at"]),
            signer=doc["signer"],
            signature=bytes.fromhex(_hex(doc["signature"], 64)),
        )

    @property
    def sort_key(self) -> tuple[datetime, str]:
        return (self.issued_at, self.tx_id)


def _hex(text: Any, nbytes: int) -> str:
    if not isinstance(text, str) or len(text) != 2 * nbytes or text != text.lower():
        raise ValidationError(f"expected {nbytes}-byte lowercase hex, got {text!r}")
    bytes.fromhex(text)
    return text


def tx_body(kind: str, patient_key: bytes, payload_address: ContentAddress, issued_at: datetime, signer: str) -> dict:
    return {
        "kind": kind,
        "patient_key": patient_key.hex(),
        "payload_address": str(payload_address),
        "issued_at": format_time(issued_at),
        "signer": signer,
    }


def make_tx(
    keystore: Keystore,
    kind: str,
    patient_key: bytes,
    payload_address: ContentAddress,
    issued_at: datetime,
    signer: str = GATEWAY_PRINCIPAL,
) -> TransferTransaction:
    if kind not in TX_KINDS:
        raise ValidationError(f"unknown transaction kind {kind!r}")
    body = canonical_json(tx_body(kind, patient_key, payload_address, issued_at, signer))
    return TransferTransaction(
        tx_id=sha256_hex(body),
        kind=kind,
        patient_key=patient_key,
        payload_address=payload_address,
        issued_at=parse_time(format_time(issued_at)),
        signer=signer,
        signature=keystore.sign(signer, body),
    )


def tx_problem(tx: TransferTransaction, keystore: Keystore) -> Optional[str]:
    """Why ``tx`` is not acceptable, or None."""
    if tx.kind not in TX_KINDS:
        return f"unknown kind {tx.kind!r}"
    body = tx.body_bytes()
    if sha256_hex(body) != tx.tx_id:
        return "tx_id does not match contents"
    if not keystore.is_registered(tx.signer):
        return f"unregistered signer {tx.signer!r}"
    if not keystore.verify(tx.signer, body, tx.signature):
        return "bad signature"
    if tx.kind in ("access_grant", "access_revoke") and tx.signer not in (
        GATEWAY_PRINCIPAL,
        patient_principal(tx.patient_key),
    ):
        return "access changes must be signed by the patient or the gateway"
    return None


# --------------------------------------------------------------------------
# blocks


def merkle_root(tx_ids: Sequence[str]) -> str:
    if not tx_ids:
        return ZERO_HASH
    level = [bytes.fromhex(t) for t in tx_ids]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [hashlib.sha256(a + b).digest() for a, b in zip(level[::2], level[1::2])]
    return level[0].hex()


def target(difficulty_bits: int) -> int:
    return 1 << (256 - difficulty_bits)


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: str
    merkle_root: str
    timestamp: datetime
    nonce: int
    difficulty_bits: int
    transactions: tuple[TransferTransaction, ...]
    hash: str = ""

    def header(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash,
            "merkle_root": self.merkle_root,
            "timestamp": format_time(self.timestamp),
            "nonce": self.nonce,
            "difficulty_bits": self.difficulty_bits,
        }

    def compute_hash(self) -> str:
        return sha256_hex(canonical_json(self.header()))

    def to_json(self) -> dict:
        doc = self.header()
        doc["hash"] = self.hash
        doc["transactions"] = [tx.to_json() for tx in self.transactions]
        return doc

    def encode(self) -> bytes:
        return canonical_json(self.to_json())

    @classmethod
    def from_json(cls, doc: dict) -> "Block":
        expected = {"height", "prev_hash", "merkle_root", "timestamp", "nonce", "difficulty_bits", "hash", "transactions"}
        if not isinstance(doc, dict) or set(doc) != expected:
            raise ValidationError("block fields")
        for key in ("height", "nonce", "difficulty_bits"):
            if not isinstance(doc[key], int) or isinstance(doc[key], bool):
                raise ValidationError(f"block {key} must be an integer")
        return cls(
            height=doc["height"],
            prev_hash=_hex(doc["prev_hash"], 32),
            merkle_root=_hex(doc["merkle_root"], 32),
            timestamp=parse_time(doc["timestamp"]),
            nonce=doc["nonce"],
            difficulty_bits=doc["difficulty_bits"],
            transactions=tuple(TransferTransaction.from_json(t) for t in doc["transactions"]),
            hash=_hex(doc["hash"], 32),
        )

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        """Strict decode: the bytes must be the canonical encoding of the result."""
        try:
            block = cls.from_json(json.loads(data.decode("utf-8")))
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise ValidationError(f"undecodable block: {exc}") from exc
        if block.encode() != data:
            raise ValidationError("block bytes are not canonical")
        return block

    @property
    def work(self) -> int:
        return 1 << self.difficulty_bits


def seal_block(
    mempool: Iterable[TransferTransaction],
    prev: Optional[Block],
    difficulty_bits: int,
    timestamp: datetime,
    allow_empty: bool = False,
    start_nonce: int = 0,
) -> Block:
    """Order transactions by (issued_at, tx_id) and search nonces upward from
    ``start_nonce`` until the header hash is below the target."""
    txs = tuple(sorted(mempool, key=lambda t: t.sort_key))
    if not txs and not allow_empty and prev is not None:
        raise ValidationError("empty mempool (pass allow_empty to seal an empty block)")
    if not 0 <= difficulty_bits <= 255:
        raise ValidationError(f"difficulty_bits {difficulty_bits} out of range")
    height = 0 if prev is None else prev.height + 1
    prev_hash = ZERO_HASH if prev is None else prev.hash
    if prev is not None and timestamp < prev.timestamp:
        timestamp = prev.timestamp
    draft = Block(height, prev_hash, merkle_root([t.tx_id for t in txs]), timestamp, 0, difficulty_bits, txs)
    # hash the header as prefix + nonce digits + suffix to avoid re-serializing
    marker = -1
    header = draft.header()
    header["nonce"] = marker
    prefix, suffix = canonical_json(header).split(b'"nonce":-1')
    prefix += b'"nonce":'
    limit = target(difficulty_bits)
    nonce = start_nonce
    while True:
        digest = hashlib.sha256(prefix + str(nonce).encode() + suffix).digest()
        if int.from_bytes(digest, "big") < limit:
            break
        nonce += 1
    block = Block(height, prev_hash, draft.merkle_root, timestamp, nonce, difficulty_bits, txs, digest.hex())
    assert block.compute_hash() == block.hash
    return block


def genesis_block(difficulty_bits: int) -> Block:
    return seal_block((), None, difficulty_bits, GENESIS_TIME)


@dataclass(frozen=True)
class Verdict:
    ok: bool
    height: Optional[int] = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def block_problem(
    block: Block, index: int, prev: Optional[Block], keystore: Keystore, seen: set[str]
) -> Optional[str]:
    if block.height != index:
        return f"height {block.height} at position {index}"
    expected_prev = ZERO_HASH if prev is None else prev.hash
    if block.prev_hash != expected_prev:
        return "prev_hash does not link to the previous block"
    if not 0 <= block.difficulty_bits <= 255:
        return "difficulty out of range"
    if block.compute_hash() != block.hash:
        return "stored hash does not match header"
    if int(block.hash, 16) >= target(block.difficulty_bits):
        return "proof of work below difficulty"
    if prev is not None and block.timestamp < prev.timestamp:
        return "timestamp before previous block"
    if merkle_root([t.tx_id for t in block.transactions]) != block.merkle_root:
        return "merkle root mismatch"
    if list(block.transactions) != sorted(block.transactions, key=lambda t: t.sort_key):
        return "transactions out of order"
    for tx in block.transactions:
        if tx.tx_id in seen:
            return f"duplicate transaction {tx.tx_id}"
        problem = tx_problem(tx, keystore)
        if problem:
            return f"tx {tx.tx_id[:12]}: {problem}"
        seen.add(tx.tx_id)
    return None


def validate_chain(blocks: Sequence[Block], keystore: Keystore) -> Verdict:
    """ok, or the first height at which the chain breaks."""
    seen: set[str] = set()
    prev = None
    for i, block in enumerate(blocks):
        problem = block_problem(block, i, prev, keystore, seen)
        if problem:
            return Verdict(False, i, problem)
        prev = block
    return Verdict(True)


def decode_chain(data: bytes) -> tuple[list[Block], Optional[Verdict]]:
    """Decode a chain file; the verdict is set when some line fails to decode."""
    blocks = []
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    for i, line in enumerate(lines):
        try:
            blocks.append(Block.decode(line))
        except ValidationError as exc:
            return blocks, Verdict(False, i, str(exc))
    return blocks, None


def validate_chain_bytes(data: bytes, keystore: Keystore) -> Verdict:
    blocks, verdict = decode_chain(data)
    if not data.endswith(b"\n") and data:
        verdict = verdict or Verdict(False, max(len(blocks) - 1, 0), "missing final newline")
    structural = validate_chain(blocks, keystore)
    if verdict is None:
        return structural
    if not structural.ok and structural.height is not None and structural.height < verdict.height:
        return structural
    return verdict


def encode_chain(blocks: Iterable[Block]) -> bytes:
    return b"".join(b.encode() + b"\n" for b in blocks)


def cumulative_work(blocks: Sequence[Block]) -> int:
    return sum(b.work for b in blocks)


def better_chain(a: Sequence[Block], b: Sequence[Block]) -> Sequence[Block]:
    """Greater cumulative difficulty wins; ties go to the lower tip hash."""
    wa, wb = cumulative_work(a), cumulative_work(b)
    if wa != wb:
        return a if wa > wb else b
    return a if a[-1].hash <= b[-1].hash else b


# --------------------------------------------------------------------------
# replay state


@dataclass
class LedgerState:
    access: set[tuple[str, str, str]] = field(default_factory=set)
    summaries: dict[str, str] = field(default_factory=dict)
    alerts: list[dict] = field(default_factory=list)
    alert_keys: set[str] = field(default_factory=set)
    observations: dict[str, list[list[str]]] = field(default_factory=dict)
    transfers: dict[str, list[str]] = field(default_factory=dict)
    tip_hash: Optional[str] = None
    height: int = -1

    def to_json(self) -> dict:
        """Semantic state only; the tip is excluded from the digest."""
        return {
            "access": sorted(list(t) for t in self.access),
            "summaries": dict(sorted(self.summaries.items())),
            "alerts": self.alerts,
            "observations": {k: v for k, v in sorted(self.observations.items())},
            "transfers": {k: v for k, v in sorted(self.transfers.items())},
        }

    @property
    def state_digest(self) -> str:
        return sha256_hex(canonical_json(self.to_json()))

    def snapshot(self) -> "LedgerState":
        return copy.deepcopy(self)

    def has_grant(self, grantee: str, patient_hex: str, scope: str) -> bool:
        return (grantee, patient_hex, scope) in self.access or (grantee, patient_hex, "all") in self.access

    def observations_between(self, patient_hex: str, start: datetime, end: datetime) -> list[list[str]]:
        """Index rows [time, address, code, kind] with start < time <= end."""
        lo, hi = format_time(start), format_time(end)
        return [row for row in self.observations.get(patient_hex, []) if lo < row[0] <= hi]


class ContractHooks:
    """Interface ``apply_block`` calls into; contracts.ContractEngine implements it."""

    def on_transfer(self, state: LedgerState, tx: TransferTransaction, record: dict, observations: list) -> list[dict]:
        return []

    def on_summary(self, state: LedgerState, tx: TransferTransaction, report: dict) -> list[dict]:
        return []


def apply_block(
    state: LedgerState,
    block: Block,
    store=None,
    hooks: Optional[ContractHooks] = None,
) -> LedgerState:
    """Deterministic successor state; ``state`` itself is left untouched."""
    expected_prev = state.tip_hash or ZERO_HASH
    if block.prev_hash != expected_prev or block.height != state.height + 1:
        raise LinkageError(
            f"block {block.height} does not chain onto tip {state.height} ({expected_prev[:12]})"
        )
    hooks = hooks or ContractHooks()
    new = state.snapshot()
    for tx in block.transactions:
        _apply_tx(new, tx, store, hooks)
    new.tip_hash = block.hash
    new.height = block.height
    return new


def _record_alerts(state: LedgerState, alerts: list[dict]) -> None:
    for alert in alerts:
        key = alert_dedup_key(alert)
        if key in state.alert_keys:
            continue
        state.alert_keys.add(key)
        state.alerts.append(alert)


def alert_dedup_key(alert: dict) -> str:
    return sha256_hex(canonical_json([alert["contract_kind"], sorted(alert["triggering"])]))


def _apply_tx(state: LedgerState, tx: TransferTransaction, store, hooks: ContractHooks) -> None:
    patient = tx.patient_key.hex()
    if tx.kind in ("access_grant", "access_revoke"):
        doc = store.get_json(tx.payload_address)
        entry = (doc["grantee"], patient, doc.get("scope", "read"))
        if tx.kind == "access_grant":
            state.access.add(entry)
        else:
            state.access.discard(entry)
        return
    if tx.kind == "data_transfer":
        from .core import CanonicalObservation  # local: keeps ledger importable standalone

        record = store.get_json(tx.payload_address)
        observations = []
        rows = state.observations.setdefault(patient, [])
        indexed = {row[1] for row in rows}
        for addr in record["observations"]:
            obs = CanonicalObservation.from_json(store.get_json(ContentAddress.parse(addr)))
            observations.append((ContentAddress.parse(addr), obs))
            if addr not in indexed:
                indexed.add(addr)
                rows.append([format_time(obs.effective_time), addr, obs.code_binding, obs.kind])
        rows.sort()
        state.transfers.setdefault(patient, []).append(tx.tx_id)
        _record_alerts(state, hooks.on_transfer(state, tx, record, observations))
        return
    if tx.kind == "summary_published":
        report = store.get_json(tx.payload_address)
        state.summaries[patient] = str(tx.payload_address)
        _record_alerts(state, hooks.on_summary(state, tx, report))
        return
    if tx.kind == "alert_event":
        alert = store.get_json(tx.payload_address)
        _record_alerts(state, [alert])
        return


def replay(blocks: Sequence[Block], store=None, hooks: Optional[ContractHooks] = None) -> LedgerState:
    state = LedgerState()
    for block in blocks:
        state = apply_block(state, block, store, hooks)
    return state


# --------------------------------------------------------------------------
# node


class Ledger:
    """A single chain writer with a mempool, persisted under ``directory``.

    ``directory=None`` keeps everything in memory (fork harness, tests).
    """

    def __init__(
        self,
        keystore: Keystore,
        store=None,
        hooks: Optional[ContractHooks] = None,
        directory: Optional[str | Path] = None,
        difficulty_bits: int = 12,
        clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
    ):
        if not 0 <= difficulty_bits <= MAX_DIFFICULTY:
            raise ValidationError(f"difficulty_bits must be within 0-{MAX_DIFFICULTY}")
        self.keystore = keystore
        self.store = store
        self.hooks = hooks
        self.difficulty_bits = difficulty_bits
        self.clock = clock
        self.directory = Path(directory) if directory is not None else None
        self._write_lock = threading.RLock()
        self._mempool: dict[str, TransferTransaction] = {}
        self.blocks: list[Block] = []
        self._chain_ids: set[str] = set()
        self._state = LedgerState()
        self._listeners: list[Callable[[LedgerState, Block], None]] = []

    # -- lifecycle ----------------------------------------------------------

    @property
    def chain_path(self) -> Optional[Path]:
        return self.directory / "chain.jsonl" if self.directory else None

    @property
    def mempool_path(self) -> Optional[Path]:
        return self.directory / "mempool.jsonl" if self.directory else None

    def open(self) -> Verdict:
        """Load and validate the persisted chain, replay it, reload the mempool."""
        with self._write_lock:
            blocks: list[Block] = []
            if self.chain_path and self.chain_path.exists():
                data = self.chain_path.read_bytes()
                verdict = validate_chain_bytes(data, self.keystore)
                if not verdict.ok:
                    return verdict
                blocks, _ = decode_chain(data)
            if not blocks:
                blocks = [genesis_block(self.difficulty_bits)]
                if self.chain_path:
                    self.directory.mkdir(parents=True, exist_ok=True)
                    self.chain_path.write_bytes(encode_chain(blocks))
            self._install_chain(blocks)
            if self.mempool_path and self.mempool_path.exists():
                for line in self.mempool_path.read_text().splitlines():
                    if line.strip():
                        tx = TransferTransaction.from_json(json.loads(line))
                        if tx.tx_id not in self._chain_ids and tx_problem(tx, self.keystore) is None:
                            self._mempool[tx.tx_id] = tx
            return Verdict(True)

    def _install_chain(self, blocks: list[Block]) -> None:
        self.blocks = list(blocks)
        self._chain_ids = {t.tx_id for b in blocks for t in b.transactions}
        self._state = replay(self.blocks, self.store, self.hooks)

    def on_apply(self, listener: Callable[[LedgerState, Block], None]) -> None:
        self._listeners.append(listener)

    # -- reads ----------------------------------------------------------------

    @property
    def state(self) -> LedgerState:
        return self._state

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def mempool(self) -> list[TransferTransaction]:
        with self._write_lock:
            return sorted(self._mempool.values(), key=lambda t: t.sort_key)

    def contains(self, tx_id: str) -> bool:
        return tx_id in self._chain_ids or tx_id in self._mempool

    # -- writes ---------------------------------------------------------------

    def submit_tx(self, tx: TransferTransaction) -> tuple[bool, str]:
        """(True, "accepted") or (False, reason)."""
        problem = tx_problem(tx, self.keystore)
        if problem:
            return False, problem
        with self._write_lock:
            if tx.tx_id in self._mempool or tx.tx_id in self._chain_ids:
                return False, "duplicate"
            self._mempool[tx.tx_id] = tx
            if self.mempool_path:
                with open(self.mempool_path, "a") as fh:
                    fh.write(canonical_json(tx.to_json()).decode() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
        return True, "accepted"

    def seal(self, timestamp: Optional[datetime] = None, allow_empty: bool = False) -> Optional[Block]:
        with self._write_lock:
            if not self._mempool and not allow_empty:
                return None
            block = seal_block(
                self._mempool.values(),
                self.tip,
                self.difficulty_bits,
                timestamp or self.clock(),
                allow_empty=allow_empty,
            )
            self._append(block)
            return block

    def maybe_seal(self, batch_size: int, interval_s: float, last_seal: datetime) -> Optional[Block]:
        with self._write_lock:
            n = len(self._mempool)
            if n == 0:
                return None
            due = (self.clock() - last_seal).total_seconds() >= interval_s
            if n >= batch_size or due:
                return self.seal()
            return None

    def _append(self, block: Block) -> None:
        new_state = apply_block(self._state, block, self.store, self.hooks)
        if self.chain_path:
            with open(self.chain_path, "ab") as fh:
                fh.write(block.encode() + b"\n")
                fh.flush()
                os.fsync(fh.fileno())
        self.blocks.append(block)
        for tx in block.transactions:
            self._chain_ids.add(tx.tx_id)
            self._mempool.pop(tx.tx_id, None)
        self._state = new_state
        if self.mempool_path:
            tmp = self.mempool_path.with_suffix(".tmp")
            tmp.write_text("".join(canonical_json(t.to_json()).decode() + "\n" for t in self.mempool()))
            os.replace(tmp, self.mempool_path)
        for listener in self._listeners:
            listener(new_state, block)

    def receive_block(self, block: Block) -> bool:
        """Extend the tip with a peer's block if it validates; False otherwise."""
        with self._write_lock:
            seen = set(self._chain_ids)
            if block_problem(block, len(self.blocks), self.tip, self.keystore, seen):
                return False
            self._append(block)
            return True

    def consider_chain(self, blocks: Sequence[Block]) -> bool:
        """Fork choice: adopt ``blocks`` if valid and better than ours."""
        with self._write_lock:
            if not validate_chain(blocks, self.keystore).ok:
                return False
            if blocks[0].hash != self.blocks[0].hash:
                return False
            if better_chain(self.blocks, blocks) is self.blocks:
                return False
            orphaned = [t for b in self.blocks for t in b.transactions]
            self._install_chain(list(blocks))
            if self.chain_path:
                self.chain_path.write_bytes(encode_chain(self.blocks))
            for tx in orphaned:
                if tx.tx_id not in self._chain_ids:
                    self._mempool[tx.tx_id] = tx
            for listener in self._listeners:
                listener(self._state, self.tip)
            return True
