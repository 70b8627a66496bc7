"""Ingest gateway: authentication, the batch pipeline, and transport handlers.

The handlers here are framing-only adapters; the socket listeners in
:mod:`blockiot.servers` call them. For identical (principal, payloads) every
transport yields the same observations and the same store mutations.
"""

from __future__ import annotations

import hmac
import hashlib
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

from . import core
from .cas import ContentStore
from .core import ContentAddress, PatientIdentity, Principal, canonical_json, format_time
from .errors import (
    AuthError,
    AuthorizationError,
    BackpressureError,
    BatchTooLargeError,
    IdentityError,
    NotFoundError,
    RequestError,
    ValidationError,
)
from .ledger import GATEWAY_PRINCIPAL, Ledger, make_tx
from .templates import TemplateRegistry, extract_identity, map_payload

logger = logging.getLogger(__name__)

TRANSPORTS = ("http", "mqtt", "coap")
TOPIC_RE = re.compile(r"^blockiot/([^/+#]+)/([^/+#]+)/obs$")
COAP_PATH_RE = re.compile(r"^/?obs/([^/]+)/([^/]+)/?$")


# --------------------------------------------------------------------------
# registrations and credentials


@dataclass(frozen=True)
class Credentials:
    """What a sender presents; which fields are used depends on the transport."""

    transport: str
    token: Optional[str] = None
    username: Optional[str] = None
    password: Optional[str] = None
    psk_id: Optional[str] = None
    mac: Optional[str] = None
    payload: bytes = b""


@dataclass
class DeviceRegistration:
    device_id: str
    patient_id: str
    template: str
    http_token: Optional[str] = None
    mqtt_username: Optional[str] = None
    mqtt_password: Optional[str] = None
    coap_psk_id: Optional[str] = None
    coap_psk: Optional[str] = None
    revoked: bool = False
    expires: Optional[datetime] = None


@dataclass
class ReaderRegistration:
    id: str
    role: str
    token: str
    patient_id: str = ""
    revoked: bool = False


class Registry:
    """Static registration table: patients, devices and readers.

    Loaded from JSON; dynamic enrollment is not supported.
    """

    def __init__(self, templates: TemplateRegistry):
        self.templates = templates
        self.patients: dict[str, PatientIdentity] = {}
        self.devices: dict[str, DeviceRegistration] = {}
        self.readers: dict[str, ReaderRegistration] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_json(cls, doc: dict, templates: TemplateRegistry) -> "Registry":
        reg = cls(templates)
        for p in doc.get("patients", ()):
            reg.add_patient(p["patient_id"], PatientIdentity.from_json(p))
        for d in doc.get("devices", ()):
            creds = d.get("credentials", {})
            expires = core.parse_time(d["expires"]) if d.get("expires") else None
            reg.add_device(
                DeviceRegistration(
                    device_id=d["device_id"],
                    patient_id=d["patient_id"],
                    template=d["template"],
                    http_token=creds.get("http_token"),
                    mqtt_username=creds.get("mqtt_username"),
                    mqtt_password=creds.get("mqtt_password"),
                    coap_psk_id=creds.get("coap_psk_id"),
                    coap_psk=creds.get("coap_psk"),
                    revoked=bool(d.get("revoked", False)),
                    expires=expires,
                )
            )
        for r in doc.get("readers", ()):
            reg.readers[r["token"]] = ReaderRegistration(
                r["id"], r.get("role", "provider"), r["token"], r.get("patient_id", ""), bool(r.get("revoked", False))
            )
        return reg

    @classmethod
    def from_file(cls, path: str | Path, templates: TemplateRegistry) -> "Registry":
        return cls.from_json(json.loads(Path(path).read_text()), templates)

    def add_patient(self, patient_id: str, identity: PatientIdentity) -> None:
        with self._lock:
            self.patients[patient_id] = identity

    def add_device(self, reg: DeviceRegistration) -> None:
        if reg.patient_id not in self.patients:
            raise ValidationError(f"device {reg.device_id}: unknown patient {reg.patient_id!r}")
        self.templates.get(reg.template)  # raises KeyError for unknown templates
        with self._lock:
            self.devices[reg.device_id] = reg

    def revoke_device(self, device_id: str) -> None:
        self.devices[device_id].revoked = True

    def patient_key(self, patient_id: str) -> bytes:
        return self.patients[patient_id].patient_key

    # FhirService directory protocol
    def patient_identities(self) -> dict[str, tuple[PatientIdentity, list[str]]]:
        out: dict[str, tuple[PatientIdentity, list[str]]] = {}
        for pid, ident in self.patients.items():
            key = ident.patient_key.hex()
            out.setdefault(key, (ident, []))[1].append(pid)
        return out

    def device_entries(self):
        for reg in self.devices.values():
            template = self.templates.get(reg.template)
            identity = core.DeviceIdentity(reg.patient_id, reg.device_id, template.identifiers.nomenclature_code)
            yield identity, template, self.patient_key(reg.patient_id)

    # -- authentication ----------------------------------------------------

    def _device_principal(self, reg: DeviceRegistration, now: datetime) -> Principal:
        if reg.revoked:
            raise AuthError(f"credential for device {reg.device_id} is revoked")
        if reg.expires is not None and now >= reg.expires:
            raise AuthError(f"credential for device {reg.device_id} expired")
        return Principal(
            id=f"device:{reg.device_id}",
            role="device",
            patient_key=self.patient_key(reg.patient_id),
            patient_id=reg.patient_id,
            device_id=reg.device_id,
        )

    def authenticate(self, creds: Credentials, now: Optional[datetime] = None) -> Principal:
        now = now or datetime.now(timezone.utc)
        if creds.transport == "http":
            if creds.token:
                for reg in self.devices.values():
                    if reg.http_token and _same(reg.http_token, creds.token):
                        return self._device_principal(reg, now)
        elif creds.transport == "mqtt":
            if creds.username:
                for reg in self.devices.values():
                    if reg.mqtt_username == creds.username:
                        if not _same(reg.mqtt_password or "", creds.password or ""):
                            raise AuthError("bad MQTT password")
                        return self._device_principal(reg, now)
        elif creds.transport == "coap":
            if creds.psk_id:
                for reg in self.devices.values():
                    if reg.coap_psk_id == creds.psk_id and reg.coap_psk:
                        expected = coap_mac(reg.coap_psk, creds.payload)
                        if not _same(expected, creds.mac or ""):
                            raise AuthError("CoAP payload MAC does not verify")
                        return self._device_principal(reg, now)
        else:
            raise AuthError(f"unknown transport {creds.transport!r}")
        raise AuthError("unknown credential")

    def authenticate_reader(self, token: Optional[str]) -> Principal:
        if token:
            for reg in self.readers.values():
                if _same(reg.token, token):
                    if reg.revoked:
                        raise AuthError("reader credential revoked")
                    key = self.patient_key(reg.patient_id) if reg.role == "patient" else None
                    return Principal(reg.id, reg.role, patient_key=key, patient_id=reg.patient_id)
        raise AuthError("unknown reader credential")


def _same(expected: str, presented: str) -> bool:
    # compare as bytes: compare_digest refuses non-ASCII str
    return hmac.compare_digest(expected.encode("utf-8"), str(presented).encode("utf-8", "surrogatepass"))


def coap_mac(psk_hex: str, payload: bytes) -> str:
    """HMAC-SHA256 over the request payload, keyed with the device PSK."""
    return hmac.new(bytes.fromhex(psk_hex), payload, hashlib.sha256).hexdigest()


def authenticate(registry: Registry, creds: Credentials, now: Optional[datetime] = None) -> Principal:
    return registry.authenticate(creds, now)


# --------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class IngestBatch:
    transport: str
    principal: Principal
    payloads: tuple
    received_at: datetime

    def __post_init__(self) -> None:
        if self.transport not in TRANSPORTS:
            raise RequestError(f"unknown transport {self.transport!r}")
        if not self.payloads:
            raise RequestError("payloads non-empty")

    @property
    def batch_id(self) -> str:
        return batch_id(self.principal, list(self.payloads))


def batch_id(principal: Principal, payloads: list) -> str:
    return core.sha256_hex(canonical_json({"principal": principal.id, "payloads": payloads}))


@dataclass
class IngestReceipt:
    batch_id: str
    accepted: int
    rejected: list[tuple[int, str]] = field(default_factory=list)
    ledger_tx: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "accepted": self.accepted,
            "rejected": [[i, reason] for i, reason in self.rejected],
            "ledger_tx": self.ledger_tx,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "IngestReceipt":
        return cls(doc["batch_id"], doc["accepted"], [(i, r) for i, r in doc["rejected"]], doc.get("ledger_tx"))

    def encode(self) -> bytes:
        return canonical_json(self.to_json())


class IntakeLimiter:
    """Bounded in-flight batches per transport; full means retry later."""

    def __init__(self, capacity: int):
        self._sem = {t: threading.BoundedSemaphore(capacity) for t in TRANSPORTS}

    def __call__(self, transport: str):
        sem = self._sem[transport]
        limiter = self

        class _Slot:
            def __enter__(self_inner):
                if not sem.acquire(blocking=False):
                    raise BackpressureError(f"{transport} intake queue full")
                return limiter

            def __exit__(self_inner, *exc):
                sem.release()
                return False

        return _Slot()


class IngestPipeline:
    """Validate, map, persist and anchor one batch; deduplicated by batch_id."""

    def __init__(
        self,
        registry: Registry,
        store: ContentStore,
        ledger: Ledger,
        dedup_path: Optional[str | Path] = None,
        max_batch: int = 1000,
        queue_capacity: int = 64,
        clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
        ready: Callable[[], bool] = lambda: True,
    ):
        self.registry = registry
        self.store = store
        self.ledger = ledger
        ledger.keystore.register(GATEWAY_PRINCIPAL)
        self.max_batch = max_batch
        self.clock = clock
        self.ready = ready
        self.limiter = IntakeLimiter(queue_capacity)
        self.dedup_path = Path(dedup_path) if dedup_path else None
        self._receipts: dict[str, IngestReceipt] = {}
        self._commit_lock = threading.Lock()
        self._patient_locks: dict[bytes, threading.Lock] = {}
        if self.dedup_path and self.dedup_path.exists():
            for line in self.dedup_path.read_text().splitlines():
                if line.strip():
                    r = IngestReceipt.from_json(json.loads(line))
                    self._receipts[r.batch_id] = r

    def seen(self, bid: str) -> Optional[IngestReceipt]:
        return self._receipts.get(bid)

    def ingest(self, transport: str, principal: Principal, payloads: list, received_at: Optional[datetime] = None) -> IngestReceipt:
        if not self.ready():
            raise BackpressureError("gateway not ready (ledger replay in progress)")
        if not isinstance(payloads, list):
            raise RequestError("payloads must be a list")
        if len(payloads) > self.max_batch:
            raise BatchTooLargeError(f"batch of {len(payloads)} exceeds max {self.max_batch}")
        try:
            canonical_json(payloads)
        except (TypeError, ValueError) as exc:
            raise RequestError(f"payloads are not canonical JSON: {exc}") from exc
        batch = IngestBatch(transport, principal, tuple(payloads), core.utc(received_at or self.clock()))
        with self.limiter(transport):
            return self._process(batch)

    def _process(self, batch: IngestBatch) -> IngestReceipt:
        principal = batch.principal
        if principal.role != "device" or principal.patient_key is None:
            raise AuthorizationError("only registered devices may ingest")
        bid = batch.batch_id
        prior = self._receipts.get(bid)
        if prior is not None:
            return prior
        reg = self.registry.devices[principal.device_id]
        template = self.registry.templates.get(reg.template)

        # authorization: a payload naming another patient/device fails the batch
        for raw in batch.payloads:
            if not isinstance(raw, dict):
                continue
            try:
                pid, did = extract_identity(template, raw)
            except IdentityError:
                continue
            if pid != principal.patient_id or did != principal.device_id:
                raise AuthorizationError(
                    f"payload claims {pid}/{did}; credential is bound to {principal.patient_id}/{principal.device_id}"
                )

        rejected: list[tuple[int, str]] = []
        accepted: list[tuple[dict, list]] = []
        last_time: Optional[datetime] = None
        for i, raw in enumerate(batch.payloads):
            if not isinstance(raw, dict):
                rejected.append((i, "payload is not a key-value document"))
                continue
            try:
                result = map_payload(template, raw, batch.received_at, subject=principal.patient_key)
            except IdentityError:
                rejected.append((i, "identity error"))
                continue
            if not result.observations:
                reason = "; ".join(str(e) for e in result.errors) or "no mappable fields"
                rejected.append((i, f"mapping error: {reason}"))
                continue
            bad = [p for o in result.observations for p in core.validate_observation(o)]
            if bad:
                rejected.append((i, "invalid observation: " + "; ".join(bad)))
                continue
            t = result.observations[0].effective_time
            if last_time is not None and t < last_time:
                rejected.append((i, "effective_time not monotone within batch"))
                continue
            last_time = t
            accepted.append((raw, result.observations))

        with self._commit_lock:
            prior = self._receipts.get(bid)
            if prior is not None:
                return prior
            ledger_tx = None
            if accepted:
                ledger_tx = self._commit(batch, bid, accepted, rejected)
            receipt = IngestReceipt(bid, len(accepted), rejected, ledger_tx)
            self._remember(receipt)
        logger.info(
            "batch %s via %s: %d accepted, %d rejected", bid[:12], batch.transport, receipt.accepted, len(rejected)
        )
        return receipt

    def _commit(self, batch: IngestBatch, bid: str, accepted, rejected) -> str:
        patient_key = batch.principal.patient_key
        raw_addrs, obs_addrs = [], []
        for raw, observations in accepted:
            raw_addrs.append(str(self.store.put_json(raw)))
            for obs in observations:
                obs_addrs.append(str(self.store.put(obs.encode())))
        record = {
            "type": "transfer-record",
            "batch_id": bid,
            "patient_key": patient_key.hex(),
            "device_id": batch.principal.device_id,
            "received_at": format_time(batch.received_at),
            "payloads": raw_addrs,
            "observations": obs_addrs,
            "rejected": [[i, r] for i, r in rejected],
        }
        record_addr = self.store.put_json(record)
        tx = make_tx(self.ledger.keystore, "data_transfer", patient_key, record_addr, batch.received_at, GATEWAY_PRINCIPAL)
        ok, reason = self.ledger.submit_tx(tx)
        if not ok and reason != "duplicate":
            raise ValidationError(f"ledger rejected transfer: {reason}")
        self.append_to_folder(patient_key, f"tx-{tx.tx_id}", self.store.put_json(tx.to_json()))
        return tx.tx_id

    def append_to_folder(self, patient_key: bytes, name: str, child: ContentAddress) -> ContentAddress:
        """Add an entry to the patient's folder and republish its name."""
        with self._commit_lock_for(patient_key):
            try:
                record = self.store.resolve_record(patient_key)
                root, seq = record.root, record.sequence
            except NotFoundError:
                root, seq = None, 0
            new_root = self.store.add_entry(root, name, child)
            if new_root != root:
                self.store.publish_name(patient_key, new_root, expected_sequence=seq)
            return new_root

    def _commit_lock_for(self, patient_key: bytes) -> threading.Lock:
        return self._patient_locks.setdefault(patient_key, threading.Lock())

    def _remember(self, receipt: IngestReceipt) -> None:
        self._receipts[receipt.batch_id] = receipt
        if self.dedup_path:
            with open(self.dedup_path, "a") as fh:
                fh.write(receipt.encode().decode() + "\n")
                fh.flush()
                os.fsync(fh.fileno())


# --------------------------------------------------------------------------
# transport handlers


def _reject_constant(name: str):
    raise ValueError(f"non-finite number {name} is not allowed")


def loads_strict(data: bytes):
    """Parse UTF-8 JSON, refusing NaN and Infinity (they have no canonical form)."""
    return json.loads(data.decode("utf-8"), parse_constant=_reject_constant)


def _parse_body(body: bytes) -> list:
    try:
        doc = loads_strict(body)
    except ValueError as exc:  # includes UnicodeDecodeError and JSONDecodeError
        raise RequestError(f"body is not JSON: {exc}") from exc
    if isinstance(doc, dict) and "payloads" in doc:
        doc = doc["payloads"]
    if isinstance(doc, dict):
        doc = [doc]
    if not isinstance(doc, list):
        raise RequestError("expected a payload object, a list, or {\"payloads\": [...]}")
    if not doc:
        raise RequestError("payloads non-empty")
    return doc


@dataclass
class Response:
    status: int
    body: bytes
    headers: dict = field(default_factory=dict)

    def json(self):
        return json.loads(self.body) if self.body else None


def _error(status: int, message: str, **headers) -> Response:
    body = canonical_json({"error": message}) if message else b""
    return Response(status, body, {"Content-Type": "application/json", **headers})


def receive_http(pipeline: IngestPipeline, headers: dict, body: bytes, received_at: Optional[datetime] = None) -> Response:
    """POST /ingest/observations with a bearer token."""
    auth = next((v for k, v in headers.items() if k.lower() == "authorization"), "")
    token = auth[7:].strip() if auth.lower().startswith("bearer ") else None
    try:
        principal = pipeline.registry.authenticate(Credentials("http", token=token), received_at or pipeline.clock())
    except AuthError as exc:
        return _error(401, str(exc), **{"WWW-Authenticate": "Bearer"})
    try:
        payloads = _parse_body(body)
        receipt = pipeline.ingest("http", principal, payloads, received_at)
    except AuthorizationError as exc:
        return _error(403, str(exc))
    except BatchTooLargeError as exc:
        return _error(413, str(exc))
    except BackpressureError as exc:
        return _error(503, str(exc), **{"Retry-After": "1"})
    except RequestError as exc:
        return _error(400, str(exc))
    return Response(200, receipt.encode(), {"Content-Type": "application/json"})


def reply_topic(topic: str) -> str:
    return topic.rsplit("/", 1)[0] + "/receipt"


def receive_mqtt(pipeline: IngestPipeline, topic: str, message: bytes, received_at: Optional[datetime] = None) -> tuple[str, bytes]:
    """Handle one MQTT publish; returns (reply topic, reply body).

    The message is ``{"auth": {"username", "password"}, "payloads": [...]}``
    (``payload`` for a single document). QoS-1 redeliveries hit the
    batch_id dedup and replay the original receipt.
    """
    m = TOPIC_RE.match(topic)
    if not m:
        return "blockiot/errors", canonical_json({"error": f"topic {topic!r} outside blockiot/<patient>/<device>/obs"})
    out_topic = reply_topic(topic)
    try:
        doc = loads_strict(message)
        if not isinstance(doc, dict):
            raise ValueError("envelope must be an object")
        auth = doc.get("auth") or {}
        payloads = doc["payloads"] if "payloads" in doc else [doc["payload"]]
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        return out_topic, canonical_json({"error": f"malformed message: {exc}", "status": 400})
    try:
        principal = pipeline.registry.authenticate(
            Credentials("mqtt", username=auth.get("username"), password=auth.get("password")),
            received_at or pipeline.clock(),
        )
        if (m.group(1), m.group(2)) != (principal.patient_id, principal.device_id):
            raise AuthorizationError(
                f"topic names {m.group(1)}/{m.group(2)}; credential is bound to {principal.patient_id}/{principal.device_id}"
            )
        if not isinstance(payloads, list):
            raise RequestError("payloads must be a list")
        receipt = pipeline.ingest("mqtt", principal, payloads, received_at)
    except AuthError as exc:
        return out_topic, canonical_json({"error": str(exc), "status": 401})
    except AuthorizationError as exc:
        return out_topic, canonical_json({"error": str(exc), "status": 403})
    except BatchTooLargeError as exc:
        return out_topic, canonical_json({"error": str(exc), "status": 413})
    except BackpressureError as exc:
        return out_topic, canonical_json({"error": str(exc), "status": 503, "retryable": True})
    except RequestError as exc:
        return out_topic, canonical_json({"error": str(exc), "status": 400})
    return out_topic, receipt.encode()


# CoAP response codes as (class, detail)
COAP_CREATED = (2, 1)
COAP_BAD_REQUEST = (4, 0)
COAP_UNAUTHORIZED = (4, 1)
COAP_FORBIDDEN = (4, 3)
COAP_NOT_FOUND = (4, 4)
COAP_TOO_LARGE = (4, 13)
COAP_UNAVAILABLE = (5, 3)


def receive_coap(
    pipeline: IngestPipeline,
    path: str,
    payload: bytes,
    psk_id: Optional[str],
    mac: Optional[str],
    received_at: Optional[datetime] = None,
) -> tuple[tuple[int, int], bytes]:
    """Confirmable POST /obs/<patient>/<device>; returns (code, body)."""
    m = COAP_PATH_RE.match(path)
    if not m:
        return COAP_NOT_FOUND, canonical_json({"error": f"no resource {path!r}"})
    if psk_id and not any(reg.coap_psk_id == psk_id for reg in pipeline.registry.devices.values()):
        return COAP_FORBIDDEN, canonical_json({"error": f"unknown device identity {psk_id!r}"})
    try:
        principal = pipeline.registry.authenticate(
            Credentials("coap", psk_id=psk_id, mac=mac, payload=payload), received_at or pipeline.clock()
        )
    except AuthError as exc:
        return COAP_UNAUTHORIZED, canonical_json({"error": str(exc)})
    try:
        if (m.group(1), m.group(2)) != (principal.patient_id, principal.device_id):
            raise AuthorizationError(f"path names {m.group(1)}/{m.group(2)}")
        payloads = _parse_body(payload)
        receipt = pipeline.ingest("coap", principal, payloads, received_at)
    except AuthorizationError as exc:
        return COAP_FORBIDDEN, canonical_json({"error": str(exc)})
    except BatchTooLargeError as exc:
        return COAP_TOO_LARGE, canonical_json({"error": str(exc)})
    except BackpressureError as exc:
        return COAP_UNAVAILABLE, canonical_json({"error": str(exc)})
    except RequestError as exc:
        return COAP_BAD_REQUEST, canonical_json({"error": str(exc)})
    return COAP_CREATED, receipt.encode()
