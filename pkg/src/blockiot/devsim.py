"""Scenario-driven device simulator.

A scenario names one patient, the devices they wear, and a timeline of
literal payloads or generated series. ``run_scenario`` renders the timeline
into wire payloads (deterministic for a given seed) and delivers them over
each device's transport, tallying the gateway's receipts.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import math
import random
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from . import core
from .core import PatientIdentity, canonical_json, format_time
from .gateway import IngestPipeline, coap_mac, receive_coap, receive_http, receive_mqtt
from .templates import DeviceTemplate, TemplateRegistry

logger = logging.getLogger(__name__)

GENERATOR_TYPES = ("constant", "linear_drift", "sinusoid", "scripted")


# --------------------------------------------------------------------------
# value generation


def generate_values(spec: dict, n: int, seed: Any = None) -> list:
    """``n`` values from a generator spec; deterministic given the seed.

    ``noise`` adds seeded Gaussian noise (standard deviation = amplitude) to
    numeric generators; ``decimals`` rounds the result.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    kind = spec.get("type")
    if kind not in GENERATOR_TYPES:
        raise ValueError(f"unknown generator type {kind!r}")
    if kind == "scripted":
        values = list(spec["values"])
        if not values and n:
            raise ValueError("scripted generator has no values")
        return [values[i % len(values)] for i in range(n)]
    if kind == "constant":
        base = [spec["value"]] * n
    elif kind == "linear_drift":
        base = [spec["start"] + spec["slope"] * i for i in range(n)]
    else:
        period = spec["period"]
        base = [
            spec["mean"] + spec["amplitude"] * math.sin(2 * math.pi * i / period + spec.get("phase", 0.0))
            for i in range(n)
        ]
    noise = spec.get("noise", 0)
    if noise:
        rng = random.Random(spec.get("seed", seed))
        base = [v + rng.gauss(0.0, noise) for v in base]
    decimals = spec.get("decimals")
    if decimals is not None:
        base = [round(v, decimals) for v in base]
        if decimals == 0:
            base = [int(v) for v in base]
    return base


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class SimDevice:
    device_id: str
    template: str
    transport: str
    credentials: dict
    batch_size: int = 1


@dataclass(frozen=True)
class TimelineEntry:
    offset: timedelta
    device: str
    payload: Optional[dict] = None
    generator: Optional[dict] = None


@dataclass(frozen=True)
class Send:
    """One wire payload, scheduled at ``at`` (simulated time)."""

    at: datetime
    device: str
    payload: dict


@dataclass
class Scenario:
    name: str
    patient_id: str
    patient: PatientIdentity
    devices: tuple[SimDevice, ...]
    timeline: tuple[TimelineEntry, ...]
    start: Optional[datetime] = None
    time_compression: float = 0.0
    seed: int = 0
    readers: tuple = ()
    contracts: tuple = ()

    def __post_init__(self) -> None:
        names = {d.device_id for d in self.devices}
        for d in self.devices:
            if d.transport not in ("http", "mqtt", "coap"):
                raise ValueError(f"device {d.device_id}: unknown transport {d.transport!r}")
            if d.batch_size < 1:
                raise ValueError(f"device {d.device_id}: batch_size must be >= 1")
        last = timedelta(0)
        for entry in self.timeline:
            if entry.device not in names:
                raise ValueError(f"timeline names unknown device {entry.device!r}")
            if entry.offset < last:
                raise ValueError("timeline offsets must be non-decreasing")
            last = entry.offset

    def device(self, device_id: str) -> SimDevice:
        return next(d for d in self.devices if d.device_id == device_id)

    def check_templates(self, templates: TemplateRegistry) -> None:
        for d in self.devices:
            templates.get(d.template)

    def registry_doc(self) -> dict:
        """Registration table a gateway needs to accept this scenario."""
        return {
            "patients": [{"patient_id": self.patient_id, **self.patient.to_json()}],
            "devices": [
                {"device_id": d.device_id, "patient_id": self.patient_id, "template": d.template, "credentials": d.credentials}
                for d in self.devices
            ],
            "readers": list(self.readers),
        }

    def contract_doc(self) -> dict:
        return {"patient": self.patient.to_json(), "contracts": list(self.contracts)}

    @classmethod
    def from_json(cls, doc: dict) -> "Scenario":
        patient = dict(doc["patient"])
        pid = patient.pop("patient_id")
        return cls(
            name=doc.get("name", ""),
            patient_id=pid,
            patient=PatientIdentity.from_json(patient),
            devices=tuple(
                SimDevice(d["device_id"], d["template"], d.get("transport", "http"), d.get("credentials", {}), d.get("batch_size", 1))
                for d in doc["devices"]
            ),
            timeline=tuple(
                TimelineEntry(
                    timedelta(seconds=e.get("offset_s", 0)),
                    e["device"],
                    e.get("payload"),
                    {k: v for k, v in e.items() if k not in ("offset_s", "device", "payload")} or None,
                )
                for e in doc.get("timeline", ())
            ),
            start=core.parse_time(doc["start"]) if doc.get("start") else None,
            time_compression=float(doc.get("time_compression", 0.0)),
            seed=int(doc.get("seed", 0)),
            readers=tuple(doc.get("readers", ())),
            contracts=tuple(doc.get("contracts", ())),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_json(json.loads(Path(path).read_text()))


def shipped_scenario_dir() -> Path:
    return Path(__file__).parent / "data" / "scenarios"


def _wire_time(template: DeviceTemplate, at: datetime):
    tp = template.device_config.time_properties
    if tp.timestamp_format == "epoch_ms":
        return core.epoch_ms(at)
    if tp.timestamp_format == "epoch_s":
        return core.epoch_ms(at) // 1000
    return at.strftime("%Y-%m-%dT%H:%M:%SZ") if at.microsecond == 0 else format_time(at)


def render(scenario: Scenario, templates: TemplateRegistry, seed: Optional[int] = None, start: Optional[datetime] = None) -> list[Send]:
    """Expand the timeline into wire payloads sorted by time (stable)."""
    seed = scenario.seed if seed is None else seed
    start = core.utc(start or scenario.start or datetime.now(timezone.utc).replace(microsecond=0))
    sends: list[tuple[datetime, int, Send]] = []
    order = 0
    for index, entry in enumerate(scenario.timeline):
        dev = scenario.device(entry.device)
        template = templates.get(dev.template)
        ident = template.identifiers
        tkey = template.device_config.time_properties.timestamp_key

        def wire(at: datetime, fields: dict) -> dict:
            doc = {ident.patient_id_key: scenario.patient_id, ident.device_id_key: dev.device_id}
            if tkey:
                doc[tkey] = _wire_time(template, at)
            doc.update(fields)
            return doc

        base = start + entry.offset
        if entry.generator is None:
            payload = dict(entry.payload or {})
            if "_raw" in payload:  # deliberately malformed payloads go out verbatim
                docs = [(base, payload["_raw"])]
            else:
                docs = [(base, wire(base, payload))]
        else:
            gen = entry.generator
            if "offsets_s" in gen:
                times = [base + timedelta(seconds=s) for s in gen["offsets_s"]]
            else:
                times = [base + timedelta(seconds=gen.get("every_s", 0) * i) for i in range(gen["count"])]
            columns = {
                key: generate_values(spec, len(times), seed=f"{seed}:{index}:{entry.device}:{key}")
                for key, spec in sorted(gen.get("fields", {}).items())
            }
            docs = []
            for i, at in enumerate(times):
                fields = dict(gen.get("static", {}))
                fields.update({key: col[i] for key, col in columns.items()})
                docs.append((at, wire(at, fields)))
        for at, doc in docs:
            sends.append((at, order, Send(at, dev.device_id, doc)))
            order += 1
    sends.sort(key=lambda s: (s[0], s[1]))
    return [s for _, _, s in sends]


# --------------------------------------------------------------------------
# senders


class DeliveryError(Exception):
    pass


class Sender:
    """Delivers one batch; returns the gateway's receipt (or error) document."""

    def send(self, scenario: Scenario, device: SimDevice, payloads: list, at: datetime) -> dict:
        raise NotImplementedError

    def close(self) -> None:
        pass


def _body(payloads: list) -> bytes:
    return canonical_json({"payloads": payloads})


class DirectSender(Sender):
    """Calls the gateway's transport handlers in-process.

    ``received_at`` follows the simulated clock, so runs are reproducible
    byte for byte and independent of wall time.
    """

    def __init__(self, pipeline: IngestPipeline):
        self.pipeline = pipeline

    def send(self, scenario, device, payloads, at):
        creds = device.credentials
        if device.transport == "http":
            resp = receive_http(self.pipeline, {"Authorization": f"Bearer {creds.get('http_token', '')}"}, _body(payloads), at)
            return resp.json() if resp.status == 200 else {"error": (resp.json() or {}).get("error", ""), "status": resp.status}
        if device.transport == "mqtt":
            topic = f"blockiot/{scenario.patient_id}/{device.device_id}/obs"
            message = canonical_json({"auth": {"username": creds.get("mqtt_username"), "password": creds.get("mqtt_password")}, "payloads": payloads})
            _, body = receive_mqtt(self.pipeline, topic, message, at)
            return json.loads(body)
        body = _body(payloads)
        code, reply = receive_coap(
            self.pipeline, f"/obs/{scenario.patient_id}/{device.device_id}", body,
            creds.get("coap_psk_id"), coap_mac(creds.get("coap_psk", ""), body) if creds.get("coap_psk") else None, at,
        )
        doc = json.loads(reply)
        if code != (2, 1):
            doc["status"] = f"{code[0]}.{code[1]:02d}"
        return doc


class NetworkSender(Sender):
    """Real sockets: HTTP via urllib, MQTT via paho, CoAP via aiocoap."""

    def __init__(self, endpoints: dict[str, str], timeout: float = 10.0):
        self.endpoints = endpoints
        self.timeout = timeout
        self._mqtt = None
        self._mqtt_lock = threading.Lock()
        self._replies: dict[str, list] = {}
        self._reply_cv = threading.Condition()
        self._coap_loop: Optional[asyncio.AbstractEventLoop] = None
        self._coap_ctx = None
        self._coap_thread: Optional[threading.Thread] = None

    def _endpoint(self, transport: str) -> str:
        try:
            return self.endpoints[transport]
        except KeyError:
            raise DeliveryError(f"no {transport} endpoint configured") from None

    def send(self, scenario, device, payloads, at):
        if device.transport == "http":
            return self._http(device, payloads)
        if device.transport == "mqtt":
            return self._mqtt_send(scenario, device, payloads)
        return self._coap(scenario, device, payloads)

    def _http(self, device, payloads):
        url = f"http://{self._endpoint('http')}/ingest/observations"
        req = urllib.request.Request(
            url, data=_body(payloads), method="POST",
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {device.credentials.get('http_token', '')}"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            body = exc.read()
            doc = json.loads(body) if body else {}
            if exc.code == 503:
                raise DeliveryError(f"HTTP 503: {doc.get('error', '')}") from exc
            return {"error": doc.get("error", ""), "status": exc.code}
        except (urllib.error.URLError, OSError) as exc:
            raise DeliveryError(str(exc)) from exc

    def _mqtt_client(self):
        import paho.mqtt.client as mqtt

        with self._mqtt_lock:
            if self._mqtt is None:
                host, _, port = self._endpoint("mqtt").rpartition(":")
                client = mqtt.Client(mqtt.CallbackAPIVersion.VERSION2, client_id=f"devsim-{id(self)}")
                subscribed = threading.Event()

                def on_message(c, userdata, msg):
                    with self._reply_cv:
                        self._replies.setdefault(msg.topic, []).append(msg.payload)
                        self._reply_cv.notify_all()

                client.on_message = on_message
                client.on_subscribe = lambda *a: subscribed.set()
                client.connect(host or "127.0.0.1", int(port))
                client.loop_start()
                client.subscribe("blockiot/+/+/receipt", qos=1)
                if not subscribed.wait(self.timeout):
                    raise DeliveryError("MQTT subscribe not acknowledged")
                self._mqtt = client
            return self._mqtt

    def _mqtt_send(self, scenario, device, payloads):
        client = self._mqtt_client()
        creds = device.credentials
        topic = f"blockiot/{scenario.patient_id}/{device.device_id}/obs"
        reply = topic.rsplit("/", 1)[0] + "/receipt"
        message = canonical_json(
            {"auth": {"username": creds.get("mqtt_username"), "password": creds.get("mqtt_password")}, "payloads": payloads}
        )
        with self._reply_cv:
            self._replies.pop(reply, None)
        info = client.publish(topic, message, qos=1)
        info.wait_for_publish(self.timeout)
        deadline = time.monotonic() + self.timeout
        with self._reply_cv:
            while not self._replies.get(reply):
                left = deadline - time.monotonic()
                if left <= 0:
                    raise DeliveryError(f"no receipt on {reply}")
                self._reply_cv.wait(left)
            doc = json.loads(self._replies[reply].pop(0))
        if doc.get("status") == 503:
            raise DeliveryError(doc.get("error", "busy"))
        return doc

    def _coap(self, scenario, device, payloads):
        import aiocoap

        if self._coap_loop is None:
            self._coap_loop = asyncio.new_event_loop()
            self._coap_thread = threading.Thread(target=self._coap_loop.run_forever, name="devsim-coap", daemon=True)
            self._coap_thread.start()

        creds = device.credentials
        body = _body(payloads)
        mac = coap_mac(creds["coap_psk"], body) if creds.get("coap_psk") else ""
        uri = f"coap://{self._endpoint('coap')}/obs/{scenario.patient_id}/{device.device_id}?psk_id={creds.get('coap_psk_id', '')}&mac={mac}"

        async def go():
            if self._coap_ctx is None:
                self._coap_ctx = await aiocoap.Context.create_client_context()
            msg = aiocoap.Message(code=aiocoap.POST, payload=body, uri=uri)
            return await asyncio.wait_for(self._coap_ctx.request(msg).response, self.timeout)

        try:
            resp = asyncio.run_coroutine_threadsafe(go(), self._coap_loop).result(self.timeout + 1)
        except Exception as exc:  # noqa: BLE001 - any transport failure is retried
            raise DeliveryError(f"CoAP: {exc}") from exc
        doc = json.loads(resp.payload) if resp.payload else {}
        cls, detail = divmod(int(resp.code), 32)
        if (cls, detail) == (5, 3):
            raise DeliveryError(doc.get("error", "5.03"))
        if cls != 2:
            doc["status"] = f"{cls}.{detail:02d}"
        return doc

    def close(self) -> None:
        if self._mqtt is not None:
            self._mqtt.disconnect()
            self._mqtt.loop_stop()
            self._mqtt = None
        if self._coap_loop is not None:
            if self._coap_ctx is not None:
                asyncio.run_coroutine_threadsafe(self._coap_ctx.shutdown(), self._coap_loop).result(5)
            self._coap_loop.call_soon_threadsafe(self._coap_loop.stop)
            self._coap_thread.join(5)
            self._coap_loop = None


# --------------------------------------------------------------------------
# running


@dataclass
class RunReport:
    scenario: str
    seed: int
    sent: int = 0
    accepted: int = 0
    rejected: list[tuple[str, int, str]] = field(default_factory=list)
    errors: list[tuple[str, int, str]] = field(default_factory=list)
    failures: list[tuple[str, int, str]] = field(default_factory=list)
    receipts: list[dict] = field(default_factory=list)
    transports: set[str] = field(default_factory=set)
    payload_digest: str = ""

    @property
    def mismatches(self) -> int:
        """Payloads not accounted for by an accept, reject or failure."""
        rejected = len(self.rejected) + sum(n for _, n, _ in self.errors) + sum(n for _, n, _ in self.failures)
        return self.sent - self.accepted - rejected

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "sent": self.sent,
            "accepted": self.accepted,
            "rejected": [list(r) for r in self.rejected],
            "errors": [list(e) for e in self.errors],
            "failures": [list(f) for f in self.failures],
            "transports": sorted(self.transports),
            "payload_digest": self.payload_digest,
            "mismatches": self.mismatches,
        }


def _batches(sends: Sequence[Send], scenario: Scenario) -> list[tuple[str, list[Send]]]:
    """Group consecutive sends of one device up to its batch_size."""
    per_device: dict[str, list[list[Send]]] = {}
    for s in sends:
        groups = per_device.setdefault(s.device, [])
        if not groups or len(groups[-1]) >= scenario.device(s.device).batch_size:
            groups.append([])
        groups[-1].append(s)
    out = [(dev, g) for dev, groups in per_device.items() for g in groups]
    out.sort(key=lambda item: item[1][-1].at)
    return out


def run_scenario(
    scenario: Scenario,
    sender: Sender,
    templates: TemplateRegistry,
    seed: Optional[int] = None,
    speed: Optional[float] = None,
    start: Optional[datetime] = None,
    retries: int = 3,
    backoff_s: float = 0.05,
    concurrent: bool = False,
    sleep: Callable[[float], None] = time.sleep,
) -> RunReport:
    """Send every timeline entry once, in order per device.

    ``speed`` is the time compression factor (simulated seconds per real
    second); 0 or None sends as fast as possible. With ``concurrent`` each
    device gets its own sender thread.
    """
    scenario.check_templates(templates)
    seed = scenario.seed if seed is None else seed
    speed = scenario.time_compression if speed is None else speed
    sends = render(scenario, templates, seed, start)
    report = RunReport(scenario.name, seed)
    report.payload_digest = hashlib.sha256(canonical_json([s.payload for s in sends])).hexdigest()
    if not sends:
        return report
    batches = _batches(sends, scenario)
    origin_sim = sends[0].at
    origin_real = time.monotonic()
    lock = threading.Lock()

    def deliver(device_id: str, group: list[Send]) -> None:
        device = scenario.device(device_id)
        if speed:
            due = (group[-1].at - origin_sim).total_seconds() / speed
            delay = due - (time.monotonic() - origin_real)
            if delay > 0:
                sleep(delay)
        payloads = [s.payload for s in group]
        doc = None
        for attempt in range(retries + 1):
            try:
                doc = sender.send(scenario, device, payloads, group[-1].at)
                break
            except DeliveryError as exc:
                if attempt == retries:
                    with lock:
                        report.failures.append((device_id, len(payloads), str(exc)))
                        report.sent += len(payloads)
                    return
                sleep(backoff_s * (2 ** attempt))
        with lock:
            report.sent += len(payloads)
            report.transports.add(device.transport)
            report.receipts.append(doc)
            if "batch_id" in doc:
                report.accepted += doc["accepted"]
                report.rejected.extend((device_id, i, reason) for i, reason in doc["rejected"])
            else:
                report.errors.append((device_id, len(payloads), f"{doc.get('status', '')} {doc.get('error', '')}".strip()))

    if concurrent:
        per_device: dict[str, list[list[Send]]] = {}
        for dev, group in batches:
            per_device.setdefault(dev, []).append(group)

        def worker(dev: str) -> None:
            for group in per_device[dev]:
                deliver(dev, group)

        threads = [threading.Thread(target=worker, args=(dev,), name=f"devsim-{dev}") for dev in per_device]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    else:
        for dev, group in batches:
            deliver(dev, group)
    logger.info("scenario %s: %d sent, %d accepted, %d rejected", scenario.name, report.sent, report.accepted, len(report.rejected))
    return report


def coverage(reports: Sequence[RunReport], scenarios: Sequence[Scenario], templates: TemplateRegistry) -> dict:
    """Kinds, transports and contract families exercised by a scenario suite."""
    kinds: set[str] = set()
    contracts: set[str] = set()
    for sc in scenarios:
        # a kind counts only when some rendered payload carries its keys
        for s in render(sc, templates, sc.seed):
            template = templates.get(sc.device(s.device).template)
            for rule in template.parameter_map:
                if any(k in s.payload for k in rule.payload_keys):
                    kinds.add(rule.kind)
        contracts.update(c["contract_kind"] for c in sc.contracts)
    transports = set().union(*(r.transports for r in reports)) if reports else set()
    return {"kinds": kinds, "transports": transports, "contracts": contracts}


def parse_endpoints(spec: str) -> dict[str, str]:
    """``http=host:port,mqtt=host:port,coap=host:port``; a bare address means HTTP."""
    out = {}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        if "=" in part:
            k, v = part.split("=", 1)
            out[k.strip()] = v.strip()
        else:
            out["http"] = part
    return out
