"""Composition root: configuration, wiring, lifecycle and background sealing."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

from .cas import ContentStore
from .contracts import (
    AlertNotifier,
    ContractEngine,
    ContractSpec,
    SummaryReport,
    check_access,
    load_contract_dir,
)
from .core import ContentAddress, format_time
from .errors import BlockIoTError, ConfigError, StartupError, TemplateParseError, ValidationError
from .fhir import FhirService
from .gateway import IngestPipeline, Registry
from .keys import Keystore, patient_principal
from .ledger import GATEWAY_PRINCIPAL, MAX_DIFFICULTY, Ledger, make_tx
from .servers import CoapListener, HttpApp, HttpListener, MqttListener
from .templates import TemplateRegistry, shipped_template_dir

logger = logging.getLogger(__name__)

ENV_PREFIX = "BLOCKIOT_"


@dataclass
class GatewayConfig:
    """Gateway settings; precedence is env > file > default.

    Each field can be overridden by ``BLOCKIOT_<FIELD>`` (upper case).
    An empty listen address disables that transport.
    """

    data_dir: Path
    registry_path: Path
    template_dir: Path = field(default_factory=shipped_template_dir)
    contract_dir: Optional[Path] = None
    http_listen: str = "127.0.0.1:8080"
    coap_listen: str = ""
    mqtt_broker: str = ""
    difficulty_bits: int = 12
    seal_batch_size: int = 10
    seal_interval_s: float = 5.0
    max_batch: int = 1000
    queue_capacity: int = 64
    keystore_seed: Optional[str] = None
    webhook_url: Optional[str] = None
    drain_timeout_s: float = 10.0
    insecure_test_mode: bool = False

    def __post_init__(self) -> None:
        for name in ("data_dir", "registry_path", "template_dir", "contract_dir"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, Path):
                setattr(self, name, Path(value))
        if not 0 <= int(self.difficulty_bits) <= MAX_DIFFICULTY:
            raise ConfigError(f"difficulty_bits must be within 0-{MAX_DIFFICULTY}, got {self.difficulty_bits}")
        if self.seal_batch_size < 1 or self.seal_interval_s <= 0:
            raise ConfigError("seal_batch_size must be >= 1 and seal_interval_s > 0")
        if self.max_batch < 1 or self.queue_capacity < 1:
            raise ConfigError("max_batch and queue_capacity must be >= 1")
        if self.keystore_seed is not None and len(bytes.fromhex(self.keystore_seed)) < 16:
            raise ConfigError("keystore_seed must be at least 16 bytes of hex")

    def check_paths(self) -> None:
        """Referenced inputs must exist; the data directory is created."""
        if not self.registry_path.is_file():
            raise ConfigError(f"registry_path {self.registry_path} does not exist")
        if not self.template_dir.is_dir():
            raise ConfigError(f"template_dir {self.template_dir} does not exist")
        if self.contract_dir is not None and not self.contract_dir.is_dir():
            raise ConfigError(f"contract_dir {self.contract_dir} does not exist")

    @classmethod
    def from_mapping(cls, doc: dict, env: Optional[dict] = None, base: Optional[Path] = None) -> "GatewayConfig":
        env = os.environ if env is None else env
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(doc) - set(fields)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        values = dict(doc)
        for name, f in fields.items():
            raw = env.get(ENV_PREFIX + name.upper())
            if raw is not None:
                values[name] = _coerce(name, f.type, raw)
        for name in ("data_dir", "registry_path", "template_dir", "contract_dir"):
            if values.get(name) is not None and base is not None:
                p = Path(values[name])
                values[name] = p if p.is_absolute() else base / p
        missing = [n for n in ("data_dir", "registry_path") if n not in values]
        if missing:
            raise ConfigError(f"missing config keys {missing}")
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path, env: Optional[dict] = None) -> "GatewayConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_mapping(doc, env, base=path.parent)


def _coerce(name: str, annotation: str, raw: str):
    annotation = str(annotation)
    try:
        if "bool" in annotation:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if "int" in annotation:
            return int(raw)
        if "float" in annotation:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{ENV_PREFIX}{name.upper()}: {exc}") from exc
    return raw


def merge_template_guidelines(specs: dict[str, list[ContractSpec]], registry: Registry) -> dict[str, list[ContractSpec]]:
    """Adverse-condition specs without explicit guidelines inherit the
    non-trivial guidelines of the patient's registered device templates."""
    out: dict[str, list[ContractSpec]] = {}
    for patient_hex, items in specs.items():
        inherited = []
        for reg in registry.devices.values():
            if registry.patient_key(reg.patient_id).hex() == patient_hex:
                template = registry.templates.get(reg.template)
                inherited.extend(g for g in template.guidelines if g.action != "none")
        merged = []
        for spec in items:
            if spec.contract_kind == "adverse_condition" and not spec.guidelines and inherited:
                spec = dataclasses.replace(spec, guidelines=tuple(inherited))
            merged.append(spec)
        out[patient_hex] = merged
    return out


class Gateway:
    """A running gateway: store, ledger, contracts, pipeline, listeners."""

    def __init__(self, config: GatewayConfig, clock: Optional[Callable[[], datetime]] = None):
        self.config = config
        self.clock = clock or (lambda: datetime.now(timezone.utc))
        self.ready = False
        self.listeners: list = []
        self._stop = threading.Event()
        self._sealer: Optional[threading.Thread] = None
        self._last_seal = self.clock()
        self.store: Optional[ContentStore] = None
        self.ledger: Optional[Ledger] = None
        self.pipeline: Optional[IngestPipeline] = None
        self.fhir: Optional[FhirService] = None
        self.notifier: Optional[AlertNotifier] = None

    # -- lifecycle ----------------------------------------------------------

    def build(self) -> "Gateway":
        """Wire every component; nothing is replayed or bound yet."""
        cfg = self.config
        cfg.check_paths()
        cfg.data_dir.mkdir(parents=True, exist_ok=True)
        seed = bytes.fromhex(cfg.keystore_seed) if cfg.keystore_seed else None
        try:
            self.keystore = Keystore.open(cfg.data_dir / "keystore.json", seed)
        except BlockIoTError as exc:
            raise StartupError("keystore", str(exc)) from exc
        try:
            self.templates = TemplateRegistry.from_dir(cfg.template_dir)
        except TemplateParseError as exc:
            raise StartupError("templates", str(exc)) from exc
        try:
            self.registry = Registry.from_file(cfg.registry_path, self.templates)
        except (KeyError, ValueError, TypeError) as exc:
            raise StartupError("registry", f"{cfg.registry_path}: {exc}") from exc
        specs: dict[str, list[ContractSpec]] = {}
        if cfg.contract_dir is not None:
            try:
                specs = load_contract_dir(cfg.contract_dir)
            except (BlockIoTError, KeyError, ValueError) as exc:
                raise StartupError("contracts", str(exc)) from exc
        self.keystore.register(GATEWAY_PRINCIPAL)
        for ident in self.registry.patients.values():
            self.keystore.register(patient_principal(ident.patient_key))
        self.store = ContentStore(cfg.data_dir / "cas", self.keystore)
        self.engine = ContractEngine(merge_template_guidelines(specs, self.registry), self.store)
        self.ledger = Ledger(
            self.keystore,
            self.store,
            self.engine,
            directory=cfg.data_dir / "ledger",
            difficulty_bits=cfg.difficulty_bits,
            clock=self.clock,
        )
        self.pipeline = IngestPipeline(
            self.registry,
            self.store,
            self.ledger,
            dedup_path=cfg.data_dir / "batches.jsonl",
            max_batch=cfg.max_batch,
            queue_capacity=cfg.queue_capacity,
            clock=self.clock,
            ready=lambda: self.ready,
        )
        self.fhir = FhirService(lambda: self.ledger.state, self.store, self.registry, check_access)
        self.notifier = AlertNotifier(cfg.webhook_url, cfg.data_dir / "webhook-outbox.txt")
        self.ledger.on_apply(lambda state, block: self.notifier.enqueue_from(state))
        return self

    def replay(self) -> None:
        verdict = self.ledger.open()
        if not verdict.ok:
            raise StartupError(
                "ledger", f"chain invalid at height {verdict.height}: {verdict.reason}", exit_code=2
            )
        self._last_seal = self.clock()
        self.ready = True
        logger.info("ledger replayed to height %d", self.ledger.tip.height)

    def start(self, listen: bool = True, sealer: bool = True) -> "Gateway":
        """Build, bind listeners, replay, then report ready.

        Listeners are bound before replay so bind errors surface early, but
        every transport answers retry-later until replay has finished.
        """
        if self.ledger is None:
            self.build()
        cfg = self.config
        try:
            if listen:
                self._bind()
            self.replay()
        except BaseException:
            self._close_listeners()
            raise
        self.notifier.start()
        self.notifier.enqueue_from(self.ledger.state)
        if sealer:
            self._sealer = threading.Thread(target=self._seal_loop, name="sealer", daemon=True)
            self._sealer.start()
        if not cfg.insecure_test_mode and listen:
            logger.warning("listeners speak plain TCP/UDP; terminate TLS/DTLS in front of them")
        return self

    def _bind(self) -> None:
        cfg = self.config
        if cfg.http_listen:
            app = HttpApp(self.pipeline, self.fhir, self.registry.authenticate_reader, lambda: self.ready)
            http = HttpListener(cfg.http_listen, app)
            http.start()
            self.listeners.append(http)
        if cfg.coap_listen:
            coap = CoapListener(cfg.coap_listen, self.pipeline)
            coap.start()
            self.listeners.append(coap)
        if cfg.mqtt_broker:
            mqtt = MqttListener(cfg.mqtt_broker, self.pipeline, client_id=f"blockiot-{os.getpid()}-{id(self)}")
            mqtt.start()
            self.listeners.append(mqtt)

    def listener(self, kind: type):
        return next(item for item in self.listeners if isinstance(item, kind))

    def _close_listeners(self) -> None:
        for item in reversed(self.listeners):
            try:
                item.stop()
            except Exception:  # noqa: BLE001 - best effort during shutdown
                logger.exception("error stopping %s", type(item).__name__)
        self.listeners = []

    def _seal_loop(self) -> None:
        tick = min(self.config.seal_interval_s, 0.25)
        while not self._stop.wait(tick):
            try:
                if self.ledger.maybe_seal(self.config.seal_batch_size, self.config.seal_interval_s, self._last_seal):
                    self._last_seal = self.clock()
            except Exception:  # noqa: BLE001 - keep sealing alive; next tick retries
                logger.exception("sealing failed")

    def seal_pending(self):
        block = self.ledger.seal()
        if block is not None:
            self._last_seal = self.clock()
        return block

    def drain_and_stop(self, timeout: Optional[float] = None) -> tuple[str, str]:
        """Stop intake, seal the mempool, and return (store digest, state_digest)."""
        timeout = self.config.drain_timeout_s if timeout is None else timeout
        self.ready = False
        self._close_listeners()
        self._stop.set()
        if self._sealer is not None:
            self._sealer.join(timeout)
        try:
            self.seal_pending()
        except Exception:  # noqa: BLE001 - report committed state only
            logger.exception("final seal failed; returning committed state")
        if self.notifier is not None:
            self.notifier.stop(timeout)
        return self.store.digest(), self.ledger.state.state_digest

    def digests(self) -> tuple[str, str]:
        return self.store.digest(), self.ledger.state.state_digest

    def status(self) -> dict:
        state = self.ledger.state
        return {
            "ready": self.ready,
            "height": self.ledger.tip.height,
            "tip": self.ledger.tip.hash,
            "mempool": len(self.ledger.mempool()),
            "objects": len(self.store.addresses()),
            "store_digest": self.store.digest(),
            "state_digest": state.state_digest,
            "alerts": len(state.alerts),
            "listeners": [f"{type(item).__name__}@{item.address}" for item in self.listeners],
        }

    # -- provider-facing operations -------------------------------------------

    def patient_key(self, patient: str | bytes) -> bytes:
        if isinstance(patient, bytes):
            return patient
        if patient in self.registry.patients:
            return self.registry.patient_key(patient)
        return bytes.fromhex(patient)

    def _submit(self, kind: str, patient_key: bytes, payload: dict, signer: str, issued_at: Optional[datetime]):
        addr = self.store.put_json(payload)
        tx = make_tx(self.keystore, kind, patient_key, addr, issued_at or self.clock(), signer)
        ok, reason = self.ledger.submit_tx(tx)
        if not ok and reason != "duplicate":
            raise ValidationError(f"ledger rejected {kind}: {reason}")
        return tx

    def grant_access(self, patient: str | bytes, grantee: str, scope: str = "read", issued_at: Optional[datetime] = None):
        key = self.patient_key(patient)
        return self._submit("access_grant", key, {"grantee": grantee, "scope": scope}, patient_principal(key), issued_at)

    def revoke_access(self, patient: str | bytes, grantee: str, scope: str = "read", issued_at: Optional[datetime] = None):
        key = self.patient_key(patient)
        return self._submit("access_revoke", key, {"grantee": grantee, "scope": scope}, patient_principal(key), issued_at)

    def publish_summary(
        self, patient: str | bytes, start: datetime, end: datetime, issued_at: Optional[datetime] = None
    ) -> SummaryReport:
        """Seal pending data, summarize (start, end], and anchor the report.

        The summary_published transaction is sealed too, so compliance
        alerts are evaluated before this returns.
        """
        key = self.patient_key(patient)
        self.seal_pending()
        report = self.engine.build_summary(self.ledger.state, key, start, end)
        addr = self.store.put(report.encode())
        tx = make_tx(self.keystore, "summary_published", key, addr, issued_at or end, GATEWAY_PRINCIPAL)
        ok, reason = self.ledger.submit_tx(tx)
        if not ok and reason != "duplicate":
            raise ValidationError(f"ledger rejected summary: {reason}")
        name = f"summary-{format_time(start)}-{format_time(end)}".replace(":", "")
        self.pipeline.append_to_folder(key, name, addr)
        self.seal_pending()
        return dataclasses.replace(report, address=addr)

    def summary(self, address: ContentAddress | str) -> SummaryReport:
        addr = ContentAddress.parse(str(address))
        return SummaryReport.from_json(self.store.get_json(addr), address=addr)


def start(config: GatewayConfig, clock: Optional[Callable[[], datetime]] = None, **kwargs) -> Gateway:
    return Gateway(config, clock).start(**kwargs)


def drain_and_stop(handle: Gateway, timeout: Optional[float] = None) -> tuple[str, str]:
    return handle.drain_and_stop(timeout)


def write_config(path: str | Path, **values) -> Path:
    """Small helper used by tests and the CLI to emit a config file."""
    path = Path(path)
    doc = {k: (str(v) if isinstance(v, Path) else v) for k, v in values.items()}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


__all__ = [
    "Gateway",
    "GatewayConfig",
    "drain_and_stop",
    "merge_template_guidelines",
    "start",
    "write_config",
]
