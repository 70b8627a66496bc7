"""Device templates: the "translators" from proprietary payload keys to
canonical observations.

A template is a JSON document validated against
``data/schemas/template.schema.json``. One file per (manufacturer, model,
firmware major version).
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Optional

import jsonschema

from . import core
from .core import (
    KINDS,
    CanonicalObservation,
    Code,
    ContentAddress,
    DeviceIdentity,
    EventState,
    MeasurementValue,
    Scalar,
    String,
    Vector,
    VectorComponent,
    Waveform,
)
from .errors import (
    IdentityError,
    MappingError,
    TemplateParseError,
    UnsupportedUnitError,
    ValidationError,
)

logger = logging.getLogger(__name__)

ACTIONS = ("none", "notify", "alert", "emergency")


@dataclass(frozen=True)
class TimeProperties:
    clock_type: str
    synchronization: str
    resolution_ms: int
    accuracy_ms: int
    timestamp_key: Optional[str] = None
    timestamp_format: str = "iso8601"
    utc_offset_minutes: int = 0
    max_clock_skew_ms: Optional[int] = None

    @property
    def skew_budget_ms(self) -> int:
        if self.max_clock_skew_ms is not None:
            return self.max_clock_skew_ms
        return self.accuracy_ms


@dataclass(frozen=True)
class DeviceConfig:
    specialization: str
    manufacturer: str
    model: str
    serial_number: str
    firmware: str
    hardware: str
    software: str
    time_properties: TimeProperties
    regulatory: Optional[str] = None


@dataclass(frozen=True)
class Identifiers:
    patient_id_key: str
    device_id_key: str
    nomenclature_code: int


@dataclass(frozen=True)
class ParameterRule:
    source_key: str
    target_code: str
    kind: str
    unit: Optional[str] = None
    code_set: tuple[str, ...] = ()
    vector_layout: tuple[str, ...] = ()
    component_keys: tuple[str, ...] = ()
    state_name: Optional[str] = None
    sample_rate_hz: Optional[float] = None
    channel_labels: tuple[str, ...] = ()

    @property
    def payload_keys(self) -> tuple[str, ...]:
        """Payload keys this rule consumes."""
        return self.component_keys or (self.source_key,)


@dataclass(frozen=True)
class GuidelineParam:
    target_code: str
    unit: str
    action: str
    lower_limit: Optional[float] = None
    upper_limit: Optional[float] = None

    def __post_init__(self) -> None:
        if self.lower_limit is None and self.upper_limit is None:
            raise ValidationError(f"guideline {self.target_code}: needs a lower or upper limit")
        if (
            self.lower_limit is not None
            and self.upper_limit is not None
            and not self.lower_limit < self.upper_limit
        ):
            raise ValidationError(f"guideline {self.target_code}: lower_limit must be < upper_limit")
        if self.action not in ACTIONS:
            raise ValidationError(f"guideline {self.target_code}: unknown action {self.action!r}")

    def to_json(self) -> dict:
        doc: dict[str, Any] = {
            "target_code": self.target_code,
            "unit": self.unit,
            "action": self.action,
        }
        if self.lower_limit is not None:
            doc["lower_limit"] = self.lower_limit
        if self.upper_limit is not None:
            doc["upper_limit"] = self.upper_limit
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "GuidelineParam":
        return cls(
            target_code=doc["target_code"],
            unit=doc["unit"],
            action=doc["action"],
            lower_limit=doc.get("lower_limit"),
            upper_limit=doc.get("upper_limit"),
        )


@dataclass(frozen=True)
class DeviceTemplate:
    identifiers: Identifiers
    device_config: DeviceConfig
    parameter_map: tuple[ParameterRule, ...]
    guidelines: tuple[GuidelineParam, ...] = ()
    name: str = ""

    @property
    def key(self) -> tuple[str, str, str]:
        cfg = self.device_config
        return (cfg.manufacturer, cfg.model, firmware_major(cfg.firmware))

    def rule(self, source_key: str) -> ParameterRule:
        for rule in self.parameter_map:
            if rule.source_key == source_key:
                return rule
        raise KeyError(source_key)


def firmware_major(version: str) -> str:
    return version.split(".", 1)[0] if version else ""


@dataclass
class MappingResult:
    """Outcome of mapping one payload; every payload key lands in exactly one
    of ``consumed`` (by an emitted observation), ``unmatched`` or ``errors``."""

    observations: list[CanonicalObservation] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)
    errors: list[MappingError] = field(default_factory=list)
    consumed: list[str] = field(default_factory=list)
    patient_id: str = ""
    device_id: str = ""


# --------------------------------------------------------------------------
# loading


@lru_cache(maxsize=1)
def template_schema() -> dict:
    text = resources.files("blockiot.data").joinpath("schemas/template.schema.json").read_text()
    return json.loads(text)


def load_template(data: bytes | str | dict, name: str = "") -> DeviceTemplate:
    """Parse and fully validate a template document."""
    if isinstance(data, dict):
        doc = data
    else:
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        if not data.strip():
            raise TemplateParseError(["$: empty document"])
        try:
            doc = json.loads(data)
        except json.JSONDecodeError as exc:
            raise TemplateParseError([f"$: not JSON ({exc.msg} at line {exc.lineno})"]) from exc

    validator = jsonschema.Draft202012Validator(template_schema())
    problems = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        path = "$" + "".join(
            f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path
        )
        if err.validator == "enum" and list(err.absolute_path)[-1:] == ["kind"]:
            problems.append(f"{path}: unknown kind {err.instance!r}")
        else:
            problems.append(f"{path}: {err.message}")
    if problems:
        raise TemplateParseError(problems)

    problems += _semantic_problems(doc)
    if problems:
        raise TemplateParseError(problems)

    ids = doc["identifiers"]
    cfg = doc["device_config"]
    return DeviceTemplate(
        identifiers=Identifiers(ids["patient_id_key"], ids["device_id_key"], ids["nomenclature_code"]),
        device_config=DeviceConfig(
            specialization=cfg["specialization"],
            manufacturer=cfg["manufacturer"],
            model=cfg["model"],
            serial_number=cfg["serial_number"],
            firmware=cfg["firmware"],
            hardware=cfg["hardware"],
            software=cfg["software"],
            time_properties=TimeProperties(**cfg["time_properties"]),
            regulatory=cfg.get("regulatory"),
        ),
        parameter_map=tuple(
            ParameterRule(
                source_key=r["source_key"],
                target_code=r["target_code"],
                kind=r["kind"],
                unit=r.get("unit"),
                code_set=tuple(r.get("code_set", ())),
                vector_layout=tuple(r.get("vector_layout", ())),
                component_keys=tuple(r.get("component_keys", ())),
                state_name=r.get("state_name"),
                sample_rate_hz=r.get("sample_rate_hz"),
                channel_labels=tuple(r.get("channel_labels", ())),
            )
            for r in doc["parameter_map"]
        ),
        guidelines=tuple(GuidelineParam.from_json(g) for g in doc.get("guidelines", ())),
        name=name,
    )


def _semantic_problems(doc: dict) -> list[str]:
    problems = []
    ids = doc["identifiers"]
    tp = doc["device_config"]["time_properties"]
    reserved = {ids["patient_id_key"], ids["device_id_key"]}
    if tp.get("timestamp_key"):
        reserved.add(tp["timestamp_key"])
    seen: dict[str, str] = {}
    for i, rule in enumerate(doc["parameter_map"]):
        path = f"$.parameter_map[{i}]"
        keys = [rule["source_key"]] + [k for k in rule.get("component_keys", ()) if k != rule["source_key"]]
        for key in keys:
            if key in seen:
                problems.append(f"{path}.source_key: duplicate source_key {key!r} (also in {seen[key]})")
            elif key in reserved:
                problems.append(f"{path}.source_key: {key!r} is an identifier/timestamp key")
            seen[key] = path
        kind = rule["kind"]
        if kind == "code" and not rule.get("code_set"):
            problems.append(f"{path}.code_set: kind=code requires a non-empty code_set")
        if kind == "vector":
            layout = rule.get("vector_layout") or []
            if not layout:
                problems.append(f"{path}.vector_layout: kind=vector requires a non-empty vector_layout")
            if len(layout) == 1:
                problems.append(f"{path}.vector_layout: a vector needs at least two labels")
            comp = rule.get("component_keys")
            if comp is not None and len(comp) != len(layout):
                problems.append(f"{path}.component_keys: length must equal vector_layout length")
        if kind in ("scalar", "vector"):
            unit = rule.get("unit")
            if not unit:
                problems.append(f"{path}.unit: kind={kind} requires a unit")
            elif not core.is_valid_ucum(unit):
                problems.append(f"{path}.unit: invalid UCUM code {unit!r}")
        if rule.get("component_keys") and kind != "vector":
            problems.append(f"{path}.component_keys: only valid for kind=vector")
    for i, g in enumerate(doc.get("guidelines", ())):
        try:
            GuidelineParam.from_json(g)
        except ValidationError as exc:
            problems.append(f"$.guidelines[{i}]: {exc}")
    return problems


def load_template_file(path: str | Path) -> DeviceTemplate:
    path = Path(path)
    try:
        return load_template(path.read_bytes(), name=path.stem)
    except TemplateParseError as exc:
        raise TemplateParseError([f"{path.name}: {p}" for p in exc.problems]) from None


def shipped_template_dir() -> Path:
    return Path(str(resources.files("blockiot.data").joinpath("templates")))


# --------------------------------------------------------------------------
# mapping


def extract_identity(template: DeviceTemplate, raw: dict) -> tuple[str, str]:
    ids = template.identifiers
    out = []
    for role, key in (("patient", ids.patient_id_key), ("device", ids.device_id_key)):
        value = raw.get(key) if isinstance(raw, dict) else None
        if value is None or (isinstance(value, str) and not value.strip()):
            raise IdentityError(f"missing {role} identifier {key!r}")
        if not isinstance(value, (str, int)) or isinstance(value, bool):
            raise IdentityError(f"{role} identifier {key!r} must be text")
        out.append(str(value))
    return out[0], out[1]


def _number(key: str, raw: Any) -> float:
    if isinstance(raw, bool):
        raise MappingError(key, f"expected a number, got {raw!r}")
    if isinstance(raw, (int, float)):
        x = float(raw)
    elif isinstance(raw, str):
        try:
            x = float(raw.strip())
        except ValueError:
            raise MappingError(key, f"not a number: {raw!r}") from None
    else:
        raise MappingError(key, f"expected a number, got {type(raw).__name__}")
    if x != x or x in (float("inf"), float("-inf")):
        raise MappingError(key, "non-finite number")
    return x


def classify_value(rule: ParameterRule, raw_value: Any) -> MeasurementValue:
    """Build the measurement variant declared by ``rule.kind``."""
    key = rule.source_key
    kind = rule.kind
    if kind == "scalar":
        return Scalar(_number(key, raw_value), rule.unit or "1")
    if kind == "vector":
        if not isinstance(raw_value, (list, tuple)):
            raise MappingError(key, "expected an array for a vector")
        if len(raw_value) != len(rule.vector_layout):
            raise MappingError(
                key, f"array length {len(raw_value)} != vector_layout length {len(rule.vector_layout)}"
            )
        return Vector(
            tuple(
                VectorComponent(label, _number(f"{key}.{label}", v), rule.unit or "1")
                for label, v in zip(rule.vector_layout, raw_value)
            )
        )
    if kind == "code":
        if not isinstance(raw_value, str):
            raise MappingError(key, f"expected a code symbol, got {raw_value!r}")
        if raw_value not in rule.code_set:
            raise MappingError(key, f"symbol {raw_value!r} not in code set {list(rule.code_set)}")
        return Code(raw_value)
    if kind == "event_state":
        if isinstance(raw_value, bool):
            return EventState(rule.state_name or rule.source_key, raw_value)
        if isinstance(raw_value, str) and raw_value:
            state = raw_value
            active = True
        elif isinstance(raw_value, dict) and isinstance(raw_value.get("state"), str):
            state = raw_value["state"]
            active = raw_value.get("active", True)
            if not isinstance(active, bool):
                raise MappingError(key, "event 'active' must be boolean")
        else:
            raise MappingError(key, f"unrecognized event/state {raw_value!r}")
        if rule.code_set and state not in rule.code_set:
            raise MappingError(key, f"state {state!r} not in code set {list(rule.code_set)}")
        if not rule.code_set and rule.state_name and state != rule.state_name:
            raise MappingError(key, f"state {state!r} is not {rule.state_name!r}")
        return EventState(state, active)
    if kind == "waveform":
        rate = rule.sample_rate_hz
        labels = rule.channel_labels
        samples = raw_value
        if isinstance(raw_value, dict):
            samples = raw_value.get("samples")
            rate = raw_value.get("sample_rate_hz", rate)
            labels = tuple(raw_value.get("channel_labels", labels))
        if not isinstance(samples, (list, tuple)) or not samples:
            raise MappingError(key, "waveform needs a non-empty sample array")
        if rate is None:
            raise MappingError(key, "waveform sample_rate_hz unknown")
        rate = _number(f"{key}.sample_rate_hz", rate)
        if rate <= 0:
            raise MappingError(key, "sample_rate_hz must be > 0")
        if not all(isinstance(lbl, str) for lbl in labels):
            raise MappingError(key, "channel labels must be text")
        return Waveform(rate, tuple(_number(f"{key}[]", s) for s in samples), tuple(labels))
    if kind == "string":
        if not isinstance(raw_value, str):
            raise MappingError(key, f"expected text, got {raw_value!r}")
        return String(raw_value)
    raise MappingError(key, f"unknown kind {kind!r}")


def _normalize(value: MeasurementValue) -> tuple[MeasurementValue, bool]:
    """Returns (value in canonical units, normalized?)."""
    try:
        if isinstance(value, Scalar):
            mag, unit = core.normalize_unit(value.magnitude, value.unit)
            return Scalar(mag, unit), True
        if isinstance(value, Vector):
            comps = []
            for c in value.components:
                mag, unit = core.normalize_unit(c.magnitude, c.unit)
                comps.append(VectorComponent(c.label, mag, unit))
            return Vector(tuple(comps)), True
    except UnsupportedUnitError:
        return value, False
    return value, True


def _device_time(template: DeviceTemplate, raw: dict) -> Optional[datetime]:
    tp = template.device_config.time_properties
    if not tp.timestamp_key or tp.timestamp_key not in raw:
        return None
    value = raw[tp.timestamp_key]
    try:
        if tp.timestamp_format == "epoch_ms":
            dt = core.from_epoch_ms(int(value))
        elif tp.timestamp_format == "epoch_s":
            dt = core.from_epoch_ms(int(round(float(value) * 1000)))
        else:
            dt = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone(timedelta(minutes=tp.utc_offset_minutes)))
        return core.utc(dt)
    except (ValueError, TypeError, OverflowError):
        logger.warning("unparseable device timestamp %r; using receive time", value)
        return None


def effective_time(template: DeviceTemplate, raw: dict, received_at: datetime) -> datetime:
    """Device timestamp when it lies within the skew budget of ``received_at``."""
    received_at = core.utc(received_at)
    device_time = _device_time(template, raw)
    if device_time is None:
        return received_at
    budget = timedelta(milliseconds=template.device_config.time_properties.skew_budget_ms)
    if abs(device_time - received_at) <= budget:
        return device_time
    return received_at


def default_subject(patient_id: str) -> bytes:
    """Placeholder subject for payloads mapped without a registered patient."""
    return hashlib.sha256(b"unregistered|" + patient_id.encode("utf-8")).digest()


def map_payload(
    template: DeviceTemplate,
    raw: dict,
    received_at: datetime,
    subject: Optional[bytes] = None,
) -> MappingResult:
    """Map one proprietary payload to canonical observations.

    Identity problems raise IdentityError. Per-field problems are collected
    in ``result.errors`` and the remaining fields still map.
    """
    if not isinstance(raw, dict):
        raise IdentityError("payload must be a key-value document")
    patient_id, device_id = extract_identity(template, raw)
    device = DeviceIdentity(patient_id, device_id, template.identifiers.nomenclature_code)
    provenance = ContentAddress.of(core.canonical_json(raw))
    when = effective_time(template, raw, received_at)
    if subject is None:
        subject = default_subject(patient_id)

    ids = template.identifiers
    tp = template.device_config.time_properties
    skip = {ids.patient_id_key, ids.device_id_key}
    if tp.timestamp_key:
        skip.add(tp.timestamp_key)
    data_keys = [k for k in raw if k not in skip]

    result = MappingResult(patient_id=patient_id, device_id=device_id)
    claimed: set[str] = set()
    for rule in template.parameter_map:
        if rule.component_keys:
            present = [k for k in rule.component_keys if k in raw]
            if not present:
                if rule.source_key in raw:
                    raw_value, keys = raw[rule.source_key], [rule.source_key]
                else:
                    continue
            elif len(present) != len(rule.component_keys):
                missing = [k for k in rule.component_keys if k not in raw]
                result.errors.append(MappingError(rule.source_key, f"missing vector components {missing}"))
                claimed.update(present)
                continue
            else:
                raw_value, keys = [raw[k] for k in rule.component_keys], list(rule.component_keys)
        elif rule.source_key in raw:
            raw_value, keys = raw[rule.source_key], [rule.source_key]
        else:
            continue
        claimed.update(keys)
        try:
            value = classify_value(rule, raw_value)
        except MappingError as exc:
            result.errors.append(exc)
            continue
        value, normalized = _normalize(value)
        result.observations.append(
            CanonicalObservation(
                subject=subject,
                device=device,
                effective_time=when,
                kind=rule.kind,
                value=value,
                code_binding=rule.target_code,
                provenance=provenance,
                flags=() if normalized else ("unnormalized-unit",),
            )
        )
        result.consumed.extend(keys)
    # keys claimed by a failing rule are reported through result.errors
    result.unmatched = [k for k in data_keys if k not in claimed]
    if result.unmatched:
        logger.debug("unmatched payload keys for %s/%s: %s", patient_id, device_id, result.unmatched)
    return result


# --------------------------------------------------------------------------
# registry


class TemplateRegistry:
    """Templates addressable by file name or (manufacturer, model, firmware major).

    Reads never block on reload; ``reload`` swaps the whole mapping at once.
    """

    def __init__(self, templates: Iterable[DeviceTemplate] = ()):
        self._lock = threading.Lock()
        self._by_name: dict[str, DeviceTemplate] = {}
        self._by_key: dict[tuple[str, str, str], DeviceTemplate] = {}
        self._install(list(templates))

    def _install(self, templates: list[DeviceTemplate]) -> None:
        by_name = {t.name: t for t in templates}
        by_key: dict[tuple[str, str, str], DeviceTemplate] = {}
        for t in templates:
            if t.key in by_key:
                raise TemplateParseError(
                    [f"{t.name}: duplicate template for {t.key} (also {by_key[t.key].name})"]
                )
            by_key[t.key] = t
        with self._lock:
            self._by_name, self._by_key = by_name, by_key

    @classmethod
    def from_dir(cls, directory: str | Path) -> "TemplateRegistry":
        reg = cls()
        reg.reload(directory)
        return reg

    def reload(self, directory: str | Path) -> None:
        paths = sorted(Path(directory).glob("*.json"))
        self._install([load_template_file(p) for p in paths])

    def get(self, name: str) -> DeviceTemplate:
        by_name = self._by_name
        try:
            return by_name[name]
        except KeyError:
            raise KeyError(f"unknown template {name!r}") from None

    def lookup(self, manufacturer: str, model: str, firmware: str) -> DeviceTemplate:
        return self._by_key[(manufacturer, model, firmware_major(firmware))]

    def names(self) -> list[str]:
        return sorted(self._by_name)

    def __iter__(self):
        return iter(list(self._by_name.values()))

    def __len__(self) -> int:
        return len(self._by_name)
