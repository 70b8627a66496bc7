"""Shared domain vocabulary: identities, the six measurement kinds, units.

Everything here is an immutable value. The JSON wire encoding uses the
field names of the dataclasses verbatim; dates are ISO-8601, digests and
content addresses lowercase hex.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import unicodedata
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from functools import lru_cache
from importlib import resources
from typing import Any, Optional, Union

from .errors import UnsupportedUnitError, ValidationError

KINDS = ("scalar", "vector", "code", "event_state", "waveform", "string")

# Two-byte multihash-style tag: sha2-256 (0x12), 32-byte digest (0x20).
SHA256_TAG = "1220"

# Comparison tolerance for decimal magnitudes.
TOLERANCE = 1e-9


def canonical_json(obj: Any) -> bytes:
    """Deterministic JSON bytes: sorted keys, no whitespace, UTF-8."""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# --------------------------------------------------------------------------
# time


def utc(dt: datetime) -> datetime:
    """Coerce to an aware UTC datetime truncated to milliseconds."""
    if dt.tzinfo is None:
        raise ValidationError(f"naive timestamp {dt.isoformat()} (UTC required)")
    dt = dt.astimezone(timezone.utc)
    return dt.replace(microsecond=(dt.microsecond // 1000) * 1000)


def format_time(dt: datetime) -> str:
    dt = utc(dt)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{dt.microsecond // 1000:03d}Z"


def parse_time(text: str) -> datetime:
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except (ValueError, AttributeError) as exc:
        raise ValidationError(f"bad timestamp {text!r}") from exc
    return utc(dt)


def epoch_ms(dt: datetime) -> int:
    return int(round(utc(dt).timestamp() * 1000))


def from_epoch_ms(ms: int) -> datetime:
    return datetime(1970, 1, 1, tzinfo=timezone.utc) + timedelta(milliseconds=ms)


# --------------------------------------------------------------------------
# addresses


@dataclass(frozen=True, order=True)
class ContentAddress:
    """Algorithm tag plus SHA-256 digest; ``str()`` gives the hex form."""

    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != 32:
            raise ValidationError("content address digest must be 32 bytes")

    @classmethod
    def of(cls, content: bytes) -> "ContentAddress":
        return cls(hashlib.sha256(content).digest())

    @classmethod
    def parse(cls, text: str) -> "ContentAddress":
        if not isinstance(text, str) or len(text) != 68 or not text.startswith(SHA256_TAG):
            raise ValidationError(f"malformed content address {text!r}")
        if text != text.lower():
            raise ValidationError(f"content address must be lowercase hex: {text!r}")
        try:
            return cls(bytes.fromhex(text[4:]))
        except ValueError as exc:
            raise ValidationError(f"malformed content address {text!r}") from exc

    def __str__(self) -> str:
        return SHA256_TAG + self.digest.hex()

    @property
    def hex(self) -> str:
        return self.digest.hex()


# --------------------------------------------------------------------------
# identities


def _norm_name(text: str) -> str:
    return unicodedata.normalize("NFC", text).strip().casefold()


def biometric_string(first: str, last: str, dob: date) -> str:
    """The canonical ``first|last|YYYY-MM-DD`` string the patient key hashes."""
    if not isinstance(first, str) or not isinstance(last, str):
        raise ValidationError("names must be text")
    f, l = _norm_name(first), _norm_name(last)
    if not f or not l:
        raise ValidationError("first and last name must be non-empty")
    if isinstance(dob, datetime) or not isinstance(dob, date):
        raise ValidationError(f"invalid date of birth {dob!r}")
    if dob > date.today():
        raise ValidationError(f"date of birth {dob.isoformat()} is in the future")
    return f"{f}|{l}|{dob.isoformat()}"


def patient_key(first: str, last: str, dob: date) -> bytes:
    """SHA-256 of the normalized biometric triple (32 bytes).

    >>> patient_key("ADA ", " lovelace", date(1815, 12, 10)) == patient_key("Ada", "Lovelace", date(1815, 12, 10))
    True
    """
    return hashlib.sha256(biometric_string(first, last, dob).encode("utf-8")).digest()


@dataclass(frozen=True)
class PatientIdentity:
    first_name: str
    last_name: str
    date_of_birth: date

    def __post_init__(self) -> None:
        biometric_string(self.first_name, self.last_name, self.date_of_birth)

    @property
    def patient_key(self) -> bytes:
        return patient_key(self.first_name, self.last_name, self.date_of_birth)

    def to_json(self) -> dict:
        return {
            "first_name": self.first_name,
            "last_name": self.last_name,
            "date_of_birth": self.date_of_birth.isoformat(),
            "patient_key": self.patient_key.hex(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PatientIdentity":
        try:
            dob = date.fromisoformat(doc["date_of_birth"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"invalid date_of_birth in {doc!r}") from exc
        ident = cls(doc.get("first_name", ""), doc.get("last_name", ""), dob)
        if "patient_key" in doc and doc["patient_key"] != ident.patient_key.hex():
            raise ValidationError("patient_key does not match biometrics")
        return ident


@dataclass(frozen=True)
class DeviceIdentity:
    patient_id: str
    device_id: str
    nomenclature_code: int = 0

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "device_id": self.device_id,
            "nomenclature_code": self.nomenclature_code,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DeviceIdentity":
        return cls(doc["patient_id"], doc["device_id"], int(doc.get("nomenclature_code", 0)))


# --------------------------------------------------------------------------
# measurement values


@dataclass(frozen=True)
class Scalar:
    magnitude: float
    unit: str
    kind = "scalar"


@dataclass(frozen=True)
class VectorComponent:
    label: str
    magnitude: float
    unit: str


@dataclass(frozen=True)
class Vector:
    components: tuple[VectorComponent, ...]
    kind = "vector"


@dataclass(frozen=True)
class Code:
    symbol: str
    kind = "code"


@dataclass(frozen=True)
class EventState:
    state_name: str
    active: bool = True
    kind = "event_state"


@dataclass(frozen=True)
class Waveform:
    sample_rate_hz: float
    samples: tuple[float, ...]
    channel_labels: tuple[str, ...] = ()
    kind = "waveform"


@dataclass(frozen=True)
class String:
    text: str
    kind = "string"


MeasurementValue = Union[Scalar, Vector, Code, EventState, Waveform, String]

_VALUE_TYPES = {cls.kind: cls for cls in (Scalar, Vector, Code, EventState, Waveform, String)}


def value_to_json(value: MeasurementValue) -> dict:
    if isinstance(value, Scalar):
        return {"magnitude": value.magnitude, "unit": value.unit}
    if isinstance(value, Vector):
        return {
            "components": [
                {"label": c.label, "magnitude": c.magnitude, "unit": c.unit}
                for c in value.components
            ]
        }
    if isinstance(value, Code):
        return {"symbol": value.symbol}
    if isinstance(value, EventState):
        return {"state_name": value.state_name, "active": value.active}
    if isinstance(value, Waveform):
        return {
            "sample_rate_hz": value.sample_rate_hz,
            "channel_labels": list(value.channel_labels),
            "samples": list(value.samples),
        }
    if isinstance(value, String):
        return {"text": value.text}
    raise TypeError(f"not a measurement value: {value!r}")


def value_from_json(kind: str, doc: dict) -> MeasurementValue:
    try:
        if kind == "scalar":
            return Scalar(float(doc["magnitude"]), doc["unit"])
        if kind == "vector":
            return Vector(
                tuple(
                    VectorComponent(c["label"], float(c["magnitude"]), c["unit"])
                    for c in doc["components"]
                )
            )
        if kind == "code":
            return Code(doc["symbol"])
        if kind == "event_state":
            return EventState(doc["state_name"], bool(doc["active"]))
        if kind == "waveform":
            return Waveform(
                float(doc["sample_rate_hz"]),
                tuple(float(s) for s in doc["samples"]),
                tuple(doc.get("channel_labels", ())),
            )
        if kind == "string":
            return String(doc["text"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed {kind} value: {doc!r}") from exc
    raise ValidationError(f"unknown kind {kind!r}")


# --------------------------------------------------------------------------
# canonical observation


@dataclass(frozen=True)
class CanonicalObservation:
    subject: bytes
    device: DeviceIdentity
    effective_time: datetime
    kind: str
    value: MeasurementValue
    code_binding: str
    provenance: ContentAddress
    flags: tuple[str, ...] = field(default=())

    def to_json(self) -> dict:
        return {
            "subject": self.subject.hex(),
            "device": self.device.to_json(),
            "effective_time": format_time(self.effective_time),
            "kind": self.kind,
            "value": value_to_json(self.value),
            "code_binding": self.code_binding,
            "provenance": str(self.provenance),
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CanonicalObservation":
        try:
            return cls(
                subject=bytes.fromhex(doc["subject"]),
                device=DeviceIdentity.from_json(doc["device"]),
                effective_time=parse_time(doc["effective_time"]),
                kind=doc["kind"],
                value=value_from_json(doc["kind"], doc["value"]),
                code_binding=doc["code_binding"],
                provenance=ContentAddress.parse(doc["provenance"]),
                flags=tuple(doc.get("flags", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed observation: {exc}") from exc

    def encode(self) -> bytes:
        return canonical_json(self.to_json())


# --------------------------------------------------------------------------
# units

# Token-level UCUM syntax: bracketed atoms, annotations, prefixes, exponents.
_UCUM_COMPONENT = r"(?:(?:\[[^\[\]{}\s]+\]|[A-Za-z%']+(?:\[[^\[\]{}\s]+\])?)[+-]?\d*(?:\{[^{}\s]*\})?|\{[^{}\s]*\}|\d+(?:\{[^{}\s]*\})?)"
_UCUM_RE = re.compile(rf"^/?{_UCUM_COMPONENT}(?:[./]{_UCUM_COMPONENT})*$")


def is_valid_ucum(unit: str) -> bool:
    return isinstance(unit, str) and bool(_UCUM_RE.match(unit))


@lru_cache(maxsize=1)
def unit_table() -> dict:
    return json.loads(resources.files("blockiot.data").joinpath("units.json").read_text())


def canonical_unit(unit: str) -> str:
    table = unit_table()
    try:
        entry = table["units"][unit]
    except KeyError:
        raise UnsupportedUnitError(unit) from None
    return table["canonical"].get(entry["dimension"], unit)


def normalize_unit(magnitude: float, unit: str) -> tuple[float, str]:
    """Express ``magnitude`` in the canonical unit of its dimension.

    Raises UnsupportedUnitError for codes missing from the conversion table.
    """
    table = unit_table()
    entry = table["units"].get(unit)
    if entry is None:
        raise UnsupportedUnitError(unit)
    target = table["canonical"].get(entry["dimension"], unit)
    if target == unit:
        return float(magnitude), unit
    value = float(magnitude) * entry["factor"] + entry.get("offset", 0.0)
    return value, target


# --------------------------------------------------------------------------
# validation


def validate_observation(obs: CanonicalObservation) -> list[str]:
    """Every invariant violation of ``obs``; an empty list means ok."""
    problems: list[str] = []
    if not isinstance(obs.subject, bytes) or len(obs.subject) != 32:
        problems.append("subject must be a 32-byte patient key")
    if not obs.device.patient_id:
        problems.append("device.patient_id non-empty")
    if not obs.device.device_id:
        problems.append("device.device_id non-empty")
    if obs.effective_time.tzinfo is None or obs.effective_time.utcoffset() != timedelta(0):
        problems.append("effective_time must be UTC")
    if obs.kind not in KINDS:
        problems.append(f"unknown kind {obs.kind!r}")
    expected = _VALUE_TYPES.get(obs.kind)
    if expected is not None and not isinstance(obs.value, expected):
        problems.append("kind/value mismatch")
    if not obs.code_binding:
        problems.append("code_binding non-empty")
    value = obs.value
    if isinstance(value, Scalar):
        problems += _check_magnitude("magnitude", value.magnitude)
        if not is_valid_ucum(value.unit):
            problems.append(f"invalid UCUM unit {value.unit!r}")
    elif isinstance(value, Vector):
        if len(value.components) < 2:
            problems.append("vector length >= 2")
        for comp in value.components:
            problems += _check_magnitude(comp.label, comp.magnitude)
            if not is_valid_ucum(comp.unit):
                problems.append(f"invalid UCUM unit {comp.unit!r}")
    elif isinstance(value, Waveform):
        if not value.sample_rate_hz > 0:
            problems.append("sample_rate_hz > 0")
        if len(value.samples) < 1:
            problems.append("waveform sample count >= 1")
        for s in value.samples:
            problems += _check_magnitude("sample", s)
    elif isinstance(value, Code):
        if not value.symbol:
            problems.append("code symbol non-empty")
    elif isinstance(value, EventState):
        if not value.state_name:
            problems.append("state_name non-empty")
    return problems


def _check_magnitude(label: str, x: float) -> list[str]:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        return [f"{label} must be a finite decimal"]
    return []


# --------------------------------------------------------------------------
# principals

ROLES = ("device", "provider", "patient", "gateway")


@dataclass(frozen=True)
class Principal:
    """An authenticated sender or reader.

    Devices carry the manufacturer ids they are registered under; patients
    carry their own key; providers are identified by ``id`` alone.
    """

    id: str
    role: str
    patient_key: Optional[bytes] = None
    patient_id: str = ""
    device_id: str = ""
