"""FHIR R4 mapping (Patient, Device, Observation, Bundle) and read-only search.

Only JSON is produced. Resource ids are derived from content digests so
re-exports are idempotent.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Iterable, Mapping, Optional, Sequence
from urllib.parse import urlencode

from .core import (
    CanonicalObservation,
    Code,
    ContentAddress,
    DeviceIdentity,
    EventState,
    PatientIdentity,
    Principal,
    Scalar,
    String,
    Vector,
    VectorComponent,
    Waveform,
    format_time,
    parse_time,
)
from .errors import AuthorizationError, BlockIoTError, ValidationError

logger = logging.getLogger(__name__)

UCUM = "http://unitsofmeasure.org"
EXT = "urn:blockiot:fhir:StructureDefinition/"
EXT_ACTIVE = EXT + "event-active"
EXT_RATE = EXT + "sample-rate-hz"
EXT_CHANNEL = EXT + "channel-label"
EXT_DEVICE_PATIENT = EXT + "device-patient-id"
EXT_NOMENCLATURE = EXT + "ieee-11073-nomenclature-code"
EXT_FLAG = EXT + "observation-flag"
SYS_TERMINOLOGY = "urn:blockiot:terminology"
SYS_COMPONENT = "urn:blockiot:vector-component"
SYS_CODE = "urn:blockiot:code"
SYS_EVENT = "urn:blockiot:event-state"
SYS_DEVICE_ID = "urn:blockiot:device-id"
SYS_PATIENT_KEY = "urn:blockiot:patient-key"
SYS_MANUFACTURER_PATIENT = "urn:blockiot:manufacturer-patient-id"
SOURCE_PREFIX = "urn:blockiot:cas:"
CATEGORY = "http://terminology.hl7.org/CodeSystem/observation-category"

OBSERVATION_PARAMS = {"patient", "code", "date", "_count", "_offset"}
DEVICE_PARAMS = {"patient", "_count", "_offset"}
PATIENT_PARAMS = {"identifier", "_count", "_offset"}


class SearchError(BlockIoTError):
    def __init__(self, message: str, parameter: str = ""):
        super().__init__(message)
        self.parameter = parameter


# --------------------------------------------------------------------------
# ids


def observation_id(obs: CanonicalObservation) -> str:
    return ContentAddress.of(obs.encode()).hex


def device_resource_id(manufacturer: str, model: str, serial: str, identity: DeviceIdentity) -> str:
    text = "|".join([manufacturer, model, serial, identity.patient_id, identity.device_id])
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _coding(binding: str, default_system: str) -> dict:
    system, sep, code = binding.rpartition("|")
    if not sep:
        system, code = default_system, binding
    return {"system": system, "code": code}


def _binding(coding: dict, default_system: str) -> str:
    if coding.get("system", default_system) == default_system:
        return coding["code"]
    return f"{coding['system']}|{coding['code']}"


def _quantity(magnitude: float, unit: str) -> dict:
    return {"value": magnitude, "unit": unit, "system": UCUM, "code": unit}


# --------------------------------------------------------------------------
# Observation


def to_fhir_observation(obs: CanonicalObservation) -> dict:
    """Map a canonical observation to an R4 Observation resource."""
    res: dict = {
        "resourceType": "Observation",
        "id": observation_id(obs),
        "meta": {"source": SOURCE_PREFIX + str(obs.provenance)},
        "status": "final",
        "code": {"coding": [_coding(obs.code_binding, SYS_TERMINOLOGY)], "text": obs.code_binding},
        "subject": {"reference": f"Patient/{obs.subject.hex()}"},
        "effectiveDateTime": format_time(obs.effective_time),
        "device": {
            "reference": f"Device/{obs.device.device_id}",
            "identifier": {"system": SYS_DEVICE_ID, "value": obs.device.device_id},
        },
        "extension": [
            {"url": EXT_DEVICE_PATIENT, "valueString": obs.device.patient_id},
            {"url": EXT_NOMENCLATURE, "valueInteger": obs.device.nomenclature_code},
        ]
        + [{"url": EXT_FLAG, "valueString": f} for f in obs.flags],
    }
    if obs.kind in ("scalar", "vector"):
        res["category"] = [{"coding": [{"system": CATEGORY, "code": "vital-signs"}]}]
    value = obs.value
    if isinstance(value, Scalar):
        res["valueQuantity"] = _quantity(value.magnitude, value.unit)
    elif isinstance(value, Vector):
        res["component"] = [
            {
                "code": {"coding": [{"system": SYS_COMPONENT, "code": c.label}], "text": c.label},
                "valueQuantity": _quantity(c.magnitude, c.unit),
            }
            for c in value.components
        ]
    elif isinstance(value, Code):
        res["valueCodeableConcept"] = {"coding": [{"system": SYS_CODE, "code": value.symbol}], "text": value.symbol}
    elif isinstance(value, EventState):
        res["valueCodeableConcept"] = {
            "extension": [{"url": EXT_ACTIVE, "valueBoolean": value.active}],
            "coding": [{"system": SYS_EVENT, "code": value.state_name}],
            "text": value.state_name,
        }
    elif isinstance(value, Waveform):
        res["valueSampledData"] = {
            "extension": [{"url": EXT_RATE, "valueDecimal": value.sample_rate_hz}]
            + [{"url": EXT_CHANNEL, "valueString": lbl} for lbl in value.channel_labels],
            "origin": {"value": 0},
            "period": 1000.0 / value.sample_rate_hz,
            "dimensions": 1,
            "data": " ".join(repr(float(s)) for s in value.samples),
        }
    elif isinstance(value, String):
        res["valueString"] = value.text
    if "unnormalized-unit" in obs.flags:
        res["note"] = [{"text": "unit could not be normalized; value carries the device unit"}]
    return res


def _ext(element: dict, url: str) -> list:
    return [e for e in element.get("extension", ()) if e.get("url") == url]


def from_fhir_observation(res: dict) -> CanonicalObservation:
    """Parse an Observation produced by :func:`to_fhir_observation`."""
    problems = check_observation(res)
    if problems:
        raise ValidationError("; ".join(problems))
    subject = bytes.fromhex(res["subject"]["reference"].split("/", 1)[1])
    patient_ext = _ext(res, EXT_DEVICE_PATIENT)
    code_ext = _ext(res, EXT_NOMENCLATURE)
    device = DeviceIdentity(
        patient_ext[0]["valueString"] if patient_ext else "",
        res["device"]["identifier"]["value"],
        code_ext[0]["valueInteger"] if code_ext else 0,
    )
    if "valueQuantity" in res:
        q = res["valueQuantity"]
        kind, value = "scalar", Scalar(float(q["value"]), q["code"])
    elif "component" in res:
        kind = "vector"
        value = Vector(
            tuple(
                VectorComponent(c["code"]["coding"][0]["code"], float(c["valueQuantity"]["value"]), c["valueQuantity"]["code"])
                for c in res["component"]
            )
        )
    elif "valueSampledData" in res:
        sd = res["valueSampledData"]
        rate_ext = _ext(sd, EXT_RATE)
        rate = float(rate_ext[0]["valueDecimal"]) if rate_ext else 1000.0 / float(sd["period"])
        kind = "waveform"
        value = Waveform(
            rate,
            tuple(float(x) for x in sd["data"].split()),
            tuple(e["valueString"] for e in _ext(sd, EXT_CHANNEL)),
        )
    elif "valueCodeableConcept" in res:
        cc = res["valueCodeableConcept"]
        active = _ext(cc, EXT_ACTIVE)
        symbol = cc["coding"][0]["code"]
        if active:
            kind, value = "event_state", EventState(symbol, bool(active[0]["valueBoolean"]))
        else:
            kind, value = "code", Code(symbol)
    elif "valueString" in res:
        kind, value = "string", String(res["valueString"])
    else:  # unreachable after check_observation
        raise ValidationError("no value element")
    source = res.get("meta", {}).get("source", "")
    if not source.startswith(SOURCE_PREFIX):
        raise ValidationError("meta.source does not carry a provenance address")
    return CanonicalObservation(
        subject=subject,
        device=device,
        effective_time=parse_time(res["effectiveDateTime"]),
        kind=kind,
        value=value,
        code_binding=_binding(res["code"]["coding"][0], SYS_TERMINOLOGY),
        provenance=ContentAddress.parse(source[len(SOURCE_PREFIX):]),
        flags=tuple(e["valueString"] for e in _ext(res, EXT_FLAG)),
    )


VALUE_ELEMENTS = ("valueQuantity", "valueCodeableConcept", "valueSampledData", "valueString")


def check_observation(res: dict) -> list[str]:
    """Structural check: status, code, subject, effective time and a value."""
    problems = []
    if res.get("resourceType") != "Observation":
        problems.append("resourceType must be Observation")
    if res.get("status") not in ("registered", "preliminary", "final", "amended"):
        problems.append("status missing or invalid")
    code = res.get("code")
    if not isinstance(code, dict) or not code.get("coding") or not code["coding"][0].get("code"):
        problems.append("code.coding missing")
    ref = (res.get("subject") or {}).get("reference", "")
    if not re.fullmatch(r"Patient/[0-9a-f]{64}", ref):
        problems.append("subject reference missing")
    eff = res.get("effectiveDateTime")
    try:
        parse_time(eff)
    except (ValidationError, TypeError):
        problems.append("effectiveDateTime missing or invalid")
    values = [k for k in VALUE_ELEMENTS if k in res]
    has_components = bool(res.get("component"))
    if len(values) + has_components != 1:
        problems.append("exactly one value element (or component list) required")
    if has_components and not all("valueQuantity" in c and c.get("code") for c in res["component"]):
        problems.append("every component needs a code and valueQuantity")
    if "valueQuantity" in res and not isinstance(res["valueQuantity"].get("value"), (int, float)):
        problems.append("valueQuantity.value must be a number")
    if "device" in res and not (res["device"].get("identifier") or {}).get("value"):
        problems.append("device identifier missing")
    return problems


# --------------------------------------------------------------------------
# Device and Patient


def to_fhir_device(template, identity: DeviceIdentity) -> dict:
    cfg = template.device_config
    serial = cfg.serial_number
    res: dict = {
        "resourceType": "Device",
        "id": device_resource_id(cfg.manufacturer, cfg.model, serial, identity),
        "identifier": [{"system": SYS_DEVICE_ID, "value": identity.device_id}],
        "status": "active",
        "manufacturer": cfg.manufacturer,
        "serialNumber": serial,
        "deviceName": [{"name": cfg.model, "type": "model-name"}],
        "modelNumber": cfg.model,
        "type": {
            "coding": [{"system": "urn:iso:std:iso:11073:10101", "code": str(identity.nomenclature_code)}],
            "text": cfg.specialization,
        },
        "specialization": [{"systemType": {"text": cfg.specialization}}],
        "version": [
            {"type": {"text": "firmware"}, "value": cfg.firmware},
            {"type": {"text": "hardware"}, "value": cfg.hardware},
            {"type": {"text": "software"}, "value": cfg.software},
        ],
        "property": [
            {
                "type": {"text": "time-properties"},
                "valueCode": [
                    {"text": f"clock_type={cfg.time_properties.clock_type}"},
                    {"text": f"synchronization={cfg.time_properties.synchronization}"},
                    {"text": f"resolution_ms={cfg.time_properties.resolution_ms}"},
                    {"text": f"accuracy_ms={cfg.time_properties.accuracy_ms}"},
                ],
            }
        ],
    }
    if cfg.regulatory:
        res["note"] = [{"text": f"regulatory: {cfg.regulatory}"}]
    return res


def to_fhir_patient(identity: PatientIdentity, manufacturer_ids: Iterable[str] = ()) -> dict:
    key = identity.patient_key.hex()
    return {
        "resourceType": "Patient",
        "id": key,
        "identifier": [{"system": SYS_PATIENT_KEY, "value": key}]
        + [{"system": SYS_MANUFACTURER_PATIENT, "value": pid} for pid in sorted(manufacturer_ids)],
        "name": [{"family": identity.last_name.strip(), "given": [identity.first_name.strip()]}],
        "birthDate": identity.date_of_birth.isoformat(),
    }


def capability_statement() -> dict:
    return {
        "resourceType": "CapabilityStatement",
        "status": "active",
        "date": "2021-01-01",
        "kind": "instance",
        "fhirVersion": "4.0.1",
        "format": ["json"],
        "rest": [
            {
                "mode": "server",
                "resource": [
                    {
                        "type": "Observation",
                        "interaction": [{"code": "search-type"}],
                        "searchParam": [
                            {"name": "patient", "type": "reference"},
                            {"name": "code", "type": "token"},
                            {"name": "date", "type": "date"},
                            {"name": "_count", "type": "number"},
                        ],
                    },
                    {
                        "type": "Device",
                        "interaction": [{"code": "search-type"}],
                        "searchParam": [{"name": "patient", "type": "reference"}],
                    },
                    {
                        "type": "Patient",
                        "interaction": [{"code": "search-type"}],
                        "searchParam": [{"name": "identifier", "type": "token"}],
                    },
                ],
            }
        ],
    }


# --------------------------------------------------------------------------
# search


@dataclass(frozen=True)
class DateBound:
    prefix: str
    start: datetime
    end: datetime  # exclusive

    def matches(self, t: datetime) -> bool:
        p = self.prefix
        if p == "eq":
            return self.start <= t < self.end
        if p == "ne":
            return not (self.start <= t < self.end)
        if p == "ge":
            return t >= self.start
        if p == "gt":
            return t >= self.end
        if p == "le":
            return t < self.end
        if p == "lt":
            return t < self.start
        raise AssertionError(p)


def parse_date_param(value: str) -> DateBound:
    m = re.fullmatch(r"(eq|ne|ge|gt|le|lt)?(.+)", value)
    prefix = m.group(1) or "eq"
    text = m.group(2)
    try:
        if re.fullmatch(r"\d{4}", text):
            start = datetime(int(text), 1, 1, tzinfo=timezone.utc)
            end = datetime(int(text) + 1, 1, 1, tzinfo=timezone.utc)
        elif re.fullmatch(r"\d{4}-\d{2}", text):
            y, mo = map(int, text.split("-"))
            start = datetime(y, mo, 1, tzinfo=timezone.utc)
            end = datetime(y + (mo == 12), mo % 12 + 1, 1, tzinfo=timezone.utc)
        elif re.fullmatch(r"\d{4}-\d{2}-\d{2}", text):
            start = datetime.fromisoformat(text).replace(tzinfo=timezone.utc)
            end = start + timedelta(days=1)
        else:
            start = parse_time(text)
            end = start + timedelta(milliseconds=1)
    except (ValueError, ValidationError) as exc:
        raise SearchError(f"invalid date value {value!r}", "date") from exc
    return DateBound(prefix, start, end)


def _param_pairs(params) -> list[tuple[str, str]]:
    if isinstance(params, Mapping):
        pairs = []
        for k, v in params.items():
            if isinstance(v, (list, tuple)):
                pairs.extend((k, str(x)) for x in v)
            else:
                pairs.append((k, str(v)))
        return pairs
    return [(k, str(v)) for k, v in params]


class FhirService:
    """Read API over the ledger's replay state and the content store.

    ``directory`` supplies the patient/device registrations: it must provide
    ``patient_identities()`` -> {patient_key_hex: (PatientIdentity, [manufacturer ids])}
    and ``device_entries()`` -> [(DeviceIdentity, template, patient_key)].
    """

    def __init__(self, state_source, store, directory, access_check, base_url: str = "/fhir"):
        self._state_source = state_source
        self.store = store
        self.directory = directory
        self.access_check = access_check
        self.base_url = base_url.rstrip("/")

    def _state(self):
        return self._state_source()

    def resolve_patient(self, value: str) -> Optional[bytes]:
        value = value.split("/", 1)[1] if value.startswith("Patient/") else value
        patients = self.directory.patient_identities()
        if value in patients:
            return bytes.fromhex(value)
        for key, (_ident, ids) in patients.items():
            if value in ids:
                return bytes.fromhex(key)
        if re.fullmatch(r"[0-9a-f]{64}", value):
            return bytes.fromhex(value)
        return None

    def _authorize(self, principal: Principal, state, patient_key: bytes) -> None:
        if not self.access_check(state, principal, patient_key, "read"):
            raise AuthorizationError("access denied")

    def search(self, resource_type: str, params, principal: Principal) -> dict:
        pairs = _param_pairs(params)
        allowed = {"Observation": OBSERVATION_PARAMS, "Device": DEVICE_PARAMS, "Patient": PATIENT_PARAMS}.get(resource_type)
        if allowed is None:
            raise SearchError(f"unsupported resource type {resource_type!r}", "resourceType")
        for k, _ in pairs:
            if k not in allowed:
                raise SearchError(f"unsupported search parameter {k!r}", k)
        count = _int_param(pairs, "_count", default=None, minimum=1)
        offset = _int_param(pairs, "_offset", default=0, minimum=0)
        state = self._state()
        if resource_type == "Patient":
            matches = self._patients(pairs, principal, state)
        else:
            patient = self._target_patient(pairs, principal)
            self._authorize(principal, state, patient)
            if resource_type == "Observation":
                matches = self._observations(pairs, patient, state)
            else:
                matches = self._devices(patient)
        return self._bundle(resource_type, pairs, matches, count, offset)

    def _target_patient(self, pairs, principal: Principal) -> bytes:
        values = [v for k, v in pairs if k == "patient"]
        if len(values) > 1:
            raise SearchError("patient may be given once", "patient")
        if not values:
            if principal.role == "patient" and principal.patient_key:
                return principal.patient_key
            raise SearchError("missing required parameter 'patient'", "patient")
        key = self.resolve_patient(values[0])
        if key is None:
            raise SearchError(f"unknown patient {values[0]!r}", "patient")
        return key

    def _observations(self, pairs, patient: bytes, state) -> list[dict]:
        rows = list(state.observations.get(patient.hex(), []))
        bounds = [parse_date_param(v) for k, v in pairs if k == "date"]
        codes = []
        for k, v in pairs:
            if k == "code":
                codes.append({c.strip() for c in v.split(",") if c.strip()})
        out = []
        for t_text, addr, code, _kind in rows:
            t = parse_time(t_text)
            if not all(b.matches(t) for b in bounds):
                continue
            if codes and not all(_code_matches(code, group) for group in codes):
                continue
            obs = CanonicalObservation.from_json(self.store.get_json(ContentAddress.parse(addr)))
            out.append((t, observation_id(obs), to_fhir_observation(obs)))
        out.sort(key=lambda x: (x[0], x[1]))
        # the same observation can arrive via two batches; keep one copy
        seen, unique = set(), []
        for _, rid, res in out:
            if rid not in seen:
                seen.add(rid)
                unique.append(res)
        return unique

    def _devices(self, patient: bytes) -> list[dict]:
        out = {}
        for identity, template, key in self.directory.device_entries():
            if key == patient:
                res = to_fhir_device(template, identity)
                out[res["id"]] = res
        return [out[k] for k in sorted(out)]

    def _patients(self, pairs, principal: Principal, state) -> list[dict]:
        ids = [v for k, v in pairs if k == "identifier"]
        if not ids:
            raise SearchError("missing required parameter 'identifier'", "identifier")
        out = []
        patients = self.directory.patient_identities()
        for value in ids:
            token = value.rpartition("|")[2]
            key = self.resolve_patient(token)
            if key is None or key.hex() not in patients:
                continue
            self._authorize(principal, state, key)
            ident, manufacturer_ids = patients[key.hex()]
            out.append(to_fhir_patient(ident, manufacturer_ids))
        uniq = {r["id"]: r for r in out}
        return [uniq[k] for k in sorted(uniq)]

    def _bundle(self, resource_type, pairs, matches, count, offset) -> dict:
        total = len(matches)
        page = matches[offset : offset + count] if count else matches[offset:]
        base_pairs = [(k, v) for k, v in pairs if k != "_offset"]
        links = [{"relation": "self", "url": self._url(resource_type, base_pairs, offset)}]
        if count and offset + count < total:
            links.append({"relation": "next", "url": self._url(resource_type, base_pairs, offset + count)})
        if count and offset > 0:
            links.append({"relation": "previous", "url": self._url(resource_type, base_pairs, max(offset - count, 0))})
        return {
            "resourceType": "Bundle",
            "type": "searchset",
            "total": total,
            "link": links,
            "entry": [
                {"fullUrl": f"{self.base_url}/{r['resourceType']}/{r['id']}", "resource": r, "search": {"mode": "match"}}
                for r in page
            ],
        }

    def _url(self, resource_type, pairs, offset) -> str:
        q = list(pairs) + ([("_offset", str(offset))] if offset else [])
        return f"{self.base_url}/{resource_type}" + (f"?{urlencode(q)}" if q else "")


def _code_matches(code_binding: str, tokens: set[str]) -> bool:
    for tok in tokens:
        if tok == code_binding:
            return True
        system, sep, code = tok.rpartition("|")
        if sep:
            bound = _coding(code_binding, SYS_TERMINOLOGY)
            if bound["code"] == code and (not system or bound["system"] == system):
                return True
    return False


def _int_param(pairs, name, default, minimum):
    values = [v for k, v in pairs if k == name]
    if not values:
        return default
    try:
        n = int(values[-1])
    except ValueError:
        raise SearchError(f"{name} must be an integer", name) from None
    if n < minimum:
        raise SearchError(f"{name} must be >= {minimum}", name)
    return n


def parse_query(query: str) -> list[tuple[str, str]]:
    from urllib.parse import parse_qsl

    return parse_qsl(query, keep_blank_values=True)


def follow_pages(search, resource_type: str, params, principal: Principal) -> list[dict]:
    """Collect every entry by following ``next`` links from the first page."""
    from urllib.parse import urlsplit

    resources = []
    bundle = search(resource_type, params, principal)
    while True:
        resources.extend(e["resource"] for e in bundle["entry"])
        nxt = [l["url"] for l in bundle["link"] if l["relation"] == "next"]
        if not nxt:
            return resources
        bundle = search(resource_type, parse_query(urlsplit(nxt[0]).query), principal)
