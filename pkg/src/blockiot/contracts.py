"""Rule contracts evaluated during block application.

Contracts are declarative parameter sets (:class:`ContractSpec`) read by a
fixed engine. Evaluations are pure functions of (observations, spec).
"""

from __future__ import annotations

import bisect
import json
import logging
import math
import queue
import threading
import urllib.request
from dataclasses import dataclass, field, replace
from datetime import datetime, time, timedelta, timezone
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from . import core
from .core import (
    CanonicalObservation,
    ContentAddress,
    EventState,
    PatientIdentity,
    Principal,
    Scalar,
    Vector,
    canonical_json,
    format_time,
    parse_time,
)
from .errors import ConfigError, UnsupportedUnitError, ValidationError
from .ledger import ContractHooks, LedgerState, TransferTransaction, alert_dedup_key
from .templates import GuidelineParam

logger = logging.getLogger(__name__)

CONTRACT_KINDS = ("access_control", "drug_compliance", "adverse_condition", "emergency_alert", "summarization")
SEVERITIES = ("notify", "alert", "emergency")
_SEVERITY_RANK = {"none": 0, "notify": 1, "alert": 2, "emergency": 3}

DEFAULT_COMPLIANCE_THRESHOLD = Fraction(4, 5)


@dataclass(frozen=True)
class ContractSpec:
    contract_kind: str
    patient_key: bytes
    guidelines: tuple[GuidelineParam, ...] = ()
    # drug_compliance
    dose_times: tuple[time, ...] = ()
    tolerance_minutes: int = 60
    compliance_threshold: Fraction = DEFAULT_COMPLIANCE_THRESHOLD
    opening_states: tuple[str, ...] = ("bottle_opened",)
    # adverse_condition
    min_bpm: Optional[float] = None
    max_bpm: Optional[float] = None
    irregularity_flag: bool = False
    heart_codes: tuple[str, ...] = ("heart-rate",)
    # emergency_alert
    fall_states: tuple[str, ...] = ("fall_detected",)
    escalation_contacts: tuple[str, ...] = ()
    # summarization
    window_days: int = 7
    series: tuple[str, ...] = ()
    statistics: tuple[str, ...] = ("count", "min", "max", "mean", "latest")

    def __post_init__(self) -> None:
        if self.contract_kind not in CONTRACT_KINDS:
            raise ConfigError(f"unknown contract kind {self.contract_kind!r}")
        if len(self.patient_key) != 32:
            raise ConfigError("patient_key must be 32 bytes")
        if self.tolerance_minutes < 0:
            raise ConfigError("tolerance_minutes must be >= 0")
        if not 0 <= self.compliance_threshold <= 1:
            raise ConfigError("compliance_threshold must lie in [0, 1]")
        if self.contract_kind == "drug_compliance" and len(set(self.dose_times)) != len(self.dose_times):
            raise ConfigError("duplicate dose times")
        if self.min_bpm is not None and self.max_bpm is not None and not self.min_bpm < self.max_bpm:
            raise ConfigError("min_bpm must be < max_bpm")
        if self.window_days < 1:
            raise ConfigError("window_days must be >= 1")
        unknown = set(self.statistics) - {"count", "min", "max", "mean", "latest"}
        if unknown:
            raise ConfigError(f"unknown statistics {sorted(unknown)}")

    @classmethod
    def from_json(cls, doc: dict, patient_key: Optional[bytes] = None) -> "ContractSpec":
        doc = dict(doc)
        try:
            if patient_key is None:
                if "patient_key" in doc:
                    patient_key = bytes.fromhex(doc["patient_key"])
                elif "patient" in doc:
                    patient_key = PatientIdentity.from_json(doc["patient"]).patient_key
                else:
                    raise ConfigError("contract spec names no patient")
            kwargs = {"contract_kind": doc["contract_kind"], "patient_key": patient_key}
            if "guidelines" in doc:
                kwargs["guidelines"] = tuple(GuidelineParam.from_json(g) for g in doc["guidelines"])
            if "dose_times" in doc:
                kwargs["dose_times"] = tuple(time.fromisoformat(t) for t in doc["dose_times"])
            if "compliance_threshold" in doc:
                kwargs["compliance_threshold"] = Fraction(str(doc["compliance_threshold"]))
            for key in ("tolerance_minutes", "min_bpm", "max_bpm", "irregularity_flag", "window_days"):
                if key in doc:
                    kwargs[key] = doc[key]
            for key in ("opening_states", "heart_codes", "fall_states", "escalation_contacts", "series", "statistics"):
                if key in doc:
                    kwargs[key] = tuple(doc[key])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed contract spec: {exc}") from exc
        return cls(**kwargs)


def load_contract_file(path: str | Path) -> list[ContractSpec]:
    """A contract file holds one patient and a list of specs."""
    doc = json.loads(Path(path).read_text())
    if "patient_key" in doc:
        key = bytes.fromhex(doc["patient_key"])
    else:
        key = PatientIdentity.from_json(doc["patient"]).patient_key
    return [ContractSpec.from_json(spec, patient_key=key) for spec in doc["contracts"]]


def load_contract_dir(directory: str | Path) -> dict[str, list[ContractSpec]]:
    specs: dict[str, list[ContractSpec]] = {}
    for path in sorted(Path(directory).glob("*.json")):
        for spec in load_contract_file(path):
            specs.setdefault(spec.patient_key.hex(), []).append(spec)
    return specs


@dataclass(frozen=True)
class AlertEvent:
    severity: str
    patient_key: bytes
    contract_kind: str
    triggering: tuple[ContentAddress, ...]
    message: str
    emitted_at: datetime
    contacts: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.severity not in SEVERITIES:
            raise ValidationError(f"severity {self.severity!r}")
        if not self.triggering:
            raise ValidationError("alert needs at least one triggering observation")

    def to_json(self) -> dict:
        return {
            "severity": self.severity,
            "patient_key": self.patient_key.hex(),
            "contract_kind": self.contract_kind,
            "triggering": sorted(str(a) for a in self.triggering),
            "message": self.message,
            "emitted_at": format_time(self.emitted_at),
            "contacts": list(self.contacts),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AlertEvent":
        return cls(
            severity=doc["severity"],
            patient_key=bytes.fromhex(doc["patient_key"]),
            contract_kind=doc["contract_kind"],
            triggering=tuple(ContentAddress.parse(a) for a in doc["triggering"]),
            message=doc["message"],
            emitted_at=parse_time(doc["emitted_at"]),
            contacts=tuple(doc.get("contacts", ())),
        )

    @property
    def dedup_key(self) -> str:
        return alert_dedup_key(self.to_json())


# --------------------------------------------------------------------------
# access control


def check_access(state: LedgerState, principal: Principal, patient_key: bytes, action: str) -> bool:
    """Allow iff an unrevoked grant covers ``action``; patients always see their own data."""
    if action not in ("read", "write", "publish"):
        raise ValueError(f"unknown action {action!r}")
    if principal.role == "patient" and principal.patient_key == patient_key:
        return True
    if principal.role == "gateway":
        return action in ("write", "publish")
    return state.has_grant(principal.id, patient_key.hex(), action)


# --------------------------------------------------------------------------
# drug compliance


@dataclass(frozen=True)
class DoseOutcome:
    scheduled: datetime
    taken: bool
    opening: Optional[datetime] = None


@dataclass(frozen=True)
class ComplianceReport:
    patient_key: bytes
    window: tuple[datetime, datetime]
    doses: tuple[DoseOutcome, ...]

    @property
    def scheduled(self) -> int:
        return len(self.doses)

    @property
    def taken(self) -> int:
        return sum(d.taken for d in self.doses)

    @property
    def missed(self) -> int:
        return self.scheduled - self.taken

    @property
    def ratio(self) -> Fraction:
        # vacuous compliance when nothing was scheduled
        return Fraction(self.taken, self.scheduled) if self.scheduled else Fraction(1)

    def daily(self) -> list[tuple[datetime, int, int]]:
        """(day start, taken, missed) per calendar day with a scheduled dose."""
        days: dict[datetime, list[int]] = {}
        for d in self.doses:
            day = d.scheduled.replace(hour=0, minute=0, second=0, microsecond=0)
            counts = days.setdefault(day, [0, 0])
            counts[0 if d.taken else 1] += 1
        return [(day, c[0], c[1]) for day, c in sorted(days.items())]

    def to_json(self) -> dict:
        return {
            "patient_key": self.patient_key.hex(),
            "window": [format_time(self.window[0]), format_time(self.window[1])],
            "scheduled": self.scheduled,
            "taken": self.taken,
            "missed": self.missed,
            "ratio": {"numerator": self.ratio.numerator, "denominator": self.ratio.denominator},
            "doses": [
                {
                    "scheduled": format_time(d.scheduled),
                    "taken": d.taken,
                    "opening": format_time(d.opening) if d.opening else None,
                }
                for d in self.doses
            ],
        }


def scheduled_doses(dose_times: Iterable[time], start: datetime, end: datetime) -> list[datetime]:
    """Every dose time-of-day falling in the half-open window (start, end]."""
    start, end = core.utc(start), core.utc(end)
    doses = []
    day = start.date()
    while day <= end.date():
        for t in dose_times:
            dt = datetime.combine(day, t, tzinfo=timezone.utc)
            if start < dt <= end:
                doses.append(dt)
        day += timedelta(days=1)
    return sorted(doses)


def match_doses(doses: Sequence[datetime], openings: Sequence[datetime], tolerance: timedelta) -> list[Optional[datetime]]:
    """Greedy in schedule order: each dose claims the nearest unclaimed opening
    within ``tolerance`` (inclusive; ties go to the earlier opening)."""
    pool = sorted(openings)
    claimed = [False] * len(pool)
    result: list[Optional[datetime]] = []
    for dose in sorted(doses):
        i = bisect.bisect_left(pool, dose)
        best = None
        # nearest unclaimed on each side
        left = i - 1
        while left >= 0 and claimed[left]:
            left -= 1
        right = i
        while right < len(pool) and claimed[right]:
            right += 1
        for j in (left, right):
            if 0 <= j < len(pool) and abs(pool[j] - dose) <= tolerance:
                if best is None or abs(pool[j] - dose) < abs(pool[best] - dose) or (
                    abs(pool[j] - dose) == abs(pool[best] - dose) and pool[j] < pool[best]
                ):
                    best = j
        if best is None:
            result.append(None)
        else:
            claimed[best] = True
            result.append(pool[best])
    return result


def _openings(observations: Iterable[CanonicalObservation], states: Sequence[str]) -> list[CanonicalObservation]:
    return [
        o for o in observations
        if isinstance(o.value, EventState) and o.value.active and o.value.state_name in states
    ]


def eval_drug_compliance(
    observations: Iterable[CanonicalObservation],
    spec: ContractSpec,
    window: tuple[datetime, datetime],
    emitted_at: Optional[datetime] = None,
    extra_triggering: Sequence[ContentAddress] = (),
) -> tuple[ComplianceReport, Optional[AlertEvent]]:
    if spec.contract_kind != "drug_compliance":
        raise ConfigError(f"expected a drug_compliance spec, got {spec.contract_kind}")
    start, end = window
    opens = [o for o in _openings(observations, spec.opening_states) if start < o.effective_time <= end]
    doses = scheduled_doses(spec.dose_times, start, end)
    matched = match_doses(doses, [o.effective_time for o in opens], timedelta(minutes=spec.tolerance_minutes))
    report = ComplianceReport(
        spec.patient_key,
        (core.utc(start), core.utc(end)),
        tuple(DoseOutcome(d, m is not None, m) for d, m in zip(doses, matched)),
    )
    alert = None
    if report.ratio < spec.compliance_threshold:
        triggering = tuple(sorted({o.provenance for o in opens} | set(extra_triggering)))
        if triggering:
            alert = AlertEvent(
                severity="alert",
                patient_key=spec.patient_key,
                contract_kind="drug_compliance",
                triggering=triggering,
                message=(
                    f"medication compliance {report.taken}/{report.scheduled} "
                    f"below threshold {spec.compliance_threshold}"
                ),
                emitted_at=emitted_at or report.window[1],
                contacts=spec.escalation_contacts,
            )
    return report, alert


# --------------------------------------------------------------------------
# adverse condition and guideline checks


def _limit_in(unit: str, limit: Optional[float]) -> Optional[float]:
    if limit is None:
        return None
    try:
        return core.normalize_unit(limit, unit)[0]
    except UnsupportedUnitError:
        return limit


def _guideline_values(obs: CanonicalObservation, target: str) -> list[float]:
    code, _, label = target.partition("#")
    if obs.code_binding != code:
        return []
    if isinstance(obs.value, Scalar) and not label:
        return [obs.value.magnitude]
    if isinstance(obs.value, Vector) and label:
        return [c.magnitude for c in obs.value.components if c.label == label]
    return []


def guideline_violations(
    observations: Iterable[CanonicalObservation], guidelines: Iterable[GuidelineParam]
) -> list[tuple[CanonicalObservation, GuidelineParam, str]]:
    out = []
    observations = list(observations)
    for g in guidelines:
        if g.action == "none":
            continue
        lo, hi = _limit_in(g.unit, g.lower_limit), _limit_in(g.unit, g.upper_limit)
        for obs in observations:
            for v in _guideline_values(obs, g.target_code):
                if lo is not None and v < lo:
                    out.append((obs, g, f"{g.target_code} {v:g} below lower bound {g.lower_limit:g} {g.unit}"))
                elif hi is not None and v > hi:
                    out.append((obs, g, f"{g.target_code} {v:g} above upper bound {g.upper_limit:g} {g.unit}"))
    return out


def eval_adverse_condition(
    observations: Iterable[CanonicalObservation],
    spec: ContractSpec,
    emitted_at: Optional[datetime] = None,
) -> Optional[AlertEvent]:
    """Heart-rate bounds, irregular-rhythm events and guideline limits."""
    observations = sorted(observations, key=lambda o: (o.effective_time, str(o.provenance)))
    reasons: list[str] = []
    triggers: set[ContentAddress] = set()
    severity = "none"
    for obs in observations:
        if obs.code_binding in spec.heart_codes and isinstance(obs.value, Scalar):
            bpm = obs.value.magnitude
            if spec.max_bpm is not None and bpm > spec.max_bpm:
                reasons.append(f"upper bound exceeded: {bpm:g} bpm > {spec.max_bpm:g}")
            elif spec.min_bpm is not None and bpm < spec.min_bpm:
                reasons.append(f"lower bound exceeded: {bpm:g} bpm < {spec.min_bpm:g}")
            else:
                continue
            triggers.add(obs.provenance)
            severity = max(severity, "alert", key=_SEVERITY_RANK.get)
        elif (
            spec.irregularity_flag
            and isinstance(obs.value, EventState)
            and obs.value.state_name == "pulse_irregular"
            and obs.value.active
        ):
            reasons.append("irregular pulse reported")
            triggers.add(obs.provenance)
            severity = max(severity, "alert", key=_SEVERITY_RANK.get)
    for obs, g, reason in guideline_violations(observations, spec.guidelines):
        reasons.append(reason)
        triggers.add(obs.provenance)
        severity = max(severity, g.action, key=_SEVERITY_RANK.get)
    if severity == "none":
        return None
    return AlertEvent(
        severity=severity,
        patient_key=spec.patient_key,
        contract_kind="adverse_condition",
        triggering=tuple(sorted(triggers)),
        message="; ".join(dict.fromkeys(reasons)),
        emitted_at=emitted_at or observations[-1].effective_time,
        contacts=spec.escalation_contacts,
    )


# --------------------------------------------------------------------------
# emergency


def eval_emergency(
    fall_events: Iterable[CanonicalObservation],
    spec: ContractSpec,
    emitted_at: Optional[datetime] = None,
    already_seen: Iterable[ContentAddress] = (),
) -> list[AlertEvent]:
    """One emergency event per distinct active fall observation."""
    seen = set(already_seen)
    events = []
    for obs in sorted(fall_events, key=lambda o: (o.effective_time, str(o.provenance))):
        if not (isinstance(obs.value, EventState) and obs.value.active and obs.value.state_name in spec.fall_states):
            continue
        if obs.provenance in seen:
            continue
        seen.add(obs.provenance)
        events.append(
            AlertEvent(
                severity="emergency",
                patient_key=spec.patient_key,
                contract_kind="emergency_alert",
                triggering=(obs.provenance,),
                message=f"{obs.value.state_name} reported by device {obs.device.device_id} at {format_time(obs.effective_time)}",
                emitted_at=emitted_at or obs.effective_time,
                contacts=spec.escalation_contacts,
            )
        )
    return events


# --------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class SummaryReport:
    patient_key: bytes
    window: tuple[datetime, datetime]
    series: tuple[tuple[str, tuple[tuple[datetime, float], ...]], ...]
    statistics: dict
    compliance: Optional[dict] = None
    address: Optional[ContentAddress] = None

    def content(self) -> dict:
        doc = {
            "patient_key": self.patient_key.hex(),
            "window": [format_time(self.window[0]), format_time(self.window[1])],
            "series": [
                {"code": code, "points": [[format_time(t), v] for t, v in points]}
                for code, points in self.series
            ],
            "statistics": self.statistics,
        }
        if self.compliance is not None:
            doc["compliance"] = self.compliance
        return doc

    def encode(self) -> bytes:
        return canonical_json(self.content())

    def points(self, code: str) -> list[tuple[datetime, float]]:
        for c, pts in self.series:
            if c == code:
                return list(pts)
        raise KeyError(code)

    @classmethod
    def from_json(cls, doc: dict, address: Optional[ContentAddress] = None) -> "SummaryReport":
        return cls(
            patient_key=bytes.fromhex(doc["patient_key"]),
            window=(parse_time(doc["window"][0]), parse_time(doc["window"][1])),
            series=tuple(
                (s["code"], tuple((parse_time(t), v) for t, v in s["points"])) for s in doc["series"]
            ),
            statistics=doc["statistics"],
            compliance=doc.get("compliance"),
            address=address,
        )


def series_statistics(points: Sequence[tuple[datetime, float]], wanted: Sequence[str]) -> dict:
    values = [v for _, v in points]
    full = {
        "count": len(values),
        "min": min(values) if values else None,
        "max": max(values) if values else None,
        "mean": math.fsum(values) / len(values) if values else None,
        "latest": values[-1] if values else None,
    }
    return {k: full[k] for k in ("count", "min", "max", "mean", "latest") if k in wanted or k == "count"}


def _series_points(observations: Sequence[CanonicalObservation], selector: str) -> list[tuple[datetime, float]]:
    code, _, label = selector.partition("#")
    pts = []
    for obs in observations:
        if obs.code_binding != code:
            continue
        if isinstance(obs.value, Scalar) and not label:
            pts.append((obs.effective_time, obs.value.magnitude, str(obs.provenance)))
        elif isinstance(obs.value, Vector) and label:
            for c in obs.value.components:
                if c.label == label:
                    pts.append((obs.effective_time, c.magnitude, str(obs.provenance)))
    pts.sort(key=lambda p: (p[0], p[2]))
    return [(t, v) for t, v, _ in pts]


def summarize(
    observations: Iterable[CanonicalObservation],
    spec: ContractSpec,
    window: tuple[datetime, datetime],
    compliance: Optional[ContractSpec] = None,
) -> SummaryReport:
    """Per-code series and statistics for the window (start, end].

    With a drug_compliance spec, daily ``doses-taken`` / ``doses-missed``
    series are added.
    """
    if spec.contract_kind != "summarization":
        raise ConfigError(f"expected a summarization spec, got {spec.contract_kind}")
    start, end = core.utc(window[0]), core.utc(window[1])
    obs = [o for o in observations if start < o.effective_time <= end]
    series = []
    stats = {}
    for selector in spec.series:
        pts = tuple(_series_points(obs, selector))
        series.append((selector, pts))
        stats[selector] = series_statistics(pts, spec.statistics)
    compliance_doc = None
    if compliance is not None:
        report, _ = eval_drug_compliance(obs, compliance, (start, end))
        daily = report.daily()
        for code, idx in (("doses-taken", 1), ("doses-missed", 2)):
            pts = tuple((row[0], float(row[idx])) for row in daily)
            series.append((code, pts))
            stats[code] = series_statistics(pts, spec.statistics)
        compliance_doc = report.to_json()
    report = SummaryReport(spec.patient_key, (start, end), tuple(series), stats, compliance_doc)
    return replace(report, address=ContentAddress.of(report.encode()))


# --------------------------------------------------------------------------
# engine


class ContractEngine(ContractHooks):
    """Runs the patient's contracts from inside ``apply_block``."""

    def __init__(self, specs: dict[str, list[ContractSpec]], store):
        self.specs = specs
        self.store = store

    def specs_for(self, patient_hex: str, kind: str) -> list[ContractSpec]:
        return [s for s in self.specs.get(patient_hex, []) if s.contract_kind == kind]

    def on_transfer(self, state: LedgerState, tx: TransferTransaction, record: dict, observations: list) -> list[dict]:
        patient = tx.patient_key.hex()
        obs = [o for _, o in observations]
        alerts: list[AlertEvent] = []
        for spec in self.specs_for(patient, "adverse_condition"):
            alert = eval_adverse_condition(obs, spec, emitted_at=tx.issued_at)
            if alert:
                alerts.append(alert)
        for spec in self.specs_for(patient, "emergency_alert"):
            alerts.extend(eval_emergency(obs, spec, emitted_at=tx.issued_at))
        return [a.to_json() for a in alerts]

    def load_observations(self, state: LedgerState, patient_hex: str, start: datetime, end: datetime) -> list[CanonicalObservation]:
        return [
            CanonicalObservation.from_json(self.store.get_json(ContentAddress.parse(row[1])))
            for row in state.observations_between(patient_hex, start, end)
        ]

    def on_summary(self, state: LedgerState, tx: TransferTransaction, report: dict) -> list[dict]:
        patient = tx.patient_key.hex()
        specs = self.specs_for(patient, "drug_compliance")
        if not specs:
            return []
        start, end = parse_time(report["window"][0]), parse_time(report["window"][1])
        obs = self.load_observations(state, patient, start, end)
        alerts = []
        for spec in specs:
            _, alert = eval_drug_compliance(
                obs, spec, (start, end), emitted_at=tx.issued_at, extra_triggering=(tx.payload_address,)
            )
            if alert:
                alerts.append(alert.to_json())
        return alerts

    def build_summary(self, state: LedgerState, patient_key: bytes, start: datetime, end: datetime) -> SummaryReport:
        patient = patient_key.hex()
        specs = self.specs_for(patient, "summarization")
        spec = specs[0] if specs else ContractSpec("summarization", patient_key)
        compliance = self.specs_for(patient, "drug_compliance")
        obs = self.load_observations(state, patient, start, end)
        return summarize(obs, spec, (start, end), compliance[0] if compliance else None)


# --------------------------------------------------------------------------
# webhook


class AlertNotifier:
    """At-least-once webhook delivery of recorded alerts.

    Each POST body is ``{"dedup_key": ..., "alert": {...}}``; receivers must
    deduplicate on ``dedup_key``. Delivered keys persist in ``outbox_path``.
    """

    def __init__(
        self,
        url: Optional[str],
        outbox_path: Optional[str | Path] = None,
        send: Optional[Callable[[str, bytes], None]] = None,
        max_attempts: int = 5,
        backoff_s: float = 0.2,
    ):
        self.url = url
        self.outbox_path = Path(outbox_path) if outbox_path else None
        self._send = send or _http_post
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._delivered: set[str] = set()
        if self.outbox_path and self.outbox_path.exists():
            self._delivered = set(self.outbox_path.read_text().split())
        self._queued: set[str] = set()
        self._queue: "queue.Queue[Optional[tuple[str, dict]]]" = queue.Queue()
        self._lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        if self.url and self._thread is None:
            self._thread = threading.Thread(target=self._run, name="alert-webhook", daemon=True)
            self._thread.start()

    def stop(self, timeout: float = 5.0) -> None:
        if self._thread is not None:
            self._queue.put(None)
            self._thread.join(timeout)
            self._thread = None

    def enqueue_from(self, state: LedgerState) -> int:
        n = 0
        for alert in state.alerts:
            key = alert_dedup_key(alert)
            with self._lock:
                if key in self._delivered or key in self._queued:
                    continue
                self._queued.add(key)
            self._queue.put((key, alert))
            n += 1
        return n

    def pending(self) -> int:
        return self._queue.qsize()

    def _run(self) -> None:
        import time as _time

        while True:
            item = self._queue.get()
            if item is None:
                return
            key, alert = item
            body = canonical_json({"dedup_key": key, "alert": alert})
            for attempt in range(self.max_attempts):
                try:
                    self._send(self.url, body)
                    self._mark(key)
                    break
                except Exception as exc:  # noqa: BLE001 - any delivery failure is retried
                    logger.warning("webhook delivery %s failed (attempt %d): %s", key[:12], attempt + 1, exc)
                    _time.sleep(self.backoff_s * (2 ** attempt))
            else:
                with self._lock:
                    self._queued.discard(key)

    def _mark(self, key: str) -> None:
        with self._lock:
            self._delivered.add(key)
            self._queued.discard(key)
            if self.outbox_path:
                with open(self.outbox_path, "a") as fh:
                    fh.write(key + "\n")


def _http_post(url: str, body: bytes) -> None:
    req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"}, method="POST")
    with urllib.request.urlopen(req, timeout=5) as resp:
        if resp.status >= 300:
            raise OSError(f"webhook returned {resp.status}")
