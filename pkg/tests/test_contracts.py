from __future__ import annotations

import math
from datetime import datetime, time, timedelta, timezone
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from blockiot.contracts import (
    ContractSpec,
    check_access,
    eval_adverse_condition,
    eval_drug_compliance,
    eval_emergency,
    scheduled_doses,
    series_statistics,
    summarize,
)
from blockiot.core import (
    CanonicalObservation,
    ContentAddress,
    DeviceIdentity,
    EventState,
    Principal,
    Scalar,
    Vector,
    VectorComponent,
)
from blockiot.errors import ConfigError
from blockiot.ledger import LedgerState
from blockiot.templates import GuidelineParam

KEY = bytes(range(32))
T0 = datetime(2021, 1, 1, tzinfo=timezone.utc)
_counter = iter(range(10**9))


def obs(code, value, at, kind=None):
    return CanonicalObservation(
        subject=KEY,
        device=DeviceIdentity("P1", "D1", 1),
        effective_time=at,
        kind=kind or value.kind,
        value=value,
        code_binding=code,
        provenance=ContentAddress.of(f"raw {next(_counter)}".encode()),
    )


def opening(at, state="bottle_opened", active=True):
    return obs("pill-bottle", EventState(state, active), at)


def bpm(v, at=T0 + timedelta(hours=1)):
    return obs("heart-rate", Scalar(float(v), "/min"), at)


COMPLIANCE = ContractSpec("drug_compliance", KEY, dose_times=(time(8), time(20)), tolerance_minutes=60)
ADVERSE = ContractSpec("adverse_condition", KEY, min_bpm=50, max_bpm=120, irregularity_flag=True)
EMERGENCY = ContractSpec("emergency_alert", KEY)
SUMMARY = ContractSpec("summarization", KEY, series=("heart-rate", "blood-pressure#systolic"))


# -- access ------------------------------------------------------------------


def test_access_rules():
    state = LedgerState()
    provider = Principal("provider:dr-chen", "provider")
    assert not check_access(state, provider, KEY, "read")
    state.access.add(("provider:dr-chen", KEY.hex(), "read"))
    assert check_access(state, provider, KEY, "read")
    assert not check_access(state, provider, KEY, "write")
    state.access.discard(("provider:dr-chen", KEY.hex(), "read"))
    assert not check_access(state, provider, KEY, "read")
    assert check_access(state, Principal("patient:x", "patient", patient_key=KEY), KEY, "read")
    assert not check_access(state, Principal("patient:y", "patient", patient_key=bytes(32)), KEY, "read")
    with pytest.raises(ValueError):
        check_access(state, provider, KEY, "delete")


# -- drug compliance -----------------------------------------------------------


def test_eleven_of_fourteen():
    end = T0 + timedelta(days=7)
    doses = scheduled_doses(COMPLIANCE.dose_times, T0, end)
    assert len(doses) == 14
    missed = {3, 6, 11}
    opens = [opening(d + timedelta(minutes=(-40 if i % 2 else 25))) for i, d in enumerate(doses) if i not in missed]
    # an opening 2h15m after a missed dose is outside the tolerance
    opens.append(opening(doses[6] + timedelta(hours=2, minutes=15)))
    report, alert = eval_drug_compliance(opens, COMPLIANCE, (T0, end))
    assert (report.taken, report.missed) == (11, 3)
    assert report.ratio == Fraction(11, 14)
    assert float(report.ratio) == pytest.approx(0.7857, abs=1e-4)
    assert alert is not None and alert.severity == "alert"


def test_no_scheduled_doses_is_vacuously_compliant():
    spec = ContractSpec("drug_compliance", KEY, dose_times=(time(8),))
    report, alert = eval_drug_compliance([], spec, (T0 + timedelta(hours=9), T0 + timedelta(hours=20)))
    assert report.scheduled == 0 and report.ratio == 1 and alert is None


def test_all_doses_taken():
    end = T0 + timedelta(days=2)
    opens = [opening(d) for d in scheduled_doses(COMPLIANCE.dose_times, T0, end)]
    report, alert = eval_drug_compliance(opens, COMPLIANCE, (T0, end))
    assert report.ratio == 1 and alert is None


def test_inactive_or_foreign_events_do_not_count():
    end = T0 + timedelta(days=1)
    opens = [opening(T0 + timedelta(hours=8), active=False), opening(T0 + timedelta(hours=20), state="bottle_closed")]
    report, _ = eval_drug_compliance(opens, COMPLIANCE, (T0, end))
    assert report.taken == 0


def test_window_is_half_open():
    spec = ContractSpec("drug_compliance", KEY, dose_times=(time(0),))
    doses = scheduled_doses(spec.dose_times, T0, T0 + timedelta(days=2))
    assert doses == [T0 + timedelta(days=1), T0 + timedelta(days=2)]


def test_daily_series():
    end = T0 + timedelta(days=2)
    doses = scheduled_doses(COMPLIANCE.dose_times, T0, end)
    report, _ = eval_drug_compliance([opening(doses[0])], COMPLIANCE, (T0, end))
    assert [(d.date().isoformat(), t, m) for d, t, m in report.daily()] == [("2021-01-01", 1, 1), ("2021-01-02", 0, 2)]


dose_sets = st.lists(st.integers(0, 23 * 60 + 59), min_size=1, max_size=4, unique=True).map(
    lambda ms: tuple(time(m // 60, m % 60) for m in ms)
)


@settings(max_examples=300)
@given(
    dose_sets,
    st.integers(1, 10),
    st.lists(st.integers(-120, 10 * 24 * 60 + 120), max_size=40),
    st.integers(0, 180),
)
def test_compliance_matches_brute_force(dose_times, days, offsets, tol):
    spec = ContractSpec("drug_compliance", KEY, dose_times=dose_times, tolerance_minutes=tol)
    end = T0 + timedelta(days=days)
    times_ = [T0 + timedelta(minutes=m) for m in offsets]
    report, _ = eval_drug_compliance([opening(t) for t in times_], spec, (T0, end))
    taken, scheduled, flags = oracles.compliance(list(dose_times), times_, T0, end, timedelta(minutes=tol))
    assert (report.taken, report.scheduled) == (taken, scheduled)
    assert [d.taken for d in report.doses] == flags


# -- adverse condition ---------------------------------------------------------


def test_normal_heart_rate_no_alert():
    assert eval_adverse_condition([bpm(62), bpm(58), bpm(53)], ADVERSE) is None


def test_upper_bound_exceeded():
    alert = eval_adverse_condition([bpm(150)], ADVERSE)
    assert alert is not None and "upper bound exceeded" in alert.message


def test_lower_bound_exceeded():
    alert = eval_adverse_condition([bpm(40)], ADVERSE)
    assert "lower bound exceeded" in alert.message


def test_irregular_pulse():
    alert = eval_adverse_condition([obs("pulse-rhythm", EventState("pulse_irregular", True), T0)], ADVERSE)
    assert alert is not None and alert.severity == "alert"
    quiet = ContractSpec("adverse_condition", KEY, min_bpm=50, max_bpm=120)
    assert eval_adverse_condition([obs("pulse-rhythm", EventState("pulse_irregular", True), T0)], quiet) is None


def test_guideline_limits_use_action_severity():
    spec = ContractSpec(
        "adverse_condition",
        KEY,
        guidelines=(GuidelineParam("blood-pressure#systolic", unit="mm[Hg]", action="emergency", upper_limit=180.0),),
    )
    bp = Vector((VectorComponent("systolic", 190.0, "mm[Hg]"), VectorComponent("diastolic", 95.0, "mm[Hg]")))
    alert = eval_adverse_condition([obs("blood-pressure", bp, T0)], spec)
    assert alert.severity == "emergency"


readings = st.lists(st.integers(20, 220), min_size=1, max_size=10)


@given(readings, st.integers(121, 260))
def test_adverse_alert_monotone(values, extra):
    base = [bpm(v, T0 + timedelta(minutes=i)) for i, v in enumerate(values)]
    before = eval_adverse_condition(base, ADVERSE)
    after = eval_adverse_condition(base + [bpm(extra, T0 + timedelta(hours=5))], ADVERSE)
    assert after is not None
    if before is not None:
        assert set(before.triggering) <= set(after.triggering)


# -- emergency -----------------------------------------------------------------


def test_one_fall_one_event():
    fall = obs("fall", EventState("fall_detected", True), T0)
    events = eval_emergency([fall], EMERGENCY)
    assert len(events) == 1 and events[0].severity == "emergency"
    assert eval_emergency([fall], EMERGENCY, already_seen=[fall.provenance]) == []
    assert len(eval_emergency([fall, fall], EMERGENCY)) == 1


def test_cleared_fall_no_event():
    assert eval_emergency([obs("fall", EventState("fall_detected", False), T0)], EMERGENCY) == []


# -- summaries -----------------------------------------------------------------


def test_single_observation_summary():
    report = summarize([bpm(72)], SUMMARY, (T0, T0 + timedelta(days=1)))
    stats = report.statistics["heart-rate"]
    assert stats["count"] == 1
    assert stats["min"] == stats["max"] == stats["mean"] == stats["latest"] == 72.0


def test_bp_summary_series():
    series = []
    for i, (s, d) in enumerate([(102, 51), (125, 80), (118, 72)]):
        bp = Vector((VectorComponent("systolic", s, "mm[Hg]"), VectorComponent("diastolic", d, "mm[Hg]")))
        series.append(obs("blood-pressure", bp, T0 + timedelta(hours=i + 1)))
    spec = ContractSpec("summarization", KEY, series=("blood-pressure#systolic", "blood-pressure#diastolic"))
    report = summarize(series, spec, (T0, T0 + timedelta(days=1)))
    assert [v for _, v in report.points("blood-pressure#systolic")] == [102, 125, 118]
    assert [v for _, v in report.points("blood-pressure#diastolic")] == [51, 80, 72]
    assert report.address == ContentAddress.of(report.encode())


def test_summary_includes_compliance_series():
    end = T0 + timedelta(days=2)
    doses = scheduled_doses(COMPLIANCE.dose_times, T0, end)
    report = summarize([opening(doses[1])], SUMMARY, (T0, end), COMPLIANCE)
    assert [v for _, v in report.points("doses-taken")] == [1.0, 0.0]
    assert [v for _, v in report.points("doses-missed")] == [1.0, 2.0]
    assert report.compliance["ratio"] == {"numerator": 1, "denominator": 4}


@given(st.lists(st.tuples(st.integers(0, 7 * 24 * 60), st.floats(30, 200, allow_nan=False)), max_size=30))
def test_statistics_recomputable_from_series(points):
    data = [bpm(v, T0 + timedelta(minutes=m)) for m, v in points]
    report = summarize(data, SUMMARY, (T0 - timedelta(minutes=1), T0 + timedelta(days=8)))
    pts = report.points("heart-rate")
    assert [t for t, _ in pts] == sorted(t for t, _ in pts)
    values = [v for _, v in pts]
    stats = report.statistics["heart-rate"]
    assert stats["count"] == len(values) == len(points)
    if values:
        assert stats["min"] == min(values) and stats["max"] == max(values)
        assert stats["mean"] == math.fsum(values) / len(values)
        assert stats["latest"] == values[-1]
    assert stats == series_statistics(pts, SUMMARY.statistics)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(contract_kind="lottery"),
        dict(contract_kind="drug_compliance", dose_times=(time(8), time(8))),
        dict(contract_kind="adverse_condition", min_bpm=120, max_bpm=50),
        dict(contract_kind="summarization", window_days=0),
        dict(contract_kind="drug_compliance", compliance_threshold=Fraction(3, 2)),
    ],
)
def test_spec_validation(kwargs):
    kind = kwargs.pop("contract_kind")
    with pytest.raises(ConfigError):
        ContractSpec(kind, KEY, **kwargs)


def test_spec_from_json():
    spec = ContractSpec.from_json(
        {"contract_kind": "drug_compliance", "dose_times": ["08:00", "20:00"], "compliance_threshold": "4/5"},
        patient_key=KEY,
    )
    assert spec.dose_times == (time(8), time(20)) and spec.compliance_threshold == Fraction(4, 5)
