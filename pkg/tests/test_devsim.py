from __future__ import annotations

import dataclasses
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from blockiot.contracts import CONTRACT_KINDS
from blockiot.core import KINDS
from blockiot.devsim import (
    DeliveryError,
    DirectSender,
    Scenario,
    Sender,
    TimelineEntry,
    coverage,
    generate_values,
    parse_endpoints,
    render,
    run_scenario,
    shipped_scenario_dir,
)
from conftest import load_scenario


def test_constant_generator():
    assert generate_values({"type": "constant", "value": 96}, 3) == [96, 96, 96]


def test_scripted_generator():
    assert generate_values({"type": "scripted", "values": [102, 51, 76]}, 3) == [102, 51, 76]


def test_generators_are_seeded():
    spec = {"type": "sinusoid", "mean": 70, "amplitude": 5, "period": 10, "noise": 2.0}
    assert generate_values(spec, 20, seed=1) == generate_values(spec, 20, seed=1)
    assert generate_values(spec, 20, seed=1) != generate_values(spec, 20, seed=2)


def test_linear_drift_and_rounding():
    assert generate_values({"type": "linear_drift", "start": 60, "slope": -1.5, "decimals": 0}, 3) == [60, 58, 57]


def test_generator_errors():
    with pytest.raises(ValueError):
        generate_values({"type": "constant", "value": 1}, -1)
    with pytest.raises(ValueError):
        generate_values({"type": "brownian"}, 1)
    assert generate_values({"type": "scripted", "values": []}, 0) == []


@given(st.integers(0, 2**32), st.integers(0, 50))
def test_rendering_is_deterministic(templates, seed, n):
    sc = load_scenario("comorbidity")
    a = [s.payload for s in render(sc, templates, seed)]
    b = [s.payload for s in render(sc, templates, seed)]
    assert a == b
    spec = {"type": "constant", "value": 100, "noise": 3}
    assert generate_values(spec, n, seed=seed) == generate_values(spec, n, seed=seed)


def test_offsets_must_not_decrease():
    doc = json.loads((shipped_scenario_dir() / "comorbidity.json").read_text())
    doc["timeline"] = [{"offset_s": 10, "device": "FS1", "payload": {}}, {"offset_s": 5, "device": "FS1", "payload": {}}]
    with pytest.raises(ValueError):
        Scenario.from_json(doc)
    doc["timeline"] = [{"offset_s": 0, "device": "XX9", "payload": {}}]
    with pytest.raises(ValueError):
        Scenario.from_json(doc)


# -- running -----------------------------------------------------------------------


def test_comorbidity_all_accepted(make_gateway, templates):
    gw = make_gateway()
    report = run_scenario(gw.scenario, DirectSender(gw.pipeline), templates, speed=0)
    assert report.sent == report.accepted == 12 + 14 + 7 + 1
    assert report.rejected == [] and report.mismatches == 0
    assert report.transports == {"http", "mqtt", "coap"}


def test_one_malformed_payload(make_gateway, templates):
    gw = make_gateway()
    sc = gw.scenario
    bad = TimelineEntry(sc.timeline[-1].offset, "FS1", {"fall": "maybe"})
    sc = dataclasses.replace(sc, timeline=sc.timeline + (bad,))
    report = run_scenario(sc, DirectSender(gw.pipeline), templates, speed=0)
    assert len(report.rejected) == 1
    device, index, reason = report.rejected[0]
    assert device == "FS1" and index == 0 and reason.startswith("mapping error")
    assert report.mismatches == 0


def test_empty_timeline(make_gateway, templates):
    gw = make_gateway()
    sc = dataclasses.replace(gw.scenario, timeline=())
    report = run_scenario(sc, DirectSender(gw.pipeline), templates)
    assert report.sent == 0 and report.receipts == []


def test_same_seed_same_gateway_state(make_gateway, templates):
    digests = []
    for _ in range(2):
        gw = make_gateway()
        run_scenario(gw.scenario, DirectSender(gw.pipeline), templates, seed=11, speed=0)
        digests.append(gw.drain_and_stop())
    assert digests[0] == digests[1]


def test_concurrent_devices(make_gateway, templates):
    gw = make_gateway()
    report = run_scenario(gw.scenario, DirectSender(gw.pipeline), templates, speed=0, concurrent=True)
    assert report.accepted == report.sent == 34


class Flaky(Sender):
    def __init__(self, inner, failures):
        self.inner, self.failures, self.calls = inner, failures, 0

    def send(self, scenario, device, payloads, at):
        self.calls += 1
        if self.failures:
            self.failures -= 1
            raise DeliveryError("connection refused")
        return self.inner.send(scenario, device, payloads, at)


def test_retries_then_failure_is_reported(make_gateway, templates):
    gw = make_gateway()
    sc = dataclasses.replace(gw.scenario, timeline=(TimelineEntry(gw.scenario.timeline[-1].offset, "FS1", {"fall": True}),))
    waits = []
    flaky = Flaky(DirectSender(gw.pipeline), failures=2)
    report = run_scenario(sc, flaky, templates, retries=3, sleep=waits.append)
    assert report.accepted == 1 and flaky.calls == 3 and waits == [0.05, 0.1]
    dead = Flaky(DirectSender(gw.pipeline), failures=99)
    report = run_scenario(sc, dead, templates, retries=2, sleep=lambda s: None)
    assert report.failures == [("FS1", 1, "connection refused")] and report.mismatches == 0


def test_time_compression_schedules_sends(make_gateway, templates):
    gw = make_gateway()
    waits = []
    run_scenario(gw.scenario, DirectSender(gw.pipeline), templates, speed=86400, sleep=waits.append)
    # a simulated week at one day per second is about seven seconds of waiting
    assert 0 < max(waits) <= 7.0


def test_shipped_suite_coverage(make_gateway, templates):
    names = sorted(p.stem for p in shipped_scenario_dir().glob("*.json"))
    assert {"diabetes", "hypertension", "copd", "heart_failure"} <= set(names)
    reports, scenarios = [], []
    for name in names:
        gw = make_gateway(name)
        report = run_scenario(gw.scenario, DirectSender(gw.pipeline), templates, speed=0)
        assert report.mismatches == 0 and report.rejected == [], name
        reports.append(report)
        scenarios.append(gw.scenario)
    cov = coverage(reports, scenarios, templates)
    assert cov["kinds"] == set(KINDS)
    assert cov["transports"] == {"http", "mqtt", "coap"}
    assert {"drug_compliance", "summarization", "adverse_condition", "emergency_alert"} <= cov["contracts"]
    assert cov["contracts"] <= set(CONTRACT_KINDS)


def test_parse_endpoints():
    assert parse_endpoints("127.0.0.1:8080") == {"http": "127.0.0.1:8080"}
    assert parse_endpoints("http=a:1, mqtt=b:2,coap=c:3") == {"http": "a:1", "mqtt": "b:2", "coap": "c:3"}
