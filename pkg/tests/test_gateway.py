from __future__ import annotations

import json
import random
import threading
from datetime import date, timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockiot.core import PatientIdentity, canonical_json
from blockiot.errors import AuthError, AuthorizationError, BackpressureError, RequestError
from blockiot.gateway import (
    COAP_BAD_REQUEST,
    COAP_CREATED,
    COAP_FORBIDDEN,
    COAP_NOT_FOUND,
    COAP_UNAUTHORIZED,
    COAP_UNAVAILABLE,
    Credentials,
    DeviceRegistration,
    batch_id,
    coap_mac,
    receive_coap,
    receive_http,
    receive_mqtt,
)
from payloads import PB1_PSK, bp, coap_body, glucose, http_headers, mqtt_message, pill

TOPIC = "blockiot/P1/BP9/obs"


@pytest.fixture
def gw(make_gateway):
    return make_gateway()


def post(gw, payloads, token="tok-GM1"):
    return receive_http(gw.pipeline, http_headers(token), json.dumps(payloads).encode())


# -- registry ------------------------------------------------------------------


def test_mqtt_credential_resolves_to_device(gw):
    p = gw.registry.authenticate(Credentials("mqtt", username="mq-BP9", password="pw-BP9"))
    assert (p.role, p.device_id, p.patient_id) == ("device", "BP9", "P1")
    assert p.patient_key == gw.patient_key("P1")


def test_bad_and_revoked_credentials(gw):
    with pytest.raises(AuthError):
        gw.registry.authenticate(Credentials("mqtt", username="mq-BP9", password="nope"))
    with pytest.raises(AuthError):
        gw.registry.authenticate(Credentials("http", token="tok-unknown"))
    gw.registry.revoke_device("GM1")
    with pytest.raises(AuthError):
        gw.registry.authenticate(Credentials("http", token="tok-GM1"))


def test_expired_credential(gw):
    reg = gw.registry.devices["FS1"]
    reg.expires = gw.clock() + timedelta(days=1)
    gw.registry.authenticate(Credentials("http", token="tok-FS1"), gw.clock())
    with pytest.raises(AuthError):
        gw.registry.authenticate(Credentials("http", token="tok-FS1"), gw.clock() + timedelta(days=2))


def test_device_for_other_patient_cannot_write_p1(gw):
    gw.registry.add_patient("P2", PatientIdentity("John", "Roe", date(1970, 5, 5)))
    gw.registry.add_device(DeviceRegistration("GM2", "P2", "glucose_meter", http_token="tok-GM2"))
    principal = gw.registry.authenticate(Credentials("http", token="tok-GM2"))
    before = gw.store.digest()
    with pytest.raises(AuthorizationError):
        gw.pipeline.ingest("http", principal, [glucose(0, did="GM2")])
    assert gw.store.digest() == before


def test_readers(gw):
    assert gw.registry.authenticate_reader("reader-dr-chen").id == "provider:dr-chen"
    patient = gw.registry.authenticate_reader("reader-p1")
    assert patient.role == "patient" and patient.patient_key == gw.patient_key("P1")
    with pytest.raises(AuthError):
        gw.registry.authenticate_reader("tok-GM1")


# -- pipeline ------------------------------------------------------------------


def test_three_glucose_readings_accepted(gw):
    resp = post(gw, [glucose(i) for i in range(3)])
    assert resp.status == 200
    receipt = resp.json()
    assert receipt["accepted"] == 3 and receipt["rejected"] == []
    tx = gw.ledger.mempool()[0]
    assert tx.tx_id == receipt["ledger_tx"] and tx.kind == "data_transfer"
    record = gw.store.get_json(tx.payload_address)
    assert record["batch_id"] == receipt["batch_id"]
    assert len(record["observations"]) == 6  # bg and ctx per payload
    root = gw.store.resolve_name(gw.patient_key("P1"))
    assert f"tx-{tx.tx_id}" in [e.name for e in gw.store.get_folder(root).entries]


def test_missing_patient_field_rejects_only_that_payload(gw):
    batch = [glucose(0), glucose(1), glucose(2)]
    del batch[2]["pid"]
    receipt = post(gw, batch).json()
    assert receipt["accepted"] == 2
    assert receipt["rejected"] == [[2, "identity error"]]


@pytest.mark.parametrize(
    "mutate, reason",
    [
        (lambda p: p.update(bg="high", ctx="BRUNCH"), "mapping error"),
        (lambda p: p.update(ts="2020-12-31T00:00:00Z"), "effective_time not monotone"),
    ],
)
def test_per_payload_rejection_reasons(gw, mutate, reason):
    batch = [glucose(0), glucose(1)]
    mutate(batch[1])
    receipt = post(gw, batch).json()
    assert receipt["accepted"] == 1
    assert receipt["rejected"][0][0] == 1 and receipt["rejected"][0][1].startswith(reason)


def test_partially_mappable_payload_is_kept(gw):
    batch = [glucose(0)]
    batch[0]["bg"] = "high"
    receipt = post(gw, batch).json()
    assert receipt["accepted"] == 1
    record = gw.store.get_json(gw.ledger.mempool()[0].payload_address)
    assert len(record["observations"]) == 1


def test_non_finite_numbers_are_a_bad_request(gw):
    resp = receive_http(gw.pipeline, http_headers(), b'[{"pid":"P1","did":"GM1","ts":"2021-01-01T00:00:00Z","bg":Infinity}]')
    assert resp.status == 400
    principal = gw.registry.authenticate(Credentials("http", token="tok-GM1"))
    with pytest.raises(RequestError):
        gw.pipeline.ingest("http", principal, [dict(glucose(0), bg=float("nan"))])


def test_non_ascii_token_is_unauthorized(gw):
    assert post(gw, [glucose(0)], token="t\u00f6k").status == 401


def test_non_object_payload(gw):
    receipt = post(gw, [glucose(0), 42]).json()
    assert receipt["rejected"] == [[1, "payload is not a key-value document"]]


def test_all_rejected_batch_writes_no_transaction(gw):
    batch = [glucose(0)]
    del batch[0]["pid"]
    receipt = post(gw, batch).json()
    assert receipt["accepted"] == 0 and receipt["ledger_tx"] is None
    assert gw.ledger.mempool() == []


def test_empty_batch(gw):
    resp = post(gw, [])
    assert resp.status == 400 and "payloads non-empty" in resp.json()["error"]
    with pytest.raises(RequestError):
        gw.pipeline.ingest("http", gw.registry.authenticate(Credentials("http", token="tok-GM1")), "x")


def test_batch_id_is_order_sensitive(gw):
    p = gw.registry.authenticate(Credentials("http", token="tok-GM1"))
    a, b = glucose(0), glucose(1)
    assert batch_id(p, [a, b]) != batch_id(p, [b, a])
    assert batch_id(p, [a, b]) == batch_id(p, [dict(reversed(list(a.items()))), b])


def test_redelivery_returns_same_receipt(gw):
    batch = [glucose(i) for i in range(4)]
    first = post(gw, batch)
    digests = gw.digests()
    second = post(gw, batch)
    assert first.body == second.body
    assert gw.digests() == digests
    assert len(gw.ledger.mempool()) == 1


def test_dedup_survives_restart(make_gateway, tmp_path):
    gw = make_gateway(workdir=tmp_path / "w")
    batch = [glucose(i) for i in range(2)]
    first = post(gw, batch).body
    gw.drain_and_stop()
    again = make_gateway(workdir=tmp_path / "w")
    digests = again.digests()
    assert post(again, batch).body == first
    assert again.digests() == digests and again.ledger.mempool() == []


# -- HTTP ----------------------------------------------------------------------


def test_http_status_codes(make_gateway):
    gw = make_gateway(max_batch=5)
    assert receive_http(gw.pipeline, {}, b"[]").status == 401
    assert post(gw, [glucose(0)], token="wrong").status == 401
    assert post(gw, [glucose(0, pid="P2")]).status == 403
    assert post(gw, [glucose(i) for i in range(6)]).status == 413
    assert receive_http(gw.pipeline, http_headers(), b"{not json").status == 400
    assert post(gw, {"payloads": [glucose(0)]}).status == 200


def test_http_single_object_body(gw):
    assert post(gw, glucose(0)).json()["accepted"] == 1


def test_not_ready_is_retry_later(make_gateway):
    gw = make_gateway(start=False)
    gw.build()
    resp = post(gw, [glucose(0)])
    assert resp.status == 503 and resp.headers["Retry-After"]
    _, body = receive_mqtt(gw.pipeline, TOPIC, mqtt_message([bp(0)]))
    assert json.loads(body)["status"] == 503
    data, mac = coap_body([pill(0)])
    assert receive_coap(gw.pipeline, "/obs/P1/PB1", data, "psk-PB1", mac)[0] == COAP_UNAVAILABLE
    gw.replay()
    assert post(gw, [glucose(0)]).status == 200


def test_full_intake_queue_is_backpressure(make_gateway):
    gw = make_gateway(queue_capacity=1)
    principal = gw.registry.authenticate(Credentials("http", token="tok-GM1"))
    with gw.pipeline.limiter("http"):
        with pytest.raises(BackpressureError):
            gw.pipeline.ingest("http", principal, [glucose(0)])
        assert post(gw, [glucose(0)]).status == 503
        # other transports have their own queue
        _, body = receive_mqtt(gw.pipeline, TOPIC, mqtt_message([bp(0)]))
        assert json.loads(body)["accepted"] == 1
    assert post(gw, [glucose(0)]).status == 200


# -- MQTT ----------------------------------------------------------------------


def test_mqtt_publish_accepted(gw):
    topic, body = receive_mqtt(gw.pipeline, TOPIC, mqtt_message([bp(0), bp(1)]))
    assert topic == "blockiot/P1/BP9/receipt"
    assert json.loads(body)["accepted"] == 2


def test_mqtt_single_payload_envelope(gw):
    msg = json.dumps({"auth": {"username": "mq-BP9", "password": "pw-BP9"}, "payload": bp(0)}).encode()
    assert json.loads(receive_mqtt(gw.pipeline, TOPIC, msg)[1])["accepted"] == 1


def test_mqtt_qos1_redelivery(gw):
    msg = mqtt_message([bp(i) for i in range(3)])
    _, first = receive_mqtt(gw.pipeline, TOPIC, msg)
    digest = gw.store.digest()
    _, second = receive_mqtt(gw.pipeline, TOPIC, msg)
    assert first == second and gw.store.digest() == digest


def test_mqtt_errors(gw):
    status = lambda topic, msg: json.loads(receive_mqtt(gw.pipeline, topic, msg)[1]).get("status")  # noqa: E731
    assert status("blockiot/P2/BP9/obs", mqtt_message([bp(0)])) == 403
    assert status(TOPIC, mqtt_message([bp(0)], password="bad")) == 401
    assert status(TOPIC, b"\xff\xfe") == 400
    assert status(TOPIC, json.dumps({"auth": {}}).encode()) == 400
    topic, _ = receive_mqtt(gw.pipeline, "elsewhere/x", mqtt_message([bp(0)]))
    assert topic == "blockiot/errors"


# -- CoAP ----------------------------------------------------------------------


def test_coap_created(gw):
    data, mac = coap_body([pill(0), pill(1)])
    code, body = receive_coap(gw.pipeline, "/obs/P1/PB1", data, "psk-PB1", mac)
    assert code == COAP_CREATED and json.loads(body)["accepted"] == 2


def test_coap_error_codes(gw):
    junk = b"\x00not json"
    assert receive_coap(gw.pipeline, "/obs/P1/PB1", junk, "psk-PB1", coap_mac(PB1_PSK, junk))[0] == COAP_BAD_REQUEST
    data, mac = coap_body([pill(0)])
    assert receive_coap(gw.pipeline, "/obs/P1/PB1", data, "psk-ZZZ", mac)[0] == COAP_FORBIDDEN
    assert receive_coap(gw.pipeline, "/obs/P1/PB1", data, "psk-PB1", "00" * 32)[0] == COAP_UNAUTHORIZED
    assert receive_coap(gw.pipeline, "/obs/P1/GM1", data, "psk-PB1", mac)[0] == COAP_FORBIDDEN
    assert receive_coap(gw.pipeline, "/readings", data, "psk-PB1", mac)[0] == COAP_NOT_FOUND


# -- unauthenticated traffic -----------------------------------------------------


junk_payloads = st.lists(
    st.dictionaries(st.sampled_from(["pid", "did", "bottle", "ts", "bg", "sys", "event"]), st.integers() | st.text(max_size=5)),
    min_size=1,
    max_size=4,
)


@settings(max_examples=60)
@given(junk_payloads, st.text(max_size=12), st.sampled_from(["http", "mqtt", "coap"]))
def test_unauthenticated_traffic_never_mutates(make_gateway, payloads, secret, transport):
    gw = make_gateway.cached if hasattr(make_gateway, "cached") else make_gateway()
    make_gateway.cached = gw
    before = gw.digests(), len(gw.ledger.mempool())
    body = canonical_json(payloads)
    if transport == "http":
        resp = receive_http(gw.pipeline, {"Authorization": f"Bearer x{secret}"}, body)
        assert resp.status == 401
    elif transport == "mqtt":
        _, reply = receive_mqtt(gw.pipeline, TOPIC, mqtt_message(payloads, password=f"x{secret}"))
        assert json.loads(reply)["status"] == 401
    else:
        code, _ = receive_coap(gw.pipeline, "/obs/P1/PB1", body, "psk-PB1", secret)
        assert code == COAP_UNAUTHORIZED
    assert (gw.digests(), len(gw.ledger.mempool())) == before


# -- liveness ------------------------------------------------------------------


def test_every_payload_is_accounted_for(gw):
    rng = random.Random(7)
    sent = accepted = rejected = 0
    for b in range(20):
        batch = [glucose(b * 50 + i) for i in range(50)]
        for p in rng.sample(batch, 5):
            p.update(bg="??", ctx="??")
        receipt = post(gw, batch).json()
        sent += len(batch)
        accepted += receipt["accepted"]
        rejected += len(receipt["rejected"])
    assert sent == 1000
    assert accepted + rejected == sent and rejected == 100


def test_concurrent_batches_all_commit(gw):
    results = []

    def worker(k):
        results.append(post(gw, [glucose(k * 10 + i) for i in range(10)]).json()["accepted"])

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sum(results) == 80 and len(gw.ledger.mempool()) == 8
    gw.seal_pending()
    assert gw.ledger.tip.height == 1
