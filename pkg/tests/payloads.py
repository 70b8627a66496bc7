"""Payload and credential builders for the comorbidity registry (patient P1)."""

from __future__ import annotations

import json
from datetime import datetime, timedelta, timezone

from blockiot.core import canonical_json, format_time
from blockiot.gateway import coap_mac

T0 = datetime(2021, 1, 1, tzinfo=timezone.utc)
PB1_PSK = "50423150423150423150423150423150"
CTX = ["PREPRANDIAL", "FASTING", "CASUAL", "BEDTIME"]


def glucose(i: int, pid: str = "P1", did: str = "GM1") -> dict:
    return {"pid": pid, "did": did, "ts": format_time(T0 + timedelta(minutes=10 * i)), "bg": 80 + i % 60, "ctx": CTX[i % 4]}


def bp(i: int, pid: str = "P1", did: str = "BP9") -> dict:
    return {
        "pid": pid,
        "did": did,
        "ts": format_time(T0 + timedelta(minutes=10 * i)),
        "sys": 100 + i % 40,
        "dia": 60 + i % 25,
        "map": 75 + i % 20,
    }


def pill(i: int, pid: str = "P1", did: str = "PB1") -> dict:
    return {"pid": pid, "bottle": did, "ts": format_time(T0 + timedelta(minutes=10 * i)), "event": "bottle_opened", "count": 60 - i % 60}


def http_headers(token: str = "tok-GM1") -> dict:
    return {"Authorization": f"Bearer {token}", "Content-Type": "application/json"}


def mqtt_message(payloads: list, username: str = "mq-BP9", password: str = "pw-BP9") -> bytes:
    return json.dumps({"auth": {"username": username, "password": password}, "payloads": payloads}).encode()


def coap_body(payloads: list) -> tuple[bytes, str]:
    body = canonical_json(payloads)
    return body, coap_mac(PB1_PSK, body)
