"""Build honest chains with a realistic mix of transactions for ledger tests."""

from __future__ import annotations

import random
from datetime import date, datetime, timedelta, timezone

from blockiot.core import CanonicalObservation, ContentAddress, DeviceIdentity, Scalar, patient_key
from blockiot.keys import patient_principal
from blockiot.ledger import GATEWAY_PRINCIPAL, Ledger, make_tx

T0 = datetime(2021, 1, 1, tzinfo=timezone.utc)
PATIENTS = [patient_key(f"p{i}", "test", date(1960, 1, 1 + i)) for i in range(3)]


def register(keystore) -> None:
    keystore.register(GATEWAY_PRINCIPAL)
    for key in PATIENTS:
        keystore.register(patient_principal(key))


def random_txs(keystore, store, rng: random.Random, when: datetime, n: int) -> list:
    txs = []
    for i in range(n):
        key = rng.choice(PATIENTS)
        at = when + timedelta(seconds=i)
        kind = rng.choice(["data_transfer", "access_grant", "access_revoke", "alert_event"])
        if kind == "data_transfer":
            obs = CanonicalObservation(
                subject=key,
                device=DeviceIdentity("P", "D", 1),
                effective_time=at,
                kind="scalar",
                value=Scalar(float(rng.randint(50, 150)), "/min"),
                code_binding="heart-rate",
                provenance=ContentAddress.of(f"raw {rng.random()}".encode()),
            )
            addr = store.put(obs.encode())
            payload = store.put_json({"type": "transfer-record", "observations": [str(addr)]})
            txs.append(make_tx(keystore, kind, key, payload, at))
        elif kind == "alert_event":
            payload = store.put_json(
                {"contract_kind": "adverse_condition", "triggering": [str(ContentAddress.of(str(rng.random()).encode()))]}
            )
            txs.append(make_tx(keystore, kind, key, payload, at))
        else:
            payload = store.put_json({"grantee": f"provider:{rng.randint(0, 4)}", "scope": "read"})
            txs.append(make_tx(keystore, kind, key, payload, at, signer=patient_principal(key)))
    return txs


def build_chain(keystore, store, blocks: int = 50, difficulty: int = 8, per_block: int = 2, seed: int = 0) -> Ledger:
    """An in-memory ledger holding ``blocks`` blocks (genesis included)."""
    register(keystore)
    rng = random.Random(seed)
    ledger = Ledger(keystore, store, difficulty_bits=difficulty)
    ledger.open()
    for h in range(1, blocks):
        when = T0 + timedelta(minutes=h)
        for tx in random_txs(keystore, store, rng, when, per_block):
            ledger.submit_tx(tx)
        ledger.seal(timestamp=when + timedelta(seconds=30))
    return ledger
