from __future__ import annotations

import dataclasses
import json

import pytest
from click.testing import CliRunner

from blockiot.cli import blockiot, casctl, devsim, gatewayd, ledgerctl
from blockiot.devsim import DirectSender, run_scenario
from blockiot.runtime import Gateway, write_config
from blockiot.simulate import SimClock, prepare
from conftest import START, load_scenario


@pytest.fixture
def populated(tmp_path, templates):
    """A stopped gateway's config file and data directory after one scenario week."""
    sc = load_scenario("comorbidity")
    cfg = prepare(sc, tmp_path, difficulty_bits=4)
    doc = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if getattr(cfg, f.name) is not None}
    path = write_config(tmp_path / "gateway.json", **doc)
    gw = Gateway(cfg, clock=SimClock(START)).start(listen=False, sealer=False)
    run_scenario(sc, DirectSender(gw.pipeline), templates, speed=0)
    gw.drain_and_stop()
    return path, cfg.data_dir, gw


def run(cmd, args):
    return CliRunner().invoke(cmd, [str(a) for a in args], catch_exceptions=False)


def test_status(populated):
    path, _, gw = populated
    result = run(blockiot, ["status", "--config", path])
    assert result.exit_code == 0
    doc = json.loads(result.output)
    assert doc["height"] == 1 and doc["state_digest"] == gw.ledger.state.state_digest


def test_report_writes_csv_and_charts(populated, tmp_path):
    path, _, _ = populated
    out = tmp_path / "out"
    result = run(blockiot, ["report", "--config", path, "--patient", "P1", "--end", "2021-01-08T00:00:00Z", "--out", out])
    assert result.exit_code == 0
    names = {p.name for p in out.iterdir()}
    assert any(n.endswith(".csv") for n in names) and any(n.endswith(".png") for n in names)


def test_serve_refuses_plaintext_without_flag(populated):
    path, _, _ = populated
    result = CliRunner().invoke(gatewayd, ["--config", str(path)])
    assert result.exit_code == 1 and "insecure-test-mode" in result.output


def test_bad_config_exit_code(tmp_path):
    (tmp_path / "bad.json").write_text('{"data_dir": "d"}')
    result = CliRunner().invoke(blockiot, ["status", "--config", str(tmp_path / "bad.json")])
    assert result.exit_code == 1


def test_ledgerctl_validate_replay_stats(populated):
    _, data_dir, gw = populated
    result = run(ledgerctl, ["--data-dir", data_dir, "validate"])
    assert result.exit_code == 0 and result.output.startswith("ok: 2 blocks")
    path = populated[0]
    result = run(ledgerctl, ["--data-dir", data_dir, "replay", "--config", path])
    assert result.output.strip() == gw.ledger.state.state_digest
    # without contracts the fall alert is not re-derived
    assert run(ledgerctl, ["--data-dir", data_dir, "replay"]).output.strip() != gw.ledger.state.state_digest
    stats = json.loads(run(ledgerctl, ["--data-dir", data_dir, "stats"]).output)
    assert stats["blocks"] == 2 and stats["by_kind"]["data_transfer"] == 34


def test_ledgerctl_validate_tampered(populated):
    _, data_dir, _ = populated
    chain = data_dir / "ledger" / "chain.jsonl"
    lines = chain.read_text().splitlines()
    lines[1] = lines[1].replace('"nonce":', '"nonce":1', 1)
    chain.write_text("\n".join(lines) + "\n")
    result = CliRunner().invoke(ledgerctl, ["--data-dir", str(data_dir), "validate"])
    assert result.exit_code == 2 and "height 1" in result.output


def test_casctl_put_get_resolve_audit(populated, tmp_path):
    _, data_dir, gw = populated
    blob = tmp_path / "blob.bin"
    blob.write_bytes(b"some bytes")
    addr = run(casctl, ["--data-dir", data_dir, "put", blob]).output.strip()
    assert addr.startswith("1220")
    assert run(casctl, ["--data-dir", data_dir, "get", addr]).stdout_bytes == b"some bytes"
    key = gw.patient_key("P1").hex()
    resolved = run(casctl, ["--data-dir", data_dir, "resolve", key]).output
    assert str(gw.store.resolve_name(bytes.fromhex(key))) in resolved.splitlines()[0]
    history = run(casctl, ["--data-dir", data_dir, "resolve", key, "--history"]).output.splitlines()
    assert len(history) == 34
    assert run(casctl, ["--data-dir", data_dir, "audit"]).exit_code == 0
    (data_dir / "cas" / "objects" / addr).write_bytes(b"other bytes")
    assert CliRunner().invoke(casctl, ["--data-dir", str(data_dir), "audit"]).exit_code == 2
    assert CliRunner().invoke(casctl, ["--data-dir", str(data_dir), "get", addr]).exit_code == 2


def test_devsim_registry():
    doc = json.loads(run(devsim, ["registry", "--scenario", "comorbidity"]).output)
    assert {d["device_id"] for d in doc["devices"]} == {"GM1", "BP9", "PB1", "FS1"}


def test_figures(tmp_path):
    result = run(blockiot, ["figures", "--out", tmp_path / "figs", "--workdir", tmp_path / "work"])
    assert result.exit_code == 0
    names = {p.name for p in (tmp_path / "figs").iterdir()}
    assert any(n.startswith("fig2-compliance") and n.endswith(".png") for n in names)
    assert any(n.startswith("fig3-blood-pressure") and n.endswith(".png") for n in names)
