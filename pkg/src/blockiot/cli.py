"""Command-line entry points.

Exit codes: 0 ok, 1 configuration/usage error, 2 integrity failure.
"""

from __future__ import annotations

import json
import logging
import signal
import sys
import tempfile
import threading
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

import click

from . import core
from .cas import ContentStore
from .core import ContentAddress
from .errors import BlockIoTError, ConfigError, IntegrityError, NotFoundError, StartupError
from .keys import Keystore, patient_principal
from .ledger import GATEWAY_PRINCIPAL, decode_chain, replay, validate_chain_bytes

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY = 0, 1, 2


def _logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _echo_json(doc) -> None:
    click.echo(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _load_config(path: str):
    from .runtime import GatewayConfig

    try:
        return GatewayConfig.load(path)
    except ConfigError as exc:
        _fail(str(exc), EXIT_CONFIG)


def _serve(config_path: str, insecure: bool) -> None:
    from .runtime import Gateway

    cfg = _load_config(config_path)
    if not (insecure or cfg.insecure_test_mode):
        _fail(
            "listeners speak plain TCP/UDP; pass --insecure-test-mode (or set insecure_test_mode) "
            "and terminate TLS/DTLS in front of the gateway for production",
            EXIT_CONFIG,
        )
    gw = Gateway(cfg)
    try:
        gw.start()
    except StartupError as exc:
        _fail(str(exc), exc.exit_code)
    except ConfigError as exc:
        _fail(str(exc), EXIT_CONFIG)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    click.echo(json.dumps({"ready": True, "listeners": gw.status()["listeners"]}))
    stop.wait()
    store_digest, state_digest = gw.drain_and_stop()
    click.echo(json.dumps({"store_digest": store_digest, "state_digest": state_digest}))


# --------------------------------------------------------------------------
# blockiot


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def blockiot(verbose: bool) -> None:
    """BlockIoT gateway operator commands."""
    _logging(verbose)


@blockiot.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--insecure-test-mode", is_flag=True, help="Allow plain TCP/UDP listeners.")
def serve(config_path: str, insecure_test_mode: bool) -> None:
    """Run the gateway until interrupted."""
    _serve(config_path, insecure_test_mode)


def _offline_gateway(config_path: str):
    from .runtime import Gateway

    cfg = _load_config(config_path)
    gw = Gateway(cfg)
    try:
        gw.start(listen=False, sealer=False)
    except StartupError as exc:
        _fail(str(exc), exc.exit_code)
    except ConfigError as exc:
        _fail(str(exc), EXIT_CONFIG)
    return gw


@blockiot.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
def status(config_path: str) -> None:
    """Replay the ledger offline and print its status."""
    gw = _offline_gateway(config_path)
    _echo_json(gw.status())


def _parse_when(value: Optional[str], default: datetime) -> datetime:
    return core.parse_time(value) if value else default


@blockiot.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--patient", required=True, help="Manufacturer patient id or patient key hex.")
@click.option("--end", default=None, help="Window end (ISO-8601, default now).")
@click.option("--days", default=7, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--publish", is_flag=True, help="Anchor the summary on the ledger.")
def report(config_path: str, patient: str, end: Optional[str], days: int, out_dir: str, publish: bool) -> None:
    """Summarize a patient's window into CSV files and PNG charts."""
    from .report import write_report

    gw = _offline_gateway(config_path)
    end_t = _parse_when(end, datetime.now(timezone.utc))
    start_t = end_t - timedelta(days=days)
    if publish:
        summary = gw.publish_summary(patient, start_t, end_t)
    else:
        summary = gw.engine.build_summary(gw.ledger.state, gw.patient_key(patient), start_t, end_t)
    files = write_report(summary, out_dir)
    for f in files:
        click.echo(str(f))


@blockiot.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--workdir", default=None, type=click.Path(file_okay=False), help="Keep gateway state here.")
def figures(out_dir: str, workdir: Optional[str]) -> None:
    """Reproduce the compliance and blood-pressure charts from shipped scenarios."""
    from .devsim import Scenario, shipped_scenario_dir
    from .report import write_report
    from .simulate import run_offline

    base = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="blockiot-figures-"))
    for name, prefix in (("comorbidity", "fig2-compliance"), ("fig3_blood_pressure", "fig3-blood-pressure")):
        scenario = Scenario.load(shipped_scenario_dir() / f"{name}.json")
        result = run_offline(scenario, base / name)
        for f in write_report(result.summary, out_dir, prefix=prefix):
            click.echo(str(f))
        result.gateway.drain_and_stop()


# --------------------------------------------------------------------------
# gatewayd


@click.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--insecure-test-mode", is_flag=True, help="Allow plain TCP/UDP listeners.")
@click.option("-v", "--verbose", is_flag=True)
def gatewayd(config_path: str, insecure_test_mode: bool, verbose: bool) -> None:
    """Run the ingest gateway daemon."""
    _logging(verbose)
    _serve(config_path, insecure_test_mode)


# --------------------------------------------------------------------------
# casctl


def _keystore(data_dir: Path) -> Keystore:
    path = data_dir / "keystore.json"
    if not path.exists():
        _fail(f"no keystore at {path}", EXIT_CONFIG)
    return Keystore.open(path)


def _store(data_dir: str) -> ContentStore:
    d = Path(data_dir)
    ks = _keystore(d)
    return ContentStore(d / "cas", ks)


@click.group()
@click.option("--data-dir", required=True, type=click.Path(file_okay=False, exists=True), help="Gateway data directory.")
@click.pass_context
def casctl(ctx, data_dir: str) -> None:
    """Inspect the content-addressed store."""
    ctx.obj = _store(data_dir)


@casctl.command("put")
@click.argument("path", type=click.File("rb"))
@click.pass_obj
def cas_put(store: ContentStore, path) -> None:
    click.echo(str(store.put(path.read())))


def _address(value: str) -> ContentAddress:
    try:
        return ContentAddress.parse(value)
    except ValueError as exc:
        _fail(str(exc), EXIT_CONFIG)


@casctl.command("get")
@click.argument("address")
@click.pass_obj
def cas_get(store: ContentStore, address: str) -> None:
    try:
        data = store.get(_address(address))
    except NotFoundError as exc:
        _fail(str(exc), EXIT_CONFIG)
    except IntegrityError as exc:
        _fail(str(exc), EXIT_INTEGRITY)
    sys.stdout.buffer.write(data)


@casctl.command("resolve")
@click.argument("patient_key")
@click.option("--history", is_flag=True)
@click.pass_obj
def cas_resolve(store: ContentStore, patient_key: str, history: bool) -> None:
    """Resolve a patient's stable name to its current folder root."""
    key = bytes.fromhex(patient_key)
    store.keystore.register(patient_principal(key))
    try:
        if history:
            for rec in store.history(key):
                click.echo(f"{rec.sequence}\t{rec.root}")
            return
        rec = store.resolve_record(key)
    except NotFoundError as exc:
        _fail(str(exc), EXIT_CONFIG)
    except IntegrityError as exc:
        _fail(str(exc), EXIT_INTEGRITY)
    click.echo(f"{rec.root}\tsequence={rec.sequence}")
    for path, addr in store.walk(rec.root):
        if path:
            click.echo(f"  {path}\t{addr}")


@casctl.command("audit")
@click.pass_obj
def cas_audit(store: ContentStore) -> None:
    """Re-hash every object; exit 2 on any problem."""
    for key in store.names():
        store.keystore.register(patient_principal(key))
    problems = store.audit()
    for p in problems:
        click.echo(p)
    if problems:
        sys.exit(EXIT_INTEGRITY)
    click.echo(f"ok: {len(store.addresses())} objects, digest {store.digest()}")


# --------------------------------------------------------------------------
# ledgerctl


def _chain_keystore(data_dir: Path, data: bytes) -> Keystore:
    ks = _keystore(data_dir)
    ks.register(GATEWAY_PRINCIPAL)
    blocks, _ = decode_chain(data)
    for b in blocks:
        for tx in b.transactions:
            ks.register(patient_principal(tx.patient_key))
    return ks


@click.group()
@click.option("--data-dir", required=True, type=click.Path(file_okay=False, exists=True), help="Gateway data directory.")
@click.pass_context
def ledgerctl(ctx, data_dir: str) -> None:
    """Validate and inspect the ledger."""
    d = Path(data_dir)
    chain = d / "ledger" / "chain.jsonl"
    if not chain.exists():
        _fail(f"no chain at {chain}", EXIT_CONFIG)
    ctx.obj = (d, chain.read_bytes())


@ledgerctl.command("validate")
@click.pass_obj
def ledger_validate(obj) -> None:
    d, data = obj
    verdict = validate_chain_bytes(data, _chain_keystore(d, data))
    if not verdict.ok:
        _fail(f"invalid at height {verdict.height}: {verdict.reason}", EXIT_INTEGRITY)
    blocks, _ = decode_chain(data)
    click.echo(f"ok: {len(blocks)} blocks, tip {blocks[-1].hash}")


@ledgerctl.command("replay")
@click.option(
    "--config",
    "config_path",
    default=None,
    type=click.Path(dir_okay=False, exists=True),
    help="Gateway config; its contracts are evaluated so the digest matches the gateway's.",
)
@click.pass_obj
def ledger_replay(obj, config_path: Optional[str]) -> None:
    """Replay the chain and print the state digest.

    Without --config no contracts run, so contract-raised alerts are absent.
    """
    d, data = obj
    verdict = validate_chain_bytes(data, _chain_keystore(d, data))
    if not verdict.ok:
        _fail(f"invalid at height {verdict.height}: {verdict.reason}", EXIT_INTEGRITY)
    blocks, _ = decode_chain(data)
    store = ContentStore(d / "cas", _keystore(d))
    hooks = None
    if config_path:
        from .runtime import Gateway

        try:
            hooks = Gateway(_load_config(config_path)).build().engine
        except (StartupError, ConfigError) as exc:
            _fail(str(exc), EXIT_CONFIG)
    try:
        state = replay(blocks, store, hooks)
    except (BlockIoTError, KeyError) as exc:
        _fail(f"replay failed: {exc}", EXIT_INTEGRITY)
    click.echo(state.state_digest)


@ledgerctl.command("stats")
@click.pass_obj
def ledger_stats(obj) -> None:
    d, data = obj
    blocks, verdict = decode_chain(data)
    kinds: dict[str, int] = {}
    for b in blocks:
        for tx in b.transactions:
            kinds[tx.kind] = kinds.get(tx.kind, 0) + 1
    _echo_json(
        {
            "blocks": len(blocks),
            "transactions": sum(kinds.values()),
            "by_kind": kinds,
            "tip": blocks[-1].hash if blocks else None,
            "decodes": verdict is None,
        }
    )


# --------------------------------------------------------------------------
# devsim


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def devsim(verbose: bool) -> None:
    """Simulated medical devices."""
    _logging(verbose)


@devsim.command("run")
@click.option("--scenario", required=True, help="Scenario file, or the name of a shipped scenario.")
@click.option("--gateway", "gateway", required=True, help="host:port (HTTP) or http=..,mqtt=..,coap=..")
@click.option("--seed", type=int, default=None)
@click.option("--speed", type=float, default=None, help="Simulated seconds per real second (0 = no waiting).")
@click.option("--scenario-time", is_flag=True, help="Use the scenario's own start time instead of now.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None)
def devsim_run(scenario: str, gateway: str, seed: Optional[int], speed: Optional[float], scenario_time: bool, report_path: Optional[str]) -> None:
    from .devsim import NetworkSender, Scenario, parse_endpoints, run_scenario, shipped_scenario_dir
    from .templates import TemplateRegistry, shipped_template_dir

    path = Path(scenario)
    if not path.exists():
        path = shipped_scenario_dir() / f"{scenario}.json"
    try:
        sc = Scenario.load(path)
    except (OSError, ValueError, KeyError) as exc:
        _fail(f"cannot load scenario {scenario}: {exc}", EXIT_CONFIG)
    templates = TemplateRegistry.from_dir(shipped_template_dir())
    sender = NetworkSender(parse_endpoints(gateway))
    try:
        start = None if scenario_time else datetime.now(timezone.utc).replace(microsecond=0)
        rep = run_scenario(sc, sender, templates, seed=seed, speed=speed, start=start, concurrent=True)
    finally:
        sender.close()
    doc = rep.to_json()
    if report_path:
        Path(report_path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    _echo_json(doc)
    if rep.failures:
        sys.exit(EXIT_CONFIG)


@devsim.command("registry")
@click.option("--scenario", required=True)
def devsim_registry(scenario: str) -> None:
    """Print the registration table a gateway needs for a scenario."""
    from .devsim import Scenario, shipped_scenario_dir

    path = Path(scenario)
    if not path.exists():
        path = shipped_scenario_dir() / f"{scenario}.json"
    _echo_json(Scenario.load(path).registry_doc())
