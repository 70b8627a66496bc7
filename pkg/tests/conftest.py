from __future__ import annotations

import socket
from datetime import date, datetime, timezone
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from blockiot.devsim import Scenario, shipped_scenario_dir
from blockiot.keys import Keystore
from blockiot.runtime import Gateway
from blockiot.simulate import SimClock, prepare
from blockiot.templates import TemplateRegistry, shipped_template_dir

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow]
)
settings.load_profile("default")

START = datetime(2021, 1, 1, tzinfo=timezone.utc)
SEED = b"\x5e\xed" * 16
MARIA = ("Maria", "Lopez", date(1956, 3, 14))


@pytest.fixture(scope="session")
def templates() -> TemplateRegistry:
    return TemplateRegistry.from_dir(shipped_template_dir())


@pytest.fixture
def keystore() -> Keystore:
    return Keystore(SEED)


def load_scenario(name: str) -> Scenario:
    return Scenario.load(shipped_scenario_dir() / f"{name}.json")


@pytest.fixture
def make_gateway(tmp_path):
    """Factory for in-process gateways on a simulated clock.

    Each call gets its own working directory unless ``workdir`` is given,
    so several gateways can run side by side in one test.
    """
    made: list[Gateway] = []
    counter = iter(range(1000))

    def factory(scenario="comorbidity", workdir: Path | None = None, now=START, start=True, **overrides) -> Gateway:
        sc = load_scenario(scenario) if isinstance(scenario, str) else scenario
        work = workdir or tmp_path / f"gw{next(counter)}"
        overrides.setdefault("difficulty_bits", 4)
        cfg = prepare(sc, work, **overrides)
        gw = Gateway(cfg, clock=SimClock(now))
        gw.scenario = sc
        if start:
            gw.start(listen=False, sealer=False)
        made.append(gw)
        return gw

    yield factory
    for gw in made:
        if gw.notifier is not None:
            gw.notifier.stop(1.0)


@pytest.fixture
def broker():
    from mqtt_broker import Broker

    b = Broker().start()
    yield b
    b.stop()


def free_port(kind: int = socket.SOCK_STREAM) -> int:
    with socket.socket(socket.AF_INET, kind) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# -- acceptance summary: one line per criterion ------------------------------------

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or "criterion" not in marker.kwargs:
        return
    entry = _criteria.setdefault(marker.kwargs["criterion"], {"title": marker.kwargs.get("title", item.name), "ok": True, "detail": ""})
    if rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["ran"] = True
        entry["detail"] = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        verdict = "PASS" if e["ok"] and e.get("ran") else "FAIL"
        line = f"criterion {n:2d} {verdict}: {e['title']}"
        if e["detail"]:
            line += f" ({e['detail']})"
        terminalreporter.write_line(line)
