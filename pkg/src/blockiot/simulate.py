"""Offline scenario runs: a private gateway, a scenario, and a summary.

Used by ``blockiot figures`` and the end-to-end tests. Everything runs
in-process on a simulated clock, so the output is reproducible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional

from .contracts import SummaryReport
from .devsim import DirectSender, RunReport, Scenario, run_scenario
from .runtime import Gateway, GatewayConfig

logger = logging.getLogger(__name__)

DEFAULT_SEED_HEX = "5eed" * 8


@dataclass
class OfflineRun:
    gateway: Gateway
    run: RunReport
    summary: Optional[SummaryReport]


class SimClock:
    """Manually advanced UTC clock."""

    def __init__(self, now: datetime):
        self.now = now

    def __call__(self) -> datetime:
        return self.now


def prepare(scenario: Scenario, workdir: str | Path, difficulty_bits: int = 8, seed_hex: str = DEFAULT_SEED_HEX, **overrides) -> GatewayConfig:
    """Write the registry and contract files a scenario needs; return a config."""
    work = Path(workdir)
    (work / "contracts").mkdir(parents=True, exist_ok=True)
    (work / "registry.json").write_text(json.dumps(scenario.registry_doc(), indent=1))
    if scenario.contracts:
        (work / "contracts" / f"{scenario.patient_id}.json").write_text(json.dumps(scenario.contract_doc(), indent=1))
    values = dict(
        data_dir=work / "data",
        registry_path=work / "registry.json",
        contract_dir=work / "contracts",
        http_listen="",
        difficulty_bits=difficulty_bits,
        keystore_seed=seed_hex,
    )
    values.update(overrides)
    return GatewayConfig(**values)


def run_offline(
    scenario: Scenario,
    workdir: str | Path,
    days: Optional[int] = None,
    difficulty_bits: int = 8,
    seed: Optional[int] = None,
) -> OfflineRun:
    """Run ``scenario`` through a fresh in-process gateway and publish a summary
    over ``days`` from the scenario start (default: the summarization window)."""
    if scenario.start is None:
        raise ValueError("offline runs need a scenario with a fixed start time")
    cfg = prepare(scenario, workdir, difficulty_bits)
    clock = SimClock(scenario.start)
    gw = Gateway(cfg, clock=clock).start(listen=False, sealer=False)
    run = run_scenario(scenario, DirectSender(gw.pipeline), gw.templates, seed=seed, speed=0)
    if days is None:
        windows = [c.get("window_days", 7) for c in scenario.contracts if c["contract_kind"] == "summarization"]
        days = windows[0] if windows else 7
    end = scenario.start + timedelta(days=days)
    clock.now = end
    summary = gw.publish_summary(scenario.patient_id, scenario.start, end)
    return OfflineRun(gw, run, summary)
