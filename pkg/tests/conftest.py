from __future__ import annotations

import json
import time
from pathlib import Path

import pytest
from hypothesis import settings

from msgcontrol.protocol import load_protocol

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ORACLES = Path(__file__).parent / "oracles" / "frozen.json"
SMOKE_CONFIG = Path(__file__).parents[1] / "src" / "msgcontrol" / "data" / "trial_smoke.toml"
DEFAULT_CONFIG = Path(__file__).parents[1] / "src" / "msgcontrol" / "data" / "trial_default.toml"


@pytest.fixture(scope="session")
def frozen() -> dict:
    return json.loads(ORACLES.read_text())


@pytest.fixture(scope="session")
def spec_a():
    return load_protocol("protocol_a")


@pytest.fixture(scope="session")
def spec_b():
    return load_protocol("protocol_b")


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """One timed smoke-config simulate invocation shared by several tests."""
    from msgcontrol.cli import main

    out = tmp_path_factory.mktemp("smoke_run")
    start = time.perf_counter()
    code = main(["simulate", "--config", str(SMOKE_CONFIG), "--out", str(out), "--jobs", "1"])
    return {"code": code, "out": out, "elapsed": time.perf_counter() - start}
