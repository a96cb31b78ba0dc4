from pathlib import Path

import pytest

from smattn.cli import load_dataset
from smattn.config import load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TOY = CONFIGS / "toy.toml"
BENCHMARK = CONFIGS / "drift_benchmark.toml"

# acceptance results collected by tests/test_acceptance.py, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def toy_cfg():
    return load_config(TOY)


@pytest.fixture(scope="session")
def toy_data(toy_cfg):
    return load_dataset(toy_cfg, 0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
