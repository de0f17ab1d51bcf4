"""Session fixtures for the default end-to-end scenario.

The attacked model and the full defense run are expensive, so they are
built once and shared by the scenario and acceptance tests.  Acceptance
verdicts are collected here and echoed in the terminal summary.
"""

import time

import pytest

from ims import pipeline
from ims.experiment import ExperimentConfig, build_scenario
from ims.model import parameter_bytes

VERDICTS = {}


def record_verdict(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])


class DefaultRun:
    """Attack, defend and evaluate the default scenario once."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.scenario = build_scenario(cfg)
        self.model, self.attack_report = pipeline.attack(cfg, self.scenario)
        self.theta_before = parameter_bytes(self.model)
        t0 = time.perf_counter()
        self.result, self.defense_seconds = pipeline.defend(cfg, self.model, self.scenario)
        self.row, self.x_hat = pipeline.evaluate(cfg, self.model, self.result.masks, self.scenario,
                                                 seconds=self.defense_seconds)
        self.total_seconds = time.perf_counter() - t0 + self.attack_report.seconds
        self.theta_after = parameter_bytes(self.model)


@pytest.fixture(scope="session")
def default_cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def default_run(default_cfg):
    return DefaultRun(default_cfg)
