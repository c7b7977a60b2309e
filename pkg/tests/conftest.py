from __future__ import annotations

import os

import pytest
from hypothesis import HealthCheck, settings

import acceptance_log
from cace_ipw.data import ColumnSchema, load_dataset
from cace_ipw.logit import ARM_CONTROL, ARM_TREATMENT, fit_logit

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=30,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("suite")

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

TRIAL_SCHEMA = ColumnSchema(
    cluster="cluster",
    treat="treat",
    receipt="receipt",
    outcome="y",
    covariates_wls=("x1", "x2"),
    covariates_logit_t=("x1", "x2"),
    covariates_logit_c=("x1", "x2"),
)


@pytest.fixture(scope="session")
def repo_root() -> str:
    return REPO_ROOT


@pytest.fixture(scope="session")
def trial_m30():
    return load_dataset(os.path.join(REPO_ROOT, "data", "trial_m30.csv"), TRIAL_SCHEMA)


@pytest.fixture(scope="session")
def trial_m30_fits(trial_m30):
    return fit_logit(trial_m30, ARM_TREATMENT), fit_logit(trial_m30, ARM_CONTROL)


@pytest.fixture(scope="session")
def trial_tiny():
    return load_dataset(os.path.join(REPO_ROOT, "data", "trial_tiny.csv"), TRIAL_SCHEMA)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
