"""Shared fixtures."""

import os

import pytest


@pytest.fixture(autouse=True, scope="session")
def isolated_log_dir(tmp_path_factory):
    """Send rotating log files to a temporary directory for the whole run."""
    previous = os.environ.get("HAPTIC_ACT_LOG_DIR")
    os.environ["HAPTIC_ACT_LOG_DIR"] = str(tmp_path_factory.mktemp("logs"))
    yield
    if previous is None:
        os.environ.pop("HAPTIC_ACT_LOG_DIR", None)
    else:
        os.environ["HAPTIC_ACT_LOG_DIR"] = previous
