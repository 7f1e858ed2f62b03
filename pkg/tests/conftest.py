"""Shared fixtures and the acceptance report.

The acceptance tests record one line per criterion; the summary hook prints
them after the run. The desk-scale training runs they share are built once
per session into a temporary directory — or, when the environment variable
``HCLAB_ACCEPTANCE_CACHE`` names a directory, cached there and reused across
sessions (finished runs carry a config fingerprint and rebuild on mismatch).
"""

import os

import pytest

import _desk

_ACCEPTANCE: dict = {}


def record_criterion(num: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE[num] = (passed, detail)


@pytest.fixture
def acceptance():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[num]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE: criterion {num} {verdict} - {detail}")


@pytest.fixture(scope="session")
def desk_cache(tmp_path_factory):
    configured = os.environ.get("HCLAB_ACCEPTANCE_CACHE")
    if configured:
        os.makedirs(configured, exist_ok=True)
        return configured
    return str(tmp_path_factory.mktemp("desk_cache"))


@pytest.fixture(scope="session")
def desk_corpus(desk_cache):
    return _desk.corpus_path(desk_cache)


@pytest.fixture(scope="session")
def desk_runs(desk_cache):
    return _desk.ensure_all(desk_cache)
