from __future__ import annotations

import numpy as np
import pytest

from mcpfl.config import DEFAULT, apply_overrides
from mcpfl.datagen import MODALITIES, MultiModalData
from mcpfl.fusion import FusionPlan, SchemaDescriptor


def make_plan(dims=None, latents=None, absent=()):
    dims = dims or {"im": 5, "emr": 4, "iot": 3}
    latents = latents or {"im": 2, "emr": 2, "iot": 1}
    agreed = tuple(SchemaDescriptor(m, 1, dims[m], latents[m]) for m in MODALITIES if m in dims)
    return FusionPlan(agreed, frozenset(absent))


def make_batch(rng, n=12, dims=None, missing=0.0, zero=False):
    dims = dims or {"im": 5, "emr": 4, "iot": 3}
    feats, pres = {}, {}
    for m, d in dims.items():
        present = rng.random(n) >= missing
        x = np.zeros((n, d)) if zero else rng.standard_normal((n, d))
        feats[m] = np.where(present[:, None], x, 0.0)
        pres[m] = present
    labels = rng.integers(0, 2, n)
    return MultiModalData(feats, pres, labels, np.arange(n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def plan():
    return make_plan()


@pytest.fixture
def small_cfg():
    """A fast experiment: 600 examples, 8 clients, 6 rounds, one seed."""
    return apply_overrides(DEFAULT, {
        "data.n_total": 600,
        "experiment.n_clients": 8,
        "experiment.rounds": 6,
        "experiment.seeds": [1],
        "sched.min_roster": 2,
        "sched.random_k": 5,
    })


_criteria: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else "error"
    _criteria[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {title}: {status} ({detail})")
