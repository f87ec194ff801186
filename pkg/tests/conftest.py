from __future__ import annotations

import numpy as np
import pytest

from neighborfl.data import write_stream
from neighborfl.synthetic import clustered_network


def write_metadata(path, registry) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("device_id,lat,lon\n")
        for d in registry:
            fh.write(f"{d},{registry[d].lat!r},{registry[d].lon!r}\n")


def write_dataset(folder, registry, stream):
    meta = folder / "meta.csv"
    data = folder / "stream.csv"
    write_metadata(meta, registry)
    write_stream(data, stream)
    return meta, data


@pytest.fixture
def small_network():
    return clustered_network(devices_per_cluster=(3, 2), rows=24 + 12 * 29, seed=3)


@pytest.fixture
def small_files(tmp_path, small_network):
    return write_dataset(tmp_path, *small_network)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed and not report.skipped):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "failed": [], "skipped": [], "passed": []})
    if report.failed:
        entry["failed"].append(item.name)
    elif report.skipped:
        entry["skipped"].append(item.name)
    elif report.when == "call":
        entry["passed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        if e["failed"]:
            status = "FAIL"
        elif e["passed"]:
            status = "PASS"
        else:
            status = "SKIP"
        extra = f" (skipped: {', '.join(e['skipped'])})" if e["skipped"] else ""
        terminalreporter.write_line(f"criterion {number}: {status}  {e['title']}{extra}")
