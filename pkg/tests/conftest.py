import logging

import pytest
import torch

from fsrg.data import load_dataset
from fsrg.synth import SynthSpec, synth_generate
from fsrg.templates import expand_prompts, load_template

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def loc_dir(tmp_path_factory):
    return synth_generate(SynthSpec(count=160, image_size=32, seed=5, prior=0.12),
                          tmp_path_factory.mktemp("loc"))


@pytest.fixture(scope="session")
def sev_dir(tmp_path_factory):
    return synth_generate(SynthSpec(task="severity", count=120, image_size=32, seed=6),
                          tmp_path_factory.mktemp("sev"))


@pytest.fixture(scope="session")
def loc_tree(loc_dir):
    return load_template(loc_dir / "template.json")


@pytest.fixture(scope="session")
def loc_data(loc_dir, loc_tree):
    return load_dataset(loc_dir / "labels.jsonl", loc_dir / "images", expand_prompts(loc_tree),
                        resolution=32)


@pytest.fixture(scope="session")
def sev_tree(sev_dir):
    return load_template(sev_dir / "template.json")


@pytest.fixture(scope="session")
def sev_data(sev_dir, sev_tree):
    return load_dataset(sev_dir / "labels.jsonl", sev_dir / "images", expand_prompts(sev_tree),
                        resolution=32)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.INFO)


# -- acceptance summary -----------------------------------------------------------

_CRITERIA: dict[str, tuple[int, str]] = {}
_OUTCOMES: dict[int, list[str]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = (int(mark.args[0]), str(mark.args[1]))


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    number, _ = _CRITERIA[report.nodeid]
    if report.when == "call" or report.outcome != "passed":
        _OUTCOMES.setdefault(number, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    titles = {}
    for number, title in _CRITERIA.values():
        titles.setdefault(number, title)
    terminalreporter.section("acceptance criteria")
    for number in sorted(titles):
        outcomes = _OUTCOMES.get(number, [])
        if not outcomes:
            verdict = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            verdict = "PASS"
        else:
            verdict = "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict:7s} {titles[number]}")
