"""Shared fixtures: synthetic models, their tables and a few rendered scenes.

Acceptance tests record one result per criterion through the ``acceptance``
fixture; the results are listed in a section of the terminal summary.
"""

import numpy as np
import pytest

from ppf.evaluate import synth_object
from ppf.pipeline import PipelineParams
from ppf.synth import SynthConfig, synth_scene

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}  {'PASS' if ok else 'FAIL'}  {title}: {detail}")


@pytest.fixture
def acceptance(request):
    """``record(number, title, passed, detail)`` stores one criterion's outcome."""
    results = request.config.stash[ACCEPTANCE]

    def record(number, title, passed, detail):
        results[number] = (title, bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}: {detail}")
        return bool(passed)

    return record


@pytest.fixture(scope="session")
def box_object():
    return synth_object("box", PipelineParams())


@pytest.fixture(scope="session")
def bracket_object():
    return synth_object("bracket", PipelineParams())


@pytest.fixture(scope="session")
def box_scene(box_object):
    return synth_scene(SynthConfig(model="box", seed=3), box_object.dense)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
