import numpy as np
import pytest

from clause.harness import SyntheticTaskConfig, generate_tasks, load_metaqa
from clause.kg import load_triples

CASE_KB = """\
Moving Violations|starred_actors|Brian Backer
Moving Violations|starred_actors|Jennifer Tilly
Moving Violations|starred_actors|John Murray
Moving Violations|directed_by|Neal Israel
Moving Violations|release_year|1985
Bachelor Party|directed_by|Neal Israel
Bachelor Party|starred_actors|Tom Hanks
Bachelor Party|release_year|1984
"""

CASE_QUESTION = "Who co-starred with [Brian Backer]?\tJennifer Tilly|John Murray"


@pytest.fixture
def case_kb():
    return load_triples(CASE_KB)


@pytest.fixture
def case_dataset(case_kb):
    return load_metaqa(case_kb, [CASE_QUESTION], hop=2)


@pytest.fixture(scope="session")
def small_tasks():
    return generate_tasks(SyntheticTaskConfig(n_entities=80, n_examples=60, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
