from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from roelab.groups import QuotientChain, cayley_graph, get_family  # noqa: E402
from roelab.coarse_space import assemble_box_space  # noqa: E402
from roelab.expander import ProbabilityMeasure  # noqa: E402

SL2_MODULI = (3, 5, 7, 11)
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def sl2():
    return get_family("sl2")


@pytest.fixture(scope="session")
def cyclic():
    return get_family("cyclic")


@pytest.fixture(scope="session")
def sl2_graphs(sl2):
    return {m: cayley_graph(sl2, m) for m in SL2_MODULI + (15, 21, 33)}


@pytest.fixture(scope="session")
def sl2_box(sl2):
    return assemble_box_space(QuotientChain(sl2, SL2_MODULI))


@pytest.fixture(scope="session")
def lazy_sl2(sl2):
    return ProbabilityMeasure.lazy(sl2.generators)


@pytest.fixture(scope="session")
def lazy_cyclic(cyclic):
    return ProbabilityMeasure.lazy(cyclic.generators)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
