import numpy as np
import pytest

from iagnn.data import Example, parse_interactions, preprocess
from iagnn.synth import generate_interactions


def random_example(rng, n_items=20, n_categories=5, max_len=15, item_category=None):
    """Random prefix whose categories follow ``item_category`` when given."""
    length = int(rng.integers(1, max_len + 1))
    items = rng.integers(0, n_items, length)
    if item_category is None:
        cats = rng.integers(0, n_categories, length)
    else:
        cats = item_category[items]
    label = int(rng.integers(0, n_items))
    tc = int(item_category[label]) if item_category is not None else int(rng.integers(0, n_categories))
    return Example(tuple(int(v) for v in items), tuple(int(c) for c in cats), tc, label)


@pytest.fixture
def fig2():
    # v1..v4 -> 0..3, c1..c3 -> 0..2
    return Example((0, 1, 2, 3), (0, 1, 2, 0), 2, 5)


@pytest.fixture(scope="session")
def small_corpus():
    rows = generate_interactions(n_sessions=600, n_items=150, n_categories=5, seed=3)
    parsed = parse_interactions(",".join(map(str, r)) for r in rows)
    return preprocess(parsed.sessions)


ACCEPTANCE: list[str] = []


def record(number, title, passed, detail, informative=False):
    """Register one acceptance line; printed in the terminal summary."""
    tag = "INFO" if informative else ("PASS" if passed else "FAIL")
    ACCEPTANCE.append(f"[{tag}] criterion {number}: {title} -- {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
