from __future__ import annotations

import pytest

from treecutoff.chain import ChainOperator
from treecutoff.topology import TreeFamilySpec, build_family_tree

ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def g2():
    return build_family_tree(TreeFamilySpec(2))


@pytest.fixture(scope="session")
def c2(g2):
    return ChainOperator(g2)


@pytest.fixture(scope="session")
def g3():
    return build_family_tree(TreeFamilySpec(3))


@pytest.fixture(scope="session")
def c3(g3):
    return ChainOperator(g3)


@pytest.fixture(scope="session")
def dense2(c2):
    from treecutoff.mixing import decompose_chain
    return decompose_chain(c2)


@pytest.fixture(scope="session")
def worst2(g2):
    from treecutoff.mixing import worst_case_profile
    return worst_case_profile(g2)


@pytest.fixture(scope="session")
def worst3(g3):
    from treecutoff.mixing import worst_case_profile
    return worst_case_profile(g3)


@pytest.fixture(scope="session")
def mc2(c2, g2):
    """10^4 hitting-time replicates from n_2 to path vertex 0."""
    from treecutoff.montecarlo import MCConfig, sample_hitting_time
    from treecutoff.topology import PATH, VertexRef
    cfg = MCConfig(seed=20240101, replicates=10_000)
    return sample_hitting_time(c2, VertexRef(PATH, g2.path_length), VertexRef(PATH, 0), cfg)


@pytest.fixture(scope="session")
def acceptance():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
