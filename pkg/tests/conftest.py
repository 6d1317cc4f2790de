import sys
from pathlib import Path

from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


import pytest  # noqa: E402

from grouprec.synthworld import WorldConfig, generate_world  # noqa: E402


@pytest.fixture(scope="session")
def default_world():
    return generate_world(WorldConfig(), seed=0)


@pytest.fixture(scope="session")
def small_world():
    cfg = WorldConfig(n_archetypes=20, n_users=400, n_items=300, n_categories=20, train_impressions=4000)
    return generate_world(cfg, seed=1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = sorted(getattr(mod, "VERDICTS", []), key=lambda l: int(l.split()[1].rstrip(":")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
