import pytest

from mvattrib.core import tokenize_session
from mvattrib.embed import EmbedTrainConfig, attach_queries, train_prod2vec
from mvattrib.shopworld import MockSearchEngine, WorldConfig, build_catalog, generate_base_sessions


class World:
    def __init__(self, config, n_sessions, embed):
        self.config = config
        self.catalog = build_catalog(config)
        self.engine = MockSearchEngine(self.catalog)
        self.sessions = generate_base_sessions(self.catalog, config, n_sessions, engine=self.engine)
        self.space = train_prod2vec([tokenize_session(s) for s in self.sessions], embed)
        attach_queries(self.space, self.engine)


@pytest.fixture(scope="session")
def small_world():
    """A 5x50 shop with a quickly trained space, shared by the unit tests."""
    return World(WorldConfig(n_categories=5, products_per_category=50, seed=11), 20_000,
                 EmbedTrainConfig(dim=32, epochs=10, seed=11))


# -- acceptance report -------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the acceptance criterion numbered in the test name."""
    number = int(request.node.name.split("_")[2])

    def record(title, checks, detail=""):
        ok = all(checks.values())
        failed = ", ".join(k for k, v in checks.items() if not v)
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
        line += f" ({detail})" if detail else ""
        line += f" failed: {failed}" if failed else ""
        ACCEPTANCE[number] = line
        print(line)
        return ok

    yield record
    ACCEPTANCE.setdefault(number, f"criterion {number} FAIL: {request.node.name} raised before reporting")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
