import numpy as np
import pytest

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, part, ok, detail)`` for the end-of-run summary."""
    store = request.config.stash[_ACCEPTANCE_KEY]

    def record(criterion: int, part: str, ok: bool, detail: str) -> None:
        store.setdefault(criterion, {})[part] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(store):
        parts = store[crit]
        ok = all(p[0] for p in parts.values())
        detail = "; ".join(f"{name}: {'pass' if p[0] else 'FAIL'} ({p[1]})" for name, p in parts.items())
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'} | {detail}")
