import hypothesis
import pytest

hypothesis.settings.register_profile("default", max_examples=100, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture(scope="session")
def small_corpus():
    from jointspo.synthetic import SyntheticConfig, generate_synthetic_corpus
    return generate_synthetic_corpus(SyntheticConfig(sizes=(200, 50, 50), seed=3))


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(name: str, passed: bool, detail: str = ""):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
