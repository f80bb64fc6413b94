import pytest

from convgap.corpus import make_synthetic_corpus
from convgap.synthetic import SynthSpec, make_paired_checkpoints

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance-gate criterion number")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    failed = call.excinfo is not None and call.when in ("setup", "call")
    prev = _ACCEPTANCE.get(n, ("PASS", title))[0]
    if call.when == "call" or failed:
        status = "FAIL" if failed or prev == "FAIL" else "PASS"
        _ACCEPTANCE[n] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")


@pytest.fixture(scope="session")
def synth_pair():
    return make_paired_checkpoints(SynthSpec())


@pytest.fixture(scope="session")
def small_corpus():
    return make_synthetic_corpus(n_prompts=24, n_tokens=12, seed=3, n_clusters=8)
