import sys

import pytest

from ctrlsynth import scenegen


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    """Four 16x16 scenes on disk; shared read-only by several test modules."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    scenegen.gen_dataset(4, 123, out, scenegen.SceneConfig(resolution=16))
    return out


def pytest_terminal_summary(terminalreporter):
    results = {}
    for mod in list(sys.modules.values()):
        results.update(getattr(mod, "ACCEPTANCE_RESULTS", None) or {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
