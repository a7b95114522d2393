import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cherry.synthetic import write_corpus  # noqa: E402


@pytest.fixture
def write_json(tmp_path):
    def _write(obj, name="data.json"):
        path = tmp_path / name
        path.write_text(json.dumps(obj), encoding="utf-8")
        return path
    return _write


@pytest.fixture(scope="session")
def corpus_1000(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("corpus") / "corpus.json", n=1000, seed=0)


from hypothesis import settings  # noqa: E402

settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")


def pytest_terminal_summary(terminalreporter):
    results = sys.modules.get("test_acceptance")
    if results is None or not results.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(results.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
