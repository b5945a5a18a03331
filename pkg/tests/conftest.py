import json
import re

import pytest

from cxrkit.labeler import default_lexicon

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def lexicon():
    return default_lexicon()


@pytest.fixture
def write_jsonl(tmp_path):
    def _write(name, records):
        path = tmp_path / name
        path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
        return path
    return _write


@pytest.fixture
def acceptance():
    """Record a criterion outcome; a summary line per criterion prints at session end."""
    def _record(criterion, passed, detail=""):
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        return passed
    return _record


def _order(record):
    m = re.match(r"C(\d+)", record[0])
    return (int(m.group(1)) if m else 0, record[0])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_ACCEPTANCE, key=_order):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}")
