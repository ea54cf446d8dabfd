import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    """Default synthetic scene (seed 7, 64 train / 32 query, 128 px), built once."""
    from scenead.fixture import make_fixture

    root = tmp_path_factory.mktemp("fixture") / "scene"
    make_fixture(root, seed=7)
    return root


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """Small scene (8 train / 6 query, 64 px) for tests that only need the plumbing."""
    from scenead.fixture import make_fixture

    root = tmp_path_factory.mktemp("small") / "scene"
    make_fixture(root, seed=3, n_train_poses=8, n_query_poses=6, image_size=64)
    return root


@pytest.fixture
def small_copy(small_root, tmp_path):
    """A private, writable copy of the small scene."""
    import shutil

    dst = tmp_path / "scene"
    shutil.copytree(small_root, dst)
    return dst


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""

    def record(name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
