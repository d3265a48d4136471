from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from conav.scene import load_episodes, load_scene, load_scenes  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def fixture8():
    return load_scene(FIXTURES / "scenes" / "fixture8.json")


@pytest.fixture(scope="session")
def line3():
    return load_scene(FIXTURES / "scenes" / "line3.json")


@pytest.fixture(scope="session")
def rgbd_scene():
    return load_scene(FIXTURES / "scenes" / "room_rgbd.json")


@pytest.fixture(scope="session")
def pack():
    scenes = load_scenes([FIXTURES / "scenes" / "pack"])
    return scenes, load_episodes(FIXTURES / "episodes" / "pack20.json", scenes)


@pytest.fixture(scope="session")
def all_scenes():
    return load_scenes([FIXTURES / "scenes", FIXTURES / "scenes" / "pack"])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
