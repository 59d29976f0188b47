import json
from pathlib import Path

import numpy as np
import pytest

from refverify.backends.scripted import FixtureDetector, ScriptedVlm
from refverify.geometry import BoundingBox
from refverify.render import RasterImage, load_image

TESTS = Path(__file__).parent
FIXTURES = TESTS / "fixtures"
GOLDEN = TESTS / "golden"
SCENARIOS = ["unique_true", "tie_break", "fallback", "abstain_none", "no_proposals"]


def load_scenario(name):
    root = FIXTURES / name
    image = load_image(root / "scene.png")
    detector = FixtureDetector.from_file(root / "detections.json")
    vlm = ScriptedVlm.from_file(root / "vlm_script.json")
    return image, detector, vlm


def golden(name):
    return json.loads((GOLDEN / name).read_text())


@pytest.fixture
def black100():
    return RasterImage.blank(100, 100, name="black.png")


@pytest.fixture
def noise_image():
    rng = np.random.default_rng(0)
    return RasterImage(rng.integers(0, 256, (60, 80, 3), dtype=np.uint8), "noise.png")


def box(*xyxy):
    return BoundingBox(*map(float, xyxy))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
