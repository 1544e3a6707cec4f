import numpy as np
import pytest

from compface.oracle import enroll, load_gallery_dir, split_gallery
from compface.parts import load_library
from compface.procedural import gen_gallery, gen_procedural_parts

TOY_COUNTS = (1, 4, 4, 4, 3, 3, 2, 2)
TINY_COUNTS = (1, 3, 3, 3, 1, 1, 1, 1)  # 27 states
GALLERY_SEED = 3
PARTS_SEED = 7


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    gen_gallery(root / "gallery", n_identities=10, n_images=4, seed=GALLERY_SEED)
    gen_procedural_parts(TOY_COUNTS, PARTS_SEED, root / "parts")
    gen_procedural_parts(TINY_COUNTS, PARTS_SEED, root / "tiny")
    return root


@pytest.fixture(scope="session")
def toy_images(toy_dir):
    return load_gallery_dir(toy_dir / "gallery")


@pytest.fixture(scope="session")
def toy_split(toy_images):
    return split_gallery(toy_images, 3)


@pytest.fixture(scope="session")
def toy_gallery(toy_split):
    enrolled, _ = toy_split
    return enroll(enrolled, 10, 10, 10, seed=0)


@pytest.fixture(scope="session")
def toy_library(toy_dir):
    return load_library(toy_dir / "parts" / "manifest.json")


@pytest.fixture(scope="session")
def tiny_library(toy_dir):
    return load_library(toy_dir / "tiny" / "manifest.json")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(ACCEPTANCE_LINES[number])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
