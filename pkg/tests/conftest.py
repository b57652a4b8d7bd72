import numpy as np
import pytest

from fedbprompt.data import Geometry, make_federation
from fedbprompt.model import ModelConfig

TINY = ModelConfig(image_h=16, image_w=8, patch=4, d=8, heads=2, layers=1, prompts_per_part=1, prompts_full=2)


def tiny_federation(seed=0, ids=4, imgs=6, domains=3):
    geo = Geometry(TINY.image_h, TINY.image_w, TINY.patch, TINY.channels)
    return make_federation(domains, ids, imgs, seed, geo, query_per_id=2)


@pytest.fixture(scope="session")
def tiny_fed():
    return tiny_federation()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
