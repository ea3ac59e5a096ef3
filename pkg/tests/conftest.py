from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from skillopt.advisor import ScriptedAdvisor
from skillopt.evaluation import SyntheticLandscape
from skillopt.package import derive_structure, extract_content, load_package

FIXTURES = Path(__file__).parent / "fixtures"
SEED_DIR = FIXTURES / "orqa-skill"
REF = "references/question-types.md"


def read_yaml(name: str) -> dict:
    return yaml.safe_load((FIXTURES / name).read_text(encoding="utf-8"))


@pytest.fixture
def seed():
    return load_package(SEED_DIR)


@pytest.fixture
def theta0(seed):
    return derive_structure(seed)


@pytest.fixture
def phi0(seed, theta0):
    return extract_content(seed, theta0)


@pytest.fixture
def landscape():
    return SyntheticLandscape.from_mapping(read_yaml("landscape.yaml"))


@pytest.fixture
def playbook():
    return read_yaml("playbook.yaml")


@pytest.fixture
def scripted(playbook):
    return ScriptedAdvisor(playbook)


def skill_md(name: str = "orqa", description: str = "d", body: str = "## Workflow\nsteps") -> bytes:
    return f"---\nname: {name}\ndescription: {description}\n---\n{body}".encode()


def enumerate_optimum(theta, phi, actions, landscape, depth: int = 2) -> float:
    """Best noiseless reward over every sequence of at most ``depth`` actions from ``actions``."""
    from skillopt.edits import apply_edit
    from skillopt.errors import EditError
    from skillopt.refine import align_content

    best = landscape.noiseless(theta, phi)
    frontier = [(theta, phi)]
    for _ in range(depth):
        nxt = []
        for s, c in frontier:
            for a in actions:
                try:
                    out = apply_edit(s, a)
                except EditError:
                    continue
                c2 = align_content(c, s, out.new_structure, out.carried_note)
                best = max(best, landscape.noiseless(out.new_structure, c2))
                nxt.append((out.new_structure, c2))
        frontier = nxt
    return best
