import json
import os
import sys
from pathlib import Path

import pytest

sys.path.insert(
    0,
    os.path.abspath(
        os.path.join(os.path.dirname(__file__), ".."),
    ),
)

PROBLEMS_DIR = Path(__file__).resolve().parent.parent / "problems"


@pytest.fixture
def problems_dir() -> Path:
    """Directory of the shipped example problem files."""
    return PROBLEMS_DIR


@pytest.fixture
def load_problem():
    """Load a shipped problem file as a plain dict."""

    def load(name: str) -> dict:
        return json.loads((PROBLEMS_DIR / f"{name}.json").read_text(encoding="utf-8"))

    return load


@pytest.fixture
def write_problem(tmp_path):
    """Write a problem dict to a temporary JSON file and return its path."""

    def write(data: dict, name: str = "problem.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return write
