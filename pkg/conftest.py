import json
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from rng_tools import SeedSpec  # noqa: E402


@pytest.fixture
def seed():
    return SeedSpec(20190611, 7)


@pytest.fixture
def write_config(tmp_path, monkeypatch):
    """Write an experiment config into tmp_path and return its path."""
    monkeypatch.delenv("DRL_OUTPUT_DIR", raising=False)

    def _write(experiment, params=None, name="config.json", **extra):
        body = {"experiment": experiment, "params": params or {}, "output_dir": str(tmp_path / "out")}
        body.update(extra)
        path = tmp_path / name
        path.write_text(json.dumps(body), encoding="utf-8")
        return path

    return _write
