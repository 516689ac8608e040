import json
from pathlib import Path

import pytest

from mgmoe.cleans import write_clean_set
from mgmoe.config import config_from_dict


def tiny_config(root: Path, **over) -> dict:
    cfg = {
        "clean_dir": str(root / "clean"),
        "corpus_dir": str(root / "corpus"),
        "models_dir": str(root / "models"),
        "reports_dir": str(root / "reports"),
        "crop_size": 32,
        "crops_per_clean": 4,
        "clean_splits": {"train": 12, "val": 1, "test": 3},
        "level_counts": [1, 2, 4],
        "expert": {"steps": 60, "child_steps": 30, "batch": 4, "patch": 16, "eval_every": 10,
                   "channels": [3, 8, 3]},
        "router": {"steps": 60},
        "sweep_fineness": [[1], [1, 2]],
        "sweep_granularity": [[1], [1, 2]],
    }
    cfg.update(over)
    return cfg


def write_config(root: Path, **over) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    path = root / "cfg.json"
    path.write_text(json.dumps(tiny_config(root, **over)))
    return path


@pytest.fixture(scope="session")
def clean_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cleans")
    write_clean_set(d, 16, seed=0, size=48)
    return d


@pytest.fixture(scope="session")
def tiny_built(tmp_path_factory, clean_dir):
    """A synthesized and built tiny run shared by read-only pipeline tests."""
    from mgmoe.pipeline import cmd_build, cmd_synth
    root = tmp_path_factory.mktemp("tiny")
    path = write_config(root, clean_dir=str(clean_dir))
    cfg = config_from_dict(json.loads(path.read_text()))
    cmd_synth(cfg)
    cmd_build(cfg)
    return cfg, path


# acceptance verdict lines, echoed at the end of the session
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
