"""Shared fixtures: the trained desk-scale setup and corpus directories.

The desk model trains once per session (about four minutes) and backs
the acceptance suite plus the CLI checks that need calibrated
conditionals.
"""

import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import make_desk_corpus, perturb_model  # noqa: E402

from flowcodec.flow import FlowConfig, FlowModel  # noqa: E402
from flowcodec.imageio import write_ppm  # noqa: E402
from flowcodec.training import TrainConfig, train  # noqa: E402

DESK_TRAIN = dict(lambda_rd=1.0, steps=500, batch_size=8, patch=32, seed=7)
DESK_ARCH = dict(in_channels=3, steps=2, blocks=1, hidden=16, seed=42)


@pytest.fixture(scope="session")
def desk_setup():
    """100-image corpus, 10 held-out images, and a 500-step trained model."""
    corpus = make_desk_corpus(np.random.default_rng(1000), 100, 32)
    held_out = make_desk_corpus(np.random.default_rng(2000), 10, 32)
    model = FlowModel(FlowConfig(**DESK_ARCH))
    cfg = TrainConfig(**DESK_TRAIN)
    history = train(model, corpus, cfg)
    return SimpleNamespace(model=model, corpus=corpus, held_out=held_out,
                           history=history, cfg=cfg)


@pytest.fixture(scope="session")
def quick_model_path(tmp_path_factory):
    """Untrained-but-active model on disk for CLI plumbing tests."""
    model = FlowModel(FlowConfig(**DESK_ARCH))
    perturb_model(model, np.random.default_rng(777), scale=0.01)
    path = tmp_path_factory.mktemp("model") / "quick.nfc"
    model.save(path)
    return path


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Six small PPM images for CLI corpus arguments."""
    directory = tmp_path_factory.mktemp("corpus")
    for i, img in enumerate(make_desk_corpus(np.random.default_rng(555), 6, 16)):
        write_ppm(directory / f"img{i:02d}.ppm", img)
    return directory


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance" in rep.nodeid and rep.when == "call":
                name = rep.nodeid.split("::")[-1]
                rows.append((name, "PASS" if status == "passed" else "FAIL"))
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, status in sorted(rows):
            terminalreporter.write_line(f"{status}  {name}")
