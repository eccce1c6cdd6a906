import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cfalign import data, models  # noqa: E402


class Lab:
    """Small trained setup shared by the unit tests (seconds, not minutes)."""

    def __init__(self):
        cfg = data.DatasetConfig(n_samples=1200, seed=11, group_pair=["blob_size", "texture"])
        self.dataset = data.build_dataset(cfg)
        self.encoder, self.decoder, self.ae_history = models.train_autoencoder(
            self.dataset, models.AutoencoderParams(epochs=8, seed=2))
        self.classifiers = {}
        for a in ("blob_size", "texture", "frame"):
            self.classifiers[a], _ = models.train_classifier(
                self.dataset, a, models.ClassifierParams(epochs=6, seed=3))


@pytest.fixture(scope="session")
def lab():
    return Lab()


# one PASS/FAIL line per acceptance criterion, shown after the test run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
