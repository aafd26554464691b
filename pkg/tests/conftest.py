import re

import numpy as np
import pytest

from vhskit.model import KeypointRegressor, LayerSpec, ModelConfig
from vhskit.rng import derive_rng


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::" not in nodeid:
                continue
            if getattr(report, "when", "call") != "call" and outcome == "passed":
                continue
            name = nodeid.split("::")[-1]
            status = "PASS" if outcome == "passed" else "FAIL"
            if rows.get(name) != "FAIL":
                rows[name] = status
    if not rows:
        return

    def criterion_order(name):
        match = re.search(r"criterion_(\d+)", name)
        return int(match.group(1)) if match else 99

    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(rows, key=criterion_order):
        terminalreporter.write_line(f"{rows[name]}  {name}")


TINY_CONFIG = ModelConfig(
    input_size=16,
    hidden=(LayerSpec("conv", 4), LayerSpec("dense", 8)),
    dropout_rate=0.2,
)


@pytest.fixture(scope="session")
def phantom_root(tmp_path_factory):
    """One small synthetic dataset on disk, shared across test modules."""
    from vhskit.data import save_dataset
    from vhskit.phantoms import make_phantom_bundle

    root = tmp_path_factory.mktemp("data") / "phantoms"
    dataset = make_phantom_bundle(n_train=8, n_valid=3, n_test=3, n_unlabeled=5,
                                  side=16, seed=13)
    save_dataset(dataset, root)
    return root


@pytest.fixture
def tiny_model():
    return KeypointRegressor(TINY_CONFIG, rng=derive_rng(11, "init"))


@pytest.fixture
def tiny_images():
    rng = derive_rng(12, "images")
    return rng.random((5, 1, 16, 16))


class StubModel:
    """Plays back scripted (12,) outputs in order, one row per image seen.

    Stands in for the regressor wherever only forward outputs matter, so
    statistics can be checked against hand arithmetic.
    """

    def __init__(self, rows, input_size: int = 8, dropout_rate: float = 0.2):
        self.rows = np.asarray(rows, dtype=np.float64).reshape(-1, 12)
        self.config = ModelConfig(
            input_size=input_size,
            hidden=(LayerSpec("dense", 4),),
            dropout_rate=dropout_rate,
        )
        self.cursor = 0

    def forward(self, images, mode=None, rng=None, sample_rngs=None):
        images = np.asarray(images)
        batch = 1 if images.ndim == 2 else images.shape[0]
        out = self.rows[self.cursor: self.cursor + batch]
        assert out.shape[0] == batch, "stub script exhausted"
        self.cursor += batch
        return out[0] if images.ndim == 2 else out


def make_points(vhs: float, ef: float = 0.25) -> np.ndarray:
    """Axis-aligned layout with |AB| + |CD| = vhs * ef / 6, split evenly."""
    half = vhs * ef / 12.0
    return np.array([
        [0.5 - half / 2, 0.6], [0.5 + half / 2, 0.6],
        [0.5, 0.6 - half / 2], [0.5, 0.6 + half / 2],
        [0.1, 0.1], [0.1 + ef, 0.1],
    ])
