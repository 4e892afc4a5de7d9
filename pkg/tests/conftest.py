import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from treex import PointCloud, TerrainSpec, TreeSpec, SyntheticScene, generate_synthetic  # noqa: E402

# lines reported by the acceptance tests, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def two_tree_data():
    scene = SyntheticScene(
        extent=(12.0, 8.0),
        trees=(TreeSpec(3.0, 4.0, 0.3), TreeSpec(9.0, 4.0, 0.4, taper=0.01)),
        terrain=TerrainSpec(0.3, 5.0, 0.02),
    )
    return scene, generate_synthetic(scene, 2)


def flat_cloud(n: int = 2000, extent: float = 10.0, seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    return PointCloud(np.column_stack([rng.uniform(0, extent, (n, 2)), np.zeros(n)]))
