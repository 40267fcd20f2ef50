import numpy as np
import pytest

from src.config_loader import Config
from src.measures import Box, GaussianSpec, GridSpec, discretize_gaussian


@pytest.fixture
def line_grid():
    return GridSpec.from_bounds([0.0], [1.0], 64, 32)


@pytest.fixture
def coarse_grid():
    return GridSpec.from_bounds([0.0], [1.0], 16, 8)


@pytest.fixture
def translated_pair(line_grid):
    box = line_grid.box
    spec0 = GaussianSpec([0.35], 0.08, box)
    spec1 = GaussianSpec([0.65], 0.08, box)
    return discretize_gaussian(spec0, line_grid, 0), discretize_gaussian(spec1, line_grid, line_grid.n_time)


@pytest.fixture
def coarse_pair(coarse_grid):
    box = coarse_grid.box
    return (
        discretize_gaussian(GaussianSpec([0.4], 0.12, box), coarse_grid),
        discretize_gaussian(GaussianSpec([0.6], 0.12, box), coarse_grid),
    )


@pytest.fixture
def neural_box():
    return Box([-4.0], [4.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def write_config(tmp_path):
    """Write a YAML mapping to a temp file and return its path."""
    import yaml

    def _write(data, name="config.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data, sort_keys=False))
        return path

    return _write


@pytest.fixture
def make_config():
    def _make(data):
        return Config(data)

    return _make
