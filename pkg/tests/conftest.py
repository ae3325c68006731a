import numpy as np
import pytest

from svdeconv.bench import make_grid_image
from svdeconv.datagen import synthetic_cells
from svdeconv.estimator import DictionaryEstimator, build_dictionary


@pytest.fixture(scope="session")
def ref_texture_128():
    return synthetic_cells(128, seed=42)


@pytest.fixture(scope="session")
def dict_n1_128(ref_texture_128):
    """Focus-only dictionary over [0, 2] with a measured reference texture."""
    return build_dictionary(
        n_params=1, coeff_range=(0.0, 2.0), patch_size=128, reference=ref_texture_128
    )


@pytest.fixture(scope="session")
def est_n1_128(dict_n1_128):
    return DictionaryEstimator(dict_n1_128)


@pytest.fixture(scope="session")
def grid_gt():
    return make_grid_image()


@pytest.fixture(scope="session")
def dict_bench_126(grid_gt):
    """Benchmark-geometry dictionary: 126 px patches, grid-pattern reference."""
    return build_dictionary(
        n_params=1, coeff_range=(0.0, 2.0), patch_size=126, reference=grid_gt[:126, :126]
    )
