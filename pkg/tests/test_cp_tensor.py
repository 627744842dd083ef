import numpy as np
import pytest

from tomography.lib.cp_tensor import (
    CPFactorPair,
    assemble_design,
    cp_compose,
    matrix_rank,
    parameter_count,
    truncated_svd_factors,
    vec_factor,
)
from tomography.lib.errors import ConfigError, DimensionMismatchError
from tomography.lib.radon_geometry import ScanGeometry, build_system_tensor, forward_project


@pytest.fixture(scope="module")
def system():
    return build_system_tensor(ScanGeometry.standard(grid_size=8, num_angles=10, num_beamlets=13))


def random_pair(rng, K, R):
    return CPFactorPair(rng.standard_normal((K, R)), rng.standard_normal((K, R)))


def relative_error(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_cp_compose_sums_outer_products():
    rng = np.random.default_rng(0)
    f = random_pair(rng, 5, 3)
    expected = sum(np.outer(f.W1[:, r], f.W2[:, r]) for r in range(3))
    assert np.allclose(cp_compose(f), expected)


def test_factor_pair_validation():
    with pytest.raises(DimensionMismatchError):
        CPFactorPair(np.zeros((4, 2)), np.zeros((4, 3)))
    with pytest.raises(DimensionMismatchError):
        CPFactorPair(np.zeros(4), np.zeros(4))
    with pytest.raises(ConfigError):
        CPFactorPair(np.zeros((4, 0)), np.zeros((4, 0)))
    with pytest.raises(ConfigError):
        CPFactorPair(np.full((2, 1), np.nan), np.zeros((2, 1)))


def test_replace_accepts_vectorized_factor():
    rng = np.random.default_rng(1)
    f = random_pair(rng, 4, 2)
    W = rng.standard_normal((4, 2))
    g = f.replace(1, vec_factor(W))
    assert np.array_equal(g.W1, W)
    assert np.array_equal(g.W2, f.W2)
    # rank blocks: entries 0..K-1 are column 0
    assert np.array_equal(vec_factor(W)[:4], W[:, 0])
    with pytest.raises(ConfigError):
        f.factor(3)


@pytest.mark.parametrize("mode", [1, 2])
def test_design_matrix_matches_forward_model(system, mode):
    rng = np.random.default_rng(10 + mode)
    for _ in range(50):
        f = random_pair(rng, 8, 3)
        A = assemble_design(system, f.factor(3 - mode), mode)
        assert A.shape == (system.geometry.num_rays, 8 * 3)
        expected = forward_project(system, cp_compose(f)).values
        assert relative_error(A @ vec_factor(f.factor(mode)), expected) <= 1e-12


def test_design_with_vector_is_rank_one(system):
    rng = np.random.default_rng(2)
    u, v = rng.standard_normal(8), rng.standard_normal(8)
    A = assemble_design(system, v, 1)
    assert A.shape == (system.geometry.num_rays, 8)
    expected = forward_project(system, np.outer(u, v)).values
    assert relative_error(A @ u, expected) <= 1e-12


def test_design_rejects_bad_inputs(system):
    with pytest.raises(DimensionMismatchError):
        assemble_design(system, np.zeros((5, 2)), 1)
    with pytest.raises(ConfigError):
        assemble_design(system, np.zeros((8, 2)), 3)


def test_matrix_rank():
    rng = np.random.default_rng(3)
    assert matrix_rank(np.outer(rng.random(6), rng.random(6))) == 1
    assert matrix_rank(np.zeros((4, 4))) == 0
    assert matrix_rank(np.eye(5)) == 5
    low = rng.standard_normal((10, 3)) @ rng.standard_normal((3, 10))
    assert matrix_rank(low) == 3
    with pytest.raises(ConfigError):
        matrix_rank(np.array([[np.inf]]))


def test_parameter_count_examples():
    assert parameter_count(128, 1) == 256
    assert parameter_count(128, 3) == 768
    assert parameter_count(64, 5) == 640
    with pytest.raises(ConfigError):
        parameter_count(0, 1)


def test_truncated_svd_reproduces_low_rank_image():
    rng = np.random.default_rng(4)
    W = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 6))
    f = truncated_svd_factors(W, 2)
    assert f.rank == 2
    assert np.allclose(cp_compose(f), W)


def test_truncated_svd_pads_extra_ranks():
    W = np.diag([3.0, 2.0])
    f = truncated_svd_factors(W, 4)
    assert f.W1.shape == (2, 4)
    assert not np.any(f.W1[:, 2:])
    assert np.allclose(cp_compose(f), W)
