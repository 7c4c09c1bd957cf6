import math

import numpy as np
import pytest

from stmix.errors import DataError
from stmix.spatial import SpatialGraph, conditional_moments, precompute_rho_grid, sar_precision


def ring(M, m=None):
    return SpatialGraph.from_edges(M, [(i, (i + 1) % M) for i in range(M)], m or M)


def test_empty_graph_identity():
    g = SpatialGraph(np.zeros((3, 3)), 3)
    grid = precompute_rho_grid(g, [0.01])
    assert np.allclose(grid.q_sampled[0], np.eye(3))
    assert grid.logdet[0] == pytest.approx(0.0, abs=1e-14)


def test_two_area_hand_computation():
    g = SpatialGraph.from_edges(2, [(0, 1)], 2)
    grid = precompute_rho_grid(g, [0.5])
    assert np.allclose(grid.q_sampled[0], [[1.25, -1.0], [-1.0, 1.25]], atol=1e-15)
    assert grid.logdet[0] == pytest.approx(math.log(0.5625), abs=1e-14)
    assert grid.logdet[0] == pytest.approx(-0.5754, abs=1e-4)


def test_grid_symmetric_and_marginal_matches_covariance_block():
    r = np.random.default_rng(0)
    coords = r.uniform(-1, 1, (12, 2))
    g = SpatialGraph.from_coordinates(coords, 0.8, 8)
    grid = precompute_rho_grid(g, np.arange(1, 100) / 100)
    assert np.max(np.abs(grid.q_sampled - np.swapaxes(grid.q_sampled, 1, 2))) < 1e-14
    for k, rho in enumerate(grid.points[::20]):
        idx = 20 * k
        Q = sar_precision(g.W, rho)
        cov = np.linalg.inv(Q)
        assert np.allclose(np.linalg.inv(cov[:8, :8]), grid.q_sampled[idx], atol=1e-8)
    block = precompute_rho_grid(g, [0.3], kind="block")
    assert np.allclose(block.q_sampled[0], sar_precision(g.W, 0.3)[:8, :8])


def test_row_standardised_w():
    g = ring(5)
    assert np.allclose(g.W.sum(axis=1), 1.0)
    iso = SpatialGraph(np.zeros((2, 2)), 2)
    assert np.all(iso.W == 0)


def test_graph_validation():
    with pytest.raises(DataError):
        SpatialGraph(np.eye(2), 2)
    A = np.zeros((2, 2))
    A[0, 1] = 1
    with pytest.raises(DataError):
        SpatialGraph(A, 2)
    with pytest.raises(DataError):
        SpatialGraph(np.zeros((2, 2)), 0)


def test_conditional_moments_dense_oracle():
    g = SpatialGraph.from_edges(3, [(0, 1), (1, 2)], 2)
    grid = precompute_rho_grid(g, [0.4])
    u, mu, tau = np.array([0.3, -0.7]), 0.2, 2.5
    Q = tau * sar_precision(g.W, 0.4)
    S = np.linalg.inv(Q)
    mean_o = mu + S[2:, :2] @ np.linalg.solve(S[:2, :2], u - mu)
    cov_o = S[2:, 2:] - S[2:, :2] @ np.linalg.solve(S[:2, :2], S[:2, 2:])
    mean, cov = conditional_moments(grid, 0, u, mu, tau)
    assert np.allclose(mean, mean_o, atol=1e-12)
    assert np.allclose(cov, cov_o, atol=1e-12)
