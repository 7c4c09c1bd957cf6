"""Adjacency graphs, SAR precision matrices and the precomputed rho grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ConfigurationError, DataError


@dataclass
class SpatialGraph:
    """Symmetric adjacency over M areas with the first ``n_sampled`` sampled."""

    adjacency: np.ndarray
    n_sampled: int
    area_ids: list[str] | None = None

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DataError("adjacency must be square")
        if np.any(np.diag(A) != 0):
            raise DataError("adjacency has self-loops")
        if not np.array_equal(A != 0, (A != 0).T):
            raise DataError("adjacency structure must be symmetric")
        if not 0 < self.n_sampled <= A.shape[0]:
            raise DataError("n_sampled out of range")
        self.adjacency = (A != 0).astype(float)
        if self.area_ids is None:
            self.area_ids = [str(i + 1) for i in range(A.shape[0])]

    @property
    def M(self) -> int:
        return self.adjacency.shape[0]

    @property
    def m(self) -> int:
        return self.n_sampled

    @property
    def W(self) -> np.ndarray:
        """Row-standardised weights; isolated areas keep a zero row."""
        deg = self.adjacency.sum(axis=1, keepdims=True)
        return np.divide(self.adjacency, deg, out=np.zeros_like(self.adjacency), where=deg > 0)

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])

    @classmethod
    def from_edges(cls, M: int, edges, n_sampled: int, area_ids=None) -> "SpatialGraph":
        A = np.zeros((M, M))
        for i, j in edges:
            A[i, j] = A[j, i] = 1.0
        return cls(A, n_sampled, area_ids)

    @classmethod
    def from_coordinates(cls, coords, radius: float, n_sampled: int, area_ids=None) -> "SpatialGraph":
        coords = np.asarray(coords, dtype=float)
        d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
        A = (d < radius).astype(float)
        np.fill_diagonal(A, 0.0)
        return cls(A, n_sampled, area_ids)


def sar_precision(W: np.ndarray, rho: float) -> np.ndarray:
    """Q_all(rho) = (I - rho W)(I - rho W)^T."""
    B = np.eye(W.shape[0]) - rho * W
    return B @ B.T


@dataclass
class RhoGrid:
    """Precision factors of the sampled/non-sampled split at each grid point.

    ``q_sampled[r]`` is the prior precision of the sampled effects. With
    ``kind == "marginal"`` it is the Schur complement
    ``Q11 - Q12 Q22^{-1} Q21`` (the exact marginal of the SAR field); with
    ``kind == "block"`` it is the raw block ``Q11``.
    """

    points: np.ndarray            # (R,)
    q_sampled: np.ndarray         # (R, m, m)
    logdet: np.ndarray            # (R,)
    q22_chol: np.ndarray          # (R, m*, m*) lower Cholesky factor of Q22
    cond_factor: np.ndarray       # (R, m*, m) Q22^{-1} Q21
    kind: str = "marginal"

    @property
    def R(self) -> int:
        return self.points.size

    def quad_forms(self, v: np.ndarray) -> np.ndarray:
        """v' Q_sampled(r) v for every grid point."""
        return (self.q_sampled @ v) @ v


def precompute_rho_grid(graph: SpatialGraph, points=None, kind: str = "marginal") -> RhoGrid:
    """Build and factorise the SAR precision blocks on the rho grid."""
    if points is None:
        points = np.arange(1, 100) / 100.0
    points = np.asarray(points, dtype=float)
    W = graph.W
    m, M = graph.m, graph.M
    ms = M - m
    R = points.size
    q_s = np.empty((R, m, m))
    logdet = np.empty(R)
    l22 = np.empty((R, ms, ms))
    fac = np.empty((R, ms, m))
    for r, rho in enumerate(points):
        Q = sar_precision(W, rho)
        Q = 0.5 * (Q + Q.T)
        Q11, Q12, Q22 = Q[:m, :m], Q[:m, m:], Q[m:, m:]
        if ms:
            try:
                c22 = np.linalg.cholesky(Q22)
            except np.linalg.LinAlgError as exc:
                raise ConfigurationError(f"Q22 not SPD at rho={rho}") from exc
            l22[r] = c22
            F = cho_solve((c22, True), Q12.T)
            fac[r] = F
            qs = Q11 - Q12 @ F if kind == "marginal" else Q11.copy()
        else:
            qs = Q11.copy()
        qs = 0.5 * (qs + qs.T)
        try:
            L = np.linalg.cholesky(qs)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError(f"sampled-area precision not SPD at rho={rho}") from exc
        q_s[r] = qs
        logdet[r] = 2.0 * np.sum(np.log(np.diag(L)))
    if not np.all(np.isfinite(logdet)):
        raise ConfigurationError("non-finite log-determinant on the rho grid")
    return RhoGrid(points, q_s, logdet, l22, fac, kind)


def conditional_moments(grid: RhoGrid, r: int, u, mu: float, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the non-sampled effects given the sampled ones."""
    u = np.asarray(u, dtype=float)
    mean = mu - grid.cond_factor[r] @ (u - mu)
    L = grid.q22_chol[r]
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    return mean, (Linv.T @ Linv) / tau
