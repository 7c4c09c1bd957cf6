"""Choosing the number of components from k-means relabelling of beta draws."""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .gibbs import run_chain
from .model import GroupedPanel, ModelConfig, PosteriorDraws
from .spatial import SpatialGraph

N_RESTARTS = 20
MAX_ITER = 100
TOL = 1e-8


@dataclass
class MatchingReport:
    K: int
    fraction: float                 # sum criterion: sum of labels == K(K+1)/2
    exact_fraction: float           # labels form a permutation of 1..K
    sum_ok: np.ndarray              # (S,) bool
    exact_ok: np.ndarray            # (S,) bool
    centroids: np.ndarray | None
    failed: bool = False
    message: str = ""


def _label_checks(labels: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    r = labels + 1
    sum_ok = r.sum(axis=1) == K * (K + 1) // 2
    exact_ok = np.all(np.sort(r, axis=1) == np.arange(1, K + 1), axis=1)
    return sum_ok, exact_ok


def matching_fraction(draws: PosteriorDraws, seed: int = 0) -> MatchingReport:
    """Cluster all S*K beta draws into K groups and check each sweep's labels."""
    beta = np.asarray(draws.beta)
    S, K = beta.shape[0], beta.shape[1]
    if S < 2:
        raise ValueError("matching fraction needs at least two draws")
    if K == 1:
        ones = np.ones(S, dtype=bool)
        return MatchingReport(1, 1.0, 1.0, ones, ones, beta.mean(axis=(0, 1))[None])
    pooled = beta.reshape(S * K, -1)
    if np.unique(pooled, axis=0).shape[0] < K:
        empty = np.zeros(S, dtype=bool)
        return MatchingReport(K, float("nan"), float("nan"), empty, empty, None, True,
                              "fewer distinct beta draws than clusters")
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        try:
            km = KMeans(K, init="k-means++", n_init=N_RESTARTS, max_iter=MAX_ITER, tol=TOL, random_state=seed)
            labels = km.fit_predict(pooled).reshape(S, K)
        except ConvergenceWarning as exc:
            empty = np.zeros(S, dtype=bool)
            return MatchingReport(K, float("nan"), float("nan"), empty, empty, None, True, str(exc))
    sum_ok, exact_ok = _label_checks(labels, K)
    return MatchingReport(K, float(sum_ok.mean()), float(exact_ok.mean()), sum_ok, exact_ok, km.cluster_centers_)


def _fit_and_match(args):
    panel, config, graph, K = args
    cfg = replace(config, K=K)
    draws = run_chain(panel, cfg, graph)
    return matching_fraction(draws, seed=cfg.seed)


def select_k(
    panel: GroupedPanel,
    config: ModelConfig,
    graph: SpatialGraph | None,
    k_range,
    threshold: float = 0.999,
    jobs: int = 1,
) -> tuple[list[MatchingReport], int]:
    """Fit one chain per K and recommend the largest K whose fraction clears ``threshold``."""
    ks = list(k_range)
    if config.variant == "spatial":
        raise ValueError("K selection runs on a single-chain variant")
    tasks = [(panel, config, graph, K) for K in ks]
    if jobs > 1 and len(ks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_fit_and_match, tasks))
    else:
        reports = [_fit_and_match(t) for t in tasks]
    ok = [r.K for r in reports if not r.failed and r.fraction >= threshold]
    return reports, (max(ok) if ok else min(ks))
