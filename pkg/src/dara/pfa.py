"""Prototypical feature alignment.

Same-class support maps are reweighted by their mean pairwise cosine
similarity, pooled into a class pool P, and the query map Q is
reconstructed from the pool by closed-form ridge regression:

    reconstruction = Q P^T (P P^T + lambda I)^-1 P

Class scores are a temperature softmax over the squared reconstruction
distances. The regularizer follows lambda = (pool rows / C) * beta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import as_matrix, solve_spd
from .errors import ShapeMismatch, ZeroNormFeature


@dataclass
class ReprojectionConfig:
    beta: float = 1.0
    clamp_negative_weights: bool = False  # clip cosines below 0 before pooling

    def lam(self, pool_rows: int, channels: int) -> float:
        return (pool_rows / channels) * self.beta


@dataclass
class MeasurementParams:
    gamma_log: float     # temperature stored as log to stay positive
    resolution: int      # spatial size R

    @classmethod
    def default(cls, resolution: int) -> "MeasurementParams":
        # gamma / R = 1 at init: unit-scale logits.
        return cls(gamma_log=float(np.log(resolution)), resolution=resolution)

    @property
    def gamma(self) -> float:
        return float(np.exp(self.gamma_log))


def recalibrate(
    class_features: list[np.ndarray], clamp_negative: bool = False
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Cosine-reweight same-class instances.

    Returns the weight row A (one entry per instance, the mean cosine
    similarity to the other instances) and the reweighted maps A_k * F_k.
    A single instance gets weight 1, consistent with cosine(F, F) = 1.
    """
    k = len(class_features)
    if k == 0:
        raise ValueError("recalibrate needs at least one feature map")
    flats = [f.ravel() for f in class_features]
    norms = [float(np.linalg.norm(f)) for f in flats]
    if min(norms) < 1e-12:
        raise ZeroNormFeature("a support feature has norm below 1e-12")
    if k == 1:
        return np.ones(1), [class_features[0] * 1.0]
    weights = np.empty(k)
    for i in range(k):
        sims = [
            float(flats[i] @ flats[j]) / (norms[i] * norms[j])
            for j in range(k)
            if j != i
        ]
        weights[i] = float(np.mean(sims))
    if clamp_negative:
        weights = np.maximum(weights, 0.0)
    return weights, [w * f for w, f in zip(weights, class_features)]


def build_pool(
    class_features: list[np.ndarray],
    use_recalibration: bool,
    pool_mode: str = "stacked",
    clamp_negative: bool = False,
) -> np.ndarray:
    """Class pool fed to the ridge solve.

    "stacked" keeps every (reweighted) map as its own row block, giving a
    (K*R) x C pool; "pooled" averages the reweighted maps into one R x C
    prototype (the division is by the instance count, not the weight sum).
    """
    if use_recalibration:
        _, maps = recalibrate(class_features, clamp_negative)
    else:
        maps = list(class_features)
    if pool_mode == "stacked":
        return np.vstack(maps)
    if pool_mode == "pooled":
        return sum(maps) / len(maps)
    raise ValueError(f"unknown pool_mode {pool_mode!r}")


@dataclass
class ReconstructionFactors:
    """Per-pool pieces of Q P^T (P P^T + lam I)^-1 P, solved once.

    `solved` is (P P^T + lam I)^-1 P, so reconstructing any stack of query
    rows is two products: (rows @ P^T) @ solved.
    """

    pool: np.ndarray    # (rows, C)
    solved: np.ndarray  # (rows, C)

    def reconstruct(self, query_rows: np.ndarray) -> np.ndarray:
        return (query_rows @ self.pool.T) @ self.solved


def reconstruction_factors(pool: np.ndarray, lam: float) -> ReconstructionFactors:
    pool = as_matrix(pool, "pool")
    gram = pool @ pool.T
    if lam > 0.0:
        gram = gram + lam * np.eye(pool.shape[0])
    return ReconstructionFactors(pool, solve_spd(gram, pool))


def ridge_reconstruct(pool: np.ndarray, query: np.ndarray, lam: float) -> np.ndarray:
    """Closed-form ridge reconstruction of `query` from `pool` rows."""
    query = as_matrix(query, "query")
    pool = as_matrix(pool, "pool")
    if query.shape[1] != pool.shape[1]:
        raise ShapeMismatch(
            f"query has {query.shape[1]} channels, pool has {pool.shape[1]}"
        )
    return reconstruction_factors(pool, lam).reconstruct(query)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def measure(
    reconstructions: list[np.ndarray],
    query: np.ndarray,
    params: MeasurementParams,
) -> np.ndarray:
    """Probability row over classes: softmax of -(gamma/R) * ||recon - Q||_F^2."""
    distances = np.array(
        [float(np.sum((recon - query) ** 2)) for recon in reconstructions]
    )
    logits = -(params.gamma / params.resolution) * distances
    return softmax_rows(logits.reshape(1, -1))[0]


def predict(probabilities: np.ndarray) -> int:
    """Argmax with ties resolved to the lowest class index."""
    return int(np.argmax(probabilities))


def init_reprojection(pools: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Learnable reprojection prototypes, copied from the class pools."""
    return {n: pool.copy() for n, pool in pools.items()}
