"""Mobility and POI similarity between regions, and triplet mining."""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetBundle
from .errors import ContractError

EPSILON = 1e-8


class DegenerateSimilarityWarning(UserWarning):
    """A similarity row is fully tied; triplets fall back to id order."""


def mobility_distance(m_i, m_j) -> float:
    (in_i, out_i), (in_j, out_j) = m_i, m_j
    return math.sqrt((in_i - in_j) ** 2 + (out_i - out_j) ** 2)


def poi_distance(p_i, p_j) -> float:
    p_i = np.asarray(p_i, dtype=np.float64)
    p_j = np.asarray(p_j, dtype=np.float64)
    if p_i.shape != p_j.shape:
        raise ContractError(f"POI vectors differ in length: {p_i.shape} vs {p_j.shape}")
    return float(np.sqrt(np.sum((p_i - p_j) ** 2)))


def inverse_distance(dist, epsilon: float = EPSILON):
    """``1 / (dist + epsilon)``: the similarity used for both mobility and POI."""
    if epsilon <= 0:
        raise ContractError("epsilon must be > 0")
    return 1.0 / (np.asarray(dist, dtype=np.float64) + epsilon)


def mobility_similarity(dist: float, epsilon: float = EPSILON) -> float:
    return float(inverse_distance(dist, epsilon))


def poi_similarity(dist: float, epsilon: float = EPSILON) -> float:
    return float(inverse_distance(dist, epsilon))


@dataclass
class SimilarityMatrix:
    kind: str
    values: np.ndarray
    ids: list[int]
    epsilon: float = EPSILON

    def __len__(self) -> int:
        return len(self.ids)

    def lam(self, a: int, b: int) -> float:
        pos = {rid: i for i, rid in enumerate(self.ids)}
        return float(self.values[pos[a], pos[b]])


def _pairwise_euclidean(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def similarity_matrix(bundle: DatasetBundle, kind: str, epsilon: float = EPSILON, normalize: bool = False) -> SimilarityMatrix:
    """Pairwise inverse-distance similarities for ``kind`` in {"mobility", "poi"}.

    With ``normalize`` the POI count vectors are scaled to unit sum first.
    """
    if not bundle.regions:
        raise ContractError("empty bundle")
    if kind == "mobility":
        feats = bundle.mobility_matrix()
    elif kind == "poi":
        feats = bundle.poi_matrix()
        if normalize:
            totals = feats.sum(axis=1, keepdims=True)
            feats = feats / np.where(totals == 0, 1.0, totals)
    else:
        raise ContractError(f"unknown similarity kind {kind!r}")
    values = inverse_distance(_pairwise_euclidean(feats), epsilon)
    values = 0.5 * (values + values.T)
    np.fill_diagonal(values, 1.0 / epsilon)
    return SimilarityMatrix(kind=kind, values=values, ids=list(bundle.ids), epsilon=epsilon)


# ---------------------------------------------------------------------------
# mining


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    lambda_pos: float
    lambda_neg: float
    modality: str


@dataclass
class MiningPolicy:
    top_k_positive: int = 5
    negative_pool_quantile: float = 0.5
    triplets_per_anchor: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.top_k_positive < 1:
            raise ContractError("top_k_positive must be >= 1")
        if not 0 < self.negative_pool_quantile < 1:
            raise ContractError("negative_pool_quantile must be in (0, 1)")
        if self.triplets_per_anchor < 1:
            raise ContractError("triplets_per_anchor must be >= 1")


MODALITY_FOR_KIND = {"mobility": "SV", "poi": "RV"}


def _ranked_others(row: np.ndarray, anchor: int) -> np.ndarray:
    others = np.array([j for j in range(len(row)) if j != anchor])
    # stable sort on -lambda keeps ascending position (id order) among ties
    return others[np.argsort(-row[others], kind="stable")]


def mine_triplets(matrix: SimilarityMatrix, policy: MiningPolicy | None = None, modality: str | None = None) -> list[Triplet]:
    """Draw ``triplets_per_anchor`` (anchor, positive, negative) triples per region.

    Positives come uniformly from the ``top_k_positive`` most similar other
    regions; negatives uniformly from the least similar
    ``negative_pool_quantile`` of the row, restricted to candidates strictly
    less similar than every positive. Each anchor draws from its own RNG
    stream, seeded by (seed, anchor position).
    """
    policy = policy or MiningPolicy()
    policy.validate()
    modality = modality or MODALITY_FOR_KIND.get(matrix.kind, matrix.kind)
    n = len(matrix)
    if n < policy.top_k_positive + 2:
        raise ContractError(f"need at least top_k_positive + 2 = {policy.top_k_positive + 2} regions, got {n}")
    k = policy.top_k_positive
    n_neg = min(max(1, int(math.floor(policy.negative_pool_quantile * (n - 1)))), n - 1 - k)
    values = matrix.values
    triplets: list[Triplet] = []
    degenerate = False
    for a in range(n):
        ranked = _ranked_others(values[a], a)
        pos_pool = ranked[:k]
        neg_pool = ranked[len(ranked) - n_neg :]
        floor_pos = values[a, pos_pool].min()
        strict = neg_pool[values[a, neg_pool] < floor_pos]
        if strict.size:
            neg_pool = strict
        else:
            degenerate = True
        rng = np.random.default_rng([policy.seed, a])
        for _ in range(policy.triplets_per_anchor):
            p = int(pos_pool[rng.integers(len(pos_pool))])
            q = int(neg_pool[rng.integers(len(neg_pool))])
            triplets.append(
                Triplet(
                    anchor=matrix.ids[a],
                    positive=matrix.ids[p],
                    negative=matrix.ids[q],
                    lambda_pos=float(values[a, p]),
                    lambda_neg=float(values[a, q]),
                    modality=modality,
                )
            )
    if degenerate:
        warnings.warn("similarity rows with tied positive/negative pools; id-order fallback used", DegenerateSimilarityWarning, stacklevel=2)
    return triplets


TRIPLET_HEADER = ["modality", "anchor", "positive", "negative", "lambda_pos", "lambda_neg"]


def write_triplets(path: str | os.PathLike, triplets: list[Triplet]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRIPLET_HEADER)
        for t in triplets:
            writer.writerow([t.modality, t.anchor, t.positive, t.negative, repr(t.lambda_pos), repr(t.lambda_neg)])


def read_triplets(path: str | os.PathLike) -> list[Triplet]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRIPLET_HEADER:
            raise ContractError(f"unexpected triplets.csv header {reader.fieldnames}")
        return [
            Triplet(
                anchor=int(row["anchor"]),
                positive=int(row["positive"]),
                negative=int(row["negative"]),
                lambda_pos=float(row["lambda_pos"]),
                lambda_neg=float(row["lambda_neg"]),
                modality=row["modality"],
            )
            for row in reader
        ]
