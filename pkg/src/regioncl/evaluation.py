"""Downstream evaluation: MLP regression on log indicators, PCA + k-means
cluster analysis, and the modality ablation report."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .dataset import SPLITS, DatasetBundle, SplitAssignment, log_transform
from .errors import ContractError
from .optim import AdamState, adam_step
from .tensor import Tensor


class UndefinedMetricWarning(UserWarning):
    pass


def r_squared(y_true, y_pred) -> float:
    """``1 - SS_res / SS_tot``; NaN with a warning when ``y_true`` is constant."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ContractError(f"r_squared needs equal nonzero lengths, got {y_true.shape} and {y_pred.shape}")
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        warnings.warn("R^2 undefined for constant targets", UndefinedMetricWarning, stacklevel=2)
        return float("nan")
    return 1.0 - float(np.sum((y_true - y_pred) ** 2)) / ss_tot


def rmse(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ContractError(f"rmse needs equal lengths, got {y_true.shape} and {y_pred.shape}")
    return math.sqrt(float(np.mean((y_true - y_pred) ** 2)))


# ---------------------------------------------------------------------------
# MLP regression


@dataclass
class MLPConfig:
    hidden: int = 64
    lr: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 400
    patience: int = 10
    seed: int = 0


@dataclass
class MLP:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def params(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def __call__(self, x) -> Tensor:
        h = T.relu(T.affine(T.as_tensor(x), self.W1, self.b1))
        return T.reshape(T.affine(h, self.W2, self.b2), (-1,))


def init_mlp(d_in: int, hidden: int, seed: int = 0) -> MLP:
    rng = np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    return MLP(
        W1=T.parameter((rng.standard_normal((d_in, hidden)) * np.sqrt(2.0 / d_in)).astype(dtype)),
        b1=T.parameter(np.zeros(hidden, dtype=dtype)),
        # zero output layer: the epoch-0 model predicts the training mean, so
        # early stopping can fall back to it when nothing generalises
        W2=T.parameter(np.zeros((hidden, 1), dtype=dtype)),
        b2=T.parameter(np.zeros(1, dtype=dtype)),
    )


def mse_loss(model: MLP, x, y) -> Tensor:
    return T.mean(T.square(T.sub(model(x), T.as_tensor(y))))


@dataclass
class RegressionReport:
    indicator: str
    r2: dict[str, float]
    rmse: dict[str, float]
    predictions: list[tuple[int, str, float, float]] = field(default_factory=list)
    best_epoch: int = 0


def _matrix(embeddings: Mapping[int, np.ndarray], ids) -> np.ndarray:
    missing = [i for i in ids if i not in embeddings]
    if missing:
        raise ContractError(f"no embedding for regions {missing[:5]}")
    return np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in ids])


def train_mlp_regressor(
    embeddings: Mapping[int, np.ndarray],
    targets: Mapping[int, float],
    splits: SplitAssignment,
    config: MLPConfig | None = None,
    indicator: str = "target",
    log_targets: bool = True,
) -> RegressionReport:
    """Fit a one-hidden-layer ReLU MLP on the training split.

    Inputs and (log) targets are standardised with training statistics. The
    weights kept are those from the epoch with the lowest validation RMSE;
    training stops after ``patience`` epochs without improvement.
    """
    config = config or MLPConfig()
    ids = {s: splits.ids(s) for s in SPLITS}
    for s, members in ids.items():
        if not members:
            raise ContractError(f"empty {s} split")
    dtype = T.get_default_dtype()
    X = {s: _matrix(embeddings, ids[s]) for s in SPLITS}
    raw = {s: np.array([targets[i] for i in ids[s]], dtype=np.float64) for s in SPLITS}
    Y = {s: log_transform(v) if log_targets else v for s, v in raw.items()}
    mu, sd = X["train"].mean(axis=0), X["train"].std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    y_mu, y_sd = Y["train"].mean(), Y["train"].std()
    y_sd = y_sd if y_sd > 1e-12 else 1.0
    Xs = {s: ((X[s] - mu) / sd).astype(dtype) for s in SPLITS}
    Ys = {s: ((Y[s] - y_mu) / y_sd).astype(dtype) for s in SPLITS}

    model = init_mlp(Xs["train"].shape[1], config.hidden, seed=config.seed)
    plist = model.params()
    state = AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed)

    def predict(s: str) -> np.ndarray:
        with T.no_grad():
            return model(Xs[s]).data.astype(np.float64) * y_sd + y_mu

    best = (rmse(Y["validation"], predict("validation")), 0, [p.data.copy() for p in plist])
    stale = 0
    n = len(Xs["train"])
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            loss = mse_loss(model, Xs["train"][rows], Ys["train"][rows])
            grads = T.backward(loss, wrt=plist)
            adam_step(plist, [grads[p] for p in plist], state)
        val = rmse(Y["validation"], predict("validation"))
        if val < best[0]:
            best = (val, epoch, [p.data.copy() for p in plist])
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    for p, saved in zip(plist, best[2]):
        p.data[...] = saved

    report = RegressionReport(indicator=indicator, r2={}, rmse={}, best_epoch=best[1])
    for s in SPLITS:
        pred = predict(s)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedMetricWarning)
            report.r2[s] = r_squared(Y[s], pred)
        report.rmse[s] = rmse(Y[s], pred)
        report.predictions.extend((rid, s, float(t), float(p)) for rid, t, p in zip(ids[s], Y[s], pred))
    return report


# ---------------------------------------------------------------------------
# PCA and k-means


@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    eigenvalues: np.ndarray
    variance_ratio: np.ndarray
    mean: np.ndarray
    rank_deficient: bool = False


def _power_iteration(C: np.ndarray, v0: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, float]:
    v = v0 / np.linalg.norm(v0)
    for _ in range(max_iter):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        if w @ v < 0:
            w = -w
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return v, float(v @ C @ v)


def pca_project(points, k: int = 2, tol: float = 1e-9, max_iter: int = 10000, seed: int = 0) -> PCAResult:
    """Project mean-centred rows onto the top-``k`` covariance eigenvectors,
    found one at a time by power iteration with deflation."""
    X = np.asarray(points, dtype=np.float64)
    n, d = X.shape
    if n < k + 1:
        raise ContractError(f"PCA to {k} components needs at least {k + 1} points, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / (n - 1)
    total = float(np.trace(C))
    rng = np.random.default_rng(seed)
    comps, eigs = [], []
    deflated = C.copy()
    rank_deficient = False
    for _ in range(min(k, d)):
        v0 = rng.standard_normal(d)
        for u in comps:
            v0 -= (v0 @ u) * u
        v, lam = _power_iteration(deflated, v0, tol, max_iter)
        if lam <= 1e-12 * max(total, 1e-300):
            rank_deficient = True
            break
        for u in comps:
            v -= (v @ u) * u
        v /= np.linalg.norm(v)
        comps.append(v)
        eigs.append(lam)
        deflated = deflated - lam * np.outer(v, v)
    if len(comps) < k:
        rank_deficient = True
    components = np.array(comps).reshape(len(comps), d)
    eigenvalues = np.array(eigs)
    ratio = eigenvalues / total if total > 0 else np.zeros_like(eigenvalues)
    return PCAResult(Xc @ components.T, components, eigenvalues, ratio, mean, rank_deficient)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list[float]
    n_iter: int


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.sum((X[:, None, :] - C[None, :, :]) ** 2, axis=-1)


def kmeans(points, k: int = 3, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until the assignment stops changing."""
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if n < k:
        raise ContractError(f"k-means with k={k} needs at least {k} points")
    rng = np.random.default_rng(seed)
    centroids = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(X, np.array(centroids)).min(axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids.append(X[idx])
    C = np.array(centroids)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, C)
        new = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                C[j] = X[members].mean(axis=0)
            else:
                far = int(d2[np.arange(n), labels].argmax())
                C[j] = X[far]
                labels[far] = j
    inertia = float(_sq_dists(X, C)[np.arange(n), labels].sum())
    return KMeansResult(labels, C, inertia, history, it)


def adjusted_rand_index(labels_a, labels_b) -> float:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ContractError("label arrays differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        x = np.asarray(x, dtype=np.float64)
        return float(np.sum(x * (x - 1) / 2))

    sum_ij = comb2(table)
    sum_a = comb2(table.sum(axis=1))
    sum_b = comb2(table.sum(axis=0))
    total = comb2(len(a))
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return (sum_ij - expected) / (max_index - expected)


@dataclass
class ClusterReport:
    ids: list[int]
    coords: np.ndarray
    labels: np.ndarray
    ari: float | None
    pca: PCAResult


def cluster_report(embeddings: Mapping[int, np.ndarray], k: int = 3, seed: int = 0, planted: Mapping[int, int] | None = None) -> ClusterReport:
    ids = sorted(embeddings)
    pca = pca_project(_matrix(embeddings, ids), k=2, seed=seed)
    km = kmeans(pca.coords, k=k, seed=seed)
    ari = None
    if planted is not None:
        ari = adjusted_rand_index([planted[i] for i in ids], km.labels)
    return ClusterReport(ids, pca.coords, km.labels, ari, pca)


# ---------------------------------------------------------------------------
# ablations

ABLATION_VARIANTS = ("poi_only", "sv_only", "rv_only", "add_svrv", "fusion_svrv", "concat", "full")


@dataclass
class AblationRow:
    variant: str
    indicator: str
    seed: int
    split: str
    r2: float
    rmse: float


def evaluate_variants(
    tables: Mapping[str, Mapping[int, np.ndarray]],
    bundle: DatasetBundle,
    splits: SplitAssignment,
    config: MLPConfig | None = None,
    seed: int = 0,
    indicators: Sequence[str] | None = None,
) -> list[AblationRow]:
    """Regress every indicator from every variant's table; one row per (variant, indicator, split)."""
    config = config or MLPConfig(seed=seed)
    indicators = list(indicators or bundle.indicator_names())
    rows = []
    for variant in tables:
        for name in indicators:
            targets = {r.region_id: r.indicators[name] for r in bundle.regions}
            rep = train_mlp_regressor(tables[variant], targets, splits, config, indicator=name)
            rows.extend(AblationRow(variant, name, seed, s, rep.r2[s], rep.rmse[s]) for s in SPLITS)
    return rows


@dataclass
class AblationReport:
    rows: list[AblationRow]
    variants: list[str]
    mean_r2: dict[str, float]
    wins: np.ndarray  # wins[i, j]: seeds where variant i's mean test R^2 >= variant j's
    seeds: list[int]

    def per_seed_mean(self, variant: str) -> dict[int, float]:
        out = {}
        for seed in self.seeds:
            vals = [r.r2 for r in self.rows if r.variant == variant and r.seed == seed and r.split == "test"]
            out[seed] = float(np.mean(vals))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "mean_test_R2"] + [f"wins_vs_{v}" for v in self.variants])
        for i, v in enumerate(self.variants):
            w.writerow([v, f"{self.mean_r2[v]:.6f}"] + [int(x) for x in self.wins[i]])
        return buf.getvalue()


def ablation_suite(rows: list[AblationRow], variants: Sequence[str] | None = None) -> AblationReport:
    """Aggregate per-seed variant evaluations into mean test R^2 and a pairwise win matrix."""
    variants = list(variants or [v for v in ABLATION_VARIANTS if any(r.variant == v for r in rows)])
    present = {r.variant for r in rows}
    missing = [v for v in variants if v not in present]
    if missing:
        raise ContractError(f"no evaluation rows for variants {missing}")
    seeds = sorted({r.seed for r in rows})
    per_seed = {}
    for v in variants:
        for s in seeds:
            vals = [r.r2 for r in rows if r.variant == v and r.seed == s and r.split == "test"]
            per_seed[v, s] = float(np.mean(vals))
    mean_r2 = {v: float(np.mean([per_seed[v, s] for s in seeds])) for v in variants}
    wins = np.zeros((len(variants), len(variants)), dtype=np.int64)
    for i, a in enumerate(variants):
        for j, b in enumerate(variants):
            if i != j:
                wins[i, j] = sum(per_seed[a, s] >= per_seed[b, s] for s in seeds)
    return AblationReport(rows, variants, mean_r2, wins, seeds)
