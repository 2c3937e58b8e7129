"""Attention-weighted fusion of street-view and remote-sensing embeddings,
aligned with POI text embeddings by an InfoNCE objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ContractError, TrainingDivergedError
from .optim import AdamState, adam_step
from .tensor import Tensor

logger = logging.getLogger(__name__)

VARIANTS = ("add_svrv", "fusion_svrv", "concat", "full")


@dataclass
class FusionParams:
    c: Tensor
    M: Tensor
    b: Tensor
    adapter: Tensor | None = None

    def tensors(self) -> list[Tensor]:
        out = [self.c, self.M, self.b]
        if self.adapter is not None:
            out.append(self.adapter)
        return out

    def named(self) -> dict[str, np.ndarray]:
        named = {"fusion/c": self.c.data, "fusion/M": self.M.data, "fusion/b": self.b.data}
        if self.adapter is not None:
            named["fusion/adapter"] = self.adapter.data
        return named

    @classmethod
    def from_named(cls, tensors: Mapping[str, np.ndarray]) -> "FusionParams":
        dtype = T.get_default_dtype()
        adapter = tensors.get("fusion/adapter")
        return cls(
            c=T.parameter(tensors["fusion/c"].astype(dtype)),
            M=T.parameter(tensors["fusion/M"].astype(dtype)),
            b=T.parameter(tensors["fusion/b"].astype(dtype)),
            adapter=None if adapter is None else T.parameter(adapter.astype(dtype)),
        )


@dataclass
class AlignmentConfig:
    batch_size: int = 32
    temperature: float = 1.0
    epochs: int = 30
    lr: float = 5e-4
    hidden_dim: int | None = None
    text_adapter: bool = True
    symmetric: bool = False
    freeze_encoders: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ContractError("alignment batch_size must be >= 2")
        if self.temperature <= 0:
            raise ContractError("temperature must be > 0")


def init_fusion(d: int, d_text: int, config: AlignmentConfig | None = None, seed: int = 0) -> FusionParams:
    config = config or AlignmentConfig()
    rng = np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    d_h = config.hidden_dim or d
    adapter = None
    if config.text_adapter or d_text != d:
        adapter = T.parameter((rng.standard_normal((d_text, d)) / np.sqrt(d_text)).astype(dtype))
    return FusionParams(
        c=T.parameter((rng.standard_normal(d_h) / np.sqrt(d_h)).astype(dtype)),
        M=T.parameter((rng.standard_normal((d_h, d)) / np.sqrt(d)).astype(dtype)),
        b=T.parameter(np.zeros(d_h, dtype=dtype)),
        adapter=adapter,
    )


def attention_logit(params: FusionParams, e) -> Tensor:
    """``c . relu(M e + b)``; ``e`` may be one d-vector or an (n, d) batch."""
    e = T.as_tensor(e)
    if e.shape[-1] != params.M.shape[1]:
        raise ContractError(f"embedding dim {e.shape[-1]} != fusion input dim {params.M.shape[1]}")
    batch = e if e.ndim == 2 else T.reshape(e, (1, -1))
    hidden = T.relu(T.affine(batch, T.transpose(params.M), params.b))
    alpha = T.matmul(hidden, params.c)
    return alpha if e.ndim == 2 else T.reshape(alpha, ())


def attentive_fusion(params: FusionParams, e_sv, e_rv):
    """Return ``(e_image, beta_sv, beta_rv)``; works per vector or per batch of rows."""
    e_sv, e_rv = T.as_tensor(e_sv), T.as_tensor(e_rv)
    single = e_sv.ndim == 1
    sv = T.reshape(e_sv, (1, -1)) if single else e_sv
    rv = T.reshape(e_rv, (1, -1)) if single else e_rv
    logits = T.stack([attention_logit(params, sv), attention_logit(params, rv)], axis=1)
    beta = T.softmax_row(logits)
    b_sv = T.take(beta, (slice(None), slice(0, 1)))
    b_rv = T.take(beta, (slice(None), slice(1, 2)))
    fused = T.add(T.mul(b_sv, sv), T.mul(b_rv, rv))
    if single:
        return T.reshape(fused, (-1,)), T.reshape(b_sv, ()), T.reshape(b_rv, ())
    return fused, T.reshape(b_sv, (-1,)), T.reshape(b_rv, (-1,))


def infonce_loss(images, texts, temperature: float = 1.0, symmetric: bool = False) -> Tensor:
    """Mean over rows of ``-log softmax_j(cos(img_i, txt_j) / tau)[i]``.

    Row i of each side belongs to the same region. ``symmetric`` averages in
    the text-to-image direction as well.
    """
    images, texts = T.as_tensor(images), T.as_tensor(texts)
    if images.ndim != 2 or images.shape != texts.shape:
        raise ContractError(f"InfoNCE needs matching (n, d) inputs, got {images.shape} and {texts.shape}")
    n = images.shape[0]
    if n < 2:
        raise ContractError("InfoNCE needs at least two rows")
    logits = T.mul(T.pairwise_cosine(images, texts), 1.0 / temperature)
    eye = np.eye(n, dtype=logits.dtype)
    loss = T.mul(T.tsum(T.mul(T.log_softmax_row(logits), eye)), -1.0 / n)
    if symmetric:
        back = T.mul(T.tsum(T.mul(T.log_softmax_row(T.transpose(logits)), eye)), -1.0 / n)
        loss = T.mul(T.add(loss, back), 0.5)
    return loss


def _project_text(params: FusionParams, texts: Tensor) -> Tensor:
    return texts if params.adapter is None else T.matmul(texts, params.adapter)


def _stack(table: Mapping[int, np.ndarray], ids) -> np.ndarray:
    return np.stack([np.asarray(table[i]) for i in ids]).astype(T.get_default_dtype())


@dataclass
class FusionResult:
    params: FusionParams
    embeddings: dict[int, np.ndarray]
    history: list[float] = field(default_factory=list)
    betas: dict[int, tuple[float, float]] = field(default_factory=dict)


def _check_coverage(ids, tables: Mapping[str, Mapping[int, np.ndarray]]) -> None:
    for name, table in tables.items():
        for rid in ids:
            if rid not in table:
                raise ContractError(f"region {rid} has no {name} embedding")


def fuse_table(params: FusionParams, sv: Mapping[int, np.ndarray], rv: Mapping[int, np.ndarray], ids) -> tuple[dict, dict]:
    ids = list(ids)
    with T.no_grad():
        fused, b_sv, b_rv = attentive_fusion(params, _stack(sv, ids), _stack(rv, ids))
    emb = {rid: fused.data[i].copy() for i, rid in enumerate(ids)}
    betas = {rid: (float(b_sv.data[i]), float(b_rv.data[i])) for i, rid in enumerate(ids)}
    return emb, betas


def train_fusion(
    sv: Mapping[int, np.ndarray],
    rv: Mapping[int, np.ndarray],
    poi: Mapping[int, np.ndarray],
    train_ids,
    config: AlignmentConfig | None = None,
    all_ids=None,
    params: FusionParams | None = None,
) -> FusionResult:
    """Optimise the fusion (and text adapter) on InfoNCE over training regions.

    Visual embeddings are taken as fixed inputs: the encoders are never
    touched here. The returned table holds the fused embedding for every
    region in ``all_ids`` (default: the training ids).
    """
    config = config or AlignmentConfig()
    config.validate()
    train_ids = list(train_ids)
    all_ids = list(all_ids) if all_ids is not None else train_ids
    _check_coverage(all_ids, {"SV": sv, "RV": rv, "POI": poi})
    if len(train_ids) < 2:
        raise ContractError("need at least two training regions")
    d = len(np.asarray(sv[train_ids[0]]))
    d_text = len(np.asarray(poi[train_ids[0]]))
    params = params or init_fusion(d, d_text, config, seed=config.seed)
    plist = params.tensors()
    state = AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    SV, RV, TX = _stack(sv, train_ids), _stack(rv, train_ids), _stack(poi, train_ids)
    history = []
    n = len(train_ids)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            if len(rows) < 2:
                continue
            fused, _, _ = attentive_fusion(params, Tensor(SV[rows]), Tensor(RV[rows]))
            loss = infonce_loss(fused, _project_text(params, Tensor(TX[rows])), config.temperature, config.symmetric)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError("non-finite InfoNCE loss", {"epoch": epoch, "rows": [train_ids[r] for r in rows]})
            grads = T.backward(loss, wrt=plist)
            adam_step(plist, [grads[p] for p in plist], state)
            total += value * len(rows)
            count += len(rows)
        history.append(total / max(1, count))
        logger.debug("fusion epoch %d InfoNCE %.4f", epoch, history[-1])
    emb, betas = fuse_table(params, sv, rv, all_ids)
    return FusionResult(params=params, embeddings=emb, history=history, betas=betas)


def evaluate_infonce(params: FusionParams, sv, rv, poi, ids, config: AlignmentConfig, seed: int = 0) -> float:
    """Mean batch InfoNCE over ``ids`` in seeded batches, without updating anything."""
    ids = list(ids)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    SV, RV, TX = _stack(sv, ids), _stack(rv, ids), _stack(poi, ids)
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(ids), config.batch_size):
            rows = order[start : start + config.batch_size]
            if len(rows) < 2:
                continue
            fused, _, _ = attentive_fusion(params, Tensor(SV[rows]), Tensor(RV[rows]))
            total += infonce_loss(fused, _project_text(params, Tensor(TX[rows])), config.temperature, config.symmetric).item() * len(rows)
            count += len(rows)
    return total / count


def variant_embeddings(
    mode: str,
    sv: Mapping[int, np.ndarray],
    rv: Mapping[int, np.ndarray],
    poi: Mapping[int, np.ndarray] | None = None,
    params: FusionParams | None = None,
    full: Mapping[int, np.ndarray] | None = None,
) -> dict[int, np.ndarray]:
    """Embedding tables for the fusion ablations.

    ``add_svrv`` sums the two image embeddings, ``fusion_svrv`` applies the
    attention fusion with un-aligned ``params``, ``concat`` joins SV, RV and
    POI, and ``full`` returns the aligned table as given.
    """
    ids = list(sv)
    if mode == "add_svrv":
        return {i: np.asarray(sv[i]) + np.asarray(rv[i]) for i in ids}
    if mode == "fusion_svrv":
        if params is None:
            raise ContractError("fusion_svrv needs fusion parameters")
        return fuse_table(params, sv, rv, ids)[0]
    if mode == "concat":
        if poi is None:
            raise ContractError("concat needs POI embeddings")
        return {i: np.concatenate([np.asarray(sv[i]), np.asarray(rv[i]), np.asarray(poi[i])]) for i in ids}
    if mode == "full":
        if full is None:
            raise ContractError("full variant needs the aligned embedding table")
        return dict(full)
    raise ContractError(f"unknown variant {mode!r}; expected one of {VARIANTS}")
