"""Convolutional image encoders trained with a cosine triplet margin loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import DatasetBundle, RegionRecord
from .errors import ContractError, TrainingDivergedError
from .optim import AdamState, adam_step
from .similarity import Triplet
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    padding: int = 1
    embedding_dim: int = 32
    margin: float = 0.2
    batch_size: int = 32
    lr: float = 5e-4
    epochs: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.embedding_dim < 2:
            raise ContractError("embedding_dim must be >= 2")
        if self.margin < 0:
            raise ContractError("margin must be >= 0")
        if not self.channels:
            raise ContractError("need at least one conv layer")


EncoderParams = dict  # name -> Tensor


def init_encoder(config: EncoderConfig, in_channels: int, seed: int | None = None) -> EncoderParams:
    """He-initialised conv kernels, zero biases, Glorot-style projection."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = T.get_default_dtype()
    params: EncoderParams = {}
    c_prev = in_channels
    k = config.kernel_size
    for i, c_out in enumerate(config.channels):
        std = np.sqrt(2.0 / (c_prev * k * k))
        params[f"conv{i}.weight"] = T.parameter((std * rng.standard_normal((c_out, c_prev, k, k))).astype(dtype))
        params[f"conv{i}.bias"] = T.parameter(np.zeros(c_out, dtype=dtype))
        c_prev = c_out
    std = np.sqrt(1.0 / c_prev)
    params["proj.weight"] = T.parameter((std * rng.standard_normal((c_prev, config.embedding_dim))).astype(dtype))
    params["proj.bias"] = T.parameter(np.zeros(config.embedding_dim, dtype=dtype))
    return params


def encode_batch(params: EncoderParams, images, config: EncoderConfig) -> Tensor:
    """Embed an (N, C, H, W) stack; rows are unit-norm or flagged zero."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=T.get_default_dtype()))
    n_layers = len(config.channels)
    expected_c = params["conv0.weight"].shape[1]
    if x.ndim != 4 or x.shape[1] != expected_c:
        raise ContractError(f"encoder expects (N, {expected_c}, H, W) images, got {x.shape}")
    for i in range(n_layers):
        x = T.conv2d(x, params[f"conv{i}.weight"], stride=1, padding=config.padding)
        x = T.relu(T.add_channel_bias(x, params[f"conv{i}.bias"]))
        if i < n_layers - 1:
            x = T.max_pool2d(x, 2)
    feats = T.global_avg_pool(x)
    return T.l2_normalize(T.affine(feats, params["proj.weight"], params["proj.bias"]))


def encode_image(params: EncoderParams, image, config: EncoderConfig) -> Tensor:
    """Embed one (C, H, W) image into a unit d-vector."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    if image.ndim != 3:
        raise ContractError(f"encode_image expects a C x H x W image, got shape {image.shape}")
    out = encode_batch(params, image[None], config)
    emb = T.reshape(out, (config.embedding_dim,))
    emb.flags["degenerate"] = bool(out.flags["degenerate"][0])
    return emb


def triplet_loss(x, y, z, margin: float) -> Tensor:
    """``max(0, margin + cos(x, z) - cos(x, y))`` elementwise over leading axes."""
    return T.relu(T.add(T.sub(T.cosine_similarity(x, z), T.cosine_similarity(x, y)), margin))


def _pick_image(region: RegionRecord, modality: str, rng: np.random.Generator) -> np.ndarray:
    if modality == "RV":
        return region.rv_image
    return region.sv_images[int(rng.integers(len(region.sv_images)))]


@dataclass
class TrainingResult:
    params: EncoderParams
    history: list[float] = field(default_factory=list)


def train_visual_encoder(
    bundle: DatasetBundle,
    triplets: list[Triplet],
    config: EncoderConfig,
    modality: str,
    params: EncoderParams | None = None,
) -> TrainingResult:
    """Adam over shuffled triplet mini-batches; returns per-epoch mean loss.

    Street-view slots draw one of the region's images uniformly per triplet
    instance, so each epoch sees a fresh image choice.
    """
    config.validate()
    if not triplets:
        raise ContractError("no triplets to train on")
    if any(t.modality != modality for t in triplets):
        raise ContractError(f"triplet modality does not match encoder modality {modality}")
    dtype = T.get_default_dtype()
    rng = np.random.default_rng(config.seed)
    params = params or init_encoder(config, bundle.image_shape[0], seed=config.seed)
    names = sorted(params)
    plist = [params[k] for k in names]
    state = AdamState(lr=config.lr)
    index = bundle._index()
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(triplets))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [triplets[i] for i in order[start : start + config.batch_size]]
            imgs = []
            for slot in ("anchor", "positive", "negative"):
                for t in batch:
                    imgs.append(_pick_image(bundle.regions[index[getattr(t, slot)]], modality, rng))
            emb = encode_batch(params, np.stack(imgs).astype(dtype), config)
            b = len(batch)
            x, y, z = T.take(emb, slice(0, b)), T.take(emb, slice(b, 2 * b)), T.take(emb, slice(2 * b, 3 * b))
            loss = T.mean(triplet_loss(x, y, z, config.margin))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    "non-finite triplet loss",
                    {
                        "epoch": epoch,
                        "batch_anchor_ids": [t.anchor for t in batch],
                        "param_norms": {k: float(np.linalg.norm(params[k].data)) for k in names},
                    },
                )
            grads = T.backward(loss, wrt=plist)
            adam_step(plist, [grads[p] for p in plist], state)
            losses.append(value * b)
        history.append(float(np.sum(losses) / len(triplets)))
        logger.debug("%s epoch %d mean triplet loss %.4f", modality, epoch, history[-1])
    return TrainingResult(params=params, history=history)


def mean_triplet_loss(params: EncoderParams, bundle: DatasetBundle, triplets: list[Triplet], config: EncoderConfig, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    index = bundle._index()
    dtype = T.get_default_dtype()
    total = 0.0
    with T.no_grad():
        for start in range(0, len(triplets), 128):
            batch = triplets[start : start + 128]
            stacks = [
                np.stack([_pick_image(bundle.regions[index[getattr(t, slot)]], t.modality, rng) for t in batch]).astype(dtype)
                for slot in ("anchor", "positive", "negative")
            ]
            x, y, z = (encode_batch(params, s, config) for s in stacks)
            total += float(triplet_loss(x, y, z, config.margin).data.sum())
    return total / len(triplets)


def region_visual_embedding(params: EncoderParams, region: RegionRecord, modality: str, config: EncoderConfig) -> np.ndarray:
    """Region-level embedding: RV encodes its single image; SV averages all
    its images' embeddings and renormalises."""
    dtype = T.get_default_dtype()
    with T.no_grad():
        if modality == "RV":
            return encode_batch(params, region.rv_image[None].astype(dtype), config).data[0].copy()
        if modality != "SV":
            raise ContractError(f"unknown modality {modality!r}")
        emb = encode_batch(params, np.stack(region.sv_images).astype(dtype), config).data
        return T.l2_normalize(Tensor(emb.mean(axis=0), dtype=emb.dtype)).data.copy()


def embed_bundle(params: EncoderParams, bundle: DatasetBundle, modality: str, config: EncoderConfig) -> dict[int, np.ndarray]:
    return {r.region_id: region_visual_embedding(params, r, modality, config) for r in bundle.regions}


def checkpoint_tensors(params: EncoderParams, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{name}": params[name].data for name in sorted(params)}


def params_from_checkpoint(tensors: dict[str, np.ndarray], prefix: str) -> EncoderParams:
    dtype = T.get_default_dtype()
    plen = len(prefix) + 1
    return {name[plen:]: T.parameter(arr.astype(dtype)) for name, arr in tensors.items() if name.startswith(prefix + "/")}
