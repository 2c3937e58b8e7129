import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regioncl import tensor as T
from regioncl.errors import ContractError
from regioncl.gradcheck import grad_check
from regioncl.similarity import MiningPolicy, Triplet, mine_triplets, similarity_matrix
from regioncl.tensor import Tensor
from regioncl.visual import (
    EncoderConfig,
    checkpoint_tensors,
    embed_bundle,
    encode_batch,
    encode_image,
    init_encoder,
    mean_triplet_loss,
    params_from_checkpoint,
    region_visual_embedding,
    train_visual_encoder,
    triplet_loss,
)

from conftest import tiny_world

SMALL = EncoderConfig(channels=(4, 6), embedding_dim=8, batch_size=16, epochs=2)
unit = arrays(np.float64, 3, elements=st.floats(-5, 5)).filter(lambda v: np.linalg.norm(v) > 1e-2)


# ---------------------------------------------------------------------------
# encoder


def test_encode_image_unit_norm():
    params = init_encoder(SMALL, 3, seed=0)
    img = np.random.default_rng(0).random((3, 8, 8))
    emb = encode_image(params, img, SMALL)
    assert emb.shape == (8,)
    assert abs(np.linalg.norm(emb.data) - 1) < 1e-5


def test_identical_images_identical_embeddings():
    params = init_encoder(SMALL, 3, seed=1)
    img = np.random.default_rng(1).random((3, 8, 8))
    np.testing.assert_array_equal(encode_image(params, img, SMALL).data, encode_image(params, img.copy(), SMALL).data)


def test_zero_image_zero_bias_is_flagged():
    params = init_encoder(SMALL, 3, seed=2)
    emb = encode_image(params, np.zeros((3, 8, 8)), SMALL)
    assert not emb.data.any()
    assert emb.flags["degenerate"]


def test_wrong_channel_count():
    params = init_encoder(SMALL, 3, seed=0)
    with pytest.raises(ContractError):
        encode_batch(params, np.zeros((2, 1, 8, 8)), SMALL)


# ---------------------------------------------------------------------------
# triplet loss


def test_triplet_fully_separated(f64):
    assert triplet_loss([1.0, 0.0], [2.0, 0.0], [-1.0, 0.0], 0.2).item() == 0.0


def test_triplet_collapsed_equals_margin(f64):
    v = [0.3, -0.4, 1.2]
    assert triplet_loss(v, v, v, 0.2).item() == pytest.approx(0.2, abs=1e-15)


def test_triplet_hand_cosine(f64):
    # cos(x,z) = 1, cos(x,y) = 0 -> 0.2 + 1 - 0
    assert triplet_loss([1.0, 0.0], [0.0, 1.0], [1.0, 0.0], 0.2).item() == pytest.approx(1.2, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(unit, unit, unit, st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_triplet_nonnegative_zero_iff_and_rotation_invariant(x, y, z, a, seed):
    with T.default_dtype(np.float64):
        loss = triplet_loss(x, y, z, a).item()
        assert loss >= 0
        cos = lambda u, v: u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
        gap = cos(x, y) - cos(x, z)
        if abs(gap - a) > 1e-9:
            assert (loss == 0) == (gap >= a)
        q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((3, 3)))
        assert triplet_loss(q @ x, q @ y, q @ z, a).item() == pytest.approx(loss, abs=1e-9)


def test_triplet_gradient_through_encoder():
    world = tiny_world()
    cfg = EncoderConfig(channels=(3,), embedding_dim=4)
    with T.default_dtype(np.float64):
        params = init_encoder(cfg, 3, seed=4)
        imgs = np.stack([world.regions[i].rv_image for i in range(6)]).astype(np.float64)

        def loss_for(weight):
            p = dict(params, **{"proj.weight": weight})
            emb = encode_batch(p, imgs, cfg)
            x, y, z = T.take(emb, slice(0, 2)), T.take(emb, slice(2, 4)), T.take(emb, slice(4, 6))
            return T.mean(triplet_loss(x, y, z, 1.5))

        assert grad_check(loss_for, params["proj.weight"].data) < 1e-4


# ---------------------------------------------------------------------------
# training


def rv_triplets(world, seed=0):
    return mine_triplets(similarity_matrix(world, "poi"), MiningPolicy(top_k_positive=2, seed=seed))


def test_zero_loss_when_positive_is_negative():
    world = tiny_world()
    trips = [Triplet(0, 1, 1, 2.0, 1.0, "RV")] * 4
    cfg = EncoderConfig(channels=(4,), embedding_dim=8, margin=0.0, epochs=3, batch_size=2)
    with T.default_dtype(np.float64):
        result = train_visual_encoder(world, trips, cfg, "RV")
    assert result.history == [0.0, 0.0, 0.0]


def test_training_reproducible_in_f64():
    world = tiny_world()
    trips = rv_triplets(world)
    with T.default_dtype(np.float64):
        a = train_visual_encoder(world, trips, SMALL, "RV")
        b = train_visual_encoder(world, trips, SMALL, "RV")
    assert a.history == b.history
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_modality_mismatch_rejected():
    world = tiny_world()
    with pytest.raises(ContractError):
        train_visual_encoder(world, rv_triplets(world), SMALL, "SV")


def two_cluster_world(seed):
    return tiny_world(n_regions=16, n_latent_clusters=2, seed=seed, corrupt_fraction=0.0)


@pytest.mark.slow
def test_training_lowers_loss_majority():
    cfg = EncoderConfig(channels=(4, 8), embedding_dim=8, batch_size=16, epochs=30)
    wins = 0
    for seed in range(10):
        world = two_cluster_world(seed)
        trips = rv_triplets(world, seed)
        start = mean_triplet_loss(init_encoder(cfg, 3, seed=seed), world, trips, cfg)
        trained = train_visual_encoder(world, trips, EncoderConfig(**{**cfg.__dict__, "seed": seed}), "RV")
        wins += mean_triplet_loss(trained.params, world, trips, cfg) < start
    assert wins >= 7


@pytest.mark.slow
def test_trained_embeddings_cluster_majority():
    cfg = EncoderConfig(channels=(4, 8), embedding_dim=8, batch_size=16, epochs=15)
    wins = 0
    for seed in range(10):
        world = tiny_world(n_regions=18, seed=seed, count_noise=0.0, flow_noise=0.0, pixel_noise=0.0, indicator_noise=0.0, corrupt_fraction=0.0)
        trained = train_visual_encoder(world, rv_triplets(world, seed), EncoderConfig(**{**cfg.__dict__, "seed": seed}), "RV")
        emb = embed_bundle(trained.params, world, "RV", cfg)
        labels = world.latent_labels()
        E = np.stack([emb[i] for i in world.ids])
        S = E @ E.T
        same = labels[:, None] == labels[None]
        off = ~np.eye(len(labels), dtype=bool)
        wins += S[same & off].mean() - S[~same].mean() >= 0.1
    assert wins >= 7


# ---------------------------------------------------------------------------
# region embeddings


def test_single_sv_image_equals_encode_image():
    world = tiny_world(images_per_region=(1, 1))
    params = init_encoder(SMALL, 3, seed=0)
    r = world.regions[0]
    np.testing.assert_allclose(region_visual_embedding(params, r, "SV", SMALL), encode_image(params, r.sv_images[0], SMALL).data, atol=1e-6)


def test_duplicate_sv_images_same_as_one():
    world = tiny_world(images_per_region=(1, 1))
    params = init_encoder(SMALL, 3, seed=0)
    r = world.regions[0]
    twin = type(r)(**{**r.__dict__, "sv_images": [r.sv_images[0], r.sv_images[0].copy()]})
    np.testing.assert_allclose(region_visual_embedding(params, twin, "SV", SMALL), region_visual_embedding(params, r, "SV", SMALL), atol=1e-6)


def test_three_images_mean_then_normalise():
    world = tiny_world(images_per_region=(3, 3))
    params = init_encoder(SMALL, 3, seed=0)
    r = world.regions[0]
    each = np.stack([encode_image(params, im, SMALL).data for im in r.sv_images]).astype(np.float64)
    mean = each.mean(axis=0)
    np.testing.assert_allclose(region_visual_embedding(params, r, "SV", SMALL), mean / np.linalg.norm(mean), atol=1e-5)


def test_checkpoint_round_trip():
    params = init_encoder(SMALL, 3, seed=0)
    tensors = checkpoint_tensors(params, "rv_encoder")
    back = params_from_checkpoint(tensors, "rv_encoder")
    assert sorted(back) == sorted(params)
    for k in params:
        assert back[k].data.tobytes() == params[k].data.tobytes()
