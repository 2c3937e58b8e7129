import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regioncl import tensor as T
from regioncl.errors import ContractError
from regioncl.fusion import (
    AlignmentConfig,
    FusionParams,
    attention_logit,
    attentive_fusion,
    infonce_loss,
    init_fusion,
    train_fusion,
    variant_embeddings,
)
from regioncl.gradcheck import grad_check
from regioncl.tensor import Tensor

vec4 = arrays(np.float64, 4, elements=st.floats(-3, 3))


def params(c, M, b, adapter=None):
    return FusionParams(T.parameter(c), T.parameter(M), T.parameter(b), None if adapter is None else T.parameter(adapter))


def rand_params(seed, d=4, h=5):
    rng = np.random.default_rng(seed)
    return params(rng.standard_normal(h), rng.standard_normal((h, d)), rng.standard_normal(h))


# ---------------------------------------------------------------------------
# attention


def test_zero_c_gives_zero_logit(f64):
    p = params(np.zeros(3), np.ones((3, 3)), np.ones(3))
    assert attention_logit(p, [5.0, -2.0, 1.0]).item() == 0.0


def test_identity_passthrough(f64):
    p = params(np.ones(3), np.eye(3), np.zeros(3))
    assert attention_logit(p, [0.5, 2.0, 1.5]).item() == pytest.approx(4.0)


def test_logit_scalar_oracle(f64):
    c, M, b = [1.0, -2.0], [[1.0, 2.0], [-1.0, 0.5]], [0.1, 0.2]
    e = [0.3, 0.4]
    hidden = [max(0.0, sum(M[i][j] * e[j] for j in range(2)) + b[i]) for i in range(2)]
    expected = sum(ci * hi for ci, hi in zip(c, hidden))
    assert attention_logit(params(np.array(c), np.array(M), np.array(b)), e).item() == pytest.approx(expected, abs=1e-12)


def test_logit_batch_matches_single(f64):
    p = rand_params(0)
    E = np.random.default_rng(1).standard_normal((3, 4))
    batch = attention_logit(p, E).data
    for i in range(3):
        assert batch[i] == pytest.approx(attention_logit(p, E[i]).item(), abs=1e-12)


def test_equal_logits_give_midpoint(f64):
    p = params(np.zeros(2), np.ones((2, 2)), np.zeros(2))
    fused, b_sv, b_rv = attentive_fusion(p, [1.0, 0.0], [0.0, 1.0])
    assert (b_sv.item(), b_rv.item()) == (0.5, 0.5)
    np.testing.assert_allclose(fused.data, [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(vec4, vec4, st.integers(0, 1000), st.floats(-20, 20))
def test_beta_convex_and_shift_invariant(e_sv, e_rv, seed, shift):
    with T.default_dtype(np.float64):
        p = rand_params(seed)
        fused, b_sv, b_rv = attentive_fusion(p, e_sv, e_rv)
        bs, br = b_sv.item(), b_rv.item()
        assert abs(bs + br - 1) <= 1e-6
        assert 0 <= bs <= 1 and 0 <= br <= 1
        assert np.linalg.norm(fused.data) <= max(np.linalg.norm(e_sv), np.linalg.norm(e_rv)) + 1e-9
        # a constant added to both logits: reproduce fusion from shifted logits
        a_sv, a_rv = attention_logit(p, e_sv).item() + shift, attention_logit(p, e_rv).item() + shift
        beta = T.softmax_row([a_sv, a_rv]).data
        assert beta[0] == pytest.approx(bs, abs=1e-6)
        np.testing.assert_allclose(beta[0] * e_sv + beta[1] * e_rv, fused.data, atol=1e-6)


def test_fusion_gradient(f64):
    rng = np.random.default_rng(3)
    e_sv, e_rv = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    p = rand_params(5)
    w = rng.standard_normal((3, 4))
    assert grad_check(lambda x: T.tsum(T.mul(attentive_fusion(p, x, Tensor(e_rv))[0], w)), e_sv) < 1e-4


# ---------------------------------------------------------------------------
# InfoNCE


@pytest.mark.parametrize("n", [2, 3, 8, 32])
def test_infonce_all_tied_is_log_n(f64, n):
    v = np.tile([1.0, 2.0, -0.5], (n, 1))
    assert infonce_loss(v, v).item() == pytest.approx(math.log(n), abs=1e-9)


def test_infonce_scalar_oracle(f64):
    images = np.array([[1.0, 0.0], [-1.0, 0.0]])
    expected = -math.log(math.e / (math.e + math.exp(-1)))
    assert infonce_loss(images, images, 1.0).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.1269, abs=1e-4)


@pytest.mark.parametrize("symmetric", [False, True])
def test_infonce_gradient(f64, symmetric):
    rng = np.random.default_rng(0)
    images, texts = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    assert grad_check(lambda x: infonce_loss(x, Tensor(texts), 0.5, symmetric), images) < 1e-4
    assert grad_check(lambda x: infonce_loss(Tensor(images), x, 0.5, symmetric), texts) < 1e-4


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8), st.floats(0.1, 5.0))
def test_infonce_bounds_and_permutation(seed, n, tau):
    rng = np.random.default_rng(seed)
    images, texts = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
    with T.default_dtype(np.float64):
        loss = infonce_loss(images, texts, tau).item()
        assert 0 <= loss <= math.log(n) + 2 / tau + 1e-9
        perm = rng.permutation(n)
        assert infonce_loss(images[perm], texts[perm], tau).item() == pytest.approx(loss, abs=1e-9)


def test_infonce_shape_mismatch():
    with pytest.raises(ContractError):
        infonce_loss(np.ones((3, 2)), np.ones((4, 2)))


# ---------------------------------------------------------------------------
# training


def table(seed, n, d, shift=0.0):
    rng = np.random.default_rng(seed)
    return {i: rng.standard_normal(d) + shift for i in range(n)}


def test_aligned_fixed_point_has_small_gradient(f64):
    # text equals the fused image (no adapter) and rows are near-orthogonal:
    # the loss sits at its floor and the fusion gradient vanishes
    d = 8
    E = np.eye(d)[:4] * 3.0
    p = init_fusion(d, d, AlignmentConfig(text_adapter=False), seed=0)
    fused, _, _ = attentive_fusion(p, Tensor(E), Tensor(E))
    loss = infonce_loss(fused, Tensor(E), 0.05)
    grads = T.backward(loss, wrt=p.tensors())
    assert loss.item() < 1e-6
    assert max(np.abs(g).max() for g in grads.values()) < 1e-6


def test_training_lowers_infonce_on_informative_text():
    sv, rv = table(0, 40, 6), table(1, 40, 6)
    rng = np.random.default_rng(2)
    A = rng.standard_normal((6, 5))
    poi = {i: sv[i] @ A + 0.05 * rng.standard_normal(5) for i in sv}
    result = train_fusion(sv, rv, poi, list(range(40)), AlignmentConfig(batch_size=20, epochs=60, lr=5e-3, seed=0))
    assert result.history[-1] < result.history[0]
    # SV carries the text signal, so attention shifts towards it
    assert np.mean([b[0] for b in result.betas.values()]) > 0.5


def test_training_leaves_inputs_untouched():
    sv, rv, poi = table(0, 10, 4), table(1, 10, 4), table(2, 10, 3)
    snapshot = [{k: v.copy() for k, v in t.items()} for t in (sv, rv, poi)]
    train_fusion(sv, rv, poi, list(range(10)), AlignmentConfig(batch_size=5, epochs=2))
    for before, after in zip(snapshot, (sv, rv, poi)):
        for k in before:
            assert before[k].tobytes() == after[k].tobytes()


def test_training_deterministic(f64):
    sv, rv, poi = table(0, 12, 4), table(1, 12, 4), table(2, 12, 3)
    cfg = AlignmentConfig(batch_size=4, epochs=3, seed=9)
    a = train_fusion(sv, rv, poi, list(range(8)), cfg, all_ids=list(range(12)))
    b = train_fusion(sv, rv, poi, list(range(8)), cfg, all_ids=list(range(12)))
    assert a.history == b.history
    assert all(a.embeddings[i].tobytes() == b.embeddings[i].tobytes() for i in range(12))


def test_missing_embedding_rejected():
    sv, rv, poi = table(0, 5, 4), table(1, 5, 4), table(2, 4, 3)
    with pytest.raises(ContractError, match="POI"):
        train_fusion(sv, rv, poi, list(range(5)))


# ---------------------------------------------------------------------------
# variants


def test_add_svrv_cancels():
    sv = {0: np.array([1.0, -2.0])}
    assert not variant_embeddings("add_svrv", sv, {0: -sv[0]})[0].any()


def test_concat_dimension():
    out = variant_embeddings("concat", table(0, 3, 4), table(1, 3, 4), table(2, 3, 6))
    assert all(v.shape == (2 * 4 + 6,) for v in out.values())


def test_fusion_svrv_is_attentive_fusion():
    sv, rv = table(0, 3, 4), table(1, 3, 4)
    p = rand_params(0)
    out = variant_embeddings("fusion_svrv", sv, rv, params=p)
    for i in sv:
        np.testing.assert_allclose(out[i], attentive_fusion(p, sv[i], rv[i])[0].data, atol=1e-6)


def test_full_dimension_is_d():
    sv, rv, poi = table(0, 6, 4), table(1, 6, 4), table(2, 6, 3)
    result = train_fusion(sv, rv, poi, list(range(6)), AlignmentConfig(batch_size=3, epochs=1))
    assert all(v.shape == (4,) for v in variant_embeddings("full", sv, rv, full=result.embeddings).values())


def test_unknown_variant():
    with pytest.raises(ContractError):
        variant_embeddings("sum", {}, {})


def test_named_round_trip():
    p = rand_params(0)
    back = FusionParams.from_named(p.named())
    for a, b in zip(p.tensors(), back.tensors()):
        np.testing.assert_array_equal(a.data, b.data)
