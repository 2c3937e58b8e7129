import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regioncl.errors import ContractError
from regioncl.gradcheck import grad_check
from regioncl.text import (
    SkipGramConfig,
    Vocab,
    build_huffman,
    build_vocab,
    hs_pair_grad,
    hs_pair_loss,
    load_vocab,
    region_corpus,
    region_poi_embedding,
    save_vocab,
    skipgram_train,
)

count_lists = st.lists(st.integers(1, 50), min_size=2, max_size=12)


def vocab_from_counts(counts):
    return Vocab([f"t{i:02d}" for i in range(len(counts))], list(counts))


def best_prefix_cost(counts):
    """Minimum sum(count * length) over every length vector satisfying Kraft's inequality."""
    n = len(counts)
    best = None
    for lengths in itertools.product(range(1, n), repeat=n):
        if sum(Fraction(1, 2**l) for l in lengths) <= 1:
            cost = sum(c * l for c, l in zip(counts, lengths))
            best = cost if best is None else min(best, cost)
    return best


# ---------------------------------------------------------------------------
# vocabulary


def test_vocab_counts_and_order():
    v = build_vocab([["a", "a", "b"]])
    assert v.tokens == ["a", "b"] and v.counts == [2, 1]
    assert v.index["a"] == 0


def test_vocab_min_count():
    assert build_vocab([["a", "a", "b"]], min_count=2).tokens == ["a"]


def test_vocab_ties_lexicographic():
    assert build_vocab([["c", "b", "a", "c"]]).tokens == ["c", "a", "b"]


def test_vocab_empty():
    with pytest.raises(ContractError):
        build_vocab([])


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab([["süd", "x", "x"]])
    save_vocab(tmp_path / "v.tsv", v)
    back = load_vocab(tmp_path / "v.tsv")
    assert (back.tokens, back.counts) == (v.tokens, v.counts)


# ---------------------------------------------------------------------------
# Huffman


def test_huffman_textbook_lengths():
    tree = build_huffman(vocab_from_counts([4, 2, 1, 1]))
    assert tree.code_lengths() == [1, 2, 3, 3]


def test_huffman_two_tokens():
    assert sorted(build_huffman(vocab_from_counts([3, 3])).codes) == ["0", "1"]


def test_huffman_single_token():
    with pytest.raises(ContractError):
        build_huffman(vocab_from_counts([3]))


@pytest.mark.parametrize("counts", [[1, 1, 1], [5, 1, 1, 1, 1], [7, 3, 3, 2, 1, 1], [1, 2, 4, 8, 16, 32], [2, 2, 2, 2, 2, 2]])
def test_huffman_is_optimal_prefix_code(counts):
    tree = build_huffman(vocab_from_counts(counts))
    assert sum(c * l for c, l in zip(counts, tree.code_lengths())) == best_prefix_cost(counts)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=2, max_size=6))
def test_huffman_optimal_random(counts):
    tree = build_huffman(vocab_from_counts(counts))
    assert sum(c * l for c, l in zip(counts, tree.code_lengths())) == best_prefix_cost(counts)


@settings(max_examples=100, deadline=None)
@given(count_lists)
def test_huffman_prefix_free_kraft_equality(counts):
    tree = build_huffman(vocab_from_counts(counts))
    codes = tree.codes
    assert len(set(codes)) == len(codes)
    for a, b in itertools.permutations(codes, 2):
        assert not b.startswith(a)
    assert sum(Fraction(1, 2 ** len(c)) for c in codes) == 1
    for code, path in zip(codes, tree.paths):
        assert len(path) == len(code)
        assert path[0] == tree.n_inner - 1  # root first
        assert np.all((0 <= path) & (path < tree.n_inner))


def test_huffman_deterministic():
    v = vocab_from_counts([3, 3, 3, 3, 1])
    assert build_huffman(v).codes == build_huffman(v).codes


# ---------------------------------------------------------------------------
# hierarchical softmax


def test_hs_loss_scalar_oracle():
    w = np.array([1.0, 0.0])
    nodes = np.array([[2.0, 0.0], [0.5, 1.0]])
    # bit 0 -> sigmoid(v.w), bit 1 -> sigmoid(-v.w)
    expected = -np.log(1 / (1 + np.exp(-2.0))) - np.log(1 / (1 + np.exp(0.5)))
    assert hs_pair_loss(w, nodes, "01") == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_hs_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    w, nodes = rng.standard_normal(5), rng.standard_normal((3, 5))
    code = "101"
    assert grad_check(lambda x: hs_pair_loss(x, nodes, code), w, grad_fn=lambda x: hs_pair_grad(x, nodes, code)[0]) < 1e-4
    err = grad_check(
        lambda x: hs_pair_loss(w, x.reshape(3, 5), code),
        nodes.ravel(),
        grad_fn=lambda x: hs_pair_grad(w, x.reshape(3, 5), code)[1].ravel(),
    )
    assert err < 1e-4


def test_hs_loss_finite_for_extreme_inputs():
    assert np.isfinite(hs_pair_loss(np.array([1e4]), np.array([[-1e4]]), "0"))


# ---------------------------------------------------------------------------
# skip-gram


def two_group_corpus(seed):
    rng = np.random.default_rng(seed)
    groups = (["a1", "a2", "a3", "a4"], ["b1", "b2", "b3", "b4"])
    return [list(rng.permutation(groups[i % 2])) * 3 for i in range(120)], groups


def test_zero_lr_leaves_weights_unchanged():
    corpus, _ = two_group_corpus(0)
    vocab = build_vocab(corpus)
    tree = build_huffman(vocab)
    before = skipgram_train(corpus, vocab, tree, SkipGramConfig(epochs=0, seed=3)).W
    after = skipgram_train(corpus, vocab, tree, SkipGramConfig(lr=0.0, min_lr=0.0, epochs=2, seed=3)).W
    np.testing.assert_array_equal(before, after)


def test_skipgram_deterministic():
    corpus, _ = two_group_corpus(1)
    vocab = build_vocab(corpus)
    tree = build_huffman(vocab)
    a = skipgram_train(corpus, vocab, tree, SkipGramConfig(epochs=2, seed=7))
    b = skipgram_train(corpus, vocab, tree, SkipGramConfig(epochs=2, seed=7))
    np.testing.assert_array_equal(a.W, b.W)
    np.testing.assert_array_equal(a.inner, b.inner)


def test_cooccurring_groups_separate():
    wins = 0
    for seed in range(10):
        corpus, groups = two_group_corpus(seed)
        vocab = build_vocab(corpus)
        params = skipgram_train(corpus, vocab, build_huffman(vocab), SkipGramConfig(dim=16, window=2, epochs=5, seed=seed))
        unit = {t: params.vector(t) / np.linalg.norm(params.vector(t)) for t in vocab.tokens}
        within = np.mean([unit[x] @ unit[y] for g in groups for x, y in itertools.combinations(g, 2)])
        between = np.mean([unit[x] @ unit[y] for x in groups[0] for y in groups[1]])
        wins += within > between
    assert wins >= 7


# ---------------------------------------------------------------------------
# region representation


@pytest.fixture
def table():
    vocab = Vocab(["cafe", "school", "park"], [3, 2, 1])
    W = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
    return W, vocab


def test_single_category_is_its_row(table):
    W, vocab = table
    np.testing.assert_array_equal(region_poi_embedding(W, vocab, ["school"]).vector, W[1])


def test_two_categories_average(table):
    W, vocab = table
    np.testing.assert_allclose(region_poi_embedding(W, vocab, ["cafe", "school"]).vector, [2.0, 0.5])


def test_duplicate_category_idempotent(table):
    W, vocab = table
    np.testing.assert_array_equal(region_poi_embedding(W, vocab, ["park", "park"]).vector, W[2])


def test_oov_skipped_and_all_oov_flagged(table):
    W, vocab = table
    got = region_poi_embedding(W, vocab, ["cafe", "zoo"])
    np.testing.assert_array_equal(got.vector, W[0])
    assert got.used == 1 and not got.degenerate
    empty = region_poi_embedding(W, vocab, ["zoo"])
    assert empty.degenerate and not empty.vector.any()


def test_multi_token_poi_uses_token_mean(table):
    W, vocab = table
    np.testing.assert_allclose(region_poi_embedding(W, vocab, [["cafe", "park"]]).vector, (W[0] + W[2]) / 2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["cafe", "school", "park"]), min_size=1, max_size=8), st.randoms(), st.floats(-5, 5))
def test_region_embedding_permutation_invariant_and_homogeneous(cats, rnd, s):
    W = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
    vocab = Vocab(["cafe", "school", "park"], [3, 2, 1])
    base = region_poi_embedding(W, vocab, cats).vector
    shuffled = list(cats)
    rnd.shuffle(shuffled)
    np.testing.assert_allclose(region_poi_embedding(W, vocab, shuffled).vector, base, atol=1e-12)
    np.testing.assert_allclose(region_poi_embedding(s * W, vocab, cats).vector, s * base, atol=1e-9)


def test_region_corpus_covers_categories(small_world):
    corpus = region_corpus(small_world, seed=0)
    tokens = {t for s in corpus for t in s}
    for r in small_world.regions:
        for cat in r.poi_categories:
            assert set(cat) <= tokens
    assert corpus == region_corpus(small_world, seed=0)
