"""Skip-gram word vectors with a Huffman-coded hierarchical softmax, and
region POI embeddings averaged from category word vectors."""

from __future__ import annotations

import heapq
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

from .dataset import DatasetBundle
from .errors import ContractError


@dataclass
class Vocab:
    tokens: list[str]
    counts: list[int]
    min_count: int = 1
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def to_lines(self) -> str:
        return "".join(f"{t}\t{c}\n" for t, c in zip(self.tokens, self.counts))

    @classmethod
    def from_lines(cls, text: str, min_count: int = 1) -> "Vocab":
        tokens, counts = [], []
        for line in text.splitlines():
            if line:
                tok, cnt = line.rsplit("\t", 1)
                tokens.append(tok)
                counts.append(int(cnt))
        return cls(tokens, counts, min_count)


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocab:
    """Count tokens, drop the rare ones, index by (count desc, token asc)."""
    counter = Counter()
    n_sentences = 0
    for sentence in corpus:
        counter.update(sentence)
        n_sentences += 1
    if n_sentences == 0:
        raise ContractError("empty corpus")
    kept = sorted(((t, c) for t, c in counter.items() if c >= min_count), key=lambda tc: (-tc[1], tc[0]))
    if not kept:
        raise ContractError(f"no token reaches min_count={min_count}")
    return Vocab([t for t, _ in kept], [c for _, c in kept], min_count)


@dataclass
class HuffmanTree:
    codes: list[str]  # per vocab index, root-to-leaf bits
    paths: list[np.ndarray]  # inner-node ids along the same route
    n_inner: int

    def code_lengths(self) -> list[int]:
        return [len(c) for c in self.codes]


def build_huffman(vocab: Vocab) -> HuffmanTree:
    """Greedy merge of the two lightest nodes.

    Ties go to the node created first (leaves are created in vocab order,
    inner nodes as merged). The first node popped becomes the 0 branch.
    """
    n = len(vocab)
    if n < 2:
        raise ContractError("Huffman tree needs at least two tokens")
    heap = [(count, i) for i, count in enumerate(vocab.counts)]
    heapq.heapify(heap)
    parent = [0] * (2 * n - 1)
    bit = [0] * (2 * n - 1)
    next_id = n
    while len(heap) > 1:
        c0, a = heapq.heappop(heap)
        c1, b = heapq.heappop(heap)
        parent[a], bit[a] = next_id, 0
        parent[b], bit[b] = next_id, 1
        heapq.heappush(heap, (c0 + c1, next_id))
        next_id += 1
    root = next_id - 1
    codes, paths = [], []
    for leaf in range(n):
        bits, nodes = [], []
        node = leaf
        while node != root:
            bits.append(str(bit[node]))
            node = parent[node]
            nodes.append(node - n)
        codes.append("".join(reversed(bits)))
        paths.append(np.array(list(reversed(nodes)), dtype=np.int64))
    return HuffmanTree(codes=codes, paths=paths, n_inner=n - 1)


# ---------------------------------------------------------------------------
# hierarchical softmax


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def hs_pair_loss(w: np.ndarray, node_vectors: np.ndarray, code: str | Sequence[int]) -> float:
    """Negative log-probability of a context word given the centre vector ``w``.

    ``node_vectors`` holds the inner-node vectors along the context word's
    Huffman path; bit 0 means "go left" with probability sigmoid(v . w).
    """
    signs = 1.0 - 2.0 * np.array([int(b) for b in code], dtype=np.float64)
    return float(-np.sum(_log_sigmoid(signs * (node_vectors @ w))))


def hs_pair_grad(w: np.ndarray, node_vectors: np.ndarray, code) -> tuple[np.ndarray, np.ndarray]:
    signs = 1.0 - 2.0 * np.array([int(b) for b in code], dtype=np.float64)
    coeff = -(1.0 - _sigmoid(signs * (node_vectors @ w))) * signs
    return coeff @ node_vectors, np.outer(coeff, w)


@dataclass
class SkipGramConfig:
    dim: int = 32
    window: int = 4
    min_count: int = 1
    lr: float = 0.025
    min_lr: float = 1e-4
    epochs: int = 5
    seed: int = 0


@dataclass
class SkipGramParams:
    W: np.ndarray
    inner: np.ndarray
    vocab: Vocab
    window: int
    skipped: int = 0

    def vector(self, token: str) -> np.ndarray:
        return self.W[self.vocab.index[token]]


def skipgram_train(corpus: Sequence[Sequence[str]], vocab: Vocab, tree: HuffmanTree, config: SkipGramConfig | None = None) -> SkipGramParams:
    """SGD on the hierarchical-softmax skip-gram objective.

    Every (centre, context) pair inside the window takes one ascent step on
    the log-likelihood of the context word's Huffman path: inner-node
    vectors update node by node, the centre vector once per pair with the
    accumulated error. The learning rate decays linearly towards ``min_lr``
    over training. Out-of-vocabulary tokens are dropped and counted in
    ``skipped``.
    """
    config = config or SkipGramConfig()
    rng = np.random.default_rng(config.seed)
    d = config.dim
    V = len(vocab)
    W = ((rng.random((V, d)) - 0.5) / d).astype(np.float64)
    inner = np.zeros((tree.n_inner, d))
    skipped = 0
    encoded = []
    for sentence in corpus:
        ids = []
        for tok in sentence:
            if tok in vocab.index:
                ids.append(vocab.index[tok])
            else:
                skipped += 1
        encoded.append(np.array(ids, dtype=np.int64))
    max_len = max(len(p) for p in tree.paths)
    path_nodes = np.zeros((V, max_len), dtype=np.int64)
    path_signs = np.zeros((V, max_len))
    path_len = np.zeros(V, dtype=np.int64)
    for t, (code, path) in enumerate(zip(tree.codes, tree.paths)):
        path_len[t] = len(path)
        path_nodes[t, : len(path)] = path
        path_signs[t, : len(path)] = [1.0 - 2.0 * int(b) for b in code]
    total = max(1, config.epochs * sum(len(s) for s in encoded))
    done = 0
    for _ in range(config.epochs):
        for si in rng.permutation(len(encoded)):
            sent = encoded[si]
            lr0 = config.lr - (config.lr - config.min_lr) * done / total
            lr_step = (config.lr - config.min_lr) / total
            _train_sentence(sent, W, inner, path_nodes, path_signs, path_len, config.window, lr0, lr_step)
            done += len(sent)
    return SkipGramParams(W=W, inner=inner, vocab=vocab, window=config.window, skipped=skipped)


@numba.njit(cache=True)
def _train_sentence(sent, W, inner, path_nodes, path_signs, path_len, win, lr0, lr_step):
    L = len(sent)
    d = W.shape[1]
    for i in range(L):
        lr = lr0 - lr_step * i
        if lr == 0.0:
            continue
        c = sent[i]
        for j in range(max(0, i - win), min(L, i + win + 1)):
            if j == i:
                continue
            ctx = sent[j]
            neu = np.zeros(d)
            for k in range(path_len[ctx]):
                node = path_nodes[ctx, k]
                s = path_signs[ctx, k]
                x = 0.0
                for q in range(d):
                    x += inner[node, q] * W[c, q]
                z = s * x
                if z >= 0:
                    sig = 1.0 / (1.0 + np.exp(-z))
                else:
                    ez = np.exp(z)
                    sig = ez / (1.0 + ez)
                g = lr * (1.0 - sig) * s
                for q in range(d):
                    neu[q] += g * inner[node, q]
                    inner[node, q] += g * W[c, q]
            for q in range(d):
                W[c, q] += neu[q]


def region_corpus(bundle: DatasetBundle, seed: int = 0, include_comments: bool = True) -> list[list[str]]:
    """Training sentences: each region's category tokens in a seeded random
    POI order, followed by its comment sentences."""
    rng = np.random.default_rng(seed)
    corpus = []
    for r in bundle.regions:
        order = rng.permutation(len(r.poi_categories))
        tokens = [tok for i in order for tok in r.poi_categories[i]]
        if tokens:
            corpus.append(tokens)
        if include_comments:
            corpus.extend(list(c) for c in r.comments if c)
    return corpus


@dataclass
class PoiEmbedding:
    vector: np.ndarray
    degenerate: bool
    used: int


def region_poi_embedding(W: np.ndarray, vocab: Vocab, categories: Sequence[Sequence[str] | str]) -> PoiEmbedding:
    """Mean of per-POI category vectors.

    A POI's category vector is the mean of its in-vocabulary tokens; POIs
    with none are dropped from the average. No usable POI gives a zero
    vector flagged ``degenerate``.
    """
    vecs = []
    for cat in categories:
        toks = [cat] if isinstance(cat, str) else cat
        ids = [vocab.index[t] for t in toks if t in vocab.index]
        if ids:
            vecs.append(W[ids].mean(axis=0))
    if not vecs:
        return PoiEmbedding(np.zeros(W.shape[1], dtype=W.dtype), True, 0)
    return PoiEmbedding(np.mean(vecs, axis=0), False, len(vecs))


def embed_bundle(params: SkipGramParams, bundle: DatasetBundle) -> dict[int, np.ndarray]:
    return {r.region_id: region_poi_embedding(params.W, params.vocab, r.poi_categories).vector for r in bundle.regions}


def save_vocab(path: str | os.PathLike, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(vocab.to_lines())


def load_vocab(path: str | os.PathLike) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        return Vocab.from_lines(fh.read())
