"""Finite-difference verification of every differentiable operation."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .evaluation import MLP, init_mlp, mse_loss
from .fusion import FusionParams, attentive_fusion, infonce_loss
from .gradcheck import grad_check
from .tensor import Tensor
from .text import hs_pair_grad, hs_pair_loss
from .visual import triplet_loss

TOLERANCE = 1e-4
KINK_GAP = 1e-3


@dataclass
class CheckResult:
    op: str
    seed: int
    argument: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _check_args(name: str, seed: int, fn: Callable[..., Tensor], args: dict[str, np.ndarray]) -> list[CheckResult]:
    """Check the gradient of ``fn(**args)`` with respect to each argument in turn."""
    out = []
    for key in args:
        def f(x, key=key):
            kwargs = {k: (x if k == key else Tensor(v)) for k, v in args.items()}
            return fn(**kwargs)

        out.append(CheckResult(name, seed, key, grad_check(f, args[key], h=1e-5)))
    return out


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable, dict]]:
    n, d = 4, 5
    weights = rng.standard_normal((n, 3))
    emb = lambda *shape: rng.standard_normal(shape)
    # finite differences are meaningless within h of a ReLU/hinge kink, so
    # inputs are redrawn until every kink is at least KINK_GAP away
    while True:
        fusion_fixed = {"c": 0.5 * rng.standard_normal(6), "M": rng.standard_normal((6, d)) / np.sqrt(d), "b": rng.standard_normal(6) * 0.1}
        e_sv, e_rv = emb(n, d), emb(n, d)
        pre_sv = e_sv @ fusion_fixed["M"].T + fusion_fixed["b"]
        pre_rv = e_rv @ fusion_fixed["M"].T + fusion_fixed["b"]
        # a unit with the same on/off state for both modalities of every row
        # shifts both logits equally: its bias gradient is structurally zero
        # and the relative error would measure round-off only
        split = ((pre_sv > 0) != (pre_rv > 0)).any(axis=0).all()
        if min(np.abs(pre_sv).min(), np.abs(pre_rv).min()) > KINK_GAP and split:
            break

    def fusion_fn(e_sv, e_rv, c, M, b):
        fused, _, _ = attentive_fusion(FusionParams(c, M, b), e_sv, e_rv)
        return T.tsum(T.mul(fused, Tensor(weights[:, :1] * np.ones((1, d)))))

    while True:
        mlp = init_mlp(d, 7, seed=int(rng.integers(1 << 30)))
        mlp_w = {"W1": mlp.W1.data.astype(np.float64), "b1": rng.standard_normal(7) * 0.1, "W2": mlp.W2.data.astype(np.float64), "b2": np.zeros(1)}
        mlp_x = emb(n, d)
        if np.abs(mlp_x @ mlp_w["W1"] + mlp_w["b1"]).min() > KINK_GAP:
            break
    relu_x = emb(n, d)
    relu_x[np.abs(relu_x) < KINK_GAP] += 10 * KINK_GAP
    while True:
        trip = {"x": emb(n, d), "y": emb(n, d), "z": emb(n, d)}
        with T.no_grad():
            raw = T.sub(T.cosine_similarity(Tensor(trip["x"]), Tensor(trip["z"])), T.cosine_similarity(Tensor(trip["x"]), Tensor(trip["y"]))).data + 1.0
        if np.abs(raw).min() > KINK_GAP:
            break
    target = rng.standard_normal(n)

    def mlp_fn(x, W1, b1, W2, b2):
        return mse_loss(MLP(W1, b1, W2, b2), x, target)

    # fixed random projections turn tensor outputs into scalars
    w_affine = Tensor(rng.standard_normal((n, 3)))
    w_conv = Tensor(rng.standard_normal((2, 4, 4)))
    w_nd = Tensor(rng.standard_normal((n, d)))
    w_n = Tensor(rng.standard_normal(n))
    w_pool = Tensor(rng.standard_normal((2, 2, 2)))

    def project(out: Tensor, w: Tensor) -> Tensor:
        return T.tsum(T.mul(out, w))

    return [
        ("affine", lambda x, W, b: project(T.affine(x, W, b), w_affine), {"x": emb(n, d), "W": emb(d, 3), "b": emb(3)}),
        ("conv2d", lambda x, K: project(T.conv2d(x, K, stride=1, padding=1), w_conv), {"x": emb(3, 4, 4), "K": emb(2, 3, 3, 3)}),
        ("conv2d_strided", lambda x, K: T.tsum(T.square(T.conv2d(x, K, stride=2, padding=1))), {"x": emb(2, 3, 5, 5), "K": emb(2, 3, 3, 3)}),
        ("relu", lambda x: project(T.relu(x), w_nd), {"x": relu_x}),
        ("softmax_row", lambda x: project(T.softmax_row(x), w_nd), {"x": emb(n, d)}),
        ("log_softmax_row", lambda x: project(T.log_softmax_row(x), w_nd), {"x": emb(n, d)}),
        ("l2_normalize", lambda x: project(T.l2_normalize(x), w_nd), {"x": emb(n, d)}),
        ("cosine_similarity", lambda u, v: project(T.cosine_similarity(u, v), w_n), {"u": emb(n, d), "v": emb(n, d)}),
        ("max_pool2d", lambda x: project(T.max_pool2d(x, 2), w_pool), {"x": emb(2, 4, 4)}),
        ("global_avg_pool", lambda x: T.tsum(T.square(T.global_avg_pool(x))), {"x": emb(2, 3, 4, 4)}),
        ("triplet_loss", lambda x, y, z: T.mean(triplet_loss(x, y, z, 1.0)), trip),
        ("infonce_loss", lambda images, texts: infonce_loss(images, texts, 0.7), {"images": emb(n, d), "texts": emb(n, d)}),
        ("infonce_loss_symmetric", lambda images, texts: infonce_loss(images, texts, 1.0, symmetric=True), {"images": emb(n, d), "texts": emb(n, d)}),
        ("attentive_fusion", fusion_fn, {"e_sv": e_sv, "e_rv": e_rv, **fusion_fixed}),
        ("mlp_mse_loss", mlp_fn, {"x": mlp_x, **mlp_w}),
    ]


def hs_cases(rng: np.random.Generator) -> list[CheckResult]:
    d, depth = 6, 4
    w = rng.standard_normal(d)
    nodes = rng.standard_normal((depth, d))
    code = "".join(str(b) for b in rng.integers(0, 2, depth))
    err_w = grad_check(lambda x: hs_pair_loss(x, nodes, code), w, grad_fn=lambda x: hs_pair_grad(x, nodes, code)[0])
    err_n = grad_check(
        lambda x: hs_pair_loss(w, x.reshape(depth, d), code),
        nodes.reshape(-1),
        grad_fn=lambda x: hs_pair_grad(w, x.reshape(depth, d), code)[1].reshape(-1),
    )
    return [CheckResult("hs_pair_loss", -1, "center", err_w), CheckResult("hs_pair_loss", -1, "nodes", err_n)]


def gradient_suite(seeds: int = 20) -> tuple[list[CheckResult], float]:
    """Run every registered check for ``seeds`` random seeds; returns results and wall time."""
    start = time.perf_counter()
    results: list[CheckResult] = []
    with T.default_dtype(np.float64):
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            for name, fn, args in _cases(rng):
                results.extend(_check_args(name, seed, fn, args))
            for r in hs_cases(rng):
                r.seed = seed
                results.append(r)
    return results, time.perf_counter() - start
