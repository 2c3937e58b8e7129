"""In-memory end-to-end run: world -> triplets -> encoders -> text -> fusion -> reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import PipelineConfig
from .dataset import DatasetBundle, SplitAssignment, generate_world, split_regions
from .evaluation import ABLATION_VARIANTS, AblationRow, ClusterReport, cluster_report, evaluate_variants
from .fusion import FusionResult, init_fusion, train_fusion, variant_embeddings
from .similarity import MiningPolicy, Triplet, mine_triplets, similarity_matrix
from .text import SkipGramParams, build_huffman, build_vocab, region_corpus, skipgram_train
from .text import embed_bundle as embed_text
from .visual import TrainingResult, embed_bundle as embed_images, train_visual_encoder

logger = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}


def mine_both(bundle: DatasetBundle, config: PipelineConfig) -> dict[str, list[Triplet]]:
    policy: MiningPolicy = config.mining
    mob = similarity_matrix(bundle, "mobility", epsilon=config.run.epsilon)
    poi = similarity_matrix(bundle, "poi", epsilon=config.run.epsilon, normalize=config.run.poi_normalize)
    return {"SV": mine_triplets(mob, policy, "SV"), "RV": mine_triplets(poi, policy, "RV")}


def train_text(bundle: DatasetBundle, config: PipelineConfig) -> SkipGramParams:
    corpus = region_corpus(bundle, seed=config.text.seed)
    vocab = build_vocab(corpus, config.text.min_count)
    return skipgram_train(corpus, vocab, build_huffman(vocab), config.text)


@dataclass
class PipelineResult:
    bundle: DatasetBundle
    splits: SplitAssignment
    triplets: dict[str, list[Triplet]]
    visual: dict[str, TrainingResult]
    text: SkipGramParams
    tables: dict[str, dict[int, np.ndarray]]
    fusion: FusionResult
    clusters: ClusterReport
    ablation_rows: list[AblationRow] = field(default_factory=list)


def run_pipeline(config: PipelineConfig, evaluate: bool = True, variants=ABLATION_VARIANTS) -> PipelineResult:
    """Run every stage for ``config`` (seeds already applied, see ``with_seed``)."""
    with T.default_dtype(PRECISIONS[config.run.precision]):
        bundle = generate_world(config.world)
        splits = split_regions(bundle, config.run.split_ratios, seed=config.run.seed)
        triplets = mine_both(bundle, config)
        visual = {m: train_visual_encoder(bundle, triplets[m], config.encoder, m) for m in ("SV", "RV")}
        sv = embed_images(visual["SV"].params, bundle, "SV", config.encoder)
        rv = embed_images(visual["RV"].params, bundle, "RV", config.encoder)
        text = train_text(bundle, config)
        poi = embed_text(text, bundle)
        d, d_text = config.encoder.embedding_dim, config.text.dim
        untrained = init_fusion(d, d_text, config.align, seed=config.align.seed)
        fusion = train_fusion(sv, rv, poi, splits.train, config.align, all_ids=bundle.ids)
        tables = {
            "poi_only": poi,
            "sv_only": sv,
            "rv_only": rv,
            "add_svrv": variant_embeddings("add_svrv", sv, rv),
            "fusion_svrv": variant_embeddings("fusion_svrv", sv, rv, params=untrained),
            "concat": variant_embeddings("concat", sv, rv, poi),
            "full": variant_embeddings("full", sv, rv, full=fusion.embeddings),
        }
        planted = {r.region_id: r.latent_cluster for r in bundle.regions} if bundle.latent_labels() is not None else None
        clusters = cluster_report(tables["full"], k=config.run.cluster_k, seed=config.run.seed, planted=planted)
        rows = []
        if evaluate:
            rows = evaluate_variants({v: tables[v] for v in variants}, bundle, splits, config.eval, seed=config.run.seed)
    return PipelineResult(bundle, splits, triplets, visual, text, tables, fusion, clusters, rows)
