"""Stage-oriented command line.

Each subcommand reads the artifacts of earlier stages from ``--out``, writes
its own outputs there, and records a manifest under ``manifests/`` with the
sha256 of every input and output.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import mscl
from . import tensor as T
from .config import PipelineConfig, load_config
from .dataset import SPLITS, DatasetBundle, bundle_hash, generate_world, read_bundle, split_regions, write_bundle
from .errors import RegionCLError, StageError
from .evaluation import ABLATION_VARIANTS, ablation_suite, cluster_report, evaluate_variants
from .fusion import FusionParams, init_fusion, train_fusion, variant_embeddings
from .pipeline import PRECISIONS, mine_both, train_text
from .similarity import read_triplets, write_triplets
from .text import SkipGramParams, load_vocab, save_vocab
from .text import embed_bundle as embed_text
from .visual import checkpoint_tensors, embed_bundle as embed_images, params_from_checkpoint, train_visual_encoder
from .verify import gradient_suite

logger = logging.getLogger("regioncl")

MANIFEST_VERSION = 1

BUNDLE = "bundle"
TRIPLETS = "triplets.csv"
VISUAL_CKPT = "checkpoints/visual.mscl"
TEXT_W = "text/W.mscl"
TEXT_VOCAB = "text/vocab.tsv"
FUSION_CKPT = "checkpoints/fusion.mscl"
EMBEDDINGS = "embeddings.csv"


def _sha(path: Path) -> str:
    if path.is_dir():
        return bundle_hash(path)
    return mscl.file_sha256(path)


class Stage:
    """Context for one stage run: checks inputs, hashes outputs, writes the manifest."""

    def __init__(self, name: str, out: Path, config: PipelineConfig, inputs: list[str]):
        self.name = name
        self.out = out
        self.config = config
        self.inputs = inputs
        self.outputs: list[str] = []

    def path(self, rel: str) -> Path:
        return self.out / rel

    def check_inputs(self) -> dict[str, str]:
        recorded = {}
        manifests = self.out / "manifests"
        if manifests.exists():
            for mf in sorted(manifests.glob("*.json")):
                recorded.update(json.loads(mf.read_text())["outputs"])
        hashes = {}
        for rel in self.inputs:
            p = self.out / rel
            if not p.exists():
                raise StageError(f"stage {self.name!r} needs {rel}, which does not exist in {self.out}; run the producing stage first")
            digest = _sha(p)
            if rel in recorded and recorded[rel] != digest:
                raise StageError(f"stage {self.name!r}: {rel} changed since it was produced (hash mismatch)")
            hashes[rel] = digest
        return hashes

    def output(self, rel: str) -> Path:
        self.outputs.append(rel)
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_manifest(self, input_hashes: dict[str, str], wall: float) -> None:
        manifest = {
            "stage": self.name,
            "seed": self.config.run.seed,
            "precision": self.config.run.precision,
            "inputs": input_hashes,
            "outputs": {rel: _sha(self.out / rel) for rel in self.outputs},
            "wall_time_s": round(wall, 3),
            "formats": {"mscl": mscl.VERSION, "manifest": MANIFEST_VERSION},
        }
        path = self.out / "manifests" / f"{self.name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@contextlib.contextmanager
def _lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(f"{out} is locked by another stage ({lock}); remove it if no stage is running") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _run_stage(name: str, out: Path, config: PipelineConfig, inputs: list[str], body) -> None:
    with _lock(out):
        stage = Stage(name, out, config, inputs)
        hashes = stage.check_inputs()
        start = time.perf_counter()
        with T.default_dtype(PRECISIONS[config.run.precision]):
            body(stage)
        stage.write_manifest(hashes, time.perf_counter() - start)
        (out / "config.effective.txt").write_text(config.dumps())


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# stages


def cmd_generate(config: PipelineConfig, out: Path) -> None:
    def body(stage: Stage):
        bundle = generate_world(config.world)
        write_bundle(bundle, stage.output(BUNDLE))

    _run_stage("generate", out, config, [], body)


def cmd_mine(config: PipelineConfig, out: Path) -> None:
    def body(stage: Stage):
        bundle = read_bundle(stage.path(BUNDLE))
        triplets = mine_both(bundle, config)
        write_triplets(stage.output(TRIPLETS), triplets["SV"] + triplets["RV"])

    _run_stage("mine", out, config, [BUNDLE], body)


def cmd_train_visual(config: PipelineConfig, out: Path) -> None:
    def body(stage: Stage):
        bundle = read_bundle(stage.path(BUNDLE))
        triplets = read_triplets(stage.path(TRIPLETS))
        tensors = {}
        for modality, prefix in (("SV", "sv_encoder"), ("RV", "rv_encoder")):
            result = train_visual_encoder(bundle, [t for t in triplets if t.modality == modality], config.encoder, modality)
            tensors.update(checkpoint_tensors(result.params, prefix))
            _write_csv(
                stage.output(f"history_{modality.lower()}.csv"),
                ["epoch", "mean_loss"],
                [(i + 1, _fmt(v)) for i, v in enumerate(result.history)],
            )
        mscl.save(stage.output(VISUAL_CKPT), tensors)

    _run_stage("train-visual", out, config, [BUNDLE, TRIPLETS], body)


def cmd_train_text(config: PipelineConfig, out: Path) -> None:
    def body(stage: Stage):
        bundle = read_bundle(stage.path(BUNDLE))
        params = train_text(bundle, config)
        mscl.save(stage.output(TEXT_W), {"text/W": params.W})
        save_vocab(stage.output(TEXT_VOCAB), params.vocab)

    _run_stage("train-text", out, config, [BUNDLE], body)


def _load_tables(stage: Stage, config: PipelineConfig, bundle: DatasetBundle):
    ckpt = mscl.load(stage.path(VISUAL_CKPT))
    sv = embed_images(params_from_checkpoint(ckpt, "sv_encoder"), bundle, "SV", config.encoder)
    rv = embed_images(params_from_checkpoint(ckpt, "rv_encoder"), bundle, "RV", config.encoder)
    vocab = load_vocab(stage.path(TEXT_VOCAB))
    W = mscl.load(stage.path(TEXT_W))["text/W"].astype(np.float64)
    poi = embed_text(SkipGramParams(W=W, inner=np.zeros((0, W.shape[1])), vocab=vocab, window=config.text.window), bundle)
    return sv, rv, poi


def cmd_fuse(config: PipelineConfig, out: Path) -> None:
    def body(stage: Stage):
        bundle = read_bundle(stage.path(BUNDLE))
        sv, rv, poi = _load_tables(stage, config, bundle)
        splits = split_regions(bundle, config.run.split_ratios, seed=config.run.seed)
        result = train_fusion(sv, rv, poi, splits.train, config.align, all_ids=bundle.ids)
        mscl.save(stage.output(FUSION_CKPT), result.params.named())
        d = config.encoder.embedding_dim
        _write_csv(
            stage.output(EMBEDDINGS),
            ["region_id"] + [f"dim_{i}" for i in range(d)],
            [[rid] + [_fmt(v) for v in result.embeddings[rid]] for rid in bundle.ids],
        )
        _write_csv(
            stage.output("history_fusion.csv"),
            ["epoch", "mean_loss"],
            [(i + 1, _fmt(v)) for i, v in enumerate(result.history)],
        )

    _run_stage("fuse", out, config, [BUNDLE, VISUAL_CKPT, TEXT_W, TEXT_VOCAB], body)


def read_embeddings(path: Path) -> dict[int, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {int(row[0]): np.array([float(v) for v in row[1:]]) for row in reader}


def cmd_evaluate(config: PipelineConfig, out: Path) -> None:
    def body(stage: Stage):
        bundle = read_bundle(stage.path(BUNDLE))
        sv, rv, poi = _load_tables(stage, config, bundle)
        full = read_embeddings(stage.path(EMBEDDINGS))
        splits = split_regions(bundle, config.run.split_ratios, seed=config.run.seed)
        untrained = init_fusion(config.encoder.embedding_dim, config.text.dim, config.align, seed=config.align.seed)
        tables = {
            "poi_only": poi,
            "sv_only": sv,
            "rv_only": rv,
            "add_svrv": variant_embeddings("add_svrv", sv, rv),
            "fusion_svrv": variant_embeddings("fusion_svrv", sv, rv, params=untrained),
            "concat": variant_embeddings("concat", sv, rv, poi),
            "full": variant_embeddings("full", sv, rv, full=full),
        }
        rows = evaluate_variants(tables, bundle, splits, config.eval, seed=config.run.seed)
        for name in bundle.indicator_names():
            _write_csv(
                stage.output(f"report_{name}.csv"),
                ["variant", "split", "R2", "RMSE", "seed"],
                [(r.variant, r.split, _fmt(r.r2), _fmt(r.rmse), r.seed) for r in rows if r.indicator == name],
            )
        report = ablation_suite(rows, ABLATION_VARIANTS)
        stage.output("ablation.csv").write_text(report.to_csv(), encoding="utf-8")
        planted = {r.region_id: r.latent_cluster for r in bundle.regions} if bundle.latent_labels() is not None else None
        clusters = cluster_report(full, k=config.run.cluster_k, seed=config.run.seed, planted=planted)
        _write_csv(
            stage.output("clusters.csv"),
            ["region_id", "pc1", "pc2", "label"],
            [(rid, _fmt(c[0]), _fmt(c[1]), int(l)) for rid, c, l in zip(clusters.ids, clusters.coords, clusters.labels)],
        )
        if clusters.ari is not None:
            logger.info("k-means on PCA: ARI vs planted clusters %.3f", clusters.ari)
        for v in report.variants:
            logger.info("%-12s mean test R2 %.4f", v, report.mean_r2[v])

    _run_stage("evaluate", out, config, [BUNDLE, VISUAL_CKPT, TEXT_W, TEXT_VOCAB, EMBEDDINGS], body)


def cmd_gradcheck(config: PipelineConfig, out: Path | None, seeds: int = 20) -> int:
    results, wall = gradient_suite(seeds)
    failed = [r for r in results if not r.ok]
    worst: dict[str, float] = {}
    for r in results:
        worst[r.op] = max(worst.get(r.op, 0.0), r.error)
    for op, err in worst.items():
        print(f"{'PASS' if err < 1e-4 else 'FAIL'} {op:<24s} max rel err {err:.2e}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {wall:.1f}s")
    if out is not None:
        def body(stage: Stage):
            _write_csv(
                stage.output("gradcheck.csv"),
                ["op", "seed", "argument", "rel_error", "ok"],
                [(r.op, r.seed, r.argument, f"{r.error:.3e}", int(r.ok)) for r in results],
            )

        _run_stage("gradcheck", out, config, [], body)
    return 1 if failed else 0


COMMANDS = {
    "generate": cmd_generate,
    "mine": cmd_mine,
    "train-visual": cmd_train_visual,
    "train-text": cmd_train_text,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="key=value config file")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory (default: ./run)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed; stage seeds derive from it")
    common.add_argument("--precision", choices=sorted(PRECISIONS), default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="regioncl", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    gc = sub.add_parser("gradcheck", parents=[common])
    gc.add_argument("--seeds", type=int, default=20)
    sub.add_parser("run-all", parents=[common], help="every stage in order, ending with gradcheck")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    seed = getattr(args, "seed", None)
    cfg = cfg.with_seed(cfg.run.seed if seed is None else seed)
    if getattr(args, "precision", None):
        cfg.run.precision = args.precision
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = getattr(args, "out", Path("run"))
    try:
        config = resolve_config(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(config, out if hasattr(args, "out") else None, args.seeds)
        if args.command == "run-all":
            for fn in COMMANDS.values():
                fn(config, out)
            return cmd_gradcheck(config, out)
        COMMANDS[args.command](config, out)
    except RegionCLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
