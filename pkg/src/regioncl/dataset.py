"""Region records, the planted synthetic world, bundle I/O and splits."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import mscl
from .errors import ConfigError, ContractError, FormatError

POI_TYPES = (
    "restaurant", "retail", "office", "school", "park", "hospital", "hotel", "transit",
    "bank", "museum", "gym", "market", "cinema", "library", "factory", "pharmacy",
)
POI_GRADES = ("small", "chain", "premium")
DESCRIPTORS = (
    "quiet", "green", "spacious", "historic", "busy", "crowded", "noisy", "lively",
    "modern", "upscale", "glossy", "expensive", "old", "worn", "cheap", "cramped",
)
INDICATORS = ("population_density", "housing_density", "crime")


@dataclass
class RegionRecord:
    region_id: int
    poi_counts: np.ndarray
    mobility: tuple[int, int]
    poi_categories: list[list[str]]
    sv_images: list[np.ndarray]
    rv_image: np.ndarray
    indicators: dict[str, float]
    comments: list[list[str]] = field(default_factory=list)
    latent_cluster: int | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionRecord):
            return NotImplemented
        return (
            self.region_id == other.region_id
            and np.array_equal(self.poi_counts, other.poi_counts)
            and tuple(self.mobility) == tuple(other.mobility)
            and self.poi_categories == other.poi_categories
            and len(self.sv_images) == len(other.sv_images)
            and all(_bits_equal(a, b) for a, b in zip(self.sv_images, other.sv_images))
            and _bits_equal(self.rv_image, other.rv_image)
            and _floats_equal(self.indicators, other.indicators)
            and self.comments == other.comments
            and self.latent_cluster == other.latent_cluster
        )


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def _floats_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(
        np.float64(a[k]).tobytes() == np.float64(b[k]).tobytes() for k in a
    )


@dataclass
class SyntheticWorldConfig:
    n_regions: int = 150
    n_latent_clusters: int = 3
    n_poi_types: int = 8
    image_shape: tuple[int, int, int] = (3, 32, 32)
    images_per_region: tuple[int, int] = (1, 3)
    count_noise: float = 1.0
    flow_noise: float = 0.15
    pixel_noise: float = 0.15
    corrupt_fraction: float = 0.2
    indicator_noise: float = 0.3
    comments_per_region: int = 3
    comment_length: int = 6
    seed: int = 0

    def validate(self) -> None:
        if self.n_latent_clusters < 1 or self.n_regions < 3 * self.n_latent_clusters:
            raise ConfigError(f"n_regions ({self.n_regions}) must be >= 3 * n_latent_clusters ({self.n_latent_clusters})")
        if not 1 <= self.n_poi_types <= len(POI_TYPES):
            raise ConfigError(f"n_poi_types must be in [1, {len(POI_TYPES)}]")
        for name in ("count_noise", "flow_noise", "pixel_noise", "corrupt_fraction", "indicator_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.corrupt_fraction > 1:
            raise ConfigError("corrupt_fraction must be <= 1")
        c, h, w = self.image_shape
        if min(c, h, w) < 1:
            raise ConfigError(f"bad image_shape {self.image_shape}")
        lo, hi = self.images_per_region
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad images_per_region {self.images_per_region}")


@dataclass
class DatasetBundle:
    regions: list[RegionRecord]
    n_poi_types: int
    image_shape: tuple[int, int, int]
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.regions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (
            self.n_poi_types == other.n_poi_types
            and tuple(self.image_shape) == tuple(other.image_shape)
            and self.seed == other.seed
            and self.regions == other.regions
        )

    def region(self, region_id: int) -> RegionRecord:
        return self.regions[self._index()[region_id]]

    def _index(self) -> dict[int, int]:
        return {r.region_id: i for i, r in enumerate(self.regions)}

    @property
    def ids(self) -> list[int]:
        return [r.region_id for r in self.regions]

    def poi_matrix(self) -> np.ndarray:
        return np.stack([r.poi_counts for r in self.regions]).astype(np.float64)

    def mobility_matrix(self) -> np.ndarray:
        return np.array([r.mobility for r in self.regions], dtype=np.float64)

    def latent_labels(self) -> np.ndarray | None:
        if any(r.latent_cluster is None for r in self.regions):
            return None
        return np.array([r.latent_cluster for r in self.regions])

    def indicator_names(self) -> list[str]:
        return sorted(self.regions[0].indicators) if self.regions else []


# ---------------------------------------------------------------------------
# synthetic world


def _stripes(rng, shape, angle, freq, tint, phase) -> np.ndarray:
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    return 0.5 + 0.35 * wave[None] * tint[:, None, None]


def _blocks(rng, shape, block, tint, density, offset) -> np.ndarray:
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    cells = ((yy + offset[0]) // block + (xx + offset[1]) // block) % 2
    built = np.where(cells == 0, density, 1.0 - density)
    return 0.15 + 0.7 * built[None] * tint[:, None, None]


def generate_world(config: SyntheticWorldConfig) -> DatasetBundle:
    """Sample a world whose regions carry a known latent cluster.

    Every modality and every indicator depends on the cluster: POI type
    rates, mobility means, street-view stripe motifs, remote-sensing block
    motifs, category grades and comment descriptors. A ``corrupt_fraction``
    of regions has one image modality replaced by motif-free noise.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    k = config.n_latent_clusters
    K = config.n_poi_types
    shape = tuple(config.image_shape)
    c_img = shape[0]

    # cluster-level parameters
    levels = np.linspace(0.0, 1.0, k) if k > 1 else np.zeros(1)
    poi_rates = 2.0 + 14.0 * rng.random((k, K))
    perm_in, perm_out = rng.permutation(k), rng.permutation(k)
    flow_in = 150.0 + 250.0 * perm_in
    flow_out = 150.0 + 250.0 * perm_out
    sv_angle = np.pi * np.arange(k) / k
    sv_freq = 2.0 + 2.0 * rng.permutation(k)
    sv_tint = 0.4 + 0.6 * rng.random((k, c_img))
    rv_block = np.array([2 ** (1 + (i % 4)) for i in rng.permutation(k)])
    rv_tint = 0.4 + 0.6 * rng.random((k, c_img))
    rv_density = 0.2 + 0.6 * levels
    n_grades = len(POI_GRADES)
    n_desc = len(DESCRIPTORS)

    labels = np.arange(config.n_regions) % k
    rng.shuffle(labels)

    regions = []
    for rid in range(config.n_regions):
        c = int(labels[rid])
        rates = poi_rates[c]
        counts = np.maximum(0, np.rint(rates + config.count_noise * np.sqrt(rates) * rng.standard_normal(K))).astype(np.int64)
        m_in = max(0, int(round(flow_in[c] * (1 + config.flow_noise * rng.standard_normal()))))
        m_out = max(0, int(round(flow_out[c] * (1 + config.flow_noise * rng.standard_normal()))))

        categories = []
        for t in range(K):
            for _ in range(counts[t]):
                p = np.full(n_grades, 0.2 / max(1, n_grades - 1))
                p[(c + t) % n_grades] = 0.8
                grade = POI_GRADES[rng.choice(n_grades, p=p / p.sum())]
                categories.append([POI_TYPES[t], f"{POI_TYPES[t]}_{grade}"])

        desc_p = np.full(n_desc, 1.0)
        favoured = [(c * (n_desc // k) + j) % n_desc for j in range(n_desc // k)]
        desc_p[favoured] = 6.0
        desc_p /= desc_p.sum()
        comments = []
        for _ in range(config.comments_per_region):
            sentence = []
            for _ in range(config.comment_length):
                if categories and rng.random() < 0.5:
                    sentence.append(categories[rng.integers(len(categories))][1])
                else:
                    sentence.append(DESCRIPTORS[rng.choice(n_desc, p=desc_p)])
            comments.append(sentence)

        corrupt = rng.random() < config.corrupt_fraction
        corrupt_sv = corrupt and rng.random() < 0.5
        corrupt_rv = corrupt and not corrupt_sv

        n_sv = int(rng.integers(config.images_per_region[0], config.images_per_region[1] + 1))
        sv_images = []
        for _ in range(n_sv):
            if corrupt_sv:
                base = np.full(shape, 0.5) + 0.25 * rng.standard_normal(shape)
            else:
                base = _stripes(rng, shape, sv_angle[c], sv_freq[c], sv_tint[c], rng.uniform(0, 2 * np.pi))
            sv_images.append((base + config.pixel_noise * rng.standard_normal(shape)).astype(np.float32))
        if corrupt_rv:
            rv_base = np.full(shape, 0.5) + 0.25 * rng.standard_normal(shape)
        else:
            offset = rng.integers(0, rv_block[c], size=2)
            rv_base = _blocks(rng, shape, int(rv_block[c]), rv_tint[c], rv_density[c], offset)
        rv_image = (rv_base + config.pixel_noise * rng.standard_normal(shape)).astype(np.float32)

        lvl = levels[c]
        noise = config.indicator_noise
        indicators = {
            "population_density": float(round(2000.0 * math.exp(1.5 * lvl + noise * rng.standard_normal()), 3)),
            "housing_density": float(round(400.0 * math.exp(1.2 * lvl + noise * rng.standard_normal()), 3)),
            "crime": float(max(0, round(3.0 * math.exp(1.8 * (1.0 - lvl) + noise * rng.standard_normal()) - 1.0))),
        }
        regions.append(
            RegionRecord(
                region_id=rid,
                poi_counts=counts,
                mobility=(m_in, m_out),
                poi_categories=categories,
                sv_images=sv_images,
                rv_image=rv_image,
                indicators=indicators,
                comments=comments,
                latent_cluster=c,
            )
        )
    return DatasetBundle(regions=regions, n_poi_types=K, image_shape=shape, seed=config.seed)


# ---------------------------------------------------------------------------
# bundle I/O


def write_bundle(bundle: DatasetBundle, path: str | os.PathLike) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    tensors: dict[str, np.ndarray] = {}
    for r in bundle.regions:
        if len(r.poi_counts) != bundle.n_poi_types:
            raise ContractError(f"region {r.region_id} has {len(r.poi_counts)} POI counts, bundle K={bundle.n_poi_types}")
        record = {
            "id": r.region_id,
            "poi_counts": [int(v) for v in r.poi_counts],
            "mobility": [int(r.mobility[0]), int(r.mobility[1])],
            "categories": r.poi_categories,
            "comments": r.comments,
            "indicators": {k: float(v) for k, v in sorted(r.indicators.items())},
            "latent_cluster": r.latent_cluster,
            "n_sv": len(r.sv_images),
        }
        lines.append(json.dumps(record, ensure_ascii=False, sort_keys=True))
        for i, img in enumerate(r.sv_images):
            tensors[f"sv/{r.region_id}/{i}"] = img
        tensors[f"rv/{r.region_id}"] = r.rv_image
    (out / "regions.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    mscl.save(out / "images.mscl", tensors)
    c, h, w = bundle.image_shape
    manifest = [
        f"K={bundle.n_poi_types}",
        f"image_dims={c}x{h}x{w}",
        f"n_regions={len(bundle.regions)}",
        f"seed={'' if bundle.seed is None else bundle.seed}",
    ]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")


def _read_manifest(path: Path) -> dict[str, str]:
    entries = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{path.name}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def read_bundle(path: str | os.PathLike) -> DatasetBundle:
    root = Path(path)
    for name in ("regions.jsonl", "images.mscl", "manifest.txt"):
        if not (root / name).exists():
            raise FormatError(f"bundle {root} is missing {name}")
    manifest = _read_manifest(root / "manifest.txt")
    try:
        K = int(manifest["K"])
        shape = tuple(int(v) for v in manifest["image_dims"].split("x"))
        n_regions = int(manifest["n_regions"])
        seed = int(manifest["seed"]) if manifest.get("seed") else None
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad manifest in {root}: {exc}") from exc
    tensors = mscl.load(root / "images.mscl")
    regions = []
    raw = (root / "regions.jsonl").read_bytes()
    offset = 0
    for line in raw.split(b"\n"):
        if line.strip():
            try:
                rec = json.loads(line.decode("utf-8"))
                rid = int(rec["id"])
                sv = [tensors[f"sv/{rid}/{i}"] for i in range(int(rec["n_sv"]))]
                rv = tensors[f"rv/{rid}"]
                regions.append(
                    RegionRecord(
                        region_id=rid,
                        poi_counts=np.array(rec["poi_counts"], dtype=np.int64),
                        mobility=(int(rec["mobility"][0]), int(rec["mobility"][1])),
                        poi_categories=[list(c) for c in rec["categories"]],
                        sv_images=sv,
                        rv_image=rv,
                        indicators={k: float(v) for k, v in rec["indicators"].items()},
                        comments=[list(c) for c in rec.get("comments", [])],
                        latent_cluster=rec.get("latent_cluster"),
                    )
                )
            except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
                raise FormatError(f"bad region record in regions.jsonl: {exc}", offset=offset) from exc
        offset += len(line) + 1
    if len(regions) != n_regions:
        raise FormatError(f"manifest lists {n_regions} regions, found {len(regions)}")
    for r in regions:
        if len(r.poi_counts) != K or r.rv_image.shape != shape or any(im.shape != shape for im in r.sv_images):
            raise FormatError(f"region {r.region_id} does not match manifest dimensions")
    return DatasetBundle(regions=regions, n_poi_types=K, image_shape=shape, seed=seed)


def bundle_hash(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    for name in ("manifest.txt", "regions.jsonl", "images.mscl"):
        h.update(name.encode())
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# splits and targets


@dataclass
class SplitAssignment:
    assignment: dict[int, str]

    def ids(self, split: str) -> list[int]:
        return sorted(rid for rid, s in self.assignment.items() if s == split)

    @property
    def train(self) -> list[int]:
        return self.ids("train")

    @property
    def validation(self) -> list[int]:
        return self.ids("validation")

    @property
    def test(self) -> list[int]:
        return self.ids("test")


SPLITS = ("train", "validation", "test")


def split_regions(bundle_or_ids, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitAssignment:
    """Seeded shuffle, then contiguous train/validation/test blocks."""
    ids = bundle_or_ids.ids if isinstance(bundle_or_ids, DatasetBundle) else list(bundle_or_ids)
    if len(ids) < 3:
        raise ContractError(f"need at least 3 regions to split, got {len(ids)}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ContractError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    n = len(ids)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    assignment = {}
    for pos, idx in enumerate(order):
        split = "train" if pos < n_train else "validation" if pos < n_train + n_val else "test"
        assignment[ids[idx]] = split
    return SplitAssignment(assignment)


def log_transform(value):
    """``ln(1 + value)``; works elementwise on arrays."""
    arr = np.asarray(value, dtype=np.float64)
    if np.any(arr < 0):
        raise ContractError("log_transform needs nonnegative values")
    out = np.log1p(arr)
    return float(out) if out.ndim == 0 else out


def config_to_dict(config: SyntheticWorldConfig) -> dict:
    return asdict(config)
