import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regioncl.dataset import (
    SyntheticWorldConfig,
    bundle_hash,
    generate_world,
    log_transform,
    read_bundle,
    split_regions,
    write_bundle,
)
from regioncl.errors import ConfigError, ContractError, FormatError, UnsupportedVersionError

from conftest import tiny_world


def test_same_seed_same_bundle_bytes(tmp_path):
    a, b = tiny_world(), tiny_world()
    assert a == b
    write_bundle(a, tmp_path / "a")
    write_bundle(b, tmp_path / "b")
    assert bundle_hash(tmp_path / "a") == bundle_hash(tmp_path / "b")


def test_different_seed_differs():
    assert tiny_world(seed=1) != tiny_world(seed=2)


def test_generation_identical_across_processes(tmp_path):
    code = (
        "import sys; sys.path.insert(0, 'tests');"
        "from conftest import tiny_world; from regioncl.dataset import write_bundle;"
        "write_bundle(tiny_world(), sys.argv[1])"
    )
    for name in ("p1", "p2"):
        subprocess.run([sys.executable, "-c", code, str(tmp_path / name)], check=True, cwd=str(__import__("pathlib").Path(__file__).parents[1]))
    assert bundle_hash(tmp_path / "p1") == bundle_hash(tmp_path / "p2")


def test_noiseless_clusters_share_counts_and_flows():
    world = tiny_world(count_noise=0.0, flow_noise=0.0, pixel_noise=0.0, indicator_noise=0.0, corrupt_fraction=0.0)
    by_cluster = {}
    for r in world.regions:
        by_cluster.setdefault(r.latent_cluster, []).append(r)
    for members in by_cluster.values():
        for r in members[1:]:
            np.testing.assert_array_equal(r.poi_counts, members[0].poi_counts)
            assert r.mobility == members[0].mobility


def test_nearest_centroid_recovers_clusters():
    world = generate_world(SyntheticWorldConfig(n_regions=150, image_shape=(3, 8, 8), comments_per_region=0, seed=3))
    feats = np.hstack([world.poi_matrix(), world.mobility_matrix()])
    feats = (feats - feats.mean(0)) / feats.std(0)
    labels = world.latent_labels()
    centroids = np.stack([feats[labels == c].mean(0) for c in range(3)])
    pred = np.argmin(((feats[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == labels) >= 0.95


def test_invariants_hold(small_world):
    K = small_world.n_poi_types
    for r in small_world.regions:
        assert len(r.poi_counts) == K
        assert np.all(r.poi_counts >= 0)
        assert min(r.mobility) >= 0
        assert r.sv_images
        assert all(im.shape == small_world.image_shape for im in r.sv_images)
        assert r.rv_image.shape == small_world.image_shape
        assert sum(r.poi_counts) == len(r.poi_categories)


@pytest.mark.parametrize(
    "overrides",
    [dict(n_regions=8, n_latent_clusters=3), dict(pixel_noise=-0.1), dict(count_noise=-1.0), dict(images_per_region=(0, 1))],
)
def test_invalid_config(overrides):
    with pytest.raises(ConfigError):
        generate_world(SyntheticWorldConfig(**overrides))


def test_write_read_round_trip(tmp_path, small_world):
    write_bundle(small_world, tmp_path / "b")
    back = read_bundle(tmp_path / "b")
    assert back == small_world
    write_bundle(back, tmp_path / "c")
    assert bundle_hash(tmp_path / "b") == bundle_hash(tmp_path / "c")


def test_truncated_images_file(tmp_path, small_world):
    write_bundle(small_world, tmp_path / "b")
    path = tmp_path / "b" / "images.mscl"
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError):
        read_bundle(tmp_path / "b")


def test_version_bump_in_images_file(tmp_path, small_world):
    write_bundle(small_world, tmp_path / "b")
    path = tmp_path / "b" / "images.mscl"
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersionError):
        read_bundle(tmp_path / "b")


def test_missing_bundle_file(tmp_path, small_world):
    write_bundle(small_world, tmp_path / "b")
    (tmp_path / "b" / "manifest.txt").unlink()
    with pytest.raises(FormatError, match="manifest"):
        read_bundle(tmp_path / "b")


# ---------------------------------------------------------------------------
# splits


def test_split_ten_regions():
    s = split_regions(range(10), seed=0)
    assert (len(s.train), len(s.validation), len(s.test)) == (6, 2, 2)


def test_split_hundred_regions():
    s = split_regions(range(100), seed=4)
    assert (len(s.train), len(s.validation), len(s.test)) == (60, 20, 20)


def test_split_seeds_differ_counts_same():
    a, b = split_regions(range(30), seed=0), split_regions(range(30), seed=1)
    assert a.assignment != b.assignment
    assert [len(a.ids(k)) for k in ("train", "validation", "test")] == [len(b.ids(k)) for k in ("train", "validation", "test")]


def test_split_too_few_regions():
    with pytest.raises(ContractError):
        split_regions([0, 1])


def test_split_bad_ratios():
    with pytest.raises(ContractError):
        split_regions(range(10), ratios=(0.5, 0.2, 0.2))


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 300), st.integers(0, 2**32 - 1))
def test_split_is_reproducible_partition(n, seed):
    s = split_regions(range(n), seed=seed)
    assert s == split_regions(range(n), seed=seed)
    parts = [set(s.train), set(s.validation), set(s.test)]
    assert set().union(*parts) == set(range(n))
    assert sum(len(p) for p in parts) == n
    for got, ratio in zip(parts, (0.6, 0.2, 0.2)):
        assert abs(len(got) - ratio * n) <= 1


# ---------------------------------------------------------------------------
# log targets


@pytest.mark.parametrize("x,expected", [(0.0, 0.0), (math.e - 1, 1.0), (99.0, math.log(100.0))])
def test_log_transform(x, expected):
    assert log_transform(x) == pytest.approx(expected, abs=1e-12)


def test_log_transform_negative():
    with pytest.raises(ContractError):
        log_transform(-0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1e9), st.floats(0, 1e9))
def test_log_transform_monotone(a, b):
    if a < b:
        assert log_transform(a) <= log_transform(b)
