import json
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from viewtoken.camera import SamplingRanges
from viewtoken.conditioning import BACKGROUND_PHRASES
from viewtoken.dataset import (
    DatasetConfig,
    DatasetManifest,
    MixedBatchSampler,
    ToyDataset,
    check_disjoint_seeds,
    derive_seed,
    generate_dataset,
    generate_rendered_split,
    make_background,
)
from viewtoken.evaluation import TestSpec
from viewtoken.exceptions import ConfigurationError
from viewtoken.render import make_object

SMALL = {
    "objects": [["car", "red"], ["chair", "blue"], ["animal", "green"]],
    "views_per_object": 10,
    "augmented_objects": 2,
    "augmented_views": 5,
    "image_size": 24,
    "seed": 3,
}


@pytest.fixture(scope="module")
def small_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(DatasetConfig.from_dict(SMALL), root)
    return root


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGeneration:
    def test_counts_and_layout(self, small_root):
        ds = ToyDataset(small_root)
        ds.validate()
        assert ds.manifest.counts == {"rendered": 30, "augmented": 10}
        assert (small_root / "rendered" / "images" / "0000_0000.png").exists()
        assert Image.open(small_root / "rendered" / "images" / "0000_0000.png").mode == "RGBA"
        assert Image.open(small_root / "augmented" / "images" / "0000_0000_00.png").mode == "RGB"

    def test_rendered_split_scaled_count(self, tmp_path):
        objects = [make_object(k, c) for k in ("car", "chair") for c in ("red", "green", "blue", "purple", "teal")]
        samples, seeds = generate_rendered_split(objects, 120, SamplingRanges(), 0, tmp_path, image_size=8)
        assert len(samples) == 1200
        assert len(set(seeds)) == 10

    def test_poses_inside_ranges(self, small_root):
        ds = ToyDataset(small_root)
        ranges = ds.manifest.sampling_ranges
        for split in ("rendered", "augmented"):
            for s in ds.splits[split]:
                assert ranges.contains(s.pose)

    def test_augmented_preserves_pose_and_has_phrase(self, small_root):
        ds = ToyDataset(small_root)
        for s in ds.splits["augmented"]:
            assert s.source_pose == s.pose
            assert s.background in BACKGROUND_PHRASES
            assert s.caption.endswith(s.background)
        for s in ds.splits["rendered"]:
            assert s.background is None
            assert not any(p in s.caption for p in BACKGROUND_PHRASES)

    def test_deterministic_bytes(self, small_root, tmp_path):
        generate_dataset(DatasetConfig.from_dict(SMALL), tmp_path)
        assert _tree_bytes(small_root) == _tree_bytes(tmp_path)

    def test_manifest_round_trip_bytes(self, small_root):
        text = (small_root / "manifest.json").read_text()
        assert DatasetManifest.from_json(text).to_json() == text

    def test_meta_round_trip_bytes(self, small_root):
        ds = ToyDataset(small_root)
        lines = (small_root / "rendered" / "meta.jsonl").read_text().splitlines()
        for line, sample in zip(lines, ds.splits["rendered"]):
            assert json.dumps(sample.to_record(), sort_keys=True) == line

    def test_images_loaded_over_white(self, small_root):
        ds = ToyDataset(small_root)
        img = ds.image(ds.splits["rendered"][0])
        assert img.dtype == np.float32 and img.shape == (24, 24, 3)
        assert np.all(img[0, 0] == 1.0)

    def test_bad_config(self, tmp_path):
        with pytest.raises(ConfigurationError):
            DatasetConfig.from_dict({"objectz": []})
        with pytest.raises(ConfigurationError):
            generate_dataset(DatasetConfig(objects=[["boat", "red"]]), tmp_path)
        with pytest.raises(ConfigurationError):
            generate_dataset(DatasetConfig(objects=[["car", "red"]], augmented_objects=2), tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ToyDataset(tmp_path)


class TestSeeds:
    def test_splits_do_not_share_seeds(self):
        seeds = {derive_seed(0, split, i) for split in ("rendered", "augmented", "test") for i in range(50)}
        assert len(seeds) == 150

    def test_test_seeds_disjoint(self, small_root):
        ds = ToyDataset(small_root)
        spec = TestSpec(objects=[{"kind": "car", "color": "red", "group": "easy"}], seed=SMALL["seed"])
        assert check_disjoint_seeds(ds.manifest, spec.pose_seeds())
        leaked = ds.manifest.pose_seeds["rendered"][:1]
        assert not check_disjoint_seeds(ds.manifest, leaked)

    def test_backgrounds(self):
        rng = np.random.default_rng(0)
        for phrase, kind in BACKGROUND_PHRASES.items():
            got, bg = make_background(phrase, rng, 16)
            assert got == kind
            if kind == "procedural-texture":
                assert bg.shape == (16, 16, 3) and bg.min() >= 0 and bg.max() <= 1


class TestMixedSampler:
    def test_exact_halves(self):
        sampler = MixedBatchSampler([("r", i) for i in range(30)], [("a", i) for i in range(7)], 8, seed=0)
        for _ in range(100):
            batch = sampler.next_batch()
            assert Counter(s[0] for s in batch) == {"r": 4, "a": 4}

    def test_epoch_coverage(self):
        augmented = [("a", i) for i in range(20)]
        sampler = MixedBatchSampler([("r", i) for i in range(50)], augmented, 8, seed=1)
        seen = Counter()
        for _ in range(5):  # 5 batches x 4 = one pass over the augmented split
            seen.update(s for s in sampler.next_batch() if s[0] == "a")
        assert set(seen) == set(augmented)
        assert all(v == 1 for v in seen.values())

    def test_deterministic_and_resumable(self):
        r, a = list(range(13)), list(range(100, 105))
        s1 = MixedBatchSampler(r, a, 4, seed=9)
        s2 = MixedBatchSampler(r, a, 4, seed=9)
        assert [s1.next_batch() for _ in range(20)] == [s2.next_batch() for _ in range(20)]
        state = s1.get_state()
        ahead = [s1.next_batch() for _ in range(10)]
        s2.set_state(json.loads(json.dumps(state)))
        assert [s2.next_batch() for _ in range(10)] == ahead

    def test_per_sample_mode_is_balanced_on_average(self):
        sampler = MixedBatchSampler(list(range(10)), list(range(100, 110)), 8, seed=2, mode="per_sample")
        counts = Counter(x < 100 for _ in range(500) for x in sampler.next_batch())
        assert abs(counts[True] - 2000) < 150

    @pytest.mark.parametrize("kwargs", [{"batch_size": 7}, {"batch_size": 0}, {"mode": "per_epoch"}])
    def test_bad_args(self, kwargs):
        args = {"rendered": [1], "augmented": [2], "batch_size": 8, **kwargs}
        with pytest.raises(ConfigurationError):
            MixedBatchSampler(**args)

    def test_empty_split_rejected(self):
        with pytest.raises(ConfigurationError):
            MixedBatchSampler([1, 2], [], 4)
