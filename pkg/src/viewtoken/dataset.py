"""Two-part toy dataset: clean renders plus appearance-augmented renders.

On-disk layout::

    <root>/manifest.json
    <root>/rendered/images/*.png     RGBA, transparent background
    <root>/rendered/meta.jsonl
    <root>/augmented/images/*.png    RGB, procedural background
    <root>/augmented/meta.jsonl

Metadata stores angles in degrees, rounded to 10 decimals so that loading and
re-serializing a record is byte-stable.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraPose, SamplingRanges, sample_poses
from .conditioning import BACKGROUND_PHRASES, Vocabulary, make_caption
from .exceptions import ConfigurationError
from .render import COLORS, OBJECT_KINDS, RenderSpec, ToyObject, composite_over, make_object, render

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "1.0"
SPLITS = ("rendered", "augmented")
_SPLIT_CODES = {"rendered": 1, "augmented": 2, "test": 3}
FILE_DECIMALS = 10


def derive_seed(base_seed: int, split: str, index: int) -> int:
    """Deterministic per-object seed; distinct splits never share a stream."""
    ss = np.random.SeedSequence([int(base_seed), _SPLIT_CODES[split], int(index)])
    return int(ss.generate_state(1)[0])


def pose_record(pose: CameraPose) -> dict:
    return {k: round(v, FILE_DECIMALS) for k, v in pose.to_record().items()}


def file_pose(pose: CameraPose) -> CameraPose:
    """The pose exactly as it will read back from a metadata file."""
    return CameraPose.from_record(pose_record(pose))


@dataclass
class Sample:
    image_path: str
    pose: CameraPose
    caption: str
    caption_ids: list
    object_span_end: int
    split: str
    object_name: str
    kind: str
    color: str
    background: str | None = None
    source_pose: CameraPose | None = None

    def to_record(self) -> dict:
        rec = {
            "image": self.image_path,
            "split": self.split,
            "object": self.object_name,
            "kind": self.kind,
            "color": self.color,
            "caption": self.caption,
            "caption_ids": list(self.caption_ids),
            "object_span_end": self.object_span_end,
            "pose": pose_record(self.pose),
            "background": self.background,
        }
        if self.source_pose is not None:
            rec["source_pose"] = pose_record(self.source_pose)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Sample":
        return cls(
            image_path=rec["image"],
            pose=CameraPose.from_record(rec["pose"]),
            caption=rec["caption"],
            caption_ids=list(rec["caption_ids"]),
            object_span_end=int(rec["object_span_end"]),
            split=rec["split"],
            object_name=rec["object"],
            kind=rec["kind"],
            color=rec["color"],
            background=rec.get("background"),
            source_pose=CameraPose.from_record(rec["source_pose"]) if "source_pose" in rec else None,
        )


@dataclass
class DatasetManifest:
    version: str
    ranges: dict
    counts: dict
    views_per_object: dict
    seed: int
    image_size: int
    objects: list
    pose_seeds: dict
    vocabulary: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))

    @property
    def sampling_ranges(self) -> SamplingRanges:
        return SamplingRanges.from_record(self.ranges)


@dataclass
class DatasetConfig:
    """Everything ``dataset gen`` needs. ``objects`` is a list of [kind, color]."""

    objects: list = field(
        default_factory=lambda: [[k, c] for k in OBJECT_KINDS for c in ("red", "green", "blue")]
    )
    views_per_object: int = 120
    augmented_objects: int = 8
    augmented_views: int = 20
    appearance_variants: int = 1
    image_size: int = 64
    color_jitter: float = 0.08
    seed: int = 0
    ranges: dict = field(default_factory=lambda: SamplingRanges().to_record())

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "DatasetConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def build_objects(self) -> list[ToyObject]:
        return [make_object(kind, color) for kind, color in self.objects]


def make_background(phrase: str, rng: np.random.Generator, size: int):
    """Return ``(background_kind, rgb_or_image)`` for a background phrase."""
    if phrase not in BACKGROUND_PHRASES:
        raise ConfigurationError(f"unknown background phrase {phrase!r}")
    jitter = rng.uniform(-0.04, 0.04, 3)
    if phrase == "in snow":
        return "flat-color", tuple(np.clip(np.array([0.93, 0.95, 0.98]) + jitter, 0, 1))
    if phrase == "at night":
        return "flat-color", tuple(np.clip(np.array([0.08, 0.10, 0.22]) + jitter, 0, 1))
    if phrase == "in fog":
        return "flat-color", tuple(np.clip(np.array([0.72, 0.74, 0.78]) + jitter, 0, 1))

    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    if phrase == "under a blue sky":
        top, bottom = np.array([0.35, 0.55, 0.95]), np.array([0.80, 0.90, 1.00])
        img = top + (bottom - top) * yy[..., None]
    elif phrase == "on a checkered floor":
        cells = int(rng.integers(3, 7))
        phase = rng.uniform(0, 1, 2)
        check = (np.floor(xx * cells + phase[0]) + np.floor(yy * cells + phase[1])) % 2
        img = np.where(check[..., None] > 0, 0.78, 0.35) * np.ones(3)
    else:
        base = {"on grass": [0.25, 0.55, 0.20], "on sand": [0.86, 0.76, 0.52]}[phrase]
        coarse = rng.normal(0.0, 0.06, (8, 8))
        idx = np.minimum((np.arange(size) * 8) // size, 7)
        noise = coarse[idx][:, idx] + rng.normal(0.0, 0.03, (size, size))
        img = np.asarray(base) + noise[..., None]
    return "procedural-texture", np.clip(img + jitter, 0.0, 1.0)


def _write_png(path: Path, array: np.ndarray):
    mode = "RGBA" if array.shape[-1] == 4 else "RGB"
    Image.fromarray(array, mode=mode).save(path, format="PNG", optimize=False)


def _write_split(root: Path, split: str, samples: list, images: list):
    split_dir = root / split
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for sample, img in zip(samples, images):
        _write_png(split_dir / sample.image_path, img)
        lines.append(json.dumps(sample.to_record(), sort_keys=True))
    (split_dir / "meta.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))


def generate_rendered_split(
    objects, views_per_object: int, ranges: SamplingRanges, seed: int, out_dir, image_size: int = 64, vocab=None
):
    """Render ``views_per_object`` i.i.d. poses of every object on a transparent background."""
    if views_per_object < 1:
        raise ConfigurationError("views_per_object must be >= 1")
    vocab = Vocabulary.build() if vocab is None else vocab
    spec = RenderSpec(image_size, image_size)
    samples, images, seeds = [], [], []
    for i, obj in enumerate(objects):
        obj_seed = derive_seed(seed, "rendered", i)
        seeds.append(obj_seed)
        poses = sample_poses(np.random.default_rng(obj_seed), ranges, views_per_object)
        words, span = make_caption(obj.color_name, obj.kind)
        for v, pose in enumerate(poses):
            pose = file_pose(pose)
            samples.append(
                Sample(
                    image_path=f"images/{i:04d}_{v:04d}.png",
                    pose=pose,
                    caption=" ".join(words),
                    caption_ids=vocab.encode(words),
                    object_span_end=span,
                    split="rendered",
                    object_name=obj.name,
                    kind=obj.kind,
                    color=obj.color_name,
                )
            )
            images.append(render(obj, pose, spec))
    _write_split(Path(out_dir), "rendered", samples, images)
    logger.info("rendered split: %d samples", len(samples))
    return samples, seeds


def generate_augmented_split(
    objects,
    views_per_object: int,
    appearance_variants: int,
    ranges: SamplingRanges,
    seed: int,
    out_dir,
    image_size: int = 64,
    color_jitter: float = 0.08,
    vocab=None,
):
    """Render fresh poses and re-dress them with a background and jittered colour.

    Geometry and pose of each sample are exactly those of its source render.
    """
    if not objects:
        raise ConfigurationError("augmented split needs a non-empty object subset")
    if views_per_object < 1 or appearance_variants < 1:
        raise ConfigurationError("views_per_object and appearance_variants must be >= 1")
    vocab = Vocabulary.build() if vocab is None else vocab
    phrases = list(BACKGROUND_PHRASES)
    samples, images, seeds = [], [], []
    for i, obj in enumerate(objects):
        obj_seed = derive_seed(seed, "augmented", i)
        seeds.append(obj_seed)
        rng = np.random.default_rng(obj_seed)
        poses = sample_poses(rng, ranges, views_per_object)
        for v, pose in enumerate(poses):
            pose = file_pose(pose)
            for a in range(appearance_variants):
                phrase = phrases[int(rng.integers(len(phrases)))]
                bg_kind, bg = make_background(phrase, rng, image_size)
                if bg_kind == "flat-color":
                    spec = RenderSpec(image_size, image_size, background=bg_kind, background_rgb=bg)
                else:
                    spec = RenderSpec(image_size, image_size, background=bg_kind, background_image=bg)
                color = np.clip(np.asarray(obj.color) + rng.normal(0.0, color_jitter, 3), 0.0, 1.0)
                words, span = make_caption(obj.color_name, obj.kind, phrase)
                samples.append(
                    Sample(
                        image_path=f"images/{i:04d}_{v:04d}_{a:02d}.png",
                        pose=pose,
                        caption=" ".join(words),
                        caption_ids=vocab.encode(words),
                        object_span_end=span,
                        split="augmented",
                        object_name=obj.name,
                        kind=obj.kind,
                        color=obj.color_name,
                        background=phrase,
                        source_pose=pose,
                    )
                )
                images.append(render(obj, pose, spec, color=color)[..., :3].copy())
    _write_split(Path(out_dir), "augmented", samples, images)
    logger.info("augmented split: %d samples", len(samples))
    return samples, seeds


def generate_dataset(config: DatasetConfig, out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    ranges = SamplingRanges.from_record(config.ranges)
    for kind, color in config.objects:
        if kind not in OBJECT_KINDS or color not in COLORS:
            raise ConfigurationError(f"unknown object {kind!r}/{color!r}")
    objects = config.build_objects()
    if not 1 <= config.augmented_objects <= len(objects):
        raise ConfigurationError("augmented_objects must be between 1 and the number of objects")
    # evenly spread subset so every kind is represented when possible
    picks = np.linspace(0, len(objects) - 1, config.augmented_objects).round().astype(int)
    subset = [objects[i] for i in dict.fromkeys(picks.tolist())]
    vocab = Vocabulary.build()

    rendered, r_seeds = generate_rendered_split(
        objects, config.views_per_object, ranges, config.seed, out_dir, config.image_size, vocab
    )
    augmented, a_seeds = generate_augmented_split(
        subset,
        config.augmented_views,
        config.appearance_variants,
        ranges,
        config.seed,
        out_dir,
        config.image_size,
        config.color_jitter,
        vocab,
    )
    per_object = {}
    for s in rendered + augmented:
        key = f"{s.split}/{s.object_name}"
        per_object[key] = per_object.get(key, 0) + 1
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        ranges=ranges.to_record(),
        counts={"rendered": len(rendered), "augmented": len(augmented)},
        views_per_object=per_object,
        seed=int(config.seed),
        image_size=int(config.image_size),
        objects=[list(o) for o in config.objects],
        pose_seeds={"rendered": r_seeds, "augmented": a_seeds},
        vocabulary=list(vocab.tokens),
    )
    (out_dir / "manifest.json").write_text(manifest.to_json())
    return manifest


class ToyDataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json under {self.root}")
        self.manifest = DatasetManifest.from_json(manifest_path.read_text())
        self.splits = {split: self.load_split(split) for split in SPLITS}
        self._cache = {}

    def load_split(self, split: str) -> list[Sample]:
        path = self.root / split / "meta.jsonl"
        if not path.exists():
            return []
        return [Sample.from_record(json.loads(line)) for line in path.read_text().splitlines() if line]

    def validate(self):
        """Check that manifest counts match the records and images on disk."""
        for split in SPLITS:
            samples = self.splits[split]
            if len(samples) != self.manifest.counts.get(split, 0):
                raise ValueError(f"{split}: manifest says {self.manifest.counts.get(split)}, found {len(samples)}")
            missing = [s.image_path for s in samples if not (self.root / split / s.image_path).exists()]
            if missing:
                raise ValueError(f"{split}: {len(missing)} images missing, e.g. {missing[0]}")

    @property
    def vocabulary_tokens(self) -> list:
        return list(self.manifest.vocabulary)

    def image(self, sample: Sample) -> np.ndarray:
        """Float32 RGB in [0, 1]; transparent renders are composited over white."""
        key = (sample.split, sample.image_path)
        if key not in self._cache:
            arr = np.asarray(Image.open(self.root / sample.split / sample.image_path))
            self._cache[key] = composite_over(arr) if arr.shape[-1] == 4 else arr.astype(np.float32) / 255.0
        return self._cache[key]

    def images(self, samples) -> np.ndarray:
        return np.stack([self.image(s) for s in samples])


class MixedBatchSampler:
    """Draws batches from the rendered and augmented splits.

    ``mode="per_batch"`` (default) gives exactly half of every batch to each
    split. ``mode="per_sample"`` assigns each slot to a split with
    probability 1/2. Within a split, samples are visited in a random order
    that is reshuffled every time the split is exhausted.
    """

    def __init__(self, rendered, augmented, batch_size: int, seed=0, mode: str = "per_batch"):
        if not rendered or not augmented:
            raise ConfigurationError("mixed sampling needs both rendered and augmented samples")
        if batch_size < 2 or batch_size % 2:
            raise ConfigurationError(f"batch_size must be even and >= 2, got {batch_size}")
        if mode not in ("per_batch", "per_sample"):
            raise ConfigurationError(f"unknown mixing mode {mode!r}")
        self.pools = {"rendered": list(rendered), "augmented": list(augmented)}
        self.batch_size = batch_size
        self.mode = mode
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._order = {k: self.rng.permutation(len(v)) for k, v in self.pools.items()}
        self._pos = {k: 0 for k in self.pools}
        self.epochs = {k: 0 for k in self.pools}

    def _take(self, split: str, n: int) -> list:
        out = []
        while len(out) < n:
            if self._pos[split] == len(self._order[split]):
                self._order[split] = self.rng.permutation(len(self.pools[split]))
                self._pos[split] = 0
                self.epochs[split] += 1
            k = min(n - len(out), len(self._order[split]) - self._pos[split])
            idx = self._order[split][self._pos[split] : self._pos[split] + k]
            out += [self.pools[split][i] for i in idx]
            self._pos[split] += k
        return out

    def next_batch(self) -> list:
        if self.mode == "per_batch":
            half = self.batch_size // 2
            return self._take("rendered", half) + self._take("augmented", half)
        n_rendered = int((self.rng.random(self.batch_size) < 0.5).sum())
        return self._take("rendered", n_rendered) + self._take("augmented", self.batch_size - n_rendered)

    def __iter__(self):
        while True:
            yield self.next_batch()

    def get_state(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "order": {k: v.tolist() for k, v in self._order.items()},
            "pos": dict(self._pos),
            "epochs": dict(self.epochs),
        }

    def set_state(self, state: dict):
        self.rng.bit_generator.state = state["rng"]
        self._order = {k: np.asarray(v) for k, v in state["order"].items()}
        self._pos = dict(state["pos"])
        self.epochs = dict(state["epochs"])


def check_disjoint_seeds(train: DatasetManifest, test_seeds) -> bool:
    """True when no test pose seed appears among the training pose seeds."""
    used = {s for seeds in train.pose_seeds.values() for s in seeds}
    return used.isdisjoint(set(test_seeds))
