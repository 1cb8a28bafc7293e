"""Viewpoint-accuracy evaluation: generate -> regress -> decode -> errors.

Main test cases draw poses from the training ranges. Challenging cases are
back views (azimuth in [135, 225] deg) and high-elevation views
(elevation = 40 deg).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraPose, SamplingRanges, pose_errors, sample_poses
from .conditioning import Vocabulary, make_caption
from .dataset import derive_seed, file_pose, pose_record
from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

COMPONENTS = ("azimuth", "elevation", "radius", "yaw", "pitch")
MAX_EXCLUDED_FRAC = 0.01


@dataclass
class TestSpec:
    """Objects, backgrounds and pose budget of a test set.

    ``objects`` entries are ``{"kind", "color", "group"}`` with group
    ``easy`` or ``diverse``. ``backgrounds`` may contain ``None`` for a plain
    caption.
    """

    __test__ = False  # not a pytest class despite the name

    objects: list
    backgrounds: list = field(default_factory=lambda: [None])
    views_per_pair: int = 10
    back_views: int = 2
    high_elevation_views: int = 2
    back_azimuth_deg: tuple = (135.0, 225.0)
    high_elevation_deg: float = 40.0
    ranges: dict = field(default_factory=lambda: SamplingRanges().to_record())
    seed: int = 1000

    def __post_init__(self):
        for obj in self.objects:
            if obj.get("group") not in ("easy", "diverse"):
                raise ConfigurationError(f"object {obj} needs group 'easy' or 'diverse'")
        if self.views_per_pair < 0 or self.back_views < 0 or self.high_elevation_views < 0:
            raise ConfigurationError("view counts must be non-negative")

    @classmethod
    def from_file(cls, path) -> "TestSpec":
        return cls(**json.loads(Path(path).read_text()))

    def pose_seeds(self) -> list:
        n_pairs = len(self.objects) * len(self.backgrounds)
        return [derive_seed(self.seed, "test", i) for i in range(n_pairs)]


@dataclass
class TestCase:
    __test__ = False

    case_id: int
    object_name: str
    kind: str
    color: str
    group: str
    subset: str
    background: str | None
    caption: str
    caption_ids: list
    object_span_end: int
    pose: CameraPose
    noise_seed: int

    @property
    def tags(self) -> list:
        return [self.group] + ([self.subset] if self.subset != "main" else [])


def build_test_cases(spec: TestSpec, vocab: Vocabulary | None = None) -> list[TestCase]:
    vocab = Vocabulary.build() if vocab is None else vocab
    ranges = SamplingRanges.from_record(spec.ranges)
    lo_az, hi_az = (math.radians(a) for a in spec.back_azimuth_deg)
    cases = []
    pair_seeds = spec.pose_seeds()
    pair = 0
    for obj in spec.objects:
        for bg in spec.backgrounds:
            rng = np.random.default_rng(pair_seeds[pair])
            pair += 1
            main = sample_poses(rng, ranges, spec.views_per_pair)
            back = [
                CameraPose(rng.uniform(lo_az, hi_az), p.elevation, p.radius, p.pitch, p.yaw)
                for p in sample_poses(rng, ranges, spec.back_views)
            ]
            high = [
                CameraPose(p.azimuth, math.radians(spec.high_elevation_deg), p.radius, p.pitch, p.yaw)
                for p in sample_poses(rng, ranges, spec.high_elevation_views)
            ]
            words, span = make_caption(obj["color"], obj["kind"], bg)
            for subset, poses in (("main", main), ("back-view", back), ("high-elevation", high)):
                for pose in poses:
                    cid = len(cases)
                    cases.append(
                        TestCase(
                            case_id=cid,
                            object_name=f"{obj['color']}-{obj['kind']}",
                            kind=obj["kind"],
                            color=obj["color"],
                            group=obj["group"],
                            subset=subset,
                            background=bg,
                            caption=" ".join(words),
                            caption_ids=vocab.encode(words),
                            object_span_end=span,
                            pose=file_pose(pose),
                            noise_seed=derive_seed(spec.seed, "test", 1_000_000 + cid),
                        )
                    )
    return cases


@dataclass
class EvalRecord:
    case: TestCase
    estimate: CameraPose | None
    errors: dict | None

    @property
    def excluded(self) -> bool:
        return self.estimate is None

    @property
    def tags(self) -> list:
        return self.case.tags

    def to_record(self) -> dict:
        rec = {
            "case_id": self.case.case_id,
            "object": self.case.object_name,
            "group": self.case.group,
            "subset": self.case.subset,
            "tags": self.tags,
            "caption": self.case.caption,
            "requested": pose_record(self.case.pose),
            "estimated": None if self.estimate is None else pose_record(self.estimate),
            "errors": None
            if self.errors is None
            else {k: round(float(v), 10) for k, v in self.errors.items()},
        }
        return rec


@dataclass
class MetricsTable:
    """Per-component (mean, median) over included records."""

    stats: dict
    count: int
    excluded: int

    @property
    def excluded_frac(self) -> float:
        total = self.count + self.excluded
        return self.excluded / total if total else 0.0

    @property
    def valid(self) -> bool:
        return self.excluded_frac <= MAX_EXCLUDED_FRAC

    def mean(self, component: str) -> float:
        return self.stats[component][0]

    def median(self, component: str) -> float:
        return self.stats[component][1]


def aggregate(records) -> MetricsTable | None:
    """Mean/median per component; ``None`` when no record is included."""
    included = [r for r in records if not r.excluded]
    excluded = len(records) - len(included)
    if not included:
        return None
    stats = {}
    for comp in COMPONENTS:
        vals = np.array([r.errors[comp] for r in included], float)
        stats[comp] = (float(np.mean(vals)), float(np.median(vals)))
    return MetricsTable(stats, len(included), excluded)


def score_estimates(cases, estimates) -> list[EvalRecord]:
    records = []
    for case, est in zip(cases, estimates):
        if est is None:
            records.append(EvalRecord(case, None, None))
            continue
        errs = {k: float(v[0]) for k, v in pose_errors([case.pose], [est]).items()}
        records.append(EvalRecord(case, est, errs))
    return records


DEFAULT_GROUPINGS = {
    "whole": lambda r: r.case.subset == "main",
    "easy": lambda r: r.case.subset == "main" and r.case.group == "easy",
    "diverse": lambda r: r.case.subset == "main" and r.case.group == "diverse",
    "challenging": lambda r: r.case.subset != "main",
    "challenging-easy": lambda r: r.case.subset != "main" and r.case.group == "easy",
    "challenging-diverse": lambda r: r.case.subset != "main" and r.case.group == "diverse",
    "back-view": lambda r: r.case.subset == "back-view",
    "high-elevation": lambda r: r.case.subset == "high-elevation",
}


def error_breakdown(records, grouping=None) -> dict:
    """Aggregate per group. Groups without records map to ``None`` (absent).

    ``grouping`` maps a group name to a predicate over :class:`EvalRecord`
    or is a tag name list (records carrying the tag form the group).
    """
    grouping = DEFAULT_GROUPINGS if grouping is None else grouping
    if not isinstance(grouping, dict):
        grouping = {tag: (lambda r, tag=tag: tag in r.tags) for tag in grouping}
    return {name: aggregate([r for r in records if pred(r)]) for name, pred in grouping.items()}


# ---------------------------------------------------------------------------
# pipeline


def _checkpoint_generator(generator, batch_size=64):
    from .generator import generate_images, load_checkpoint, model_from_checkpoint

    ckpt = generator if isinstance(generator, dict) else load_checkpoint(generator)
    bundle = model_from_checkpoint(ckpt)

    def run(cases):
        out = []
        for i in range(0, len(cases), batch_size):
            chunk = cases[i : i + batch_size]
            out.append(
                generate_images(
                    bundle,
                    [c.caption_ids for c in chunk],
                    [c.object_span_end for c in chunk],
                    [c.pose for c in chunk],
                    seeds=[c.noise_seed for c in chunk],
                )
            )
        return np.concatenate(out)

    return run, list(ckpt["vocabulary"])


def _checkpoint_regressor(regressor):
    from .regressor import load_regressor, predict_poses

    net, config = load_regressor(regressor)

    def run(images):
        return [None if e is None else e.decoded for e in predict_poses(net, images, config.radius_range)]

    return run


def evaluate_viewpoint_accuracy(generator, regressor, test_spec: TestSpec, seed: int | None = None):
    """Run the full pipeline over ``test_spec``.

    ``generator`` is a checkpoint (dict or path) or a callable mapping a list
    of :class:`TestCase` to uint8 images. ``regressor`` is a checkpoint or a
    callable mapping images to a list of poses (``None`` for degenerate
    estimates). ``seed`` overrides ``test_spec.seed``.

    Returns ``(overall MetricsTable, records)``.
    """
    if seed is not None:
        test_spec = TestSpec(**{**asdict(test_spec), "seed": seed})
    vocab = None
    if callable(generator) and not isinstance(generator, (str, Path)):
        gen_fn = generator
    else:
        gen_fn, tokens = _checkpoint_generator(generator)
        vocab = Vocabulary(tokens, np.zeros((len(tokens), 1)))
    reg_fn = regressor if callable(regressor) and not isinstance(regressor, (str, Path)) else _checkpoint_regressor(regressor)

    cases = build_test_cases(test_spec, vocab)
    images = gen_fn(cases)
    estimates = reg_fn(images)
    if len(estimates) != len(cases):
        raise ValueError("regressor returned a different number of estimates than cases")
    records = score_estimates(cases, estimates)
    table = aggregate(records)
    if table is None or not table.valid:
        n_ex = sum(r.excluded for r in records)
        logger.warning("evaluation invalid: %d of %d estimates degenerate", n_ex, len(records))
    return table, records


def _stats_row(table: MetricsTable | None) -> list:
    if table is None:
        return [0, 0] + ["--"] * (2 * len(COMPONENTS))
    row = [table.count, table.excluded]
    for comp in COMPONENTS:
        row += [f"{table.stats[comp][0]:.6f}", f"{table.stats[comp][1]:.6f}"]
    return row


_HEADER = ["n", "excluded"] + [f"{c}_{s}" for c in COMPONENTS for s in ("mean", "median")]


def write_outputs(records, out_dir, label: str = "ours"):
    """Write ``metrics.csv``, ``breakdown.csv`` and ``records.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    main = [r for r in records if r.case.subset == "main"]
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method"] + _HEADER)
        w.writerow([label] + _stats_row(aggregate(main)))
    breakdown = error_breakdown(records)
    whole = breakdown["whole"]
    with open(out_dir / "breakdown.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group"] + _HEADER + ["azimuth_mean_delta_vs_whole"])
        for name, table in breakdown.items():
            delta = "--"
            if table is not None and whole is not None and name.startswith(("challenging", "back", "high")):
                # round before formatting so float noise never prints as -0.000000
                diff = round(table.mean("azimuth") - whole.mean("azimuth"), 9) + 0.0
                delta = f"{diff:+.6f}"
            w.writerow([name] + _stats_row(table) + [delta])
    with open(out_dir / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
