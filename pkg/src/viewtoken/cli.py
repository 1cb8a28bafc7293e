"""Command line entry point: ``viewtoken <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .camera import CameraPose

logger = logging.getLogger("viewtoken")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _dataset_gen(args):
    from .dataset import DatasetConfig, generate_dataset

    manifest = generate_dataset(DatasetConfig.from_file(args.config), args.out)
    print(json.dumps(manifest.counts))


def _train_generator(args):
    import torch

    from .dataset import ToyDataset
    from .generator import GeneratorConfig, TrainConfig, save_checkpoint, train_generator

    cfg = _read_json(args.config)
    dataset = ToyDataset(args.data)
    gen_cfg = GeneratorConfig(
        **{"radius_range": dataset.manifest.sampling_ranges.radius_range, **cfg.get("generator", {})}
    )
    train_cfg = TrainConfig(**cfg.get("train", {}))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(int(cfg.get("threads", 1)))
    ckpt, losses = train_generator(
        train_cfg, gen_cfg, dataset, int(cfg.get("seed", 0)), diagnostic_path=out.with_suffix(".diverged.pt")
    )
    save_checkpoint(ckpt, out)
    with open(out.with_name(out.stem + "_loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        w.writerows((i + 1, f"{v:.8f}") for i, v in enumerate(losses))


def _train_regressor(args):
    import torch

    from .dataset import ToyDataset
    from .regressor import LabeledImages, RegressorConfig, save_checkpoint, train_regressor, write_report_csv

    cfg = _read_json(args.config)
    dataset = ToyDataset(args.data)
    reg_cfg = RegressorConfig(
        **{
            "image_size": dataset.manifest.image_size,
            "radius_range": dataset.manifest.sampling_ranges.radius_range,
            **cfg.get("regressor", {}),
        }
    )
    masks = cfg.get("masks", {})
    sources = []
    for split in cfg.get("sources", ["rendered", "augmented"]):
        samples = dataset.splits[split]
        if samples:
            mask = np.asarray(masks.get(split, [True] * 6), bool)
            sources.append(LabeledImages(split, dataset.images(samples), [s.pose for s in samples], mask))
    torch.set_num_threads(int(cfg.get("threads", 1)))
    ckpt, report = train_regressor(reg_cfg, sources, int(cfg.get("seed", 0)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    write_report_csv(report, out.with_name(out.stem + "_report.csv"))


def _generate(args):
    from PIL import Image

    from .conditioning import parse_caption
    from .generator import generate_image, load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    words, span, _ = parse_caption(args.caption)
    index = {t: i for i, t in enumerate(ckpt["vocabulary"])}
    missing = [w for w in words if w not in index]
    if missing:
        raise SystemExit(f"caption words not in checkpoint vocabulary: {missing}")
    pose = CameraPose.from_degrees(args.az, args.el, args.r, args.pitch, args.yaw)
    image = generate_image(ckpt, [index[w] for w in words], span, pose, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="RGB").save(args.out, format="PNG")


def _eval(args):
    from .evaluation import TestSpec, aggregate, evaluate_viewpoint_accuracy, write_outputs

    spec = TestSpec.from_file(args.spec)
    table, records = evaluate_viewpoint_accuracy(args.gen, args.reg, spec, args.seed)
    write_outputs(records, args.out)
    if table is None or not table.valid:
        print("evaluation invalid: too many degenerate estimates", file=sys.stderr)
        return 2
    main = aggregate([r for r in records if r.case.subset == "main"])
    print(f"azimuth mean {main.mean('azimuth'):.2f} deg, median {main.median('azimuth'):.2f} deg over {main.count} cases")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewtoken", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset tools")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    gen = ds_sub.add_parser("gen", help="generate the two-part dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_dataset_gen)

    train = sub.add_parser("train", help="train a model")
    train_sub = train.add_subparsers(dest="model", required=True)
    for name, func in (("generator", _train_generator), ("regressor", _train_regressor)):
        p = train_sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    g = sub.add_parser("generate", help="generate one image")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--caption", required=True)
    g.add_argument("--az", type=float, required=True, help="azimuth, degrees")
    g.add_argument("--el", type=float, default=0.0, help="elevation, degrees")
    g.add_argument("--r", type=float, default=1.5, help="radius, object diameters")
    g.add_argument("--pitch", type=float, default=0.0, help="degrees, positive tilts down")
    g.add_argument("--yaw", type=float, default=0.0, help="degrees, positive turns left")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_generate)

    e = sub.add_parser("eval", help="viewpoint-accuracy evaluation")
    e.add_argument("--gen", required=True)
    e.add_argument("--reg", required=True)
    e.add_argument("--spec", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=None)
    e.set_defaults(func=_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except (ValueError, FileNotFoundError) as exc:  # ConfigurationError is a ValueError
        if args.verbose:
            raise
        print(f"viewtoken: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
