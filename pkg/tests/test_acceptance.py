"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 3-5 train real models at desk scale (32 px images, CPU). The scale
knobs live in ``SCALE``. One regressor and five generators are trained, which
takes about two and a half hours on one CPU core.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
import torch

from viewtoken.camera import (
    CameraPose,
    SamplingRanges,
    angular_difference,
    pose_to_camera_frame,
)
from viewtoken.conditioning import ViewpointMLPConfig, viewpoint_mlp_forward
from viewtoken.dataset import DatasetConfig, MixedBatchSampler, ToyDataset, check_disjoint_seeds, generate_dataset
from viewtoken.encoding import encode_factorized, plucker_rays
from viewtoken.evaluation import COMPONENTS, TestSpec as EvalSpec
from viewtoken.evaluation import aggregate, evaluate_viewpoint_accuracy
from viewtoken.generator import (
    GeneratorConfig,
    TrainConfig,
    ViewpointGeneratorModel,
    make_optimizer,
    param_groups,
    train_generator,
    training_step,
    warmup_cosine,
)
from viewtoken.conditioning import Vocabulary
from viewtoken.regressor import LabeledImages, RegressorConfig, train_regressor

pytestmark = pytest.mark.slow

KINDS = ("car", "animal", "chair", "signpost")
COLORS = ("red", "green", "blue", "purple", "teal")
# 16 kind/colour pairs; one colour per kind is left out of training
TRAIN_OBJECTS = [[k, c] for i, k in enumerate(KINDS) for j, c in enumerate(COLORS) if (i + j) % 5 != 4]
EASY_KINDS = ("car", "chair")

SCALE = {
    "image_size": 32,
    "views_per_object": 500,
    "augmented_objects": 8,
    "augmented_views": 20,
    "regressor": {"epochs": 40, "lr": 2e-3, "batch_size": 64},
    "generator": {"embed_dim": 64, "channels": (32, 64, 128), "mlp_hidden_dim": 1024, "sample_steps": 20},
    "train": {"iterations": 6000, "batch_size": 32, "lr_new": 1e-3, "lr_backbone": 5e-4, "log_every": 0},
    "test_seed": 1000,
}


# ---------------------------------------------------------------------------
# shared trained artefacts


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_data")
    config = DatasetConfig(
        objects=TRAIN_OBJECTS,
        views_per_object=SCALE["views_per_object"],
        augmented_objects=SCALE["augmented_objects"],
        augmented_views=SCALE["augmented_views"],
        image_size=SCALE["image_size"],
        seed=0,
    )
    generate_dataset(config, root)
    ds = ToyDataset(root)
    ds.validate()
    return ds


@pytest.fixture(scope="session")
def trained_regressor(toy_dataset):
    torch.set_num_threads(1)
    sources = [
        LabeledImages(split, toy_dataset.images(toy_dataset.splits[split]), [s.pose for s in toy_dataset.splits[split]])
        for split in ("rendered", "augmented")
    ]
    config = RegressorConfig(
        image_size=SCALE["image_size"], radius_range=toy_dataset.manifest.sampling_ranges.radius_range, **SCALE["regressor"]
    )
    start = time.perf_counter()
    ckpt, report = train_regressor(config, sources, seed=0)
    return ckpt, report, time.perf_counter() - start


def _test_spec():
    objects = [{"kind": k, "color": c, "group": "easy" if k in EASY_KINDS else "diverse"} for k, c in TRAIN_OBJECTS]
    return EvalSpec(objects=objects, views_per_pair=10, back_views=2, high_elevation_views=2, seed=SCALE["test_seed"])


_GENERATORS = {}


def _generator_eval(toy_dataset, trained_regressor, encoding="factorized", token_mode="mlp", seed=0):
    key = (encoding, token_mode, seed)
    if key not in _GENERATORS:
        torch.set_num_threads(1)
        gen_cfg = GeneratorConfig(
            image_size=SCALE["image_size"],
            encoding=encoding,
            token_mode=token_mode,
            radius_range=toy_dataset.manifest.sampling_ranges.radius_range,
            **SCALE["generator"],
        )
        ckpt, losses = train_generator(TrainConfig(**SCALE["train"]), gen_cfg, toy_dataset, seed=seed)
        table, records = evaluate_viewpoint_accuracy(ckpt, trained_regressor[0], _test_spec())
        main = aggregate([r for r in records if r.case.subset == "main"])
        _GENERATORS[key] = {"ckpt": ckpt, "losses": losses, "table": table, "main": main, "records": records}
    return _GENERATORS[key]


# ---------------------------------------------------------------------------
# 1. geometry property suite


def test_criterion_1_geometry_properties(acceptance):
    rng = np.random.default_rng(2024)
    n = 10_000
    start = time.perf_counter()
    failures = []
    r_range = (4 / 3, 2.0)
    for i in range(n):
        az = rng.uniform(-20, 20)
        el = rng.uniform(-1.5, 1.5)
        r = rng.uniform(4 / 3, 2.0)
        pitch, yaw = rng.uniform(-math.pi / 12, math.pi / 12, 2)
        k = int(rng.integers(-100, 101))
        pose = CameraPose(az, el, r, pitch, yaw)
        enc = encode_factorized(pose, r_range).data
        shifted = encode_factorized(CameraPose(az + 2 * math.pi * k, el, r, pitch, yaw), r_range).data
        if np.abs(enc - shifted).max() > 1e-6:
            failures.append(("periodicity", i))
        if abs(enc[0] ** 2 + enc[1] ** 2 - 1) > 1e-6:
            failures.append(("unit-circle", i))
        frame = pose_to_camera_frame(pose)
        rot = frame.rotation
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(rot) - 1) > 1e-6:
            failures.append(("rotation", i))
        look = pose_to_camera_frame(CameraPose(az, el, r))
        # closest approach of the forward ray to the origin
        p, f = look.position, look.forward
        if np.linalg.norm(p - np.dot(p, f) * f) > 1e-6 or np.dot(-p, f) <= 0:
            failures.append(("look-at", i))
        rays = plucker_rays(pose, 2, 2)
        d, m = rays[..., :3], rays[..., 3:]
        if np.abs(np.linalg.norm(d, axis=-1) - 1).max() > 1e-5 or np.abs((d * m).sum(-1)).max() > 1e-5:
            failures.append(("plucker", i))
        a, b, c = rng.uniform(-720, 720, 3)
        ab = angular_difference(a, b)
        if not (
            0 <= ab <= 180
            and abs(ab - angular_difference(b, a)) < 1e-9
            and ab <= angular_difference(a, c) + angular_difference(c, b) + 1e-9
        ):
            failures.append(("circular", i))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 5.0
    acceptance(1, "geometry property suite", ok, f"{n} fuzzed cases, {len(failures)} failures, {elapsed:.2f} s (limit 5 s)")
    assert not failures, failures[:5]
    assert elapsed < 5.0


# ---------------------------------------------------------------------------
# 2. gradient check


def _fd_config(rng):
    """Random MLP weights and input with every ReLU pre-activation away from its kink."""
    while True:
        layers = int(rng.integers(1, 5))
        cfg = ViewpointMLPConfig(
            input_dim=int(rng.integers(2, 9)),
            hidden_dim=int(rng.integers(2, 13)),
            num_layers=layers,
            output_dim=int(rng.integers(1, 9)),
        )
        weights = [(rng.normal(size=(o, i)), rng.normal(size=o)) for i, o in cfg.layer_dims()]
        x = rng.normal(size=cfg.input_dim)
        h, margin = x, np.inf
        for w, b in weights[:-1]:
            pre = w @ h + b
            margin = min(margin, np.abs(pre).min())
            h = np.maximum(pre, 0)
        # a weight nudge of 1e-4 moves a pre-activation by at most 1e-4 * |input|
        if margin > 1e-2:
            return cfg, weights, x


def _objective(x, weights):
    # plain numpy forward, independent of the torch implementation
    h = x
    for i, (w, b) in enumerate(weights):
        h = w @ h + b
        if i < len(weights) - 1:
            h = np.maximum(h, 0.0)
    return float(np.sum(h**2))


def test_criterion_2_gradient_check(acceptance):
    rng = np.random.default_rng(7)
    h = 1e-4
    start = time.perf_counter()
    worst, layer_counts, checked = 0.0, set(), 0
    for _ in range(100):
        cfg, weights, x = _fd_config(rng)
        layer_counts.add(cfg.num_layers)
        tw = [(torch.tensor(w, requires_grad=True), torch.tensor(b, requires_grad=True)) for w, b in weights]
        (viewpoint_mlp_forward(torch.tensor(x), tw) ** 2).sum().backward()
        for li, (w, b) in enumerate(weights):
            for param, grad in ((w, tw[li][0].grad.numpy()), (b, tw[li][1].grad.numpy())):
                for idx in np.ndindex(param.shape):
                    orig = param[idx]
                    param[idx] = orig + h
                    fp = _objective(x, weights)
                    param[idx] = orig - h
                    fm = _objective(x, weights)
                    param[idx] = orig
                    fd = (fp - fm) / (2 * h)
                    denom = max(abs(fd), abs(grad[idx]), 1e-8)
                    worst = max(worst, abs(fd - grad[idx]) / denom)
                    checked += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and layer_counts == {1, 2, 3, 4} and elapsed < 60
    acceptance(
        2,
        "viewpoint-MLP gradient check",
        ok,
        f"100 configs, layers {sorted(layer_counts)}, {checked} parameters, max rel err {worst:.2e} (limit 1e-3), {elapsed:.1f} s",
    )
    assert ok


# ---------------------------------------------------------------------------
# 3. regressor accuracy on held-out renders


def test_criterion_3_regressor_accuracy(acceptance, toy_dataset, trained_regressor):
    _, report, seconds = trained_regressor
    rendered = report["rendered"]["errors"]
    az, el = rendered["azimuth"][0], rendered["elevation"][0]
    n_objects = len(toy_dataset.manifest.objects)
    ok = az <= 10.0 and el <= 5.0 and seconds <= 8 * 3600 and n_objects >= 12
    acceptance(
        3,
        "regressor held-out renders",
        ok,
        f"{n_objects} objects x {SCALE['views_per_object']} views; azimuth mean {az:.2f} deg (<= 10), "
        f"median {rendered['azimuth'][1]:.2f}; elevation mean {el:.2f} deg (<= 5); trained in {seconds / 60:.1f} min CPU",
    )
    assert ok


# ---------------------------------------------------------------------------
# 4. end-to-end viewpoint control vs constant-token control


def test_criterion_4_viewpoint_control(acceptance, toy_dataset, trained_regressor):
    ours = _generator_eval(toy_dataset, trained_regressor, "factorized", "mlp", seed=0)
    const = _generator_eval(toy_dataset, trained_regressor, "factorized", "constant", seed=0)
    test_seeds = _test_spec().pose_seeds()
    assert check_disjoint_seeds(toy_dataset.manifest, test_seeds)
    az_ours, az_const = ours["main"].mean("azimuth"), const["main"].mean("azimuth")
    ok = (
        ours["table"].valid
        and az_ours <= 30.0
        and az_const >= 2 * az_ours
        and abs(az_const - 90.0) <= 20.0
    )
    acceptance(
        4,
        "end-to-end viewpoint control",
        ok,
        f"factorized azimuth mean {az_ours:.2f} deg (<= 30), median {ours['main'].median('azimuth'):.2f}; "
        f"constant-token {az_const:.2f} deg (needs >= {2 * az_ours:.2f} and within 90 +/- 20); "
        f"elevation {ours['main'].mean('elevation'):.2f}, excluded {ours['table'].excluded}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 5. encoding ablation ordering


def test_criterion_5_encoding_ablation(acceptance, toy_dataset, trained_regressor):
    fact = [_generator_eval(toy_dataset, trained_regressor, "factorized", "mlp", seed=s)["main"].mean("azimuth") for s in (0, 1)]
    sinu = [_generator_eval(toy_dataset, trained_regressor, "sinusoidal", "mlp", seed=s)["main"].mean("azimuth") for s in (0, 1)]
    ok = np.mean(fact) <= np.mean(sinu)
    acceptance(
        5,
        "factorized vs sinusoidal encoding",
        ok,
        f"factorized seeds {[round(v, 2) for v in fact]} mean {np.mean(fact):.2f} deg; "
        f"sinusoidal {[round(v, 2) for v in sinu]} mean {np.mean(sinu):.2f} deg",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6. equal-mixing sampler


def test_criterion_6_equal_mixing(acceptance):
    rendered = [("rendered", i) for i in range(1200)]
    augmented = [("augmented", i) for i in range(160)]

    def run(seed):
        sampler = MixedBatchSampler(rendered, augmented, 8, seed=seed)
        return [sampler.next_batch() for _ in range(1000)]

    first, second = run(42), run(42)
    counts = {"rendered": 0, "augmented": 0}
    per_batch_exact = True
    for batch in first:
        kinds = [s[0] for s in batch]
        per_batch_exact &= kinds.count("rendered") == 4
        for k in kinds:
            counts[k] += 1
    deterministic = first == second
    ok = counts == {"rendered": 4000, "augmented": 4000} and per_batch_exact and deterministic
    acceptance(6, "equal-mixing sampler", ok, f"1000 batches of 8: {counts}, identical rerun: {deterministic}")
    assert ok


# ---------------------------------------------------------------------------
# 7. optimizer contract


def test_criterion_7_optimizer_contract(acceptance):
    gen_cfg = GeneratorConfig(image_size=16, embed_dim=16, channels=(8, 16, 16), attention_heads=2, mlp_hidden_dim=32)
    torch.manual_seed(0)
    model = ViewpointGeneratorModel(Vocabulary.build(16), gen_cfg)
    train_cfg = TrainConfig(iterations=1000)
    groups = param_groups(model, train_cfg)
    lrs = [g["lr"] for g in groups]
    mlp_ids = {id(p) for p in model.viewpoint.parameters()}
    partition = {id(p) for p in groups[0]["params"]} == mlp_ids and len(groups[0]["params"]) + len(
        groups[1]["params"]
    ) == len(list(model.parameters()))

    opt, sched = make_optimizer(model, train_cfg)
    trace = []
    for _ in range(train_cfg.iterations):
        trace.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
    trace.append(opt.param_groups[0]["lr"])
    peak = max(trace)
    peak_at_mark = math.isclose(trace[int(0.01 * train_cfg.iterations)], peak, rel_tol=1e-12)
    tail_ok = trace[-1] <= 0.01 * peak
    shape_ok = warmup_cosine(0, 1000, 0.01) < 1 and peak == pytest.approx(2e-4)

    model2 = ViewpointGeneratorModel(Vocabulary.build(16), gen_cfg)
    opt2, sched2 = make_optimizer(model2, TrainConfig(iterations=10))
    params = list(model2.parameters())
    gen = torch.Generator().manual_seed(1)
    g = [torch.randn(p.shape, generator=gen) for p in params]
    scale = 10.0 / torch.sqrt(sum((x**2).sum() for x in g))
    loss = sum((p * (x * scale)).sum() for p, x in zip(params, g))
    pre = training_step(model2, opt2, sched2, loss, TrainConfig().grad_clip_norm)
    post = torch.sqrt(sum((p.grad**2).sum() for p in params)).item()
    clip_ok = abs(pre - 10.0) < 1e-4 and abs(post - 1.0) < 1e-6

    ok = lrs == [2e-4, 2e-5] and partition and peak_at_mark and tail_ok and shape_ok and clip_ok
    acceptance(
        7,
        "optimizer contract",
        ok,
        f"group lrs {lrs}; peak at 1% mark {peak_at_mark}; final lr {trace[-1]:.2e} (<= {0.01 * peak:.2e}); "
        f"injected grad norm {pre:.4f} clipped to {post:.8f}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 8. evaluation harness oracle equivalence


def test_criterion_8_eval_oracle(acceptance):
    spec = _test_spec()
    state = {}

    def stub_generator(cases):
        state["cases"] = cases
        images = np.zeros((len(cases), 4, 4, 3), np.uint8)
        for i, c in enumerate(cases):
            images[i, 0, 0, 0], images[i, 0, 0, 1] = divmod(c.case_id, 256)
        return images

    def stub_regressor(offset_deg):
        def run(images):
            out = []
            for img in images:
                p = state["cases"][int(img[0, 0, 0]) * 256 + int(img[0, 0, 1])].pose
                out.append(CameraPose(p.azimuth + math.radians(offset_deg), p.elevation, p.radius, p.pitch, p.yaw))
            return out

        return run

    zero, _ = evaluate_viewpoint_accuracy(stub_generator, stub_regressor(0.0), spec)
    zero_ok = all(zero.mean(c) == 0 and zero.median(c) == 0 for c in COMPONENTS)
    ten, records = evaluate_viewpoint_accuracy(stub_generator, stub_regressor(10.0), spec)
    ten_ok = abs(ten.mean("azimuth") - 10) < 1e-9 and abs(ten.median("azimuth") - 10) < 1e-9
    others_ok = all(ten.mean(c) == 0 for c in COMPONENTS if c != "azimuth")

    # independent naive aggregation with jittered estimates
    rng = np.random.default_rng(3)
    from viewtoken.evaluation import score_estimates

    jitter = [
        CameraPose(r.case.pose.azimuth + rng.normal(0, 0.5), r.case.pose.elevation, r.case.pose.radius + rng.uniform(0, 0.1))
        for r in records
    ]
    scored = score_estimates([r.case for r in records], jitter)
    table = aggregate(scored)
    worst = 0.0
    for comp in COMPONENTS:
        vals = sorted(r.errors[comp] for r in scored)
        n = len(vals)
        mean = math.fsum(vals) / n
        median = vals[n // 2] if n % 2 else (vals[n // 2 - 1] + vals[n // 2]) / 2
        worst = max(worst, abs(mean - table.mean(comp)), abs(median - table.median(comp)))
    ok = zero_ok and ten_ok and others_ok and worst <= 1e-9
    acceptance(
        8,
        "evaluation oracle equivalence",
        ok,
        f"ground-truth stub all zero: {zero_ok}; +10 deg stub mean {ten.mean('azimuth'):.12f} median "
        f"{ten.median('azimuth'):.12f}; naive aggregation max diff {worst:.1e}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 9. pipeline determinism through the CLI


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_pipeline_determinism(acceptance, tmp_path):
    from viewtoken.cli import main

    (tmp_path / "data.json").write_text(
        json.dumps({"objects": [["car", "red"], ["chair", "blue"]], "views_per_object": 12, "augmented_objects": 2,
                    "augmented_views": 4, "image_size": 16, "seed": 5})
    )
    (tmp_path / "train.json").write_text(
        json.dumps({
            "seed": 3,
            "threads": 1,
            "generator": {"image_size": 16, "embed_dim": 16, "channels": [8, 16, 16], "attention_heads": 2,
                          "mlp_hidden_dim": 32, "sample_steps": 4},
            "train": {"iterations": 6, "batch_size": 4, "log_every": 0},
            "regressor": {"widths": [8, 16], "head_dims": [16, 16], "epochs": 2, "batch_size": 8},
        })
    )
    (tmp_path / "spec.json").write_text(
        json.dumps({"objects": [{"kind": "car", "color": "red", "group": "easy"}], "views_per_pair": 3,
                    "back_views": 1, "high_elevation_views": 1})
    )
    outputs = {}
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert main(["dataset", "gen", "--config", str(tmp_path / "data.json"), "--out", str(d / "data")]) == 0
        for model in ("generator", "regressor"):
            assert main(["train", model, "--config", str(tmp_path / "train.json"), "--data", str(d / "data"),
                         "--out", str(d / f"{model}.pt")]) == 0
        assert main(["generate", "--ckpt", str(d / "generator.pt"), "--caption", "a photo of red car", "--az", "45",
                     "--el", "20", "--r", "1.6", "--pitch", "5", "--yaw", "-5", "--seed", "9", "--out", str(d / "img.png")]) == 0
        main(["eval", "--gen", str(d / "generator.pt"), "--reg", str(d / "regressor.pt"), "--spec",
              str(tmp_path / "spec.json"), "--out", str(d / "eval")])
        outputs[run] = {
            "dataset gen": _tree_bytes(d / "data"),
            "train generator": {k: (d / k).read_bytes() for k in ("generator.pt", "generator_loss.csv")},
            "train regressor": {k: (d / k).read_bytes() for k in ("regressor.pt", "regressor_report.csv")},
            "generate": (d / "img.png").read_bytes(),
            "eval": _tree_bytes(d / "eval"),
        }
    same = {stage: outputs["a"][stage] == outputs["b"][stage] for stage in outputs["a"]}
    ok = all(same.values())
    acceptance(9, "pipeline determinism", ok, ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok
