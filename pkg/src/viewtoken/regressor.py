"""Image -> viewpoint regressor used as the evaluation oracle.

A residual CNN backbone feeds three linear layers that emit the factorized
6-vector ``[sin az, cos az, el, r_norm, pitch, yaw]``. The (sin, cos) pair is
renormalized to unit length. Datasets with partial labels contribute loss
only on their labeled components.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import nn

from .camera import DEFAULT_RADIUS_RANGE, CameraPose, pose_errors
from .encoding import decode_factorized, encode_factorized
from .exceptions import ConfigurationError, DegenerateEstimateError, TrainingDivergedError
from .validation import check_images, check_mask, check_radius_range

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "viewtoken-regressor/1"
COMPONENTS = ("azimuth", "elevation", "radius", "yaw", "pitch")
# which raw6 entries supervise each reported component
_COMPONENT_SLOTS = {"azimuth": (0, 1), "elevation": (2,), "radius": (3,), "pitch": (4,), "yaw": (5,)}


@dataclass
class RegressorConfig:
    image_size: int = 64
    widths: tuple = (32, 64, 128)
    blocks_per_stage: int = 1
    pool_grid: int = 4
    head_dims: tuple = (256, 128)
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    holdout_frac: float = 0.1
    augment: bool = True
    radius_range: tuple = DEFAULT_RADIUS_RANGE

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.head_dims = tuple(self.head_dims)
        self.radius_range = check_radius_range(self.radius_range)
        if len(self.head_dims) != 2:
            raise ConfigurationError("head_dims must give the two hidden widths of the 3-layer head")
        if not 0 <= self.holdout_frac < 1:
            raise ConfigurationError("holdout_frac must be in [0, 1)")


@dataclass
class PoseEstimate:
    raw6: np.ndarray
    decoded: CameraPose
    label_mask: np.ndarray = field(default_factory=lambda: np.ones(6, bool))


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.down = None
        if stride != 1 or c_in != c_out:
            self.down = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.down is None else self.down(x)))


class RegressorNet(nn.Module):
    def __init__(self, config: RegressorConfig):
        super().__init__()
        w0 = config.widths[0]
        self.stem = nn.Sequential(nn.Conv2d(3, w0, 3, 1, 1, bias=False), nn.BatchNorm2d(w0), nn.ReLU())
        stages, c_in = [], w0
        for i, w in enumerate(config.widths):
            for b in range(config.blocks_per_stage):
                stages.append(BasicBlock(c_in, w, 2 if (b == 0 and i > 0) else 1))
                c_in = w
        self.backbone = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(config.pool_grid)
        h1, h2 = config.head_dims
        self.head = nn.Sequential(
            nn.Linear(c_in * config.pool_grid**2, h1), nn.ReLU(), nn.Linear(h1, h2), nn.ReLU(), nn.Linear(h2, 6)
        )

    def forward(self, x):
        # spatial pooling grid keeps coarse object position (pitch/yaw cue)
        feats = self.pool(self.backbone(self.stem(x))).flatten(1)
        return self.head(feats)


def normalize_azimuth_pair(raw: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Rescale entries 0-1 of each row to unit norm."""
    pair = raw[..., :2]
    norm = pair.norm(dim=-1, keepdim=True).clamp_min(eps)
    return torch.cat([pair / norm, raw[..., 2:]], dim=-1)


def regressor_loss(pred, target, mask) -> torch.Tensor:
    """Sum of squared errors over labeled components, averaged over rows."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    if not bool(mask.any()):
        raise ConfigurationError("label mask selects no components")
    mask = mask.expand_as(pred)
    sq = torch.where(mask, (pred - target) ** 2, torch.zeros_like(pred))
    return sq.sum(dim=-1).mean() if pred.ndim > 1 else sq.sum()


def decode_estimate(raw6, radius_range=DEFAULT_RADIUS_RANGE, label_mask=None) -> PoseEstimate:
    """Normalize the azimuth pair of a head output and decode it to a pose."""
    raw6 = np.asarray(raw6, dtype=float).reshape(6).copy()
    norm = math.hypot(raw6[0], raw6[1])
    if norm == 0.0 or not math.isfinite(norm):
        raise DegenerateEstimateError("zero-norm (sin, cos) azimuth pair")
    raw6[:2] /= norm
    mask = np.ones(6, bool) if label_mask is None else np.asarray(label_mask, bool)
    return PoseEstimate(raw6, decode_factorized(raw6, radius_range), mask)


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Photometric jitter, random blur and noise; geometry untouched."""
    b = x.shape[0]
    gain = 1.0 + 0.15 * (torch.rand(b, 1, 1, 1, generator=gen) * 2 - 1)
    bias = 0.08 * (torch.rand(b, 3, 1, 1, generator=gen) * 2 - 1)
    x = x * gain + bias
    kernel = torch.tensor([1.0, 2.0, 1.0])
    kernel = (kernel[:, None] * kernel[None, :]) / 16.0
    blurred = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernel.expand(3, 1, 3, 3), groups=3)
    use_blur = (torch.rand(b, 1, 1, 1, generator=gen) < 0.5).float()
    x = use_blur * blurred + (1 - use_blur) * x
    sigma = 0.04 * torch.rand(b, 1, 1, 1, generator=gen)
    return x + sigma * torch.randn(x.shape, generator=gen)


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(images, dtype=torch.float32).permute(0, 3, 1, 2) * 2.0 - 1.0


def targets_from_poses(poses, radius_range=DEFAULT_RADIUS_RANGE) -> np.ndarray:
    return np.stack([encode_factorized(p, radius_range).data for p in poses])


def split_holdout(n: int, frac: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_val = int(round(frac * n))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _fit_network(net, images, targets, masks, config: RegressorConfig, seed: int):
    x_all = _to_tensor(images)
    y_all = torch.as_tensor(targets, dtype=torch.float32)
    m_all = torch.as_tensor(masks, dtype=torch.bool)
    n = len(x_all)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total = config.epochs * steps_per_epoch
    opt = torch.optim.AdamW(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.lr, total_steps=total, pct_start=0.1)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    net.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        for s in range(steps_per_epoch):
            idx = perm[s * config.batch_size : (s + 1) * config.batch_size]
            if len(idx) < 2:
                continue
            x = x_all[idx]
            if config.augment:
                x = _augment(x, gen)
            pred = normalize_azimuth_pair(net(x))
            loss = regressor_loss(pred, y_all[idx], m_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"regressor loss became non-finite in epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            losses.append(float(loss.detach()))
        logger.info("regressor epoch %d loss %.5f", epoch + 1, float(np.mean(losses[-steps_per_epoch:])))
    net.eval()
    return losses


@torch.no_grad()
def predict_raw(net, images, batch_size: int = 256) -> np.ndarray:
    """Head outputs with the azimuth pair normalized, ``(n, 6)``."""
    net.eval()
    x_all = _to_tensor(check_images(images))
    out = [normalize_azimuth_pair(net(x_all[i : i + batch_size])) for i in range(0, len(x_all), batch_size)]
    return torch.cat(out).double().numpy() if out else np.zeros((0, 6))


def summarize_errors(requested, estimated, label_mask=None) -> dict:
    """Mean/median per reported component; components without labels map to None."""
    errs = pose_errors(requested, estimated)
    mask = np.ones(6, bool) if label_mask is None else np.asarray(label_mask, bool).reshape(-1, 6).all(axis=0)
    out = {}
    for comp in COMPONENTS:
        labeled = all(mask[i] for i in _COMPONENT_SLOTS[comp])
        vals = errs[comp]
        out[comp] = (float(np.mean(vals)), float(np.median(vals))) if labeled and len(vals) else None
    return out


def write_report_csv(report: dict, path):
    """One row per dataset; columns ``<component>_mean`` / ``<component>_median``."""
    header = ["dataset", "n"] + [f"{c}_{s}" for c in COMPONENTS for s in ("mean", "median")]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for name, entry in report.items():
            row = [name, entry["n"]]
            for comp in COMPONENTS:
                stats = entry["errors"][comp]
                row += ["--", "--"] if stats is None else [f"{stats[0]:.6f}", f"{stats[1]:.6f}"]
            writer.writerow(row)


@dataclass
class LabeledImages:
    """One regressor training source."""

    name: str
    images: np.ndarray
    poses: list
    mask: np.ndarray = field(default_factory=lambda: np.ones(6, bool))


def train_regressor(config: RegressorConfig, datasets, seed: int = 0):
    """Train on several labeled sources with per-source label masks.

    Holds out ``config.holdout_frac`` of every source for validation.
    Returns ``(checkpoint, report)``; ``report`` maps source name to
    validation error statistics.
    """
    if not datasets:
        raise ConfigurationError("train_regressor needs at least one dataset")
    rng = np.random.default_rng(seed)
    train_x, train_y, train_m, held = [], [], [], {}
    for src in datasets:
        images = check_images(src.images, size=config.image_size)
        mask = check_mask(src.mask, len(images))
        targets = targets_from_poses(src.poses, config.radius_range)
        tr, va = split_holdout(len(images), config.holdout_frac, rng)
        train_x.append(images[tr])
        train_y.append(targets[tr])
        train_m.append(mask[tr])
        held[src.name] = (images[va], [src.poses[i] for i in va], mask[0])

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = RegressorNet(config)
    losses = _fit_network(
        net, np.concatenate(train_x), np.concatenate(train_y), np.concatenate(train_m), config, seed
    )

    report = {}
    for name, (images, poses, mask) in held.items():
        if not len(images):
            continue
        estimates = predict_poses(net, images, config.radius_range)
        keep = [i for i, e in enumerate(estimates) if e is not None]
        report[name] = {
            "n": len(keep),
            "errors": summarize_errors([poses[i] for i in keep], [estimates[i].decoded for i in keep], mask),
        }
    ckpt = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(config),
        "radius_range": list(config.radius_range),
        "state_dict": copy.deepcopy(net.state_dict()),
        "seed": int(seed),
        "loss_curve": losses,
        "report": report,
    }
    return ckpt, report


def predict_poses(net, images, radius_range=DEFAULT_RADIUS_RANGE) -> list:
    """Decode every image; degenerate estimates come back as ``None``."""
    out = []
    for row in predict_raw(net, images):
        try:
            out.append(decode_estimate(row, radius_range))
        except DegenerateEstimateError:
            out.append(None)
    return out


def regressor_forward(image, net, radius_range=DEFAULT_RADIUS_RANGE) -> PoseEstimate:
    """Single-image inference; raises :class:`DegenerateEstimateError` on a zero pair."""
    with torch.no_grad():
        raw = net(_to_tensor(check_images(image)))[0].double().numpy()
    return decode_estimate(raw, radius_range)


def save_checkpoint(ckpt: dict, path):
    buf = io.BytesIO()
    torch.save(ckpt, buf)
    Path(path).write_bytes(buf.getvalue())


def load_regressor(path_or_ckpt):
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, dict) else torch.load(path_or_ckpt, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a regressor checkpoint")
    config = RegressorConfig(**ckpt["config"])
    net = RegressorNet(config)
    net.load_state_dict(ckpt["state_dict"])
    net.eval()
    return net, config


class ViewpointRegressor(BaseEstimator):
    """Estimator interface: ``fit(images, poses, label_mask)`` / ``predict(images)``.

    ``predict`` returns normalized raw 6-vectors; ``predict_poses`` decodes
    them. ``y`` may be a list of poses or an ``(n, 5)`` pose array.
    """

    def __init__(
        self,
        image_size=64,
        widths=(32, 64, 128),
        blocks_per_stage=1,
        epochs=40,
        batch_size=64,
        lr=1e-3,
        augment=True,
        radius_range=DEFAULT_RADIUS_RANGE,
        random_state=0,
    ):
        self.image_size = image_size
        self.widths = widths
        self.blocks_per_stage = blocks_per_stage
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.augment = augment
        self.radius_range = radius_range
        self.random_state = random_state

    def _config(self):
        return RegressorConfig(
            image_size=self.image_size,
            widths=self.widths,
            blocks_per_stage=self.blocks_per_stage,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            augment=self.augment,
            holdout_frac=0.0,
            radius_range=self.radius_range,
        )

    def fit(self, X, y, label_mask=None):
        from .validation import check_poses

        config = self._config()
        images = check_images(X, size=self.image_size)
        poses = check_poses(y)
        if len(poses) != len(images):
            raise ValueError("X and y have different lengths")
        mask = check_mask(label_mask, len(images))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.random_state)
            self.net_ = RegressorNet(config)
        self.loss_curve_ = _fit_network(
            self.net_, images, targets_from_poses(poses, config.radius_range), mask, config, self.random_state
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise AttributeError("regressor is not fitted")

    def predict(self, X):
        self._check_fitted()
        return predict_raw(self.net_, check_images(X, size=self.image_size))

    def predict_poses(self, X):
        self._check_fitted()
        return predict_poses(self.net_, check_images(X, size=self.image_size), self.radius_range)
