"""Small viewpoint-conditioned denoising generator.

Text tokens and the viewpoint token form one embedding sequence that a tiny
transformer contextualizes; a U-Net denoiser cross-attends to that sequence.
The model predicts the clean image from a noised one (cosine noise schedule)
and samples with deterministic DDIM steps.
"""

from __future__ import annotations

import copy
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

from .camera import DEFAULT_RADIUS_RANGE, CameraPose
from .conditioning import (
    ConstantViewpointToken,
    ViewpointMLP,
    ViewpointMLPConfig,
    Vocabulary,
    insert_viewpoint_token,
)
from .dataset import MixedBatchSampler, ToyDataset
from .encoding import make_encoder
from .exceptions import ConfigurationError, TrainingDivergedError
from .validation import check_poses, check_radius_range

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "viewtoken-generator/1"


@dataclass
class GeneratorConfig:
    image_size: int = 64
    embed_dim: int = 64
    channels: tuple = (32, 64, 128)
    attention_heads: int = 4
    patch: int = 2
    text_layers: int = 1
    max_tokens: int = 16
    encoding: str = "factorized"
    encoding_params: dict = field(default_factory=dict)
    mlp_hidden_dim: int = 1024
    mlp_layers: int = 3
    token_mode: str = "mlp"
    sample_steps: int = 20
    radius_range: tuple = DEFAULT_RADIUS_RANGE

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.radius_range = check_radius_range(self.radius_range)
        if self.image_size < 8 or self.image_size % (4 * self.patch):
            raise ConfigurationError("image_size must be >= 8 and a multiple of 4 * patch")
        if len(self.channels) != 3:
            raise ConfigurationError("channels must list three widths")
        if self.token_mode not in ("mlp", "constant"):
            raise ConfigurationError(f"unknown token_mode {self.token_mode!r}")
        if self.embed_dim % self.attention_heads:
            raise ConfigurationError("embed_dim must be divisible by attention_heads")
        make_encoder(self.encoding, self.radius_range, **self.encoding_params)

    def make_encoder(self):
        return make_encoder(self.encoding, self.radius_range, **self.encoding_params)

    def mlp_config(self) -> ViewpointMLPConfig:
        return ViewpointMLPConfig(
            input_dim=self.make_encoder().output_dim,
            hidden_dim=self.mlp_hidden_dim,
            num_layers=self.mlp_layers,
            output_dim=self.embed_dim,
        )


@dataclass
class TrainConfig:
    iterations: int = 20_000
    batch_size: int = 32
    lr_new: float = 2e-4
    lr_backbone: float = 2e-5
    warmup_frac: float = 0.01
    grad_clip_norm: float = 1.0
    weight_decay: float = 0.01
    mixing: str = "per_batch"
    log_every: int = 100

    def __post_init__(self):
        if not self.lr_new > self.lr_backbone > 0:
            raise ConfigurationError("need lr_new > lr_backbone > 0")
        if not 0 < self.warmup_frac < 1:
            raise ConfigurationError("warmup_frac must be in (0, 1)")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ConfigurationError("grad_clip_norm must be positive")


def warmup_cosine(step: int, total: int, warmup_frac: float) -> float:
    """LR multiplier for update ``step`` (0-based).

    Linear warmup reaches 1 at ``step = warmup - 1`` and stays 1 at
    ``step = warmup``; cosine decay then hits 0 at ``step = total``.
    """
    warmup = max(1, round(warmup_frac * total))
    if step < warmup:
        return (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# network


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, t_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, channels, context_dim, heads):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.attn = nn.MultiheadAttention(
            channels, heads, kdim=context_dim, vdim=context_dim, batch_first=True
        )

    def forward(self, x, context, pad_mask):
        b, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(q, context, context, key_padding_mask=pad_mask, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """Three-level U-Net with cross-attention at the two coarser levels.

    A strided ``patch x patch`` stem and a pixel-shuffle head keep the
    finest feature map at half the image resolution.
    """

    def __init__(self, channels, context_dim, heads, patch=2):
        super().__init__()
        c0, c1, c2 = channels
        self.patch = patch
        t_dim = 4 * c0
        self.t_dim = c0
        self.time_mlp = nn.Sequential(nn.Linear(c0, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.conv_in = nn.Conv2d(3, c0, patch, stride=patch)
        self.down0 = ResBlock(c0, c0, t_dim)
        self.pool0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down1 = ResBlock(c0, c1, t_dim)
        self.attn_d1 = CrossAttention(c1, context_dim, heads)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down2 = ResBlock(c1, c2, t_dim)
        self.attn_d2 = CrossAttention(c2, context_dim, heads)
        self.mid1 = ResBlock(c2, c2, t_dim)
        self.attn_mid = CrossAttention(c2, context_dim, heads)
        self.mid2 = ResBlock(c2, c2, t_dim)
        self.up2 = ResBlock(2 * c2, c2, t_dim)
        self.attn_u2 = CrossAttention(c2, context_dim, heads)
        self.unpool1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.up1 = ResBlock(2 * c1, c1, t_dim)
        self.attn_u1 = CrossAttention(c1, context_dim, heads)
        self.unpool0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.up0 = ResBlock(2 * c0, c0, t_dim)
        self.norm_out = nn.GroupNorm(8, c0)
        self.conv_out = nn.Conv2d(c0, 3 * patch * patch, 3, padding=1)

    def forward(self, x, t, context, pad_mask):
        temb = self.time_mlp(_timestep_embedding(t, self.t_dim))
        h0 = self.down0(self.conv_in(x), temb)
        h1 = self.attn_d1(self.down1(self.pool0(h0), temb), context, pad_mask)
        h2 = self.attn_d2(self.down2(self.pool1(h1), temb), context, pad_mask)
        h = self.mid2(self.attn_mid(self.mid1(h2, temb), context, pad_mask), temb)
        h = self.attn_u2(self.up2(torch.cat([h, h2], 1), temb), context, pad_mask)
        h = self.unpool1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.attn_u1(self.up1(torch.cat([h, h1], 1), temb), context, pad_mask)
        h = self.unpool0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up0(torch.cat([h, h0], 1), temb)
        return F.pixel_shuffle(self.conv_out(F.silu(self.norm_out(h))), self.patch)


class TextContext(nn.Module):
    """Token embeddings + positions + a small transformer over the joint sequence."""

    def __init__(self, vocab: Vocabulary, config: GeneratorConfig):
        super().__init__()
        if vocab.dim != config.embed_dim:
            raise ConfigurationError("vocabulary embedding width must equal embed_dim")
        self.embedding = nn.Embedding(len(vocab), vocab.dim, padding_idx=0)
        with torch.no_grad():
            self.embedding.weight.copy_(torch.as_tensor(vocab.embeddings, dtype=torch.float32))
        self.positions = nn.Parameter(torch.randn(config.max_tokens, vocab.dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            vocab.dim, config.attention_heads, 4 * vocab.dim, dropout=0.0, batch_first=True, norm_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, config.text_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(vocab.dim)

    def forward(self, caption_ids, span_end, view_embedding):
        text = self.embedding(caption_ids)
        seq = insert_viewpoint_token(text, view_embedding, span_end)
        ids = insert_viewpoint_token(
            caption_ids[..., None].float(), torch.ones(len(caption_ids), 1), span_end
        )[..., 0]
        pad_mask = ids == 0
        seq = seq + self.positions[: seq.shape[1]]
        return self.norm(self.encoder(seq, src_key_padding_mask=pad_mask)), pad_mask


class ViewpointGeneratorModel(nn.Module):
    def __init__(self, vocab: Vocabulary, config: GeneratorConfig):
        super().__init__()
        mlp_config = config.mlp_config()
        self.viewpoint = ViewpointMLP(mlp_config) if config.token_mode == "mlp" else ConstantViewpointToken(mlp_config)
        self.text = TextContext(vocab, config)
        self.denoiser = Denoiser(config.channels, config.embed_dim, config.attention_heads, config.patch)

    def context(self, caption_ids, span_end, encoding):
        return self.text(caption_ids, span_end, self.viewpoint(encoding))

    def forward(self, x_t, t, caption_ids, span_end, encoding):
        context, pad_mask = self.context(caption_ids, span_end, encoding)
        return self.denoiser(x_t, t, context, pad_mask)


def param_groups(model: ViewpointGeneratorModel, train_config: TrainConfig) -> list[dict]:
    """Split parameters into the viewpoint encoder (new) and everything else."""
    new_ids = {id(p) for p in model.viewpoint.parameters()}
    new = [p for p in model.parameters() if id(p) in new_ids]
    backbone = [p for p in model.parameters() if id(p) not in new_ids]
    return [
        {"params": new, "lr": train_config.lr_new, "name": "viewpoint"},
        {"params": backbone, "lr": train_config.lr_backbone, "name": "backbone"},
    ]


def make_optimizer(model, train_config: TrainConfig):
    opt = torch.optim.AdamW(param_groups(model, train_config), weight_decay=train_config.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: warmup_cosine(step, train_config.iterations, train_config.warmup_frac)
    )
    return opt, sched


def training_step(model, opt, sched, loss, clip_norm: float) -> float:
    """Backprop ``loss``, clip the global gradient norm, step optimizer and schedule.

    Returns the gradient norm measured before clipping. Clipped gradients stay
    in ``.grad`` until the next call.
    """
    opt.zero_grad(set_to_none=True)
    loss.backward()
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    opt.step()
    sched.step()
    return float(norm)


# ---------------------------------------------------------------------------
# diffusion


def alpha_bar(t: torch.Tensor, s: float = 0.008) -> torch.Tensor:
    ab = torch.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    return ab.clamp(1e-5, 0.9999)


def denoising_loss(model, x0, caption_ids, span_end, encoding, generator: torch.Generator):
    """MSE between the clean image and the model's estimate from a noised copy."""
    b = x0.shape[0]
    t = torch.rand(b, generator=generator)
    noise = torch.randn(x0.shape, generator=generator)
    ab = alpha_bar(t)[:, None, None, None]
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
    x0_hat = model(x_t, t, caption_ids, span_end, encoding)
    return F.mse_loss(x0_hat, x0)


@torch.no_grad()
def ddim_sample(model, caption_ids, span_end, encoding, noise, steps: int):
    context, pad_mask = model.context(caption_ids, span_end, encoding)
    x = noise
    ts = torch.linspace(1.0, 0.0, steps + 1)
    b = x.shape[0]
    x0_hat = x
    for i in range(steps):
        t, t_next = ts[i], ts[i + 1]
        ab, ab_next = alpha_bar(t), alpha_bar(t_next)
        x0_hat = model.denoiser(x, t.expand(b), context, pad_mask).clamp(-1, 1)
        eps = (x - ab.sqrt() * x0_hat) / (1 - ab).sqrt()
        x = ab_next.sqrt() * x0_hat + (1 - ab_next).sqrt() * eps
    return x0_hat


# ---------------------------------------------------------------------------
# batching helpers


def pad_captions(caption_ids_list) -> torch.Tensor:
    length = max(len(c) for c in caption_ids_list)
    out = torch.zeros(len(caption_ids_list), length, dtype=torch.long)
    for i, ids in enumerate(caption_ids_list):
        out[i, : len(ids)] = torch.as_tensor(ids, dtype=torch.long)
    return out


def _to_model_images(images: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(images, dtype=torch.float32).permute(0, 3, 1, 2) * 2.0 - 1.0


def _to_uint8(x: torch.Tensor) -> np.ndarray:
    arr = ((x.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).numpy()


def _encode(encoder, poses) -> torch.Tensor:
    return torch.as_tensor(encoder.transform(poses), dtype=torch.float32)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(ckpt: dict, path):
    buf = io.BytesIO()
    torch.save(ckpt, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a generator checkpoint")
    return ckpt


def _build_checkpoint(model, vocab, gen_config, train_config, seed, loss_curve, iteration):
    return {
        "format": CHECKPOINT_FORMAT,
        "generator_config": asdict(gen_config),
        "train_config": asdict(train_config),
        "encoding": {"kind": gen_config.encoding, **gen_config.encoding_params},
        "radius_range": list(gen_config.radius_range),
        "vocabulary": list(vocab.tokens),
        "seed": int(seed),
        "iteration": int(iteration),
        "state_dict": copy.deepcopy(model.state_dict()),
        "loss_curve": [float(v) for v in loss_curve],
    }


def model_from_checkpoint(ckpt: dict):
    gen_config = GeneratorConfig(**ckpt["generator_config"])
    tokens = ckpt["vocabulary"]
    vocab = Vocabulary(tokens, np.zeros((len(tokens), gen_config.embed_dim)))
    model = ViewpointGeneratorModel(vocab, gen_config)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, vocab, gen_config


# ---------------------------------------------------------------------------
# training / inference


def train_generator(
    train_config: TrainConfig,
    generator_config: GeneratorConfig,
    dataset: ToyDataset,
    seed: int = 0,
    diagnostic_path=None,
    callback=None,
):
    """Jointly train the denoiser and viewpoint encoder.

    Returns ``(checkpoint, loss_curve)``. A non-finite loss aborts training
    with :class:`TrainingDivergedError`; when ``diagnostic_path`` is given the
    state at the failing step is saved there first.
    """
    rendered, augmented = dataset.splits["rendered"], dataset.splits["augmented"]
    if not rendered or not augmented:
        raise ConfigurationError("generator training needs both dataset splits")
    if dataset.manifest.image_size != generator_config.image_size:
        raise ConfigurationError(
            f"dataset images are {dataset.manifest.image_size}px, generator expects {generator_config.image_size}px"
        )
    vocab = Vocabulary.build(generator_config.embed_dim, seed=0, tokens=dataset.vocabulary_tokens)
    encoder = generator_config.make_encoder()

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ViewpointGeneratorModel(vocab, generator_config)
    model.train()
    opt, sched = make_optimizer(model, train_config)
    sampler = MixedBatchSampler(rendered, augmented, train_config.batch_size, seed, train_config.mixing)
    noise_gen = torch.Generator().manual_seed(seed)

    losses = []
    for it in range(train_config.iterations):
        batch = sampler.next_batch()
        x0 = _to_model_images(dataset.images(batch))
        ids = pad_captions([s.caption_ids for s in batch])
        span = torch.as_tensor([s.object_span_end for s in batch])
        enc = _encode(encoder, [s.pose for s in batch])

        loss = denoising_loss(model, x0, ids, span, enc, noise_gen)
        if not torch.isfinite(loss):
            if diagnostic_path is not None:
                save_checkpoint(
                    _build_checkpoint(model, vocab, generator_config, train_config, seed, losses, it),
                    diagnostic_path,
                )
            raise TrainingDivergedError(f"non-finite loss at iteration {it}", diagnostic_path)
        training_step(model, opt, sched, loss, train_config.grad_clip_norm)
        losses.append(float(loss.detach()))
        if train_config.log_every and (it + 1) % train_config.log_every == 0:
            logger.info("iter %d loss %.5f", it + 1, float(np.mean(losses[-train_config.log_every :])))
        if callback is not None:
            callback(it, model, losses)

    model.eval()
    ckpt = _build_checkpoint(model, vocab, generator_config, train_config, seed, losses, train_config.iterations)
    return ckpt, losses


def generate_images(ckpt_or_model, caption_ids_list, span_ends, poses, seed: int = 0, seeds=None):
    """Batched generation. Returns uint8 ``(n, H, W, 3)``.

    Starting noise comes from ``seed`` and the batch position, or from
    ``seeds[i]`` alone for image ``i`` when per-image seeds are given.
    """
    if isinstance(ckpt_or_model, dict):
        model, vocab, config = model_from_checkpoint(ckpt_or_model)
    else:
        model, vocab, config = ckpt_or_model
    poses = check_poses(poses)
    n = len(poses)
    if not (len(caption_ids_list) == len(span_ends) == n):
        raise ValueError("captions, span ends and poses must have equal length")
    for ids, span in zip(caption_ids_list, span_ends):
        if not ids:
            raise ValueError("caption is empty")
        if min(ids) < 0 or max(ids) >= len(vocab):
            raise ValueError("caption ids do not match the checkpoint vocabulary")
        if not 0 <= span <= len(ids):
            raise ValueError("object_span_end out of range")
    size = config.image_size
    if seeds is None:
        noise = torch.randn((n, 3, size, size), generator=torch.Generator().manual_seed(int(seed)))
    else:
        if len(seeds) != n:
            raise ValueError("need one noise seed per image")
        noise = torch.stack(
            [torch.randn((3, size, size), generator=torch.Generator().manual_seed(int(s))) for s in seeds]
        )
    enc = _encode(config.make_encoder(), poses)
    ids = pad_captions(caption_ids_list)
    span = torch.as_tensor(list(span_ends))
    out = ddim_sample(model, ids, span, enc, noise, config.sample_steps)
    return _to_uint8(out)


def generate_image(checkpoint: dict, caption_ids, object_span_end: int, pose: CameraPose, seed: int = 0) -> np.ndarray:
    return generate_images(checkpoint, [list(caption_ids)], [object_span_end], [pose], seed)[0]


class ViewpointConditionedGenerator(BaseEstimator):
    """Estimator wrapper around :func:`train_generator` / :func:`generate_images`.

    ``fit`` takes a :class:`~viewtoken.dataset.ToyDataset` (or its directory);
    ``predict`` takes a list of ``(caption_ids, object_span_end, pose)``.
    """

    def __init__(
        self,
        encoding="factorized",
        token_mode="mlp",
        image_size=64,
        embed_dim=64,
        channels=(32, 64, 128),
        mlp_hidden_dim=1024,
        sample_steps=20,
        iterations=20_000,
        batch_size=32,
        lr_new=2e-4,
        lr_backbone=2e-5,
        warmup_frac=0.01,
        grad_clip_norm=1.0,
        random_state=0,
    ):
        self.encoding = encoding
        self.token_mode = token_mode
        self.image_size = image_size
        self.embed_dim = embed_dim
        self.channels = channels
        self.mlp_hidden_dim = mlp_hidden_dim
        self.sample_steps = sample_steps
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr_new = lr_new
        self.lr_backbone = lr_backbone
        self.warmup_frac = warmup_frac
        self.grad_clip_norm = grad_clip_norm
        self.random_state = random_state

    def _configs(self, radius_range):
        gen = GeneratorConfig(
            image_size=self.image_size,
            embed_dim=self.embed_dim,
            channels=self.channels,
            encoding=self.encoding,
            mlp_hidden_dim=self.mlp_hidden_dim,
            token_mode=self.token_mode,
            sample_steps=self.sample_steps,
            radius_range=radius_range,
        )
        train = TrainConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            lr_new=self.lr_new,
            lr_backbone=self.lr_backbone,
            warmup_frac=self.warmup_frac,
            grad_clip_norm=self.grad_clip_norm,
        )
        return gen, train

    def fit(self, X, y=None):
        dataset = X if isinstance(X, ToyDataset) else ToyDataset(X)
        gen, train = self._configs(dataset.manifest.sampling_ranges.radius_range)
        self.checkpoint_, self.loss_curve_ = train_generator(train, gen, dataset, self.random_state)
        self.model_ = model_from_checkpoint(self.checkpoint_)
        return self

    def predict(self, X, seed=0):
        if not hasattr(self, "model_"):
            raise AttributeError("generator is not fitted")
        ids, spans, poses = zip(*X)
        return generate_images(self.model_, list(ids), list(spans), list(poses), seed)
