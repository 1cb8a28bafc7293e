"""Viewpoint token encoder, toy caption vocabulary and token-sequence assembly.

Captions follow ``a photo of <color> <object> [<background phrase>]``. The
viewpoint token is inserted right after ``<object>``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigurationError
from .render import COLORS, OBJECT_KINDS

PAD = "<pad>"
CAPTION_PREFIX = ("a", "photo", "of")

# phrase -> background recipe (see dataset.make_background)
BACKGROUND_PHRASES = {
    "on grass": "procedural-texture",
    "on sand": "procedural-texture",
    "under a blue sky": "procedural-texture",
    "on a checkered floor": "procedural-texture",
    "in snow": "flat-color",
    "at night": "flat-color",
    "in fog": "flat-color",
}


def _default_tokens():
    words = [PAD, *CAPTION_PREFIX, *COLORS, *OBJECT_KINDS]
    for phrase in BACKGROUND_PHRASES:
        words += phrase.split()
    return list(dict.fromkeys(words))


@dataclass
class Vocabulary:
    """Token-to-id map plus an embedding table of ``dim``-vectors.

    The table stands in for a pretrained text encoder's input embeddings.
    """

    tokens: list
    embeddings: np.ndarray

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigurationError("duplicate tokens in vocabulary")
        if self.embeddings.shape[0] != len(self.tokens):
            raise ConfigurationError("embedding table rows must match vocabulary size")
        if not np.all(np.isfinite(self.embeddings)):
            raise ConfigurationError("embedding table has non-finite rows")

    @classmethod
    def build(cls, dim: int = 64, seed: int = 0, tokens=None) -> "Vocabulary":
        tokens = _default_tokens() if tokens is None else list(tokens)
        rng = np.random.default_rng(seed)
        table = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(len(tokens), dim))
        table[0] = 0.0
        return cls(tokens, table)

    def __len__(self):
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def encode(self, words) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def embed(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise ValueError(f"token id out of vocabulary range [0, {len(self)})")
        return self.embeddings[ids]


def make_caption(color: str, kind: str, background: str | None = None) -> tuple[list[str], int]:
    """Return caption words and ``object_span_end`` (index just past the noun)."""
    words = [*CAPTION_PREFIX, color, kind]
    span_end = len(words)
    if background is not None:
        if background not in BACKGROUND_PHRASES:
            raise ConfigurationError(f"unknown background phrase {background!r}")
        words += background.split()
    return words, span_end


def parse_caption(text: str) -> tuple[list[str], int, dict]:
    """Parse a caption string under the toy grammar.

    Returns ``(words, object_span_end, parts)`` where ``parts`` holds the
    color, kind and background phrase (or None).
    """
    words = text.strip().lower().split()
    n = len(CAPTION_PREFIX)
    if len(words) < n + 2 or tuple(words[:n]) != CAPTION_PREFIX:
        raise ValueError(f"caption {text!r} does not start with '{' '.join(CAPTION_PREFIX)} <color> <object>'")
    color, kind = words[n], words[n + 1]
    if color not in COLORS:
        raise ValueError(f"unknown color {color!r} in caption")
    if kind not in OBJECT_KINDS:
        raise ValueError(f"unknown object {kind!r} in caption")
    rest = " ".join(words[n + 2 :]) or None
    if rest is not None and rest not in BACKGROUND_PHRASES:
        raise ValueError(f"unknown background phrase {rest!r}")
    return words, n + 2, {"color": color, "kind": kind, "background": rest}


@dataclass(frozen=True)
class ViewpointMLPConfig:
    input_dim: int = 6
    hidden_dim: int = 1024
    num_layers: int = 3
    output_dim: int = 64

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError("num_layers must be >= 1")
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ConfigurationError("all MLP dims must be >= 1")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_dim] * (self.num_layers - 1) + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


def viewpoint_mlp_forward(encoding, weights):
    """Affine-ReLU stack with no activation after the last layer.

    ``weights`` is a sequence of ``(W, b)`` with ``W`` shaped ``(out, in)``.
    Works on torch tensors (differentiable) or numpy arrays (returns numpy).
    """
    as_numpy = not isinstance(encoding, torch.Tensor)
    if as_numpy:
        x = torch.as_tensor(np.asarray(encoding, dtype=np.float64))
        weights = [(torch.as_tensor(np.asarray(w, np.float64)), torch.as_tensor(np.asarray(b, np.float64))) for w, b in weights]
    else:
        x = encoding
    if x.shape[-1] != weights[0][0].shape[1]:
        raise ValueError(f"encoding length {x.shape[-1]} does not match MLP input_dim {weights[0][0].shape[1]}")
    for i, (w, b) in enumerate(weights):
        x = torch.nn.functional.linear(x, w, b)
        if i < len(weights) - 1:
            x = torch.relu(x)
    return x.numpy() if as_numpy else x


class ViewpointMLP(nn.Module):
    """Maps an encoded viewpoint to one token embedding."""

    def __init__(self, config: ViewpointMLPConfig):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(nn.Linear(i, o) for i, o in config.layer_dims())
        last = self.layers[-1]
        nn.init.normal_(last.weight, std=0.02)
        nn.init.zeros_(last.bias)

    def weights(self):
        return [(layer.weight, layer.bias) for layer in self.layers]

    def forward(self, encoding: torch.Tensor) -> torch.Tensor:
        return viewpoint_mlp_forward(encoding, self.weights())


class ConstantViewpointToken(nn.Module):
    """Ablation control: one learned embedding regardless of the viewpoint."""

    def __init__(self, config: ViewpointMLPConfig):
        super().__init__()
        self.config = config
        self.token = nn.Parameter(torch.randn(config.output_dim) * 0.02)

    def forward(self, encoding: torch.Tensor) -> torch.Tensor:
        return self.token.expand(*encoding.shape[:-1], -1)


@dataclass
class TokenSequence:
    embeddings: np.ndarray
    viewpoint_index: int

    @property
    def length(self) -> int:
        return len(self.embeddings)


def insert_viewpoint_token(text_embeddings, view_embedding, span_end):
    """Batched insertion: ``(B, L, d)`` + ``(B, d)`` -> ``(B, L + 1, d)``.

    Token ``j`` of the caption moves to ``j + (j >= span_end)``; the viewpoint
    embedding lands at ``span_end``. ``span_end`` is an int or ``(B,)`` tensor.
    """
    b, length, _ = text_embeddings.shape
    span = torch.as_tensor(span_end, device=text_embeddings.device).reshape(-1).expand(b)
    j = torch.arange(length, device=text_embeddings.device)
    new_pos = j[None, :] + (j[None, :] >= span[:, None]).long()  # (B, L)
    out = text_embeddings.new_zeros(b, length + 1, text_embeddings.shape[-1])
    out.scatter_(1, new_pos[..., None].expand_as(text_embeddings), text_embeddings)
    out[torch.arange(b), span] = view_embedding
    return out


def assemble_sequence(caption_ids, object_span_end: int, viewpoint_embedding, vocab: Vocabulary) -> TokenSequence:
    """Embed ``caption_ids`` and insert the viewpoint embedding after the object."""
    caption_ids = list(caption_ids)
    if not caption_ids:
        raise ValueError("caption is empty")
    if not 0 <= object_span_end <= len(caption_ids):
        raise ValueError(f"object_span_end {object_span_end} outside [0, {len(caption_ids)}]")
    text = torch.as_tensor(vocab.embed(caption_ids))[None]
    view = torch.as_tensor(np.asarray(viewpoint_embedding, dtype=np.float64).reshape(1, -1), dtype=text.dtype)
    if view.shape[1] != vocab.dim:
        raise ValueError(f"viewpoint embedding width {view.shape[1]} != vocabulary dim {vocab.dim}")
    seq = insert_viewpoint_token(text, view, object_span_end)[0].numpy()
    return TokenSequence(seq, object_span_end)
