"""Toy image and text encoders producing unpooled token sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import ConfigError, ModelParams
from .tensor import Tensor

PAD_ID = 0
BOS_ID = 1


@dataclass
class EncoderConfig:
    d_model: int = 32
    modules: int = 1
    layers_per_module: int = 2
    heads: int = 4
    mlp_dim: int = 64
    funnel_stride: int = 1
    vocab_size: int = 256
    seq_len: int = 16
    input_dim: int = 16
    locked_layers: int = 0

    @property
    def total_layers(self) -> int:
        return self.modules * self.layers_per_module

    def validate(self) -> None:
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.modules < 1 or self.layers_per_module < 0:
            raise ConfigError("modules must be >= 1 and layers_per_module >= 0")
        if self.funnel_stride < 1:
            raise ConfigError("funnel_stride must be >= 1")
        if not 0 <= self.locked_layers <= self.total_layers:
            raise ConfigError(
                f"locked_layers={self.locked_layers} outside [0, {self.total_layers}]"
            )
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")

    def output_tokens(self) -> int:
        """Token count after the funnel chain (one pool between modules)."""
        n = self.seq_len
        for _ in range(self.modules - 1):
            n = -(-n // self.funnel_stride)
        return n


def image_config(**kw) -> EncoderConfig:
    base = dict(modules=3, layers_per_module=1, funnel_stride=2, seq_len=16, input_dim=16)
    base.update(kw)
    return EncoderConfig(**base)


def text_config(**kw) -> EncoderConfig:
    base = dict(modules=1, layers_per_module=2, funnel_stride=1, seq_len=16, vocab_size=256)
    base.update(kw)
    return EncoderConfig(**base)


def _layer_names(component: str, cfg: EncoderConfig) -> list[str]:
    if component == "image":
        return [
            f"image.m{m}.l{l}" for m in range(cfg.modules) for l in range(cfg.layers_per_module)
        ]
    return [f"text.l{l}" for l in range(cfg.total_layers)]


def init_image_encoder(params: ModelParams, cfg: EncoderConfig, rng) -> None:
    cfg.validate()
    d = cfg.d_model
    nn.init_linear(params, "image.stem.proj", cfg.input_dim, d, "image", rng)
    params.add("image.stem.pos", rng.normal(0.0, 0.02, size=(cfg.seq_len, d)), "image")
    for name in _layer_names("image", cfg):
        nn.init_transformer_layer(params, name, d, cfg.mlp_dim, "image", rng)


def init_text_encoder(params: ModelParams, cfg: EncoderConfig, rng) -> None:
    cfg.validate()
    d = cfg.d_model
    params.add("text.stem.tok", rng.normal(0.0, 0.5, size=(cfg.vocab_size, d)), "text")
    params.add("text.stem.pos", rng.normal(0.0, 0.02, size=(cfg.seq_len, d)), "text")
    for name in _layer_names("text", cfg):
        nn.init_transformer_layer(params, name, d, cfg.mlp_dim, "text", rng)


def encode_image(params: ModelParams, cfg: EncoderConfig, images) -> Tensor:
    """Patch grid [B, N_v, d_in] (or [N_v, d_in]) -> visual tokens [B, N_v', d]."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.input_dim):
        raise T.ShapeError("encode_image", x.shape, (cfg.seq_len, cfg.input_dim))
    h = nn.linear(params, "image.stem.proj", Tensor(x)) + params["image.stem.pos"]
    for m in range(cfg.modules):
        if m > 0:
            h = T.funnel_pool(h, cfg.funnel_stride)
        for l in range(cfg.layers_per_module):
            h = nn.transformer_layer(params, f"image.m{m}.l{l}", h, cfg.heads)
    return h


def tokenize(text: str, cfg: EncoderConfig) -> np.ndarray:
    """Fixed byte-level tokenizer: BOS, then UTF-8 bytes, truncated and padded.

    Ids 0 (pad) and 1 (begin) are reserved, so raw bytes 0x00/0x01 are rejected.
    """
    raw = list(text.encode("utf-8"))
    if any(b <= BOS_ID for b in raw):
        raise ValueError("text contains reserved control bytes 0x00/0x01")
    ids = [BOS_ID] + raw[: cfg.seq_len - 1]
    ids += [PAD_ID] * (cfg.seq_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


def tokenize_batch(texts, cfg: EncoderConfig) -> np.ndarray:
    return np.stack([tokenize(t, cfg) for t in texts]) if texts else np.zeros((0, cfg.seq_len), np.int64)


def encode_text(params: ModelParams, cfg: EncoderConfig, token_ids) -> tuple[Tensor, np.ndarray]:
    """Token ids [B, N_t] -> (textual tokens [B, N_t, d], key mask [B, N_t]).

    Pad positions are excluded from attention; the begin token never is.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.ndim != 2 or ids.shape[1] != cfg.seq_len:
        raise T.ShapeError("encode_text", ids.shape, (cfg.seq_len,))
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    mask = ids != PAD_ID
    mask[:, 0] = True
    h = params["text.stem.tok"][ids] + params["text.stem.pos"]
    for name in _layer_names("text", cfg):
        h = nn.transformer_layer(params, name, h, cfg.heads, key_mask=mask)
    return h, mask


def set_locked_layers(params: ModelParams, cfg: EncoderConfig, component: str, n: int) -> None:
    """Freeze the first ``n`` transformer layers of ``component``.

    At ``n == total`` the stem (patch projection / token table and positional
    embeddings) is frozen as well. Layers past ``n`` are made trainable.
    """
    if component not in ("image", "text"):
        raise ConfigError(f"unknown component {component!r}")
    if not 0 <= n <= cfg.total_layers:
        raise ConfigError(f"locked layers {n} outside [0, {cfg.total_layers}]")
    layers = _layer_names(component, cfg)
    for i, layer in enumerate(layers):
        for name in params.names(layer + "."):
            params.set_locked(name, i < n)
    for name in params.names(f"{component}.stem."):
        params.set_locked(name, n == cfg.total_layers)
    cfg.locked_layers = n
