"""Cross-modal fusion: concatenate visual and textual tokens, run a small
transformer aggregator, pool with a learned query, and L2-normalize."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import ConfigError, ModelParams
from .tensor import Tensor


@dataclass
class FusionConfig:
    layers: int = 2
    heads: int = 4
    mlp_dim: int = 64
    norm_eps: float = 1e-12

    def validate(self, d: int) -> None:
        if self.layers < 1:
            raise ConfigError("fusion layers must be >= 1")
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"d_model={d} not divisible by fusion heads={self.heads}")


def init_fusion(params: ModelParams, cfg: FusionConfig, d: int, n_visual: int, n_text: int, rng) -> None:
    cfg.validate(d)
    # positions cover the concatenated [visual || text] layout
    params.add("fusion.pos", rng.normal(0.0, 0.02, size=(n_visual + n_text, d)), "fusion")
    for l in range(cfg.layers):
        nn.init_transformer_layer(params, f"fusion.l{l}", d, cfg.mlp_dim, "fusion", rng)
    nn.init_layer_norm(params, "fusion.pool.ln", d, "fusion")
    params.add("fusion.pool.query", rng.normal(0.0, 1.0, size=(1, d)), "fusion")
    nn.init_attention(params, "fusion.pool.attn", d, "fusion", rng)


def fuse(
    params: ModelParams,
    cfg: FusionConfig,
    visual: Tensor | None,
    text: Tensor | None,
    text_mask: np.ndarray | None = None,
) -> Tensor:
    """Fused unit embeddings [B, d].

    Either modality may be None, which yields the single-modality branch
    (used for the image and text embeddings of the image-to-text objective).
    Visual tokens always come first in the concatenation.
    """
    if visual is None and text is None:
        raise ConfigError("fuse needs at least one modality")
    pos = params["fusion.pos"]
    d = pos.shape[-1]
    n_visual_max = pos.shape[0] - (text.shape[-2] if text is not None else 0)
    parts, masks = [], []
    if visual is not None:
        if visual.shape[-1] != d:
            raise T.ShapeError("fuse", visual.shape, (d,))
        nv = visual.shape[-2]
        parts.append(visual + pos[:nv])
        masks.append(np.ones(visual.shape[:-1], dtype=bool))
    if text is not None:
        if text.shape[-1] != d:
            raise T.ShapeError("fuse", text.shape, (d,))
        if visual is not None and visual.shape[:-2] != text.shape[:-2]:
            raise T.ShapeError("fuse", visual.shape, text.shape)
        nt = text.shape[-2]
        start = pos.shape[0] - nt
        parts.append(text + pos[start:])
        if text_mask is None:
            text_mask = np.ones(text.shape[:-1], dtype=bool)
        masks.append(np.asarray(text_mask, dtype=bool))
    if visual is not None and visual.shape[-2] > n_visual_max:
        raise T.ShapeError("fuse", visual.shape, pos.shape)
    z = parts[0] if len(parts) == 1 else T.concat(parts, axis=-2)
    mask = masks[0] if len(masks) == 1 else np.concatenate(masks, axis=-1)
    for l in range(cfg.layers):
        z = nn.transformer_layer(params, f"fusion.l{l}", z, cfg.heads, key_mask=mask)
    z = nn.layer_norm(params, "fusion.pool.ln", z)
    r = nn.multi_head_attention(
        params, "fusion.pool.attn", params["fusion.pool.query"], z, z, cfg.heads, key_mask=mask
    )
    r = T.reshape(r, (*r.shape[:-2], d))
    return T.l2_normalize(r, axis=-1, eps=cfg.norm_eps)
