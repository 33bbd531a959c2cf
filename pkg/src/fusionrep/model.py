"""Model assembly (encoders + fusion + loss scalars) and the PCKPT checkpoint format.

Checkpoint layout, little-endian::

    b"PCKPT" | u32 version=1 | u64 manifest_len | manifest (UTF-8 JSON) | payload

The manifest lists every tensor as (name, group, shape, locked, offset) with
``offset`` in bytes from the start of the payload; the payload is raw float64.
Optimizer state, when present, is a second list with the same layout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoders, fusion, objectives
from .encoders import EncoderConfig
from .fusion import FusionConfig
from .nn import ConfigError, ModelParams
from .objectives import MrlConfig
from .tensor import Tensor

MAGIC = b"PCKPT"
VERSION = 1


@dataclass
class ModelConfig:
    image: EncoderConfig = field(default_factory=encoders.image_config)
    text: EncoderConfig = field(default_factory=encoders.text_config)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    mrl: MrlConfig | None = field(default_factory=MrlConfig)
    share_loss_scalars: bool = True

    @property
    def d_model(self) -> int:
        return self.image.d_model

    def validate(self) -> None:
        self.image.validate()
        self.text.validate()
        if self.image.d_model != self.text.d_model:
            raise ConfigError("image and text encoders must share d_model")
        self.fusion.validate(self.d_model)
        if self.mrl is not None:
            self.mrl.validate(self.d_model)


def init_model(cfg: ModelConfig, seed: int) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = ModelParams()
    encoders.init_image_encoder(params, cfg.image, rng)
    encoders.init_text_encoder(params, cfg.text, rng)
    fusion.init_fusion(params, cfg.fusion, cfg.d_model, cfg.image.output_tokens(), cfg.text.seq_len, rng)
    if cfg.mrl is not None and cfg.mrl.use_projection_heads:
        objectives.init_mrl_heads(params, cfg.mrl)
    objectives.init_loss_scalars(params, share=cfg.share_loss_scalars)
    encoders.set_locked_layers(params, cfg.image, "image", cfg.image.locked_layers)
    encoders.set_locked_layers(params, cfg.text, "text", cfg.text.locked_layers)
    return params


def image_embedding(params: ModelParams, cfg: ModelConfig, images) -> Tensor:
    v = encoders.encode_image(params, cfg.image, images)
    return fusion.fuse(params, cfg.fusion, v, None)


def text_embedding(params: ModelParams, cfg: ModelConfig, token_ids) -> Tensor:
    s, mask = encoders.encode_text(params, cfg.text, token_ids)
    return fusion.fuse(params, cfg.fusion, None, s, mask)


def fusion_embedding(params: ModelParams, cfg: ModelConfig, images, token_ids) -> Tensor:
    v = encoders.encode_image(params, cfg.image, images)
    s, mask = encoders.encode_text(params, cfg.text, token_ids)
    return fusion.fuse(params, cfg.fusion, v, s, mask)


# ---------------------------------------------------------------- checkpoint


class CheckpointError(ValueError):
    pass


def _entries(arrays, extra):
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entry = {"name": name, "shape": list(arr.shape), "offset": offset}
        entry.update(extra(name))
        manifest.append(entry)
        chunks.append(raw)
        offset += len(raw)
    return manifest, chunks, offset


def save_checkpoint(
    path,
    params: ModelParams,
    optimizer_state: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    pm, pchunks, off = _entries(
        [(n, t.data) for n, t in params.items()],
        lambda n: {"group": params.groups[n], "locked": params.is_locked(n)},
    )
    om, ochunks, _ = _entries(sorted((optimizer_state or {}).items()), lambda n: {})
    for e in om:
        e["offset"] += off
    manifest = {"params": pm, "optimizer": om, "meta": meta or {}}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(blob)))
        f.write(blob)
        for chunk in pchunks + ochunks:
            f.write(chunk)


def load_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC or len(raw) < 17:
        raise CheckpointError(f"{path}: not a PCKPT file")
    version, mlen = struct.unpack_from("<IQ", raw, 5)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    head = 5 + 12
    try:
        manifest = json.loads(raw[head : head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from None
    base = head + mlen

    def read(e):
        n = int(np.prod(e["shape"], dtype=np.int64))
        if base + e["offset"] + 8 * n > len(raw):
            raise CheckpointError(f"{path}: payload truncated at tensor {e['name']}")
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=base + e["offset"])
        return arr.reshape(e["shape"]).astype(np.float64)

    params = ModelParams()
    for e in manifest["params"]:
        params.add(e["name"], read(e), e["group"])
        params.set_locked(e["name"], e["locked"])
    opt = {e["name"]: read(e) for e in manifest["optimizer"]}
    return params, opt, manifest["meta"]
