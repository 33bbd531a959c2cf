"""Embedding export: prefix truncation, int8 affine quantization, the PCEB
embedding store and exact inner-product top-K search.

PCEB layout, little-endian::

    b"PCEB" | u32 version=1 | u8 dtype (0=float32, 1=int8) | u32 dim | u64 count
    | f32 scale | i32 zero_point | count x u64 ids | count x dim payload (row-major)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, model
from .encoders import tokenize
from .model import ModelConfig
from .nn import ModelParams

MAGIC = b"PCEB"
VERSION = 1
DTYPES = {0: "float32", 1: "int8"}
_HEADER = struct.Struct("<4sIBIQfi")
QMIN, QMAX = -127, 127
EMBED_KINDS = ("image", "text", "keyword", "fusion")


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    s: float = 0.5 / 127
    z: int = 0

    def __post_init__(self):
        if not self.s > 0:
            raise StoreError(f"quantization scale must be > 0, got {self.s}")


def truncate_prefix(x, k: int, eps: float = 1e-12) -> np.ndarray:
    """First ``k`` components of each row, re-normalized to unit length."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if not 1 <= k <= d:
        raise StoreError(f"prefix length {k} outside [1, {d}]")
    h = x[..., :k]
    norms = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(norms < eps):
        raise StoreError(f"degenerate prefix: norm {float(norms.min()):.3g} below {eps:.3g}")
    return h / norms


def quantize(x, qp: QuantParams = QuantParams()) -> np.ndarray:
    """round(x / s + z), half away from zero, clamped to [-127, 127]."""
    v = np.asarray(x, dtype=np.float64) / qp.s + qp.z
    r = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(r, QMIN, QMAX).astype(np.int8)


def dequantize(xq, qp: QuantParams = QuantParams()) -> np.ndarray:
    return (np.asarray(xq, dtype=np.float64) - qp.z) * qp.s


class EmbeddingStore:
    """Ids with float32 unit rows or int8 quantized rows."""

    def __init__(self, ids, vectors, qp: QuantParams | None = None, meta: dict | None = None):
        ids = np.asarray(ids, dtype=np.uint64)
        vectors = np.asarray(vectors)
        if vectors.ndim != 2 or len(ids) != len(vectors):
            raise StoreError(f"need {len(ids)} rows of equal dim, got array of shape {vectors.shape}")
        if len(np.unique(ids)) != len(ids):
            raise StoreError("store ids must be unique")
        if vectors.dtype == np.int8:
            if qp is None:
                raise StoreError("int8 store needs quantization parameters")
            self.dtype = "int8"
        else:
            vectors = vectors.astype(np.float32)
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            if len(norms) and np.max(np.abs(norms - 1.0)) > 1e-6:
                raise StoreError("float store rows must be unit-norm")
            self.dtype = "float32"
            qp = None
        self.ids = ids
        self.vectors = vectors
        self.qp = qp
        self.meta = dict(meta or {})

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_embeddings(cls, ids, emb, meta: dict | None = None) -> "EmbeddingStore":
        return cls(ids, np.asarray(emb, dtype=np.float32), meta=meta)

    def quantized(self, qp: QuantParams = QuantParams()) -> "EmbeddingStore":
        if self.dtype != "float32":
            raise StoreError("store is already quantized")
        # the file keeps s as float32; quantize with the value that will be read back
        qp = QuantParams(float(np.float32(qp.s)), int(qp.z))
        meta = {**self.meta, "quant": {"s": qp.s, "z": qp.z}}
        return EmbeddingStore(self.ids, quantize(self.vectors.astype(np.float64), qp), qp, meta)

    def dense(self) -> np.ndarray:
        """Rows as float64 (int8 rows dequantized)."""
        if self.dtype == "int8":
            return dequantize(self.vectors, self.qp)
        return self.vectors.astype(np.float64)

    def payload_bytes(self) -> int:
        return self.vectors.nbytes

    # ---------------------------------------------------------------- file io

    def write(self, path) -> None:
        """Write the PCEB file, plus ``<path>.meta.json`` when meta is set."""
        code = 1 if self.dtype == "int8" else 0
        s, z = (self.qp.s, self.qp.z) if self.qp else (0.0, 0)
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, code, self.dim, len(self), s, z))
            f.write(self.ids.astype("<u8").tobytes())
            f.write(self.vectors.astype("<f4" if code == 0 else "i1").tobytes())
        if self.meta:
            Path(f"{path}.meta.json").write_text(json.dumps(self.meta, sort_keys=True, indent=1) + "\n")

    @classmethod
    def read(cls, path) -> "EmbeddingStore":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise StoreError(f"{path}: truncated header")
        magic, version, code, dim, count, s, z = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise StoreError(f"{path}: not a PCEB file")
        if version != VERSION:
            raise StoreError(f"{path}: unsupported version {version}")
        if code not in DTYPES:
            raise StoreError(f"{path}: unknown dtype code {code}")
        off = _HEADER.size
        ids = np.frombuffer(raw, dtype="<u8", count=count, offset=off)
        off += 8 * count
        dt = "<f4" if code == 0 else "i1"
        want = count * dim * np.dtype(dt).itemsize
        if len(raw) - off != want:
            raise StoreError(f"{path}: payload is {len(raw) - off} bytes, expected {want}")
        vec = np.frombuffer(raw, dtype=dt, count=count * dim, offset=off).reshape(count, dim)
        meta_path = Path(f"{path}.meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
        qp = QuantParams(float(s), int(z)) if code == 1 else None
        return cls(ids.copy(), vec.astype(np.float32 if code == 0 else np.int8), qp, meta)


def top_k_search(store: EmbeddingStore, query, k: int) -> list[tuple[int, float]]:
    """Exact inner-product search; descending score, ties by ascending id."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != store.dim:
        raise StoreError(f"query dim {q.shape} does not match store dim {store.dim}")
    if k < 1:
        raise StoreError("K must be >= 1")
    scores = store.dense() @ q
    order = np.lexsort((store.ids, -scores))[:k]
    return [(int(store.ids[i]), float(scores[i])) for i in order]


# ---------------------------------------------------------------- embedding export


def pin_inputs(pins: Sequence[data.PinRecord], cfg: ModelConfig, kind: str):
    if kind in ("image", "fusion"):
        images = np.stack([p.image for p in pins])
    if kind == "image":
        return (images,)
    text_fn = data.coalesce_keyword_text if kind == "keyword" else data.coalesce_descriptive_text
    tokens = np.stack([tokenize(text_fn(p), cfg.text) for p in pins])
    return (tokens,) if kind != "fusion" else (images, tokens)


def embed_pins(
    params: ModelParams, cfg: ModelConfig, pins: Sequence[data.PinRecord], kind: str, batch: int = 256
) -> np.ndarray:
    """Unit embeddings for ``pins``: image, descriptive text, keyword text or fusion."""
    if kind not in EMBED_KINDS:
        raise StoreError(f"unknown embedding kind {kind!r}; expected one of {EMBED_KINDS}")
    fn = {
        "image": model.image_embedding,
        "text": model.text_embedding,
        "keyword": model.text_embedding,
        "fusion": model.fusion_embedding,
    }[kind]
    out = []
    for i in range(0, len(pins), batch):
        out.append(fn(params, cfg, *pin_inputs(pins[i : i + batch], cfg, kind)).data)
    if not out:
        return np.zeros((0, cfg.d_model))
    return np.concatenate(out, axis=0)
