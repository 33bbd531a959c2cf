"""Transformer building blocks over the tensor core, plus the parameter store."""

from __future__ import annotations

import math
from collections.abc import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

GROUPS = ("image", "text", "fusion", "loss")


class ConfigError(ValueError):
    pass


class ModelParams:
    """Named parameter tensors, each tagged with exactly one group."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}

    def add(self, name: str, value, group: str) -> Tensor:
        if group not in GROUPS:
            raise ConfigError(f"unknown parameter group {group!r}")
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.tensors[name] = t
        self.groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def is_locked(self, name: str) -> bool:
        return not self.tensors[name].requires_grad

    def set_locked(self, name: str, locked: bool) -> None:
        t = self.tensors[name]
        t.requires_grad = not locked
        if locked:
            t.grad = None

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors.items() if t.requires_grad]

    def trainable_count(self) -> int:
        return int(sum(t.data.size for _, t in self.trainable()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for n, t in self.tensors.items():
            c = out.add(n, t.data.copy(), self.groups[n])
            c.requires_grad = t.requires_grad
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}


def init_linear(params: ModelParams, name: str, d_in: int, d_out: int, group: str, rng, bias=True):
    std = 1.0 / math.sqrt(d_in)
    params.add(f"{name}.w", rng.normal(0.0, std, size=(d_in, d_out)), group)
    if bias:
        params.add(f"{name}.b", np.zeros(d_out), group)


def init_layer_norm(params: ModelParams, name: str, d: int, group: str):
    params.add(f"{name}.g", np.ones(d), group)
    params.add(f"{name}.b", np.zeros(d), group)


def init_attention(params: ModelParams, name: str, d: int, group: str, rng):
    for proj in ("q", "k", "v", "o"):
        # a key bias shifts every logit of a query equally, so softmax cancels
        # it; its gradient is pure rounding noise, which sign-based updates amplify
        init_linear(params, f"{name}.{proj}", d, d, group, rng, bias=proj != "k")


def init_transformer_layer(params: ModelParams, name: str, d: int, mlp_dim: int, group: str, rng):
    init_layer_norm(params, f"{name}.ln1", d, group)
    init_attention(params, f"{name}.attn", d, group, rng)
    init_layer_norm(params, f"{name}.ln2", d, group)
    init_linear(params, f"{name}.mlp1", d, mlp_dim, group, rng)
    init_linear(params, f"{name}.mlp2", mlp_dim, d, group, rng)


def linear(params: ModelParams, name: str, x: Tensor) -> Tensor:
    y = x @ params[f"{name}.w"]
    b = f"{name}.b"
    return y + params[b] if b in params else y


def layer_norm(params: ModelParams, name: str, x: Tensor, eps: float = 1e-6) -> Tensor:
    return T.layer_norm(x, eps) * params[f"{name}.g"] + params[f"{name}.b"]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = T.transpose(x, axes)
    *lead, n, h, dh = x.shape
    return T.reshape(x, (*lead, n, h * dh))


def multi_head_attention(
    params: ModelParams,
    name: str,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention with learned q/k/v/o projections.

    Inputs are [..., N, d]; ``key_mask`` is [..., Nk] with True marking keys
    that may be attended to.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise T.ShapeError("multi_head_attention", q.shape, k.shape, v.shape)
    if k.shape[-2] != v.shape[-2]:
        raise T.ShapeError("multi_head_attention", k.shape, v.shape)
    if heads < 1 or d % heads:
        raise ConfigError(f"width {d} not divisible by heads={heads}")
    qh = _split_heads(linear(params, f"{name}.q", q), heads)
    kh = _split_heads(linear(params, f"{name}.k", k), heads)
    vh = _split_heads(linear(params, f"{name}.v", v), heads)
    logits = (qh @ T.transpose(kh)) * (1.0 / math.sqrt(d // heads))
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
    attn = T.softmax(logits, axis=-1, mask=mask)
    return linear(params, f"{name}.o", _merge_heads(attn @ vh))


def transformer_layer(
    params: ModelParams,
    name: str,
    x: Tensor,
    heads: int,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Pre-norm residual block: attention then GELU MLP."""
    h = layer_norm(params, f"{name}.ln1", x)
    x = x + multi_head_attention(params, f"{name}.attn", h, h, h, heads, key_mask)
    h = layer_norm(params, f"{name}.ln2", x)
    h = linear(params, f"{name}.mlp2", T.gelu(linear(params, f"{name}.mlp1", h)))
    return x + h
