"""Sigmoid pairwise losses: chunked image-to-text, Pin-to-Pin, Matryoshka
prefix wrapper, and the composite total."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nn import ConfigError, ModelParams
from .tensor import Tensor

T_INIT = math.log(10.0)
C_INIT = -10.0


class LossError(ValueError):
    pass


@dataclass
class LossScalars:
    t: float = T_INIT
    c: float = C_INIT


@dataclass
class MrlConfig:
    prefixes: list[tuple[int, float]] = field(default_factory=lambda: [(8, 0.1), (16, 0.1), (32, 1.0)])
    use_projection_heads: bool = False

    def validate(self, d: int) -> None:
        if not self.prefixes:
            raise ConfigError("MRL needs at least one prefix")
        ks = [k for k, _ in self.prefixes]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ConfigError(f"MRL prefixes must be strictly increasing, got {ks}")
        if ks[0] < 1:
            raise ConfigError("MRL prefix lengths must be >= 1")
        if ks[-1] > d:
            raise LossError(f"MRL prefix {ks[-1]} exceeds embedding dim {d}")
        if ks[-1] != d:
            raise ConfigError(f"largest MRL prefix must equal d={d}, got {ks[-1]}")
        if any(w <= 0 for _, w in self.prefixes):
            raise ConfigError("MRL weights must be > 0")


def init_loss_scalars(params: ModelParams, share: bool = True) -> None:
    params.add("loss.t", np.array(T_INIT), "loss")
    params.add("loss.c", np.array(C_INIT), "loss")
    if not share:
        params.add("loss.t_p2p", np.array(T_INIT), "loss")
        params.add("loss.c_p2p", np.array(C_INIT), "loss")


def init_mrl_heads(params: ModelParams, cfg: MrlConfig) -> None:
    """Optional per-prefix k x k projections, initialized to identity."""
    for k, _ in cfg.prefixes:
        params.add(f"fusion.mrl.{k}.w", np.eye(k), "fusion")


def pairwise_sigmoid_loss(sim, z, t, c) -> Tensor:
    """log(1 + exp(z * (-t * sim + c))), elementwise over broadcast inputs."""
    sim, z, t, c = (T.as_tensor(v) for v in (sim, z, t, c))
    return T.log1p_exp(T.mul(z, T.add(T.mul(T.scale(t, -1.0), sim), c)))


def _check_unit_rows(name: str, x: Tensor, tol: float = 1e-10) -> None:
    norms = np.linalg.norm(x.data, axis=-1)
    if norms.size and np.max(np.abs(norms - 1.0)) > tol:
        raise LossError(f"{name}: rows must be unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.3g})")


def chunked_pair_loss(x: Tensor, y: Tensor, devices: int, t, c) -> Tensor:
    """Mean sigmoid loss over the full |B| x |B| pair matrix with +1 labels on
    the diagonal, computed block by block.

    Device ``di`` holds rows ``x[di*b:(di+1)*b]`` and visits every text chunk
    in device order, so the full matrix is never materialized. Block sums are
    reduced in fixed (di, dj) order.
    """
    n = x.shape[0]
    if y.shape[0] != n:
        raise LossError(f"row-count mismatch: {n} vs {y.shape[0]}")
    if x.shape[-1] != y.shape[-1]:
        raise T.ShapeError("chunked_pair_loss", x.shape, y.shape)
    if devices < 1 or n % devices:
        raise LossError(f"batch size {n} not divisible by device count {devices}")
    b = n // devices
    neg = np.full((b, b), -1.0)
    pos = neg.copy()
    np.fill_diagonal(pos, 1.0)
    total = None
    for di in range(devices):
        xi = x[di * b : (di + 1) * b]
        for dj in range(devices):
            yj = y[dj * b : (dj + 1) * b]
            sim = xi @ T.transpose(yj)
            labels = pos if di == dj else neg
            block = T.sum(pairwise_sigmoid_loss(sim, labels, t, c))
            total = block if total is None else total + block
    return T.scale(total, 1.0 / (n * n))


def full_matrix_pair_loss(x: Tensor, y: Tensor, t, c) -> Tensor:
    """Unchunked reference: materializes the whole pair matrix."""
    n = x.shape[0]
    labels = 2.0 * np.eye(n) - 1.0
    sim = x @ T.transpose(y)
    return T.mean(pairwise_sigmoid_loss(sim, labels, t, c))


def i2t_loss(x: Tensor, y: Tensor, t, c, devices: int = 1) -> Tensor:
    """Image-to-text loss: x[i] and y[i] come from the same pin."""
    _check_unit_rows("i2t_loss", x)
    _check_unit_rows("i2t_loss", y)
    return chunked_pair_loss(x, y, devices, t, c)


def p2p_loss(u: Tensor, v: Tensor, t, c, devices: int = 1) -> Tensor:
    """Pin-to-Pin loss: (u[i], v[i]) is a sampled neighbor pair, every other
    query-target combination is a negative."""
    if u.shape[0] != v.shape[0]:
        raise LossError(f"row-count mismatch: {u.shape[0]} queries vs {v.shape[0]} targets")
    _check_unit_rows("p2p_loss", u)
    _check_unit_rows("p2p_loss", v)
    return chunked_pair_loss(u, v, devices, t, c)


def prefix(x: Tensor, k: int, params: ModelParams | None = None, eps: float = 1e-12) -> Tensor:
    """First ``k`` components, optionally projected by the k-specific head,
    re-normalized to unit length."""
    d = x.shape[-1]
    if not 1 <= k <= d:
        raise LossError(f"prefix length {k} outside [1, {d}]")
    head = f"fusion.mrl.{k}.w"
    has_head = params is not None and head in params
    if k == d and not has_head:
        # inputs are unit rows already; renormalizing would only perturb the last bits
        return x
    h = x if k == d else x[..., :k]
    if has_head:
        h = h @ params[head]
    return T.l2_normalize(h, axis=-1, eps=eps)


def mrl_loss(
    base_loss_fn: Callable[[Tensor, Tensor], Tensor],
    a: Tensor,
    b: Tensor,
    cfg: MrlConfig,
    params: ModelParams | None = None,
) -> Tensor:
    """Sum over prefixes of c_k * base_loss(prefix_k(a), prefix_k(b))."""
    cfg.validate(a.shape[-1])
    total = None
    for k, weight in cfg.prefixes:
        term = T.scale(base_loss_fn(prefix(a, k, params), prefix(b, k, params)), float(weight))
        total = term if total is None else total + term
    return total


def mrl_terms(base_loss_fn, a: Tensor, b: Tensor, cfg: MrlConfig, params=None) -> list[float]:
    """Per-prefix base losses (unweighted), for logging and audits."""
    return [base_loss_fn(prefix(a, k, params), prefix(b, k, params)).item() for k, _ in cfg.prefixes]


def total_loss(l_i2t: Tensor | None, l_p2p: Tensor | None) -> Tensor:
    if l_i2t is None and l_p2p is None:
        raise LossError("total_loss: both objectives disabled")
    if l_p2p is None:
        return l_i2t
    if l_i2t is None:
        return l_p2p
    return l_i2t + l_p2p


def loss_scalars(params: ModelParams, task: str) -> tuple[Tensor, Tensor]:
    if task == "p2p" and "loss.t_p2p" in params:
        return params["loss.t_p2p"], params["loss.c_p2p"]
    return params["loss.t"], params["loss.c"]


def scalar_loss(sim: float, z: int, t: float, c: float) -> float:
    return pairwise_sigmoid_loss(sim, float(z), t, c).item()


def sharded(rows: Sequence, devices: int) -> list[Sequence]:
    n = len(rows)
    if devices < 1 or n % devices:
        raise LossError(f"batch size {n} not divisible by device count {devices}")
    b = n // devices
    return [rows[i * b : (i + 1) * b] for i in range(devices)]
