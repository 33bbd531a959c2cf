"""Lion optimizer with parameter groups, warmup + cosine schedule, sharded
train steps, and run orchestration with checkpoint/resume."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, model, objectives
from . import tensor as T
from .model import ModelConfig
from .nn import ConfigError, ModelParams
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        self.diagnostics = diagnostics
        super().__init__(f"{message}: {json.dumps(diagnostics, sort_keys=True)}")


@dataclass
class OptimizerGroupConfig:
    lr_mult: float = 1.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.99

    def validate(self, label: str) -> None:
        if self.lr_mult <= 0:
            raise ConfigError(f"group {label}: lr multiplier must be > 0")
        if self.weight_decay < 0:
            raise ConfigError(f"group {label}: weight decay must be >= 0")


def production_groups() -> dict[str, OptimizerGroupConfig]:
    """Production settings: text encoder at a tenth of the base rate (it
    starts pretrained there), t and c undecayed at the base rate."""
    return {
        "image": OptimizerGroupConfig(lr_mult=1.0, weight_decay=5e-4),
        "text": OptimizerGroupConfig(lr_mult=0.1, weight_decay=5e-1),
        "fusion": OptimizerGroupConfig(lr_mult=1.0, weight_decay=5e-4),
        "loss": OptimizerGroupConfig(lr_mult=1.0, weight_decay=0.0),
    }


def default_groups() -> dict[str, OptimizerGroupConfig]:
    """Desk settings. Encoders train from scratch, so the text encoder runs
    at the full rate; t and c move 100x faster than the weights because a
    sign-based step of size lr would barely change them in a few hundred steps."""
    groups = production_groups()
    groups["text"].lr_mult = 1.0
    groups["loss"].lr_mult = 100.0
    return groups


@dataclass
class Schedule:
    base_lr: float = 2e-4
    warmup_steps: int = 100
    total_steps: int = 300

    def validate(self) -> None:
        if not 0 <= self.warmup_steps < max(self.total_steps, 1):
            raise ConfigError("schedule needs 0 <= warmup_steps < total_steps")


def lr_at_step(schedule: Schedule, step: int) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ConfigError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.base_lr * step / w
    span = schedule.total_steps - w
    if span <= 0:
        return schedule.base_lr
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


class Lion:
    """Lion with decoupled weight decay and sign(0) = 0.

    u = sign(b1*m + (1-b1)*g); theta -= lr_g * (u + wd * theta); m = b2*m + (1-b2)*g
    """

    def __init__(self, groups: dict[str, OptimizerGroupConfig]):
        for label, g in groups.items():
            g.validate(label)
        self.groups = groups
        self.state: dict[str, np.ndarray] = {}

    def effective_lr(self, params: ModelParams, name: str, lr: float) -> float:
        return lr * self.groups[params.groups[name]].lr_mult

    def step(self, params: ModelParams, lr: float) -> None:
        for name, p in params.trainable():
            if p.grad is None:
                raise ConfigError(f"missing gradient for trainable parameter {name}")
        for name, p in params.trainable():
            cfg = self.groups[params.groups[name]]
            g = p.grad
            m = self.state.get(name)
            if m is None:
                m = np.zeros_like(p.data)
            update = np.sign(cfg.beta1 * m + (1.0 - cfg.beta1) * g)
            lr_g = lr * cfg.lr_mult
            p.data -= lr_g * (update + cfg.weight_decay * p.data)
            self.state[name] = cfg.beta2 * m + (1.0 - cfg.beta2) * g

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"lion.m.{k}": v for k, v in self.state.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.state = {k[len("lion.m.") :]: v.copy() for k, v in state.items() if k.startswith("lion.m.")}


@dataclass
class TrainConfig:
    total_steps: int = 300
    devices: int = 1
    i2t_batch: int = 64
    p2p_batch: int = 16
    use_i2t: bool = True
    use_p2p: bool = True
    use_mrl: bool = True
    text_signal: str = "alternate-per-step"
    objective_mode: str = "joint"
    grad_clip: float = 0.0
    filter_threshold: float = 0.3
    save_every: int = 0
    # fit c to the initial embeddings before the first update
    calibrate_bias: bool = True
    schedule: Schedule = field(default_factory=lambda: Schedule(base_lr=1e-3, warmup_steps=30))
    groups: dict[str, OptimizerGroupConfig] = field(default_factory=default_groups)

    def validate(self) -> None:
        if self.text_signal not in ("descriptive", "keyword", "alternate-per-step"):
            raise ConfigError(f"unknown text_signal {self.text_signal!r}")
        if self.objective_mode not in ("joint", "alternate"):
            raise ConfigError(f"unknown objective_mode {self.objective_mode!r}")
        if not (self.use_i2t or self.use_p2p):
            raise ConfigError("at least one of use_i2t / use_p2p must be enabled")
        if self.devices < 1:
            raise ConfigError("devices must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        self.schedule.total_steps = self.total_steps
        if self.total_steps > 0:
            # with no steps there is no schedule to run
            self.schedule.validate()


class PinFeatures:
    """Per-pin model inputs: image grid and tokenized text signals."""

    def __init__(self, corpus: data.Corpus, cfg: ModelConfig):
        from .encoders import tokenize

        ids = [p.id for p in corpus.pins]
        self.row = {pid: i for i, pid in enumerate(ids)}
        self.images = np.stack([p.image for p in corpus.pins])
        self.descriptive = np.stack([tokenize(data.coalesce_descriptive_text(p), cfg.text) for p in corpus.pins])
        self.keyword = np.stack([tokenize(data.coalesce_keyword_text(p), cfg.text) for p in corpus.pins])

    def rows(self, pin_ids: Sequence[int]) -> np.ndarray:
        return np.asarray([self.row[int(p)] for p in pin_ids], dtype=np.int64)


def _sharded_embed(fn, rows: np.ndarray, devices: int) -> Tensor:
    shards = objectives.sharded(rows, devices)
    parts = [fn(s) for s in shards]
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)


class Trainer:
    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        params: ModelParams,
        features: PinFeatures,
        batch_at,
    ):
        train_cfg.validate()
        self.cfg = model_cfg
        self.tcfg = train_cfg
        self.params = params
        self.features = features
        self.batch_at = batch_at
        self.optimizer = Lion(train_cfg.groups)

    def _text_tokens(self, step: int) -> np.ndarray:
        sig = self.tcfg.text_signal
        if sig == "alternate-per-step":
            sig = "descriptive" if step % 2 == 0 else "keyword"
        return self.features.descriptive if sig == "descriptive" else self.features.keyword

    def _wrap(self, base, a: Tensor, b: Tensor) -> Tensor:
        if self.tcfg.use_mrl and self.cfg.mrl is not None:
            return objectives.mrl_loss(base, a, b, self.cfg.mrl, self.params)
        return base(a, b)

    def losses(self, step: int, batch: data.StepBatch) -> tuple[Tensor | None, Tensor | None]:
        p, cfg, f, D = self.params, self.cfg, self.features, self.tcfg.devices
        do_i2t = self.tcfg.use_i2t and batch.i2t_pins
        do_p2p = self.tcfg.use_p2p and batch.p2p_pairs
        if self.tcfg.objective_mode == "alternate" and do_i2t and do_p2p:
            do_i2t, do_p2p = step % 2 == 0, step % 2 == 1
        l_i2t = l_p2p = None
        if do_i2t:
            rows = f.rows(batch.i2t_pins)
            tokens = self._text_tokens(step)
            x = _sharded_embed(lambda r: model.image_embedding(p, cfg, f.images[r]), rows, D)
            y = _sharded_embed(lambda r: model.text_embedding(p, cfg, tokens[r]), rows, D)
            t, c = objectives.loss_scalars(p, "i2t")
            l_i2t = self._wrap(lambda a, b: objectives.i2t_loss(a, b, t, c, D), x, y)
        if do_p2p:
            q = f.rows([a for a, _ in batch.p2p_pairs])
            r = f.rows([b for _, b in batch.p2p_pairs])
            fuse = lambda rr: model.fusion_embedding(p, cfg, f.images[rr], f.descriptive[rr])  # noqa: E731
            u = _sharded_embed(fuse, q, D)
            v = _sharded_embed(fuse, r, D)
            t, c = objectives.loss_scalars(p, "p2p")
            l_p2p = self._wrap(lambda a, b: objectives.p2p_loss(a, b, t, c, D), u, v)
        return l_i2t, l_p2p

    def calibrate_bias(self, step: int = 0) -> dict[str, float]:
        """Set each bias scalar to the loss-minimizing value for the batch at
        ``step`` with everything else held fixed.

        At t = ln 10, c = -10 every negative pair starts with loss ~12 while
        positives are near zero, and the encoders reach that minimum faster by
        collapsing image and text embeddings to antipodal points than by
        learning. The loss is convex in c, so a bounded scalar search finds
        the starting bias exactly.
        """
        from scipy.optimize import minimize_scalar

        batch = self.batch_at(step)
        out = {}
        names = [n for n in ("loss.c", "loss.c_p2p") if n in self.params]
        for name in names:
            tensor = self.params[name]

            def f(c):
                tensor.data = np.array(c)
                l_i2t, l_p2p = self.losses(step, batch)
                if name == "loss.c_p2p":
                    return l_p2p.item() if l_p2p is not None else 0.0
                if len(names) == 2:
                    return l_i2t.item() if l_i2t is not None else 0.0
                return objectives.total_loss(l_i2t, l_p2p).item()

            res = minimize_scalar(f, bounds=(-50.0, 50.0), method="bounded", options={"xatol": 1e-4})
            tensor.data = np.array(float(res.x))
            out[name] = float(res.x)
        return out

    def train_step(self, step: int) -> dict:
        lr = lr_at_step(self.tcfg.schedule, step)
        self.params.zero_grad()
        try:
            # overflow surfaces as NonFiniteError from the op that produced it
            with np.errstate(over="ignore", invalid="ignore"):
                l_i2t, l_p2p = self.losses(step, self.batch_at(step))
                total = objectives.total_loss(l_i2t, l_p2p)
                T.backward(total)
        except T.NonFiniteError as e:
            raise TrainingAborted(f"non-finite value in {e.op}", self._diagnostics(step)) from e
        if self.tcfg.objective_mode == "alternate":
            for _, t in self.params.trainable():
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
        with np.errstate(over="ignore", invalid="ignore"):
            gnorm = math.sqrt(sum(float(np.sum(t.grad**2)) for _, t in self.params.trainable() if t.grad is not None))
        if not math.isfinite(gnorm) or not math.isfinite(total.item()):
            raise TrainingAborted("non-finite loss or gradient", self._diagnostics(step, gnorm))
        if self.tcfg.grad_clip > 0 and gnorm > self.tcfg.grad_clip:
            k = self.tcfg.grad_clip / gnorm
            for _, t in self.params.trainable():
                t.grad *= k
        self.optimizer.step(self.params, lr)
        return {
            "step": step,
            "lr": lr,
            "loss": total.item(),
            "l_i2t": l_i2t.item() if l_i2t is not None else None,
            "l_p2p": l_p2p.item() if l_p2p is not None else None,
            "t": float(self.params["loss.t"].data),
            "c": float(self.params["loss.c"].data),
            "grad_norm": gnorm,
        }

    def _diagnostics(self, step: int, gnorm: float = float("nan")) -> dict:
        return {
            "step": step,
            "t": float(self.params["loss.t"].data),
            "c": float(self.params["loss.c"].data),
            "grad_norm": gnorm,
        }


def run_training(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: data.Corpus,
    pairs: Sequence[tuple[int, int, int]],
    seed: int,
    out_dir=None,
    resume_from=None,
    meta: dict | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Train for ``train_cfg.total_steps`` steps; returns final params and metrics.

    With ``out_dir`` set, writes ``metrics.jsonl``, periodic
    ``ckpt_<step>.pckpt`` files and ``final.pckpt``.
    """
    train_cfg.validate()
    features = PinFeatures(corpus, model_cfg)
    train_pins = [p for p in corpus.split("train")]
    scorer = corpus.scorer()
    kept = data.filter_by_alignment(
        [(p, data.coalesce_descriptive_text(p)) for p in train_pins], scorer, train_cfg.filter_threshold
    )
    i2t_ids = [p.id for p, _ in kept]
    train_set = {p.id for p in train_pins}
    pair_list = [(q, t) for q, t, _ in pairs if q in train_set and t in train_set]
    batch_at = data.make_batches(
        i2t_ids,
        pair_list,
        train_cfg.i2t_batch if train_cfg.use_i2t else 0,
        train_cfg.p2p_batch if train_cfg.use_p2p else 0,
        seed,
        train_cfg.devices,
    )
    start = 0
    if resume_from is not None:
        params, opt_state, ckpt_meta = model.load_checkpoint(resume_from)
        start = int(ckpt_meta.get("step", 0))
    else:
        params = model.init_model(model_cfg, seed)
        opt_state = {}
    trainer = Trainer(model_cfg, train_cfg, params, features, batch_at)
    trainer.optimizer.load_state_dict(opt_state)
    if resume_from is None and train_cfg.calibrate_bias:
        fitted = trainer.calibrate_bias(0)
        log.info("calibrated bias %s", fitted)
    meta = dict(meta or {})
    metrics: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    mlog = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mlog = open(out / "metrics.jsonl", "a" if resume_from is not None else "w")
    try:
        for step in range(start, train_cfg.total_steps):
            m = trainer.train_step(step)
            metrics.append(m)
            if mlog is not None:
                mlog.write(json.dumps(m, sort_keys=True) + "\n")
            if step % 50 == 0:
                log.info("step %d loss %.5f lr %.3g", step, m["loss"], m["lr"])
            done = step + 1
            if out is not None and train_cfg.save_every and done % train_cfg.save_every == 0:
                model.save_checkpoint(
                    out / f"ckpt_{done}.pckpt", params, trainer.optimizer.state_dict(), {**meta, "step": done}
                )
    finally:
        if mlog is not None:
            mlog.close()
    if out is not None:
        model.save_checkpoint(
            out / "final.pckpt", params, trainer.optimizer.state_dict(), {**meta, "step": train_cfg.total_steps}
        )
    return params, metrics


def pipeline_grad_check(
    model_cfg: ModelConfig,
    seed: int = 0,
    h: float = 1e-4,
    per_leaf: int | None = 12,
    devices: int = 2,
) -> float:
    """Finite-difference audit of encoders -> fusion -> total loss (MRL
    wrapped, t and c included) on a random 2-pin batch.

    I2T runs over both pins sharded across ``devices``; P2P pairs pin 0 with
    pin 1. Returns the worst relative error over the probed components.
    """
    from .encoders import BOS_ID

    params = model.init_model(model_cfg, seed)
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(2, model_cfg.image.seq_len, model_cfg.image.input_dim))
    L = model_cfg.text.seq_len
    tokens = np.zeros((2, L), dtype=np.int64)
    tokens[:, 0] = BOS_ID
    tokens[0, 1:L] = rng.integers(2, model_cfg.text.vocab_size, size=L - 1)
    tokens[1, 1 : max(2, L // 2)] = rng.integers(2, model_cfg.text.vocab_size, size=max(1, L // 2 - 1))
    t, c = objectives.loss_scalars(params, "i2t")
    tp, cp = objectives.loss_scalars(params, "p2p")

    def wrap(base, a, b):
        if model_cfg.mrl is None:
            return base(a, b)
        return objectives.mrl_loss(base, a, b, model_cfg.mrl, params)

    def f():
        x = model.image_embedding(params, model_cfg, images)
        y = model.text_embedding(params, model_cfg, tokens)
        l_i2t = wrap(lambda a, b: objectives.i2t_loss(a, b, t, c, devices), x, y)
        m = model.fusion_embedding(params, model_cfg, images, tokens)
        l_p2p = wrap(lambda a, b: objectives.p2p_loss(a, b, tp, cp, 1), m[0:1], m[1:2])
        return objectives.total_loss(l_i2t, l_p2p)

    leaves = [p for _, p in params.trainable()]
    return T.grad_check(f, leaves, h=h, max_per_leaf=per_leaf, seed=seed)
