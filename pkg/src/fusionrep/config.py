"""Flat ``key = value`` run configuration with a documented key registry.

Every key has a default and a one-line description; unknown keys are
rejected. Values are typed by their default. All randomness derives from
the single ``seed`` key through :func:`component_seed`.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import data, encoders, fusion, graph, objectives, serving, trainer
from .model import ModelConfig
from .nn import ConfigError


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    doc: str


_KEYS = [
    Key("seed", 7, "root seed; per-component seeds derive from it"),
    # artifact paths
    Key("paths.corpus", "corpus.jsonl", "synthetic corpus file"),
    Key("paths.graph", "graph.tsv", "pin<TAB>board edge list"),
    Key("paths.cache", "cache.tsv", "top-K neighbor cache"),
    Key("paths.pairs", "pairs.tsv", "sampled query<TAB>positive<TAB>weight pairs"),
    Key("paths.run_dir", "run", "training output directory (metrics, checkpoints)"),
    Key("paths.checkpoint", "run/final.pckpt", "checkpoint read by embed / eval / train resume"),
    Key("paths.store_dir", "stores", "directory for exported PCEB embedding stores"),
    Key("paths.report", "report.json", "evaluation report"),
    # corpus
    Key("corpus.topics", 4, "number of planted topics"),
    Key("corpus.pins_per_topic", 100, "graph pins per topic (train + held-out)"),
    Key("corpus.noise", 1.0, "scale of all within-topic variation"),
    Key("corpus.boards_per_topic", 4, "boards per topic"),
    Key("corpus.attributes", 8, "number of attribute symbols"),
    Key("corpus.heldout_fraction", 0.25, "fraction of each topic's pins held out"),
    Key("corpus.distractors", 1000, "distractor pins (never trained on)"),
    Key("filter.threshold", 0.3, "minimum image-text alignment score kept for training"),
    # graph
    Key("graph.walks", 1000, "random walks per query pin"),
    Key("graph.walk_length", 10, "hops per walk"),
    Key("graph.restart", 0.5, "probability of jumping back to the query after each pin arrival"),
    Key("graph.top_k", 50, "neighbors cached per query"),
    Key("pairs.per_query", 5, "positives sampled per query"),
    Key("pairs.mode", "weighted", "weighted (by visit count) or uniform"),
    # model
    Key("model.d", 32, "embedding and token width"),
    Key("model.heads", 4, "attention heads everywhere"),
    Key("model.mlp_dim", 64, "transformer MLP width"),
    Key("image.modules", 3, "image encoder modules (funnel pooling between them)"),
    Key("image.layers_per_module", 1, "transformer layers per image module"),
    Key("image.funnel_stride", 2, "token pooling stride between image modules"),
    Key("image.locked_layers", 0, "frozen image layers counted from the input side"),
    Key("text.layers", 2, "text encoder layers"),
    Key("text.seq_len", 16, "text tokens per pin including BOS"),
    Key("text.locked_layers", 0, "frozen text layers counted from the input side"),
    Key("fusion.layers", 2, "fusion aggregator layers"),
    # objectives
    Key("loss.share_scalars", True, "I2T and P2P share one (t, c) pair"),
    Key("loss.use_i2t", True, "enable the image-to-text objective"),
    Key("loss.use_p2p", True, "enable the pin-to-pin objective"),
    Key("loss.use_mrl", True, "wrap objectives in the nested-prefix loss"),
    Key("mrl.prefixes", "8:0.1,16:0.1,32:1.0", "prefix:weight list, largest prefix = model.d"),
    Key("mrl.projection_heads", False, "per-prefix linear heads before renormalization"),
    # training
    Key("train.steps", 300, "optimizer steps"),
    Key("train.devices", 1, "simulated devices the batch is sharded over"),
    Key("train.i2t_batch", 64, "image-text pins per step"),
    Key("train.p2p_batch", 16, "neighbor pairs per step"),
    Key("train.text_signal", "alternate-per-step", "descriptive, keyword or alternate-per-step"),
    Key("train.objective_mode", "joint", "joint (summed) or alternate steps"),
    Key("train.grad_clip", 0.0, "global gradient-norm clip, 0 = off"),
    Key("train.save_every", 0, "checkpoint period in steps, 0 = final only"),
    Key("train.calibrate_bias", True, "fit c to the initial embeddings before step 0"),
    Key("train.resume", False, "continue from paths.checkpoint"),
    Key("schedule.base_lr", 1e-3, "peak learning rate"),
    Key("schedule.warmup", 30, "linear warmup steps"),
]
for _g, _opt in trainer.default_groups().items():
    _KEYS += [
        Key(f"optim.{_g}.lr_mult", _opt.lr_mult, f"{_g} group learning-rate multiplier"),
        Key(f"optim.{_g}.weight_decay", _opt.weight_decay, f"{_g} group decoupled weight decay"),
        Key(f"optim.{_g}.beta1", _opt.beta1, f"{_g} group Lion interpolation factor"),
        Key(f"optim.{_g}.beta2", _opt.beta2, f"{_g} group Lion momentum decay"),
    ]
_KEYS += [
    Key("embed.kinds", "image,text,fusion", "embedding kinds exported by `embed`"),
    Key("quant.scale", 0.5 / 127, "int8 scale s"),
    Key("quant.zero_point", 0, "int8 zero point z"),
    Key("eval.tasks", "image-to-text,text-to-image,image-to-image,multimodal", "tasks in the report"),
    Key("eval.ks", "1,5,10", "recall cutoffs"),
    Key("eval.samples", 500, "query/positive pairs per task (at most)"),
    Key("eval.distractors", 1000, "distractor pins per task"),
    Key("eval.source", "checkpoint", "checkpoint, float (stores) or int8 (quantized stores)"),
    Key("eval.prefix", 0, "evaluate the first k dims renormalized, 0 = full width"),
    Key("gradcheck.h", 1e-4, "central-difference step"),
    Key("gradcheck.per_leaf", 6, "components probed per parameter tensor, 0 = all"),
    Key("gradcheck.tol", 1e-4, "maximum accepted relative error"),
]

REGISTRY: dict[str, Key] = {k.name: k for k in _KEYS}

_CHOICES = {
    "pairs.mode": ("weighted", "uniform"),
    "train.text_signal": ("descriptive", "keyword", "alternate-per-step"),
    "train.objective_mode": ("joint", "alternate"),
    "eval.source": ("checkpoint", "float", "int8"),
}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, raw: str):
    default = REGISTRY[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            value = low in ("true", "1", "yes")
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(f"{key}: {value!r} not one of {_CHOICES[key]}")
    return value


class RunConfig:
    """Resolved configuration: registry defaults, then file, then overrides."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: v.default for k, v in REGISTRY.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in REGISTRY:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides: list[str] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                k, v = line.split("=", 1)
                cfg.set(k.strip(), v)
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v)
        return cfg

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def hash(self) -> str:
        """Digest of every key except output paths."""
        lines = [f"{k}={_format(v)}" for k, v in sorted(self.values.items()) if not k.startswith("paths.")]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    def seed_for(self, component: str) -> int:
        return component_seed(self["seed"], component)

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": self["seed"]}

    # ---------------------------------------------------------------- builders

    def corpus_spec(self) -> data.LatentTopicSpec:
        return data.LatentTopicSpec(
            topic_count=self["corpus.topics"],
            pins_per_topic=self["corpus.pins_per_topic"],
            noise=self["corpus.noise"],
            boards_per_topic=self["corpus.boards_per_topic"],
            attribute_count=self["corpus.attributes"],
            heldout_fraction=self["corpus.heldout_fraction"],
            distractor_pins=self["corpus.distractors"],
        )

    def walk(self) -> graph.WalkConfig:
        return graph.WalkConfig(self["graph.walks"], self["graph.walk_length"], self["graph.restart"])

    def mrl(self) -> objectives.MrlConfig:
        return objectives.MrlConfig(parse_prefixes(self["mrl.prefixes"]), self["mrl.projection_heads"])

    def model(self) -> ModelConfig:
        d, h, m = self["model.d"], self["model.heads"], self["model.mlp_dim"]
        cfg = ModelConfig(
            image=encoders.image_config(
                d_model=d,
                heads=h,
                mlp_dim=m,
                modules=self["image.modules"],
                layers_per_module=self["image.layers_per_module"],
                funnel_stride=self["image.funnel_stride"],
                locked_layers=self["image.locked_layers"],
            ),
            text=encoders.text_config(
                d_model=d,
                heads=h,
                mlp_dim=m,
                layers_per_module=self["text.layers"],
                seq_len=self["text.seq_len"],
                locked_layers=self["text.locked_layers"],
            ),
            fusion=fusion.FusionConfig(layers=self["fusion.layers"], heads=h, mlp_dim=m),
            mrl=self.mrl(),
            share_loss_scalars=self["loss.share_scalars"],
        )
        cfg.validate()
        return cfg

    def train(self) -> trainer.TrainConfig:
        groups = {
            g: trainer.OptimizerGroupConfig(
                self[f"optim.{g}.lr_mult"],
                self[f"optim.{g}.weight_decay"],
                self[f"optim.{g}.beta1"],
                self[f"optim.{g}.beta2"],
            )
            for g in trainer.default_groups()
        }
        tc = trainer.TrainConfig(
            total_steps=self["train.steps"],
            devices=self["train.devices"],
            i2t_batch=self["train.i2t_batch"],
            p2p_batch=self["train.p2p_batch"],
            use_i2t=self["loss.use_i2t"],
            use_p2p=self["loss.use_p2p"],
            use_mrl=self["loss.use_mrl"],
            text_signal=self["train.text_signal"],
            objective_mode=self["train.objective_mode"],
            grad_clip=self["train.grad_clip"],
            filter_threshold=self["filter.threshold"],
            save_every=self["train.save_every"],
            calibrate_bias=self["train.calibrate_bias"],
            schedule=trainer.Schedule(self["schedule.base_lr"], self["schedule.warmup"]),
            groups=groups,
        )
        tc.validate()
        return tc

    def quant(self) -> serving.QuantParams:
        return serving.QuantParams(self["quant.scale"], self["quant.zero_point"])

    def csv(self, key: str) -> list[str]:
        return [s.strip() for s in str(self[key]).split(",") if s.strip()]


def component_seed(seed: int, component: str) -> int:
    """Seed for one pipeline stage: SeedSequence([seed, crc32(component)])."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


def parse_prefixes(text: str) -> list[tuple[int, float]]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            k, w = item.split(":")
            out.append((int(k), float(w)))
        except ValueError:
            raise ConfigError(f"mrl.prefixes: bad entry {item!r}, expected k:weight") from None
    return out


def help_text() -> str:
    width = max(len(k) for k in REGISTRY)
    lines = ["configuration keys (key = default  description):"]
    for k in REGISTRY.values():
        lines.append(f"  {k.name:<{width}} = {_format(k.default):<22} {k.doc}")
    return "\n".join(lines)
