"""Retrieval evaluation: eval-set construction with distractors and exact Recall@K."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import data, graph, serving
from .model import ModelConfig
from .nn import ModelParams

TASKS = ("image-to-text", "text-to-image", "image-to-image", "multimodal")
DEFAULT_KS = (1, 5, 10)
_TASK_KEY = {t: i + 1 for i, t in enumerate(TASKS)}


class EvalError(ValueError):
    pass


@dataclass
class EvalSet:
    """Row-aligned queries Q and positives P, plus the shared negatives N."""

    task: str
    Q: np.ndarray
    P: np.ndarray
    N: np.ndarray
    query_ids: list[int] = field(default_factory=list)
    positive_ids: list[int] = field(default_factory=list)
    negative_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.P = np.asarray(self.P, dtype=np.float64)
        self.N = np.asarray(self.N, dtype=np.float64).reshape(-1, self.Q.shape[-1] if self.Q.ndim == 2 else 0)
        if self.Q.shape != self.P.shape:
            raise EvalError(f"queries {self.Q.shape} and positives {self.P.shape} must align")

    @property
    def chance_r1(self) -> float:
        return 1.0 / (len(self.N) + 1)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "EvalSet":
        """Same set with ``fn`` applied to every embedding matrix."""
        n = fn(self.N) if len(self.N) else self.N
        return EvalSet(self.task, fn(self.Q), fn(self.P), n, self.query_ids, self.positive_ids, self.negative_ids)


def negatives_beating(es: EvalSet, chunk: int = 32) -> np.ndarray:
    """Per query, the number of negatives scoring >= the positive.

    Positive and negative scores use the same elementwise reduction, so a
    negative identical to the positive yields exactly the same score and
    counts as a tie.
    """
    if len(es.Q) == 0:
        raise EvalError(f"{es.task}: empty query set")
    pos = np.sum(es.Q * es.P, axis=-1)
    out = np.zeros(len(es.Q), dtype=np.int64)
    if len(es.N) == 0:
        return out
    for i in range(0, len(es.Q), chunk):
        q = es.Q[i : i + chunk]
        s = np.sum(q[:, None, :] * es.N[None, :, :], axis=-1)
        out[i : i + chunk] = np.sum(s >= pos[i : i + chunk, None], axis=1)
    return out


def recall_at_k(es: EvalSet, k: int) -> float:
    """Fraction of queries with fewer than ``k`` negatives scoring >= their positive."""
    if k < 1:
        raise EvalError("K must be >= 1")
    return float(np.mean(negatives_beating(es) < k))


def recall_curve(es: EvalSet, ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    beat = negatives_beating(es)
    return {int(k): float(np.mean(beat < k)) for k in ks}


# ---------------------------------------------------------------- eval sets


def _pick(items: list, count: int, rng: np.random.Generator) -> list:
    if count >= len(items):
        return list(items)
    idx = np.sort(rng.choice(len(items), size=count, replace=False))
    return [items[i] for i in idx]


def eval_pairs(
    corpus: data.Corpus,
    task: str,
    sample_count: int = 500,
    seed: int = 0,
    walk: graph.WalkConfig | None = None,
    neighbors_per_query: int = 5,
) -> list[tuple[int, int]]:
    """(query id, positive id) pairs drawn from the held-out split only."""
    if task not in TASKS:
        raise EvalError(f"unknown task {task!r}; expected one of {TASKS}")
    held = corpus.split("heldout")
    if not held:
        raise EvalError("corpus has no held-out pins")
    rng = graph.derived_rng(seed, _TASK_KEY[task])
    if task in ("image-to-text", "text-to-image"):
        return [(p.id, p.id) for p in _pick(held, sample_count, rng)]
    sub = corpus.graph().subgraph([p.id for p in held])
    cache = graph.build_neighbor_cache(sub, k=50, walk=walk, seed=seed)
    if not cache.entries:
        raise EvalError("held-out graph slice has no neighbor pairs")
    pairs = [(q, p) for q, p, _ in graph.sample_pairs(cache, neighbors_per_query, "weighted", seed)]
    return _pick(pairs, sample_count, rng)


Embedder = Callable[[str, Sequence[data.PinRecord]], np.ndarray]


def model_embedder(params: ModelParams, cfg: ModelConfig) -> Embedder:
    """Embeddings computed from model parameters."""
    return lambda kind, pins: serving.embed_pins(params, cfg, pins, kind)


def store_embedder(stores: dict[str, serving.EmbeddingStore]) -> Embedder:
    """Embeddings looked up by pin id in exported stores (int8 rows dequantized)."""
    tables = {}
    for kind, st in stores.items():
        tables[kind] = ({int(i): r for r, i in enumerate(st.ids)}, st.dense())

    def embed(kind, pins):
        if kind not in tables:
            raise EvalError(f"no {kind!r} embedding store loaded")
        index, rows = tables[kind]
        try:
            return rows[[index[p.id] for p in pins]]
        except KeyError as e:
            raise EvalError(f"pin {e.args[0]} missing from the {kind!r} store") from None

    return embed


def build_eval_set(
    corpus: data.Corpus,
    task: str,
    embed: Embedder,
    sample_count: int = 500,
    distractor_count: int = 1000,
    seed: int = 0,
    walk: graph.WalkConfig | None = None,
) -> EvalSet:
    """Embed queries, positives and distractors for one retrieval task.

    image-to-text pairs a held-out pin's image with its descriptive text,
    text-to-image the reverse; image-to-image and multimodal pair held-out
    pins with graph neighbors from the held-out slice, using image and
    fusion embeddings respectively. Distractors come from the corpus
    distractor split, which never enters training.
    """
    pairs = eval_pairs(corpus, task, sample_count, seed, walk)
    pool = corpus.split("distractor")
    if distractor_count > len(pool):
        raise EvalError(f"requested {distractor_count} distractors but the corpus holds {len(pool)}")
    distractors = _pick(pool, distractor_count, graph.derived_rng(seed, 0))
    q_kind, p_kind = {
        "image-to-text": ("image", "text"),
        "text-to-image": ("text", "image"),
        "image-to-image": ("image", "image"),
        "multimodal": ("fusion", "fusion"),
    }[task]
    qs = [corpus[q] for q, _ in pairs]
    ps = [corpus[p] for _, p in pairs]
    return EvalSet(
        task,
        embed(q_kind, qs),
        embed(p_kind, ps),
        embed(p_kind, distractors),
        [q for q, _ in pairs],
        [p for _, p in pairs],
        [p.id for p in distractors],
    )


def evaluate(
    embed: Embedder,
    corpus: data.Corpus,
    tasks: Sequence[str] = TASKS,
    ks: Sequence[int] = DEFAULT_KS,
    sample_count: int = 500,
    distractor_count: int = 1000,
    seed: int = 0,
    prefix: int | None = None,
    quant: serving.QuantParams | None = None,
    meta: dict | None = None,
) -> dict:
    """Recall report over ``tasks``; optionally on prefix-truncated and/or
    int8 round-tripped embeddings."""
    report = {"meta": dict(meta or {}), "prefix": prefix, "quantized": quant is not None, "tasks": []}
    if quant is not None:
        report["quant"] = {"s": quant.s, "z": quant.z}
    for task in tasks:
        es = build_eval_set(corpus, task, embed, sample_count, distractor_count, seed)
        if prefix is not None:
            es = es.map(lambda x: serving.truncate_prefix(x, prefix))
        if quant is not None:
            es = es.map(lambda x: serving.dequantize(serving.quantize(x, quant), quant))
        report["tasks"].append(
            {
                "task": task,
                "queries": len(es.Q),
                "negatives": len(es.N),
                "chance_r1": es.chance_r1,
                "recall": {str(k): v for k, v in recall_curve(es, ks).items()},
            }
        )
    return report


def write_report(path, report: dict) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(report, sort_keys=True, indent=1) + "\n")


def task_recall(report: dict, task: str, k: int) -> float:
    for entry in report["tasks"]:
        if entry["task"] == task:
            return entry["recall"][str(k)]
    raise EvalError(f"task {task!r} not in report")
