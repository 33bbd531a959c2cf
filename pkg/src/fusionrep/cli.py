"""Command-line entry point.

    fusionrep [--config FILE] [--set key=value ...] SUBCOMMAND

Failures print one JSON line ``{"error": kind, "code": n, "message": ...}``
to stderr and exit with the code listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import config as C
from . import data, evaluation, graph, model, objectives, serving, trainer
from .nn import ConfigError
from .tensor import TensorError

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "config": 3,
    "missing-file": 4,
    "precondition": 5,
    "training-aborted": 6,
    "format": 7,
    "gradcheck-failed": 8,
}

SUBCOMMANDS = ("gen-data", "build-cache", "sample-pairs", "train", "embed", "quantize", "eval", "gradcheck")


class CliFailure(Exception):
    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(message)


def _header(cfg: C.RunConfig) -> str:
    p = cfg.provenance()
    return f"config_hash={p['config_hash']} seed={p['seed']}"


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    return path


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(cfg: C.RunConfig) -> None:
    corpus = data.generate_synthetic_corpus(cfg.corpus_spec(), cfg.seed_for("corpus"))
    corpus.header.update(cfg.provenance())
    corpus.write(cfg["paths.corpus"])
    g = corpus.graph()
    g.write(cfg["paths.graph"], _header(cfg))
    _emit({"corpus": cfg["paths.corpus"], "pins": len(corpus.pins), "graph": cfg["paths.graph"], "edges": g.edge_count})


def _train_graph(cfg: C.RunConfig) -> graph.PinBoardGraph:
    """The graph restricted to training pins, so eval pins never shape pairs."""
    corpus = data.Corpus.read(_need(cfg["paths.corpus"]))
    g = graph.PinBoardGraph.read(_need(cfg["paths.graph"]))
    return g.subgraph(p.id for p in corpus.split("train"))


def cmd_build_cache(cfg: C.RunConfig) -> None:
    cache = graph.build_neighbor_cache(_train_graph(cfg), cfg["graph.top_k"], cfg.walk(), cfg.seed_for("cache"))
    cache.write(cfg["paths.cache"], _header(cfg))
    _emit({"cache": cfg["paths.cache"], "queries": len(cache)})


def cmd_sample_pairs(cfg: C.RunConfig) -> None:
    cache = graph.NeighborCache.read(_need(cfg["paths.cache"]))
    pairs = graph.sample_pairs(cache, cfg["pairs.per_query"], cfg["pairs.mode"], cfg.seed_for("pairs"))
    graph.write_pairs(cfg["paths.pairs"], pairs, _header(cfg))
    _emit({"pairs": cfg["paths.pairs"], "count": len(pairs)})


def cmd_train(cfg: C.RunConfig) -> None:
    corpus = data.Corpus.read(_need(cfg["paths.corpus"]))
    pairs = graph.read_pairs(_need(cfg["paths.pairs"])) if cfg["loss.use_p2p"] else []
    resume = _need(cfg["paths.checkpoint"]) if cfg["train.resume"] else None
    _, metrics = trainer.run_training(
        cfg.model(),
        cfg.train(),
        corpus,
        pairs,
        cfg.seed_for("train"),
        out_dir=cfg["paths.run_dir"],
        resume_from=resume,
        meta=cfg.provenance(),
    )
    last = metrics[-1] if metrics else {}
    _emit({"run_dir": cfg["paths.run_dir"], "steps": len(metrics), "final_loss": last.get("loss")})


def _prefixes(cfg: C.RunConfig) -> list[int]:
    return [k for k, _ in cfg.mrl().prefixes]


def _store_path(cfg: C.RunConfig, kind: str, k: int, dtype: str) -> Path:
    suffix = "" if dtype == "float32" else ".int8"
    return Path(cfg["paths.store_dir"]) / f"{kind}.k{k}{suffix}.pceb"


def _checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def cmd_embed(cfg: C.RunConfig) -> None:
    ckpt = _need(cfg["paths.checkpoint"])
    params, _, _ = model.load_checkpoint(ckpt)
    mcfg = cfg.model()
    corpus = data.Corpus.read(_need(cfg["paths.corpus"]))
    Path(cfg["paths.store_dir"]).mkdir(parents=True, exist_ok=True)
    ids = [p.id for p in corpus.pins]
    written = []
    for kind in cfg.csv("embed.kinds"):
        full = serving.embed_pins(params, mcfg, corpus.pins, kind)
        for k in _prefixes(cfg):
            meta = {**cfg.provenance(), "kind": kind, "prefix": k, "checkpoint": _checkpoint_id(ckpt)}
            store = serving.EmbeddingStore.from_embeddings(ids, serving.truncate_prefix(full, k), meta)
            path = _store_path(cfg, kind, k, "float32")
            store.write(path)
            written.append(str(path))
    _emit({"stores": written})


def cmd_quantize(cfg: C.RunConfig) -> None:
    qp = cfg.quant()
    written = []
    for kind in cfg.csv("embed.kinds"):
        for k in _prefixes(cfg):
            src = serving.EmbeddingStore.read(_need(_store_path(cfg, kind, k, "float32")))
            q = src.quantized(qp)
            q.meta.update(cfg.provenance())
            path = _store_path(cfg, kind, k, "int8")
            q.write(path)
            written.append(str(path))
    _emit({"stores": written})


def cmd_eval(cfg: C.RunConfig) -> None:
    corpus = data.Corpus.read(_need(cfg["paths.corpus"]))
    mcfg = cfg.model()
    k = cfg["eval.prefix"] or mcfg.d_model
    source = cfg["eval.source"]
    kinds = {"image", "text", "fusion"}
    meta = {**cfg.provenance(), "source": source}
    prefix = None
    if source == "checkpoint":
        ckpt = _need(cfg["paths.checkpoint"])
        params, _, _ = model.load_checkpoint(ckpt)
        embed = evaluation.model_embedder(params, mcfg)
        meta["checkpoint"] = _checkpoint_id(ckpt)
        prefix = cfg["eval.prefix"] or None
    else:
        dtype = "float32" if source == "float" else "int8"
        stores = {kind: serving.EmbeddingStore.read(_need(_store_path(cfg, kind, k, dtype))) for kind in kinds}
        embed = evaluation.store_embedder(stores)
        meta["checkpoint"] = stores["image"].meta.get("checkpoint")
        meta["prefix_store"] = k
    report = evaluation.evaluate(
        embed,
        corpus,
        cfg.csv("eval.tasks"),
        [int(x) for x in cfg.csv("eval.ks")],
        cfg["eval.samples"],
        cfg["eval.distractors"],
        cfg.seed_for("eval"),
        prefix=prefix,
        meta=meta,
    )
    evaluation.write_report(cfg["paths.report"], report)
    _emit({"report": cfg["paths.report"], "recall": {t["task"]: t["recall"] for t in report["tasks"]}})


def cmd_gradcheck(cfg: C.RunConfig) -> None:
    per_leaf = cfg["gradcheck.per_leaf"] or None
    err = float(trainer.pipeline_grad_check(cfg.model(), cfg.seed_for("gradcheck"), cfg["gradcheck.h"], per_leaf))
    ok = bool(err < cfg["gradcheck.tol"])
    _emit({"max_rel_error": err, "tol": cfg["gradcheck.tol"], "ok": ok})
    if not ok:
        raise CliFailure("gradcheck-failed", f"max relative error {err:.3g} >= {cfg['gradcheck.tol']}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-cache": cmd_build_cache,
    "sample-pairs": cmd_sample_pairs,
    "train": cmd_train,
    "embed": cmd_embed,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------- entry


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message)


def _fail(kind: str, message: str):
    line = json.dumps({"error": kind, "code": EXIT_CODES[kind], "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    raise SystemExit(EXIT_CODES[kind])


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="fusionrep",
        description="Multimodal contrastive representation pipeline (desk scale).",
        epilog=C.help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one key")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("command", choices=SUBCOMMANDS, help="pipeline stage to run")
    return p


def _classify(exc: BaseException) -> str:
    if isinstance(exc, CliFailure):
        return exc.kind
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, FileNotFoundError):
        return "missing-file"
    if isinstance(exc, trainer.TrainingAborted):
        return "training-aborted"
    if isinstance(exc, (model.CheckpointError, serving.StoreError, json.JSONDecodeError)):
        return "format"
    if isinstance(exc, (data.DataError, graph.GraphError, evaluation.EvalError, objectives.LossError, TensorError)):
        return "precondition"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = C.RunConfig.load(args.config, args.overrides)
        COMMANDS[args.command](cfg)
    except SystemExit:
        raise
    except BaseException as exc:  # noqa: BLE001 - every failure becomes one line
        if isinstance(exc, KeyboardInterrupt):
            raise
        _fail(_classify(exc), f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
