"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one line ``criterion N: PASS|FAIL (details)``; the lines
are repeated in the terminal summary. Run with ``pytest tests/test_acceptance.py -s``
to see them inline as well.
"""

import math
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from fusionrep import cli, data, evaluation, graph, model, objectives, serving, trainer
from fusionrep import tensor as T
from fusionrep.tensor import Tensor

from conftest import tiny_corpus_spec, tiny_model_cfg, unit_rows

RESULTS: dict[int, str] = {}
SEED = 7
LN10 = math.log(10.0)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[n] = line
    print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------- shared desk runs


@pytest.fixture(scope="module")
def desk():
    """Default corpus (4 topics x 100 pins, seed 7) trained 300 steps jointly and I2T-only."""
    t0 = time.perf_counter()
    corpus = data.generate_synthetic_corpus(data.LatentTopicSpec(), SEED)
    train_graph = corpus.graph().subgraph(p.id for p in corpus.split("train"))
    cache = graph.build_neighbor_cache(train_graph, 50, graph.WalkConfig(), SEED)
    pairs = graph.sample_pairs(cache, 5, "weighted", SEED)
    mcfg = model.ModelConfig()
    runs = {}
    for name, use_p2p in (("joint", True), ("i2t-only", False)):
        tc = trainer.TrainConfig(total_steps=300, use_p2p=use_p2p)
        params, metrics = trainer.run_training(mcfg, tc, corpus, pairs, SEED)
        embed = evaluation.model_embedder(params, mcfg)
        rep = evaluation.evaluate(embed, corpus, ("image-to-text", "multimodal"), (1, 10), seed=SEED)
        runs[name] = {"params": params, "metrics": metrics, "report": rep}
    return {"corpus": corpus, "cfg": mcfg, "runs": runs, "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------- criteria


def test_criterion_1_chunk_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for n in (8, 16, 32):
        x, y = Tensor(unit_rows(rng, n, 16)), Tensor(unit_rows(rng, n, 16))
        u, v = Tensor(unit_rows(rng, n // 2, 16)), Tensor(unit_rows(rng, n // 2, 16))
        ref_i2t = objectives.full_matrix_pair_loss(x, y, LN10, -10.0).item()
        ref_p2p = objectives.full_matrix_pair_loss(u, v, LN10, -10.0).item()
        for d in (1, 2, 4):
            a = objectives.i2t_loss(x, y, LN10, -10.0, d).item()
            b = objectives.p2p_loss(u, v, LN10, -10.0, d).item()
            worst = max(worst, abs(a - ref_i2t) / abs(ref_i2t), abs(b - ref_p2p) / abs(ref_p2p))
    corpus = data.generate_synthetic_corpus(tiny_corpus_spec(pins_per_topic=48), SEED)
    tg = corpus.graph().subgraph(p.id for p in corpus.split("train"))
    pairs = graph.sample_pairs(graph.build_neighbor_cache(tg, 10, graph.WalkConfig(200, 6, 0.5), SEED), 3, "weighted", SEED)
    finals = []
    for d in (1, 2, 4):
        tc = trainer.TrainConfig(total_steps=5, devices=d, i2t_batch=16, p2p_batch=8, schedule=trainer.Schedule(1e-3, 2))
        finals.append(trainer.run_training(tiny_model_cfg(), tc, corpus, pairs, SEED)[0])
    drift = max(float(np.max(np.abs(p[n].data - finals[0][n].data))) for p in finals[1:] for n in p)
    secs = time.perf_counter() - t0
    report(1, worst <= 1e-12 and drift <= 1e-9 and secs < 10,
           f"loss rel err {worst:.2e} <= 1e-12, 5-step param drift {drift:.2e} <= 1e-9, {secs:.1f}s < 10s")


def test_criterion_2_gradient_audit():
    t0 = time.perf_counter()
    err = trainer.pipeline_grad_check(model.ModelConfig(), seed=SEED, h=1e-4, per_leaf=6)
    secs = time.perf_counter() - t0
    report(2, err < 1e-4 and secs < 60, f"max rel err {err:.2e} < 1e-4 on a 2-pin batch, {secs:.1f}s < 60s")


def test_criterion_3_pointwise_values():
    def oracle(sim, z):
        with mpmath.workdps(50):
            return float(mpmath.log1p(mpmath.exp(z * (-mpmath.log(10) * sim - 10))))

    pos = objectives.scalar_loss(1.0, 1, LN10, -10.0)
    neg = objectives.scalar_loss(1.0, -1, LN10, -10.0)
    ok_pos = abs(pos - 4.534e-6) <= 1e-9
    ok_neg = abs(neg - 12.302589) <= 1e-5
    report(3, ok_pos and ok_neg,
           f"z=+1: {pos:.6e} vs stated 4.534e-6 +- 1e-9 (oracle {oracle(1.0, 1):.6e}); "
           f"z=-1: {neg:.7f} vs 12.302589 +- 1e-5 (oracle {oracle(1.0, -1):.7f})")


def test_criterion_4_learnability(desk):
    joint, solo = desk["runs"]["joint"]["report"], desk["runs"]["i2t-only"]["report"]
    r1 = evaluation.task_recall(joint, "image-to-text", 1)
    chance = joint["tasks"][0]["chance_r1"]
    mm_joint = evaluation.task_recall(joint, "multimodal", 10)
    mm_solo = evaluation.task_recall(solo, "multimodal", 10)
    secs = desk["seconds"]
    report(4, r1 >= 5 * chance and mm_joint > mm_solo and secs < 300,
           f"i2t R@1 {r1:.3f} >= 5 x {chance:.4f}; multimodal R@10 joint {mm_joint:.3f} > I2T-only {mm_solo:.3f}; {secs:.0f}s < 300s")


def test_criterion_5_mrl(desk):
    rng = np.random.default_rng(SEED)
    cfg = objectives.MrlConfig([(8, 0.1), (16, 0.1), (32, 1.0)])
    x, y = Tensor(unit_rows(rng, 8, 32)), Tensor(unit_rows(rng, 8, 32))
    base = lambda a, b: objectives.i2t_loss(a, b, LN10, -10.0)  # noqa: E731
    got = objectives.mrl_loss(base, x, y, cfg).item()
    independent = 0.0
    for k, w in cfg.prefixes:
        xs, ys = objectives.prefix(x, k), objectives.prefix(y, k)
        independent = independent + w * objectives.chunked_pair_loss(xs, ys, 1, LN10, -10.0).item()
    exact = got == independent
    wide_cfg = objectives.MrlConfig([(64, 0.1), (128, 0.1), (256, 1.0)])
    wide_cfg.validate(256)
    X, Y = Tensor(unit_rows(rng, 4, 256)), Tensor(unit_rows(rng, 4, 256))
    wide = math.isfinite(objectives.mrl_loss(base, X, Y, wide_cfg).item())
    mcfg = desk["cfg"]
    k = mcfg.d_model // 4
    embed = evaluation.model_embedder(desk["runs"]["joint"]["params"], mcfg)
    rep = evaluation.evaluate(embed, desk["corpus"], ("image-to-text",), (10,), seed=SEED, prefix=k)
    r10 = evaluation.task_recall(rep, "image-to-text", 10)
    chance10 = 10 * rep["tasks"][0]["chance_r1"]
    report(5, exact and wide and r10 > chance10,
           f"mrl_loss == weighted sum exactly: {exact}; (64,128,256) at d=256 accepted: {wide}; "
           f"prefix-{k} i2t R@10 {r10:.3f} > chance {chance10:.4f}")


def test_criterion_6_quantization(desk):
    t0 = time.perf_counter()
    qp = serving.QuantParams(0.5 / 127, 0)
    grid = np.arange(-127, 128) * qp.s
    xs = np.concatenate([grid, np.random.default_rng(SEED).uniform(-127 * qp.s, 127 * qp.s, 10_000)])
    bound = float(np.max(np.abs(serving.dequantize(serving.quantize(xs, qp), qp) - xs)))
    embed = evaluation.model_embedder(desk["runs"]["joint"]["params"], desk["cfg"])
    flt = evaluation.evaluate(embed, desk["corpus"], evaluation.TASKS, (10,), seed=SEED)
    q = evaluation.evaluate(embed, desk["corpus"], evaluation.TASKS, (10,), seed=SEED, quant=qp)
    gaps = {t: abs(evaluation.task_recall(flt, t, 10) - evaluation.task_recall(q, t, 10)) for t in evaluation.TASKS}
    secs = time.perf_counter() - t0
    worst = max(gaps.values())
    report(6, bound <= qp.s / 2 and worst <= 0.01 + 1e-12 and secs < 30,
           f"max round-trip err {bound:.3e} <= s/2 = {qp.s / 2:.3e}; max |R@10 int8 - float| {worst:.3f} <= 0.01 "
           f"over {len(gaps)} tasks; {secs:.1f}s < 30s")


def test_criterion_7_recall_oracle():
    rng = np.random.default_rng(SEED)
    mismatches = nonmonotone = ties = 0
    for trial in range(1000):
        nq, nn, d = int(rng.integers(1, 8)), int(rng.integers(0, 60)), int(rng.integers(2, 6))
        Q, P = unit_rows(rng, nq, d), unit_rows(rng, nq, d)
        N = unit_rows(rng, nn, d) if nn else np.zeros((0, d))
        if nn and trial % 2 == 0:
            m = min(nq, nn)
            N[:m] = P[:m]
            Q, P, N = (np.round(a * 3) / 3 for a in (Q, P, N))
        es = evaluation.EvalSet("image-to-image", Q, P, N)
        prev = -1.0
        for k in range(1, 12):
            got = evaluation.recall_at_k(es, k)
            hits = 0
            for q, p in zip(es.Q, es.P):
                pos = float(np.sum(q * p))
                ranked = sorted((float(np.sum(q * n)) for n in es.N), reverse=True)
                ties += sum(s == pos for s in ranked)
                hits += sum(s >= pos for s in ranked) < k
            mismatches += got != hits / len(Q)
            nonmonotone += got < prev
            prev = got
    report(7, mismatches == 0 and nonmonotone == 0 and ties > 0,
           f"{mismatches} mismatches vs sort oracle over 1000 instances ({ties} exact ties); {nonmonotone} monotonicity breaks")


def test_criterion_8_graph_walker():
    worst_tv = 0.0
    for s in range(10):
        rng = np.random.default_rng(s)
        pins, boards = int(rng.integers(4, 12)), int(rng.integers(2, 8))
        edges = {(i, 100 + int(rng.integers(boards))) for i in range(pins)}
        edges |= {(i, 100 + j) for i in range(pins) for j in range(boards) if rng.random() < 0.3}
        g = graph.PinBoardGraph(edges)
        assert len(g.pins) + len(g.boards) <= 20
        q = next(int(p) for p in g.pins if g.co_board_pins(int(p)))
        emp = graph.random_walk_counts(g, q, 10_000, 10, seed=s)
        exact = graph.exact_visit_distribution(g, q, 10)
        et, xt = sum(emp.values()), sum(exact.values())
        tv = 0.5 * sum(abs(emp.get(k, 0) / et - exact.get(k, 0) / xt) for k in set(emp) | set(exact))
        worst_tv = max(worst_tv, tv)
    cache = graph.NeighborCache({1: [(2, 90), (3, 10)]})
    worst_freq = 0.0
    for mode, expected in (("weighted", 0.9), ("uniform", 0.5)):
        hits = sum(graph.sample_pairs(cache, 1, mode, seed=s)[0][1] == 2 for s in range(10_000))
        worst_freq = max(worst_freq, abs(hits / 10_000 - expected))
    report(8, worst_tv <= 0.05 and worst_freq <= 0.02,
           f"max TV {worst_tv:.4f} <= 0.05 over 10 graphs; max sampling deviation {worst_freq:.4f} <= 0.02")


def test_criterion_9_freezing():
    corpus = data.generate_synthetic_corpus(data.LatentTopicSpec(), SEED)
    tg = corpus.graph().subgraph(p.id for p in corpus.split("train"))
    pairs = graph.sample_pairs(graph.build_neighbor_cache(tg, 50, graph.WalkConfig(200, 10, 0.5), SEED), 5, "weighted", SEED)
    base = model.ModelConfig()
    n_all = base.image.total_layers
    counts = []
    for n in range(n_all + 1):
        cfg = model.ModelConfig()
        cfg.image.locked_layers = n
        counts.append(model.init_model(cfg, SEED).trainable_count())
    cfg = model.ModelConfig()
    cfg.image.locked_layers = n_all
    init = model.init_model(cfg, SEED).snapshot()
    tc = trainer.TrainConfig(total_steps=100, i2t_batch=32, p2p_batch=8)
    params, _ = trainer.run_training(cfg, tc, corpus, pairs, SEED)
    frozen = all(np.array_equal(params[n].data, init[n]) for n in params.names("image."))
    moved = any(not np.array_equal(params[n].data, init[n]) for n in params.names("fusion."))
    monotone = all(a > b for a, b in zip(counts, counts[1:]))
    report(9, frozen and moved and monotone,
           f"image encoder bitwise unchanged after 100 steps: {frozen}; trainable counts by locked depth {counts} strictly decreasing")


def test_criterion_10_determinism_and_formats(tmp_path, monkeypatch, capsys):
    tiny = [
        "model.d=8", "model.heads=2", "model.mlp_dim=16", "image.modules=2", "text.layers=1", "text.seq_len=8",
        "fusion.layers=1", "mrl.prefixes=2:0.1,4:0.1,8:1.0", "corpus.topics=2", "corpus.pins_per_topic=16",
        "corpus.distractors=24", "graph.walks=100", "train.steps=4", "train.i2t_batch=8", "train.p2p_batch=4",
        "schedule.warmup=1", "eval.samples=10", "eval.distractors=10", "seed=7",
    ]
    argv = [a for item in tiny for a in ("--set", item)]
    outputs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        for stage in ("gen-data", "build-cache", "sample-pairs", "train", "embed", "quantize", "eval"):
            assert cli.main([*argv, stage]) == 0
        outputs.append({str(p.relative_to(tmp_path / name)): p.read_bytes() for p in sorted((tmp_path / name).rglob("*")) if p.is_file()})
    capsys.readouterr()
    a, b = outputs
    identical = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    kinds = {"checkpoint": "run/final.pckpt", "cache": "cache.tsv", "store": "stores/fusion.k8.pceb", "report": "report.json"}
    present = all(v in a for v in kinds.values())

    rng = np.random.default_rng(SEED)
    store = serving.EmbeddingStore.from_embeddings(np.arange(1, 201), unit_rows(rng, 200, 32), {"k": 32})
    qstore = store.quantized(serving.QuantParams())
    exact = True
    for s, fname in ((store, "f.pceb"), (qstore, "q.pceb")):
        s.write(tmp_path / fname)
        back = serving.EmbeddingStore.read(tmp_path / fname)
        exact &= np.array_equal(back.ids, s.ids) and np.array_equal(back.vectors, s.vectors) and back.qp == s.qp
        back.write(tmp_path / ("re_" + fname))
        exact &= (tmp_path / fname).read_bytes() == (tmp_path / ("re_" + fname)).read_bytes()
    ratio = qstore.payload_bytes() / store.payload_bytes()
    report(10, identical and present and exact and ratio == 0.25,
           f"{len(a)} artifacts byte-identical across reruns: {identical}; PCEB round-trip exact: {exact}; int8/float32 payload {ratio}")


def test_desk_training_halves_i2t_loss(desk):
    """Final L_I2T against the loss of the freshly initialized model (t = ln 10, c = -10)."""
    corpus, mcfg = desk["corpus"], desk["cfg"]
    metrics = desk["runs"]["joint"]["metrics"]
    params = model.init_model(mcfg, SEED)
    ids = [p.id for p in corpus.split("train")][:64]
    tr = trainer.Trainer(mcfg, trainer.TrainConfig(), params, trainer.PinFeatures(corpus, mcfg), lambda s: data.StepBatch(ids, []))
    initial = tr.losses(0, data.StepBatch(ids, []))[0].item()
    final = float(np.mean([m["l_i2t"] for m in metrics[-10:]]))
    print(f"\nL_I2T initial {initial:.4f} (calibrated start {metrics[0]['l_i2t']:.4f}), final {final:.4f}")
    assert final < 0.5 * initial
