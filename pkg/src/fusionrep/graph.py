"""Pin-Board bipartite graph, random-walk neighbor counting, top-K caching,
and query-positive pair sampling."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class GraphError(ValueError):
    pass


def derived_rng(seed: int, key: int) -> np.random.Generator:
    """Per-item generator; results don't depend on processing order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(key)]))


class PinBoardGraph:
    """Immutable undirected bipartite graph between pins and boards.

    Ids are integers; a value used as both a pin and a board id would create a
    pin-pin or board-board edge and is rejected.
    """

    def __init__(self, edges: Iterable[tuple[int, int]]):
        pairs = sorted({(int(p), int(b)) for p, b in edges})
        pins = sorted({p for p, _ in pairs})
        boards = sorted({b for _, b in pairs})
        clash = set(pins) & set(boards)
        if clash:
            raise GraphError(f"non-bipartite edge: ids {sorted(clash)[:5]} used as both pin and board")
        self.pins = np.asarray(pins, dtype=np.int64)
        self.boards = np.asarray(boards, dtype=np.int64)
        self._pin_index = {p: i for i, p in enumerate(pins)}
        self._board_index = {b: i for i, b in enumerate(boards)}
        pin_adj = defaultdict(list)
        board_adj = defaultdict(list)
        for p, b in pairs:
            pin_adj[self._pin_index[p]].append(self._board_index[b])
            board_adj[self._board_index[b]].append(self._pin_index[p])
        self.pin_ptr, self.pin_nbr = _csr(pin_adj, len(pins))
        self.board_ptr, self.board_nbr = _csr(board_adj, len(boards))
        self.edge_count = len(pairs)

    @classmethod
    def read(cls, path) -> "PinBoardGraph":
        edges = []
        for lineno, line in _data_lines(path):
            cols = line.split("\t")
            if len(cols) != 2:
                raise GraphError(f"{path}:{lineno}: expected 'pin<TAB>board'")
            edges.append((int(cols[0]), int(cols[1])))
        return cls(edges)

    def write(self, path, header: str | None = None) -> None:
        with open(path, "w") as f:
            _write_header(f, header)
            for p, b in self.edges():
                f.write(f"{p}\t{b}\n")

    def edges(self) -> list[tuple[int, int]]:
        out = []
        for i, p in enumerate(self.pins):
            for j in self.pin_nbr[self.pin_ptr[i] : self.pin_ptr[i + 1]]:
                out.append((int(p), int(self.boards[j])))
        return out

    def has_pin(self, pin: int) -> bool:
        return int(pin) in self._pin_index

    def pin_index(self, pin: int) -> int:
        try:
            return self._pin_index[int(pin)]
        except KeyError:
            raise GraphError(f"unknown pin {pin}") from None

    def boards_of(self, pin: int) -> list[int]:
        i = self.pin_index(pin)
        return [int(self.boards[j]) for j in self.pin_nbr[self.pin_ptr[i] : self.pin_ptr[i + 1]]]

    def pins_of(self, board: int) -> list[int]:
        j = self._board_index[int(board)]
        return [int(self.pins[i]) for i in self.board_nbr[self.board_ptr[j] : self.board_ptr[j + 1]]]

    def co_board_pins(self, pin: int) -> set[int]:
        return {q for b in self.boards_of(pin) for q in self.pins_of(b) if q != pin}

    def subgraph(self, pins: Iterable[int]) -> "PinBoardGraph":
        keep = {int(p) for p in pins}
        return PinBoardGraph((p, b) for p, b in self.edges() if p in keep)


def _write_header(f, header: str | None) -> None:
    if header:
        f.write(f"# {header}\n")


def _data_lines(path):
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip() and not line.startswith("#"):
            yield lineno, line


def _csr(adj: dict[int, list[int]], n: int) -> tuple[np.ndarray, np.ndarray]:
    ptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        ptr[i + 1] = ptr[i] + len(adj.get(i, ()))
    nbr = np.asarray([j for i in range(n) for j in sorted(adj.get(i, ()))], dtype=np.int64)
    return ptr, nbr


@dataclass
class WalkConfig:
    walk_count: int = 1000
    walk_length: int = 10
    restart: float = 0.5


def random_walk_counts(
    graph: PinBoardGraph,
    query: int,
    walk_count: int = 1000,
    walk_length: int = 10,
    seed: int = 0,
    restart: float = 0.5,
) -> dict[int, int]:
    """Visit counts of pin nodes over ``walk_count`` walks from ``query``.

    Each step hops pin->board or board->pin by a uniform neighbor choice.
    After every arrival at a pin the walker jumps back to the query with
    probability ``restart``. The query itself is never counted.
    """
    if walk_count < 1 or walk_length < 1:
        raise GraphError("walk_count and walk_length must be >= 1")
    if not 0.0 <= restart <= 1.0:
        raise GraphError("restart probability must lie in [0, 1]")
    q = graph.pin_index(query)
    if graph.pin_ptr[q + 1] == graph.pin_ptr[q]:
        raise GraphError(f"pin {query} has no neighbors")
    rng = np.random.default_rng(seed)
    pos = np.full(walk_count, q, dtype=np.int64)
    visits = np.zeros(len(graph.pins), dtype=np.int64)
    for step in range(walk_length):
        u = rng.random(walk_count)
        if step % 2 == 0:
            lo, deg = graph.pin_ptr[pos], np.diff(graph.pin_ptr)[pos]
            pos = graph.pin_nbr[lo + (u * deg).astype(np.int64)]
        else:
            lo, deg = graph.board_ptr[pos], np.diff(graph.board_ptr)[pos]
            pos = graph.board_nbr[lo + (u * deg).astype(np.int64)]
            np.add.at(visits, pos[pos != q], 1)
            back = rng.random(walk_count) < restart
            pos = np.where(back, q, pos)
    return {int(graph.pins[i]): int(c) for i, c in enumerate(visits) if c > 0}


def exact_visit_distribution(
    graph: PinBoardGraph, query: int, walk_length: int = 10, restart: float = 0.5
) -> dict[int, float]:
    """Expected per-walk visit counts, by propagating the state distribution
    through the alternating pin->board / board->pin transition matrices."""
    n_p, n_b = len(graph.pins), len(graph.boards)
    p2b = np.zeros((n_p, n_b))
    b2p = np.zeros((n_b, n_p))
    for i in range(n_p):
        nb = graph.pin_nbr[graph.pin_ptr[i] : graph.pin_ptr[i + 1]]
        if len(nb):
            p2b[i, nb] = 1.0 / len(nb)
    for j in range(n_b):
        nb = graph.board_nbr[graph.board_ptr[j] : graph.board_ptr[j + 1]]
        b2p[j, nb] = 1.0 / len(nb)
    q = graph.pin_index(query)
    home = np.zeros(n_p)
    home[q] = 1.0
    pi = home.copy()
    expected = np.zeros(n_p)
    for step in range(walk_length):
        if step % 2 == 0:
            beta = pi @ p2b
        else:
            pi = beta @ b2p
            expected += pi
            pi = (1.0 - restart) * pi + restart * home
    expected[q] = 0.0
    return {int(graph.pins[i]): float(v) for i, v in enumerate(expected) if v > 0}


# ---------------------------------------------------------------- neighbor cache


@dataclass
class NeighborCache:
    """Per query pin, up to K (neighbor, count) entries, best first."""

    entries: dict[int, list[tuple[int, int]]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def write(self, path, header: str | None = None) -> None:
        with open(path, "w") as f:
            _write_header(f, header)
            for q in sorted(self.entries):
                for nbr, count in self.entries[q]:
                    f.write(f"{q}\t{nbr}\t{count}\n")

    @classmethod
    def read(cls, path) -> "NeighborCache":
        entries: dict[int, list[tuple[int, int]]] = defaultdict(list)
        for lineno, line in _data_lines(path):
            cols = line.split("\t")
            if len(cols) != 3:
                raise GraphError(f"{path}:{lineno}: expected 'query<TAB>neighbor<TAB>count'")
            entries[int(cols[0])].append((int(cols[1]), int(cols[2])))
        return cls(dict(entries))


def top_k(counts: dict[int, int], k: int) -> list[tuple[int, int]]:
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


def build_neighbor_cache(
    graph: PinBoardGraph,
    k: int = 50,
    walk: WalkConfig | None = None,
    seed: int = 0,
    pins: Iterable[int] | None = None,
) -> NeighborCache:
    """Top-K visited pins per query; pins without co-board neighbors are skipped."""
    walk = walk or WalkConfig()
    if k < 1:
        raise GraphError("K must be >= 1")
    queries = graph.pins if pins is None else sorted(int(p) for p in pins)
    entries = {}
    for p in queries:
        p = int(p)
        if not graph.co_board_pins(p):
            continue
        counts = random_walk_counts(
            graph, p, walk.walk_count, walk.walk_length, derived_rng(seed, p), walk.restart
        )
        if counts:
            entries[p] = top_k(counts, k)
    return NeighborCache(entries)


# ---------------------------------------------------------------- pair sampling


def sample_pairs(
    cache: NeighborCache, n: int = 5, mode: str = "weighted", seed: int = 0
) -> list[tuple[int, int, int]]:
    """Up to ``n`` distinct positives per query as (query, positive, weight).

    Weighted mode draws proportionally to visit count (weight = count);
    uniform mode draws uniformly (weight = 1).
    """
    if n < 1:
        raise GraphError("N must be >= 1")
    if mode not in ("weighted", "uniform"):
        raise GraphError(f"unknown sampling mode {mode!r}")
    if not cache.entries:
        raise GraphError("neighbor cache is empty")
    out = []
    for q in sorted(cache.entries):
        entry = cache.entries[q]
        ids = np.asarray([e[0] for e in entry], dtype=np.int64)
        counts = np.asarray([e[1] for e in entry], dtype=np.float64)
        take = min(n, len(entry))
        if take == len(entry):
            idx = np.arange(take)
        else:
            rng = derived_rng(seed, q)
            p = counts / counts.sum() if mode == "weighted" else None
            idx = rng.choice(len(entry), size=take, replace=False, p=p)
        for i in idx:
            weight = int(counts[i]) if mode == "weighted" else 1
            out.append((q, int(ids[i]), weight))
    return out


def write_pairs(path, pairs, header: str | None = None) -> None:
    with open(path, "w") as f:
        _write_header(f, header)
        for q, p, w in pairs:
            f.write(f"{q}\t{p}\t{w}\n")


def read_pairs(path) -> list[tuple[int, int, int]]:
    """Read ``query<TAB>positive[<TAB>weight]`` lines; also accepts
    engagement-derived pair lists that carry no weight column."""
    out = []
    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise GraphError(f"{path}:{lineno}: expected 'query<TAB>positive[<TAB>weight]'")
        w = int(cols[2]) if len(cols) == 3 else 1
        out.append((int(cols[0]), int(cols[1]), w))
    return out
