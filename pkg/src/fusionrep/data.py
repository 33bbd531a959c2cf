"""Pin records, text-source coalescing, alignment filtering, the synthetic
planted-topic corpus, and deterministic batch streams."""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .graph import PinBoardGraph, derived_rng

BOARD_ID_BASE = 1_000_000
SPLITS = ("train", "heldout", "distractor")


class DataError(ValueError):
    pass


@dataclass
class PinRecord:
    id: int
    image: np.ndarray
    title: str | None = None
    description: str | None = None
    caption: str | None = None
    nav_query: str | None = None
    annotations: list[str] | None = None
    board_ids: list[int] = field(default_factory=list)
    # ground truth, for evaluation and the stub scorer only
    topic: int = -1
    split: str = "train"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "topic": self.topic,
            "board_ids": list(self.board_ids),
            "image": {"shape": list(self.image.shape), "data": self.image.reshape(-1).tolist()},
            "title": self.title,
            "description": self.description,
            "caption": self.caption,
            "nav_query": self.nav_query,
            "annotations": self.annotations,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "PinRecord":
        img = rec["image"]
        return cls(
            id=int(rec["id"]),
            image=np.asarray(img["data"], dtype=np.float64).reshape(img["shape"]),
            title=rec.get("title"),
            description=rec.get("description"),
            caption=rec.get("caption"),
            nav_query=rec.get("nav_query"),
            annotations=rec.get("annotations"),
            board_ids=[int(b) for b in rec.get("board_ids", [])],
            topic=int(rec.get("topic", -1)),
            split=rec.get("split", "train"),
        )


def _present(s: str | None) -> bool:
    return s is not None and s != ""


def coalesce_descriptive_text(pin: PinRecord) -> str:
    """Title, else description, else caption, else empty."""
    for s in (pin.title, pin.description, pin.caption):
        if _present(s):
            return s
    return ""


def coalesce_keyword_text(pin: PinRecord) -> str:
    """Search keywords, else annotations joined by spaces, else empty."""
    if _present(pin.nav_query):
        return pin.nav_query
    if pin.annotations:
        joined = " ".join(a for a in pin.annotations if a)
        if joined:
            return joined
    return ""


def filter_by_alignment(pairs: Sequence, scorer: Callable[[object], float], threshold: float) -> list:
    """Keep pairs scoring >= threshold, in input order."""
    return [p for p in pairs if scorer(p) >= threshold]


class CaptionProvider(Protocol):
    def caption(self, pin: PinRecord) -> str | None: ...


class TopicKeywordCaptioner:
    """Stand-in captioner: the pin's topic keywords."""

    def __init__(self, topic_chars: Sequence[str]):
        self.topic_chars = list(topic_chars)

    def caption(self, pin: PinRecord) -> str | None:
        if 0 <= pin.topic < len(self.topic_chars):
            return self.topic_chars[pin.topic]
        return None


class TopicProfileScorer:
    """Stand-in image-text alignment scorer.

    Image profile: clipped cosines between the mean patch vector and each
    topic prototype. Text profile: counts of each topic's keyword characters.
    Score: cosine of the two profiles (0 for empty text).
    """

    def __init__(self, prototypes: np.ndarray, topic_chars: Sequence[str]):
        self.prototypes = np.asarray(prototypes, dtype=np.float64)
        self.topic_chars = list(topic_chars)

    def __call__(self, pair: tuple[PinRecord, str]) -> float:
        pin, text = pair
        m = pin.image.mean(axis=0)
        img = self.prototypes @ m / (np.linalg.norm(self.prototypes, axis=1) * np.linalg.norm(m) + 1e-12)
        img = np.maximum(img, 0.0)
        txt = np.asarray([sum(text.count(ch) for ch in chars) for chars in self.topic_chars], dtype=float)
        denom = np.linalg.norm(img) * np.linalg.norm(txt)
        return float(img @ txt / denom) if denom > 0 else 0.0


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class LatentTopicSpec:
    topic_count: int = 4
    pins_per_topic: int = 100
    boards_per_topic: int = 4
    attribute_count: int = 8
    noise: float = 1.0
    heldout_fraction: float = 0.25
    distractor_pins: int = 1000
    patch_count: int = 16
    patch_dim: int = 16
    latent_dim: int = 16
    board_weight: float = 0.8
    attribute_weight: float = 0.6
    pixel_noise: float = 0.25
    second_board_prob: float = 0.3
    text_noise: float = 0.1
    # boards are curated: each prefers a few attributes
    attrs_per_board: int = 2
    board_attr_affinity: float = 0.8
    # distractors come from boards outside the graph (fresh symbols and latents)
    disjoint_distractor_boards: bool = True


@dataclass
class Corpus:
    pins: list[PinRecord]
    header: dict

    def __post_init__(self):
        self._by_id = {p.id: p for p in self.pins}
        if len(self._by_id) != len(self.pins):
            raise DataError("duplicate pin ids in corpus")

    def __getitem__(self, pin_id: int) -> PinRecord:
        return self._by_id[int(pin_id)]

    def __len__(self) -> int:
        return len(self.pins)

    def split(self, name: str) -> list[PinRecord]:
        return [p for p in self.pins if p.split == name]

    def graph(self) -> PinBoardGraph:
        return PinBoardGraph((p.id, b) for p in self.pins for b in p.board_ids)

    def topic_chars(self) -> list[str]:
        return self.header["lexicon"]["topics"]

    def scorer(self) -> TopicProfileScorer:
        return TopicProfileScorer(np.asarray(self.header["prototypes"]), self.topic_chars())

    def write(self, path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps(self.header, sort_keys=True) + "\n")
            for p in self.pins:
                f.write(json.dumps(p.to_json(), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "Corpus":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise DataError(f"{path}: empty corpus file")
        header = json.loads(lines[0])
        if header.get("format") != "fusionrep-corpus":
            raise DataError(f"{path}: not a corpus file")
        return cls([PinRecord.from_json(json.loads(l)) for l in lines[1:] if l.strip()], header)


def _lexicon(spec: LatentTopicSpec, rng) -> dict:
    alphabet = list(string.ascii_letters + string.digits)
    rng.shuffle(alphabet)
    n_boards = _board_styles(spec)
    need = spec.topic_count * 3 + n_boards + spec.attribute_count + 4
    if need > len(alphabet):
        raise DataError(f"synthetic lexicon needs {need} symbols, only {len(alphabet)} available")
    it = iter(alphabet)
    topics = ["".join(next(it) for _ in range(3)) for _ in range(spec.topic_count)]
    boards = [next(it) for _ in range(n_boards)]
    attrs = [next(it) for _ in range(spec.attribute_count)]
    noise = list(it)
    return {"topics": topics, "boards": boards, "attributes": attrs, "noise": noise}


def _board_styles(spec: LatentTopicSpec) -> int:
    n = spec.topic_count * spec.boards_per_topic
    return 2 * n if spec.disjoint_distractor_boards else n


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic_corpus(spec: LatentTopicSpec, seed: int, captioner: CaptionProvider | None = None) -> Corpus:
    """Planted-topic corpus: pin latent = topic + noise * (board + attribute).

    Images are the latent pushed through fixed per-patch projections plus
    Gaussian noise (also scaled by ``noise``); texts are keyword symbols for topic, board and attribute
    mixed with noise symbols. Boards only group same-topic pins, so the
    graph has no cross-topic edges, and each board favors a few attributes.
    Distractor pins carry no board edges; by default their content comes
    from a separate set of boards that never appear in the graph, as a
    random pin from a large pool rarely shares a board with the query.
    """
    if spec.topic_count > spec.latent_dim:
        raise DataError("topic_count cannot exceed latent_dim (topics are orthonormal)")
    rng = np.random.default_rng(seed)
    lex = _lexicon(spec, rng)
    topic_vecs = np.linalg.qr(rng.normal(size=(spec.latent_dim, spec.latent_dim)))[0][: spec.topic_count]
    n_boards = _board_styles(spec)
    board_vecs = _unit_rows(rng.normal(size=(n_boards, spec.latent_dim)))
    attr_vecs = _unit_rows(rng.normal(size=(spec.attribute_count, spec.latent_dim)))
    proj = rng.normal(0.0, 1.0 / np.sqrt(spec.latent_dim), size=(spec.patch_count, spec.latent_dim, spec.patch_dim))
    prototypes = np.stack([np.einsum("l,pld->pd", tv, proj).mean(axis=0) for tv in topic_vecs])
    board_attrs = np.stack(
        [rng.choice(spec.attribute_count, size=min(spec.attrs_per_board, spec.attribute_count), replace=False) for _ in range(n_boards)]
    )
    captioner = captioner or TopicKeywordCaptioner(lex["topics"])

    def shuffled(chars: list[str]) -> str:
        chars = list(chars)
        rng.shuffle(chars)
        return "".join(chars)

    def noise_chars(k: int) -> list[str]:
        return [lex["noise"][i] for i in rng.integers(0, len(lex["noise"]), size=k)]

    outside = spec.topic_count * spec.boards_per_topic if spec.disjoint_distractor_boards else 0

    def make_pin(pid: int, topic: int, split: str, with_boards: bool) -> PinRecord:
        local = int(rng.integers(spec.boards_per_topic))
        board = topic * spec.boards_per_topic + local + (0 if with_boards else outside)
        if rng.random() < spec.board_attr_affinity:
            attr = int(board_attrs[board][rng.integers(board_attrs.shape[1])])
        else:
            attr = int(rng.integers(spec.attribute_count))
        # all within-topic variation scales with `noise`: at 0, same-topic images coincide
        offset = spec.board_weight * board_vecs[board] + spec.attribute_weight * attr_vecs[attr]
        latent = topic_vecs[topic] + spec.noise * offset
        image = np.einsum("l,pld->pd", latent, proj)
        image = image + spec.noise * spec.pixel_noise * rng.normal(size=image.shape)
        tchars = list(lex["topics"][topic])
        bchar, achar = lex["boards"][board], lex["attributes"][attr]
        title_topic = topic
        if rng.random() < spec.text_noise:
            title_topic = int((topic + 1 + rng.integers(spec.topic_count - 1)) % spec.topic_count) if spec.topic_count > 1 else topic
        tt = list(lex["topics"][title_topic])
        title = shuffled(list(rng.choice(tt, size=2, replace=False)) + [bchar, achar] + noise_chars(1))
        description = shuffled(tchars + [bchar, achar] + noise_chars(4))
        nav_query = shuffled([bchar, achar, tchars[int(rng.integers(3))]])
        annotations = [tchars[0] + bchar, achar + noise_chars(1)[0]]
        pin = PinRecord(
            id=pid,
            image=image,
            title=title if rng.random() < 0.7 else None,
            description=description if rng.random() < 0.6 else None,
            nav_query=nav_query if rng.random() < 0.5 else None,
            annotations=annotations if rng.random() < 0.7 else None,
            topic=topic,
            split=split,
        )
        if with_boards:
            boards = [BOARD_ID_BASE + board]
            if spec.boards_per_topic > 1 and rng.random() < spec.second_board_prob:
                other = topic * spec.boards_per_topic + int((local + 1 + rng.integers(spec.boards_per_topic - 1)) % spec.boards_per_topic)
                boards.append(BOARD_ID_BASE + other)
            pin.board_ids = sorted(boards)
        pin.caption = captioner.caption(pin)
        return pin

    pins: list[PinRecord] = []
    pid = 1
    n_held = int(round(spec.pins_per_topic * spec.heldout_fraction))
    for topic in range(spec.topic_count):
        for i in range(spec.pins_per_topic):
            split = "heldout" if i < n_held else "train"
            pins.append(make_pin(pid, topic, split, with_boards=True))
            pid += 1
    for i in range(spec.distractor_pins):
        pins.append(make_pin(pid, int(rng.integers(spec.topic_count)), "distractor", with_boards=False))
        pid += 1
    header = {
        "format": "fusionrep-corpus",
        "version": 1,
        "seed": seed,
        "spec": asdict(spec),
        "lexicon": lex,
        "prototypes": prototypes.tolist(),
    }
    return Corpus(pins, header)


# ---------------------------------------------------------------- batching


class BatchStream:
    """Fixed-size batches over ``items``, reshuffled per epoch by (seed, epoch).

    ``batch(step)`` is a pure function of the step index, which makes resumed
    runs follow the same data order as uninterrupted ones.
    """

    def __init__(self, items: Sequence, batch_size: int, seed: int, devices: int = 1, what: str = "batch"):
        if batch_size < 1:
            raise DataError(f"{what} size must be >= 1")
        if batch_size % devices:
            raise DataError(f"{what} size {batch_size} not divisible by device count {devices}")
        if len(items) < batch_size:
            raise DataError(
                f"{what} size {batch_size} exceeds the {len(items)} available items; "
                f"lower the batch size or generate a larger corpus"
            )
        self.items = list(items)
        self.batch_size = batch_size
        self.seed = seed
        self.per_epoch = len(self.items) // batch_size
        self._perm_epoch = -1
        self._perm = None

    def batch(self, step: int) -> list:
        epoch, k = divmod(step, self.per_epoch)
        if epoch != self._perm_epoch:
            self._perm = derived_rng(self.seed, epoch).permutation(len(self.items))
            self._perm_epoch = epoch
        idx = self._perm[k * self.batch_size : (k + 1) * self.batch_size]
        return [self.items[i] for i in idx]


@dataclass
class StepBatch:
    i2t_pins: list[int]
    p2p_pairs: list[tuple[int, int]]


def make_batches(
    train_pins: Sequence[int],
    pairs: Sequence[tuple[int, int]],
    i2t_batch: int,
    p2p_batch: int,
    seed: int,
    devices: int = 1,
):
    """Independent per-task streams; returns ``step -> StepBatch``.

    ``p2p_batch`` counts query-positive pairs (twice as many pins).
    Either stream can be disabled with a batch size of 0.
    """
    i2t = BatchStream(train_pins, i2t_batch, derived_rng(seed, 1).integers(2**31), devices, "i2t batch") if i2t_batch else None
    p2p = BatchStream(pairs, p2p_batch, derived_rng(seed, 2).integers(2**31), devices, "p2p batch") if p2p_batch else None

    def at(step: int) -> StepBatch:
        return StepBatch(
            i2t.batch(step) if i2t else [],
            [(int(q), int(p)) for q, p in p2p.batch(step)] if p2p else [],
        )

    return at


def iter_batches(batch_at, steps: int) -> Iterable[StepBatch]:
    for s in range(steps):
        yield batch_at(s)
