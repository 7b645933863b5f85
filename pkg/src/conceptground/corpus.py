"""Corpora of feature grids with phrases, standardization and concept batches.

The on-disk format is UTF-8 JSON Lines. The first line is a header::

    {"type": "header", "format": "conceptground-corpus", "version": 1,
     "channels": m, "regions": n, "embed_dim": l, "grid_h": .., "grid_w": ..,
     "image_h": .., "image_w": .., "vocabulary": [...],
     "token_embeddings": {token: [l floats], ...}}

and every following line is one instance::

    {"id": .., "split": "train"|"test", "features": [m*n floats, row-major],
     "tokens": [{"text": .., "noun": bool}, ...], "embedding": [l floats],
     "gt_boxes": [{"x0": .., "y0": .., "x1": .., "y1": ..}, ...]}

``embedding`` may be omitted when ``token_embeddings`` covers every token, in
which case it is the mean of the token embeddings. ``split`` defaults to
``"train"``.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import ConfigError, DataError

log = logging.getLogger(__name__)

FORMAT_NAME = "conceptground-corpus"
FORMAT_VERSION = 1
STD_FLOOR = 1e-6


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose derived from one seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class Instance:
    id: object
    features: np.ndarray  # (channels, regions)
    tokens: list[tuple[str, bool]]
    embedding: np.ndarray  # (embed_dim,)
    gt_boxes: list[Box]
    split: str = "train"

    @property
    def nouns(self) -> list[str]:
        return [text for text, noun in self.tokens if noun]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.id == other.id
            and self.split == other.split
            and self.tokens == other.tokens
            and self.gt_boxes == other.gt_boxes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.embedding, other.embedding)
        )


@dataclass
class ConceptVocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("concept vocabulary has duplicate tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index


@dataclass
class CorpusHeader:
    channels: int
    grid_h: int
    grid_w: int
    embed_dim: int
    image_h: float
    image_w: float
    vocabulary: list[str]
    token_embeddings: dict[str, list[float]] = field(default_factory=dict)

    @property
    def regions(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class Corpus:
    header: CorpusHeader
    instances: list[Instance]
    diagnostics: dict = field(default_factory=dict)

    @property
    def vocab(self) -> ConceptVocabulary:
        return ConceptVocabulary(list(self.header.vocabulary))

    def split(self, name: str) -> list[Instance]:
        """Instances of one split; all instances when none carry that split."""
        chosen = [inst for inst in self.instances if inst.split == name]
        if not chosen:
            log.info("no %r instances in corpus, using all %d", name, len(self.instances))
            return list(self.instances)
        return chosen

    def by_id(self, ident) -> Instance:
        for inst in self.instances:
            if str(inst.id) == str(ident):
                return inst
        raise DataError(f"no instance with id {ident!r}")

    def token_embedding(self, token: str) -> np.ndarray:
        try:
            return np.asarray(self.header.token_embeddings[token], dtype=np.float64)
        except KeyError:
            raise DataError(f"corpus header has no embedding for token {token!r}") from None


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


@dataclass
class GenSpec:
    """Synthetic planted-concept scene generator settings.

    ``region_size`` bounds the side length (in cells) of each planted
    rectangle; ``concepts_per_scene`` and ``distractor_tokens`` are inclusive
    ranges.
    """

    num_concepts: int = 12
    channels: int = 32
    embed_dim: int = 16
    grid_h: int = 7
    grid_w: int = 7
    image_h: int = 224
    image_w: int = 224
    train_scenes: int = 2000
    test_scenes: int = 500
    concepts_per_scene: tuple[int, int] = (1, 3)
    region_size: tuple[int, int] = (2, 3)
    noise: float = 0.3
    distractor_tokens: tuple[int, int] = (0, 3)
    distractor_vocab: int = 24

    def __post_init__(self) -> None:
        self.concepts_per_scene = tuple(self.concepts_per_scene)
        self.region_size = tuple(self.region_size)
        self.distractor_tokens = tuple(self.distractor_tokens)
        lo, hi = self.region_size
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad region_size range {self.region_size}")
        if hi > min(self.grid_h, self.grid_w):
            raise ConfigError(f"region size {hi} does not fit a {self.grid_h}x{self.grid_w} grid")
        clo, chi = self.concepts_per_scene
        if clo < 1 or chi < clo or chi > self.num_concepts:
            raise ConfigError(f"bad concepts_per_scene range {self.concepts_per_scene}")
        if chi * lo * lo > self.grid_h * self.grid_w:
            raise ConfigError("concepts_per_scene rectangles cannot fit on the grid")
        dlo, dhi = self.distractor_tokens
        if dlo < 0 or dhi < dlo or (dhi > 0 and self.distractor_vocab < 1):
            raise ConfigError(f"bad distractor_tokens range {self.distractor_tokens}")
        if self.num_concepts < 2 or self.noise < 0:
            raise ConfigError("need num_concepts >= 2 and noise >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("concepts_per_scene", "region_size", "distractor_tokens"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generation spec fields: {sorted(unknown)}")
        return cls(**d)


def concept_token(c: int) -> str:
    return f"obj{c:02d}"


def distractor_token(j: int) -> str:
    return f"attr{j:02d}"


def _place_rectangles(spec: GenSpec, count: int, rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """Disjoint ``(row0, col0, row1, col1)`` rectangles, inclusive cell bounds."""
    for _ in range(1000):
        occupied = np.zeros((spec.grid_h, spec.grid_w), dtype=bool)
        rects = []
        for _ in range(count):
            for _ in range(100):
                h = int(rng.integers(spec.region_size[0], spec.region_size[1] + 1))
                w = int(rng.integers(spec.region_size[0], spec.region_size[1] + 1))
                r0 = int(rng.integers(0, spec.grid_h - h + 1))
                c0 = int(rng.integers(0, spec.grid_w - w + 1))
                if not occupied[r0:r0 + h, c0:c0 + w].any():
                    occupied[r0:r0 + h, c0:c0 + w] = True
                    rects.append((r0, c0, r0 + h - 1, c0 + w - 1))
                    break
            else:
                break
        if len(rects) == count:
            return rects
    raise ConfigError(f"could not place {count} disjoint rectangles on the grid")


def generate(spec: GenSpec, seed: int) -> Corpus:
    """Build a synthetic planted-concept corpus in memory.

    Every concept owns a unit-norm visual signature and a token embedding.
    Cells inside a planted rectangle hold ``signature + noise``; other cells
    hold pure noise. The phrase lists the planted concept tokens (nouns) plus
    distractor tokens, shuffled, and embeds as the mean token embedding.
    """
    m, l = spec.channels, spec.embed_dim
    n = spec.grid_h * spec.grid_w
    base = rng_stream(seed, "signatures")
    signatures = base.normal(size=(spec.num_concepts, m))
    signatures /= np.linalg.norm(signatures, axis=1, keepdims=True)
    concept_emb = base.normal(size=(spec.num_concepts, l)) / np.sqrt(l)
    distract_emb = base.normal(size=(spec.distractor_vocab, l)) / np.sqrt(l)

    vocabulary = [concept_token(c) for c in range(spec.num_concepts)]
    token_embeddings = {concept_token(c): concept_emb[c].tolist() for c in range(spec.num_concepts)}
    token_embeddings.update({distractor_token(j): distract_emb[j].tolist() for j in range(spec.distractor_vocab)})
    header = CorpusHeader(
        channels=m, grid_h=spec.grid_h, grid_w=spec.grid_w, embed_dim=l,
        image_h=spec.image_h, image_w=spec.image_w,
        vocabulary=vocabulary, token_embeddings=token_embeddings,
    )

    rng = rng_stream(seed, "scenes")
    cell_h = spec.image_h / spec.grid_h
    cell_w = spec.image_w / spec.grid_w
    instances = []
    total = spec.train_scenes + spec.test_scenes
    for sid in range(total):
        count = int(rng.integers(spec.concepts_per_scene[0], spec.concepts_per_scene[1] + 1))
        concepts = rng.choice(spec.num_concepts, size=count, replace=False)
        rects = _place_rectangles(spec, count, rng)
        grid = rng.normal(0.0, spec.noise, size=(m, spec.grid_h, spec.grid_w)) if spec.noise > 0 \
            else np.zeros((m, spec.grid_h, spec.grid_w))
        boxes = []
        for c, (r0, c0, r1, c1) in zip(concepts, rects):
            grid[:, r0:r1 + 1, c0:c1 + 1] += signatures[c][:, None, None]
            boxes.append(Box(c0 * cell_w, r0 * cell_h, (c1 + 1) * cell_w, (r1 + 1) * cell_h))
        n_distract = int(rng.integers(spec.distractor_tokens[0], spec.distractor_tokens[1] + 1))
        distract = rng.integers(0, spec.distractor_vocab, size=n_distract) if n_distract else []
        tokens = [(concept_token(int(c)), True) for c in concepts]
        tokens += [(distractor_token(int(j)), False) for j in distract]
        order = rng.permutation(len(tokens))
        tokens = [tokens[i] for i in order]
        embedding = np.mean([token_embeddings[tok] for tok, _ in tokens], axis=0)
        instances.append(Instance(
            id=sid,
            features=grid.reshape(m, n),
            tokens=tokens,
            embedding=embedding,
            gt_boxes=boxes,
            split="train" if sid < spec.train_scenes else "test",
        ))
    return Corpus(header, instances)


# ---------------------------------------------------------------------------
# JSON Lines IO
# ---------------------------------------------------------------------------


def _header_record(header: CorpusHeader) -> dict:
    return {
        "type": "header",
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "channels": header.channels,
        "regions": header.regions,
        "embed_dim": header.embed_dim,
        "grid_h": header.grid_h,
        "grid_w": header.grid_w,
        "image_h": header.image_h,
        "image_w": header.image_w,
        "vocabulary": list(header.vocabulary),
        "token_embeddings": header.token_embeddings,
    }


def _instance_record(inst: Instance) -> dict:
    return {
        "id": inst.id,
        "split": inst.split,
        "features": inst.features.reshape(-1).tolist(),
        "tokens": [{"text": t, "noun": bool(nf)} for t, nf in inst.tokens],
        "embedding": inst.embedding.tolist(),
        "gt_boxes": [asdict(b) for b in inst.gt_boxes],
    }


def write_corpus(corpus: Corpus, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_header_record(corpus.header)) + "\n")
        for inst in corpus.instances:
            fh.write(json.dumps(_instance_record(inst)) + "\n")
    return path


def generate_corpus(spec: GenSpec, seed: int, path) -> Path:
    """Generate a synthetic corpus and write it as JSON Lines."""
    return write_corpus(generate(spec, seed), path)


def _parse_header(obj, lineno: int) -> CorpusHeader:
    if not isinstance(obj, dict) or obj.get("type") != "header":
        raise DataError(f"line {lineno}: first record must be a header")
    if obj.get("version") != FORMAT_VERSION:
        raise DataError(f"line {lineno}: unsupported corpus version {obj.get('version')!r}")
    try:
        header = CorpusHeader(
            channels=int(obj["channels"]),
            grid_h=int(obj["grid_h"]),
            grid_w=int(obj["grid_w"]),
            embed_dim=int(obj["embed_dim"]),
            image_h=obj["image_h"],
            image_w=obj["image_w"],
            vocabulary=list(obj["vocabulary"]),
            token_embeddings=dict(obj.get("token_embeddings") or {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"line {lineno}: bad header field: {exc}") from None
    if "regions" in obj and int(obj["regions"]) != header.regions:
        raise DataError(
            f"line {lineno}: header regions={obj['regions']} but grid is {header.grid_h}x{header.grid_w}"
        )
    ConceptVocabulary(header.vocabulary)
    for tok, emb in header.token_embeddings.items():
        if len(emb) != header.embed_dim:
            raise DataError(f"line {lineno}: token embedding for {tok!r} has length {len(emb)}, expected {header.embed_dim}")
    return header


def _parse_instance(obj, header: CorpusHeader, lineno: int, recno: int) -> Instance:
    where = f"line {lineno} (instance record {recno})"
    if not isinstance(obj, dict):
        raise DataError(f"{where}: instance record must be an object")
    for key in ("id", "features", "tokens", "gt_boxes"):
        if key not in obj:
            raise DataError(f"{where}: missing field {key!r}")
    expected = header.channels * header.regions
    feats = obj["features"]
    if not isinstance(feats, list):
        raise DataError(f"{where}: features must be a list")
    if len(feats) != expected:
        raise DataError(
            f"{where}: grid cell count mismatch: expected n={header.regions}, "
            f"got n={len(feats) / header.channels:g} ({len(feats)} values for {header.channels} channels)"
        )
    features = np.asarray(feats, dtype=np.float64).reshape(header.channels, header.regions)
    if not np.all(np.isfinite(features)):
        raise DataError(f"{where}: non-finite feature value")

    tokens = []
    for tok in obj["tokens"]:
        if not isinstance(tok, dict) or "text" not in tok:
            raise DataError(f"{where}: token entries need a 'text' field")
        if not isinstance(tok.get("noun"), bool):
            raise DataError(f"{where}: token {tok.get('text')!r} is missing its boolean 'noun' flag")
        tokens.append((str(tok["text"]), tok["noun"]))
    if not any(nf for _, nf in tokens):
        raise DataError(f"{where}: phrase has no noun-flagged token")

    if "embedding" in obj and obj["embedding"] is not None:
        embedding = np.asarray(obj["embedding"], dtype=np.float64)
        if embedding.shape != (header.embed_dim,):
            raise DataError(f"{where}: embedding has length {embedding.size}, expected {header.embed_dim}")
    else:
        missing = [t for t, _ in tokens if t not in header.token_embeddings]
        if missing:
            raise DataError(f"{where}: no embedding given and no token embeddings for {missing}")
        embedding = np.mean([header.token_embeddings[t] for t, _ in tokens], axis=0)

    boxes = []
    for b in obj["gt_boxes"]:
        try:
            box = Box(float(b["x0"]), float(b["y0"]), float(b["x1"]), float(b["y1"]))
        except (KeyError, TypeError, ValueError):
            raise DataError(f"{where}: malformed gt box {b!r}") from None
        if not (0 <= box.x0 <= box.x1 <= header.image_w and 0 <= box.y0 <= box.y1 <= header.image_h):
            raise DataError(f"{where}: gt box {b} outside image {header.image_w}x{header.image_h}")
        boxes.append(box)
    return Instance(
        id=obj["id"],
        features=features,
        tokens=tokens,
        embedding=embedding,
        gt_boxes=boxes,
        split=str(obj.get("split", "train")),
    )


def ingest_features(path) -> Corpus:
    """Read and validate a JSON-Lines corpus.

    Raises:
        DataError: on malformed JSON, shape mismatches, missing noun flags or
            an empty file, citing the offending line number.
    """
    header = None
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON: {exc.msg} (column {exc.colno})") from None
            if header is None:
                header = _parse_header(obj, lineno)
            else:
                instances.append(_parse_instance(obj, header, lineno, len(instances) + 1))
    if header is None or not instances:
        raise DataError(f"{path}: no instances")

    # out-of-vocabulary nouns stay in the phrase but are never chosen as concepts
    vocab = set(header.vocabulary)
    oov = sum(1 for inst in instances for t in inst.nouns if t not in vocab)
    unusable = sum(1 for inst in instances if not any(t in vocab for t in inst.nouns))
    diagnostics = {"instances": len(instances), "oov_noun_tokens": oov, "no_concept_instances": unusable}
    if oov:
        log.warning("%s: %d out-of-vocabulary noun tokens skipped for concept selection", path, oov)
    return Corpus(header, instances, diagnostics)


read_corpus = ingest_features


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------


@dataclass
class ChannelStats:
    visual_mean: np.ndarray
    visual_std: np.ndarray
    text_mean: np.ndarray
    text_std: np.ndarray

    def standardize_features(self, V: np.ndarray) -> np.ndarray:
        return (V - self.visual_mean[:, None]) / self.visual_std[:, None]

    def standardize_text(self, t: np.ndarray) -> np.ndarray:
        return (t - self.text_mean) / self.text_std

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("visual_mean", "visual_std", "text_mean", "text_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        try:
            return cls(**{k: np.asarray(d[k], dtype=np.float64)
                          for k in ("visual_mean", "visual_std", "text_mean", "text_std")})
        except KeyError as exc:
            raise DataError(f"stats file missing {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ChannelStats":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from None


def compute_stats(instances: Sequence[Instance], floor: float = STD_FLOOR) -> ChannelStats:
    """Per-channel visual and per-dimension textual mean/std (population).

    Visual statistics pool every cell of every instance.
    """
    if not instances:
        raise DataError("cannot compute statistics of an empty corpus")
    feats = np.concatenate([inst.features for inst in instances], axis=1)
    texts = np.stack([inst.embedding for inst in instances])
    return ChannelStats(
        visual_mean=feats.mean(axis=1),
        visual_std=np.maximum(feats.std(axis=1), floor),
        text_mean=texts.mean(axis=0),
        text_std=np.maximum(texts.std(axis=0), floor),
    )


def standardize(instances: Iterable[Instance], stats: ChannelStats) -> list[Instance]:
    """Copies of ``instances`` with features and phrase embeddings standardized."""
    return [
        Instance(inst.id, stats.standardize_features(inst.features), list(inst.tokens),
                 stats.standardize_text(inst.embedding), list(inst.gt_boxes), inst.split)
        for inst in instances
    ]


# ---------------------------------------------------------------------------
# concepts and concept batches
# ---------------------------------------------------------------------------


def eligible_concepts(inst: Instance, vocab: ConceptVocabulary) -> list[int]:
    """Vocabulary indices of the noun tokens of ``inst``, in phrase order, deduplicated."""
    out: list[int] = []
    for text, noun in inst.tokens:
        if noun and text in vocab and vocab.index[text] not in out:
            out.append(vocab.index[text])
    return out


def identify_concept(inst: Instance, vocab: ConceptVocabulary, rng: np.random.Generator) -> int | None:
    """Pick one in-vocabulary noun of the phrase uniformly; ``None`` when there is none."""
    choices = eligible_concepts(inst, vocab)
    if not choices:
        return None
    return choices[int(rng.integers(len(choices)))]


@dataclass(frozen=True)
class ConceptBatch:
    concept: int
    members: tuple[int, ...]  # indices into the indexed instance list


class ConceptIndex:
    """Inverted index concept -> instances whose phrase has it as a noun."""

    def __init__(self, instances: Sequence[Instance], vocab: ConceptVocabulary):
        self.instances = list(instances)
        self.vocab = vocab
        self.postings: list[list[int]] = [[] for _ in range(len(vocab))]
        for i, inst in enumerate(self.instances):
            for c in eligible_concepts(inst, vocab):
                self.postings[c].append(i)

    def check(self, batch: ConceptBatch) -> None:
        token = self.vocab.tokens[batch.concept]
        for i in batch.members:
            if (token, True) not in self.instances[i].tokens:
                raise DataError(f"instance {self.instances[i].id} lacks concept {token!r}")


def sample_concept_batch(index: ConceptIndex, k: int, rng: np.random.Generator,
                         max_retries: int = 1000) -> ConceptBatch:
    """Uniform concept, then ``k`` of its instances.

    Members are drawn without replacement when the concept has at least ``k``
    instances and with replacement otherwise. Concepts without instances are
    redrawn.
    """
    C = len(index.vocab)
    for _ in range(max_retries):
        c = int(rng.integers(C))
        posting = index.postings[c]
        if not posting:
            continue
        replace = len(posting) < k
        picks = rng.choice(len(posting), size=k, replace=replace)
        return ConceptBatch(c, tuple(posting[int(j)] for j in picks))
    raise DataError(f"no concept with instances found after {max_retries} draws")


def batch_arrays(index: ConceptIndex, batch: ConceptBatch) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ``(features, phrases)`` for a concept batch."""
    insts = [index.instances[i] for i in batch.members]
    return np.stack([x.features for x in insts]), np.stack([x.embedding for x in insts])
