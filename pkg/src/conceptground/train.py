"""Surrogate losses, the optimizer step loop and checkpoint files."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import ConfigError, DataError
from .corpus import (
    ChannelStats,
    ConceptBatch,
    ConceptIndex,
    Corpus,
    batch_arrays,
    rng_stream,
    sample_concept_batch,
    standardize,
)
from .grounder import (
    LOSS_MODES,
    LOSS_WEIGHTS,
    BatchOutputs,
    HyperParams,
    ModelParams,
    backward_from_outputs,
    forward_batch,
    init_params,
)
from .numcore import AdamState, adam_step, cross_entropy

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    common: float
    independent: float


def loss_total(outputs: BatchOutputs, target: int, mode: str) -> LossBreakdown:
    """Common-concept cross-entropy plus the mean independent cross-entropy.

    ``ic`` keeps only the independent term, ``cc`` only the common term. The
    breakdown reports each term as it enters the total (zero when disabled).
    """
    if mode not in LOSS_WEIGHTS:
        raise ConfigError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    w_com, w_ind = LOSS_WEIGHTS[mode]
    common = w_com * cross_entropy(outputs.common, target) if w_com else 0.0
    independent = 0.0
    if w_ind:
        k = len(outputs.independent)
        independent = w_ind * sum(cross_entropy(p, target) for p in outputs.independent) / k
    return LossBreakdown(common + independent, common, independent)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Training settings; also carries the model widths.

    ``batch_size`` counts concept batches per optimizer step when
    ``batch_unit`` is ``"concept_batches"``; with ``"instances"`` it counts
    phrase-image pairs and is rounded up to whole concept batches.
    """

    mode: str = "icc"
    k: int = 5
    batch_size: int = 4
    batch_unit: str = "concept_batches"
    steps: int = 3000
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    attn_widths: list[int] = field(default_factory=lambda: [64, 32, 16, 1])
    proj_channels: int = 16
    checkpoint_every: int = 0
    corpus: str | None = None
    stats: str | None = None
    checkpoint: str | None = None
    log: str | None = None
    resume: str | None = None

    def __post_init__(self) -> None:
        self.mode = str(self.mode).lower()
        self.attn_widths = [int(w) for w in self.attn_widths]
        self.validate()

    def validate(self) -> None:
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.batch_unit not in ("concept_batches", "instances"):
            raise ConfigError("batch_unit must be 'concept_batches' or 'instances'")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1) or self.epsilon <= 0:
            raise ConfigError("invalid Adam hyperparameters")

    @property
    def concept_batches_per_step(self) -> int:
        if self.batch_unit == "instances":
            return max(1, math.ceil(self.batch_size / self.k))
        return self.batch_size

    def hyper(self, corpus: Corpus) -> HyperParams:
        h = corpus.header
        return HyperParams(
            channels=h.channels, embed_dim=h.embed_dim, grid_h=h.grid_h, grid_w=h.grid_w,
            num_concepts=len(h.vocabulary), attn_widths=tuple(self.attn_widths),
            proj_channels=self.proj_channels, concept_batch_size=self.k,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CGRNDCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ConfigError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


def save_checkpoint(params: ModelParams, step: int, path, extra: dict | None = None) -> Path:
    """Write magic, version, a JSON header and little-endian float64 weights."""
    header = json.dumps(
        {"hyper": params.hyper.to_dict(), "step": int(step), "extra": extra or {}},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", params.flat.size))
        fh.write(params.flat.astype("<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns the params and ``{"step", "extra"}``."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CorruptHeaderError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        hyper = HyperParams.from_dict(header["hyper"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ConfigError) as exc:
        raise CorruptHeaderError(f"{path}: corrupt header: {exc}") from None
    pos += hlen
    if len(data) < pos + 8:
        raise TruncatedPayloadError(f"{path}: truncated payload (missing length)")
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if count != hyper.num_params:
        raise CorruptHeaderError(f"{path}: payload length {count} does not match hyperparameters ({hyper.num_params})")
    if len(data) < pos + 8 * count:
        raise TruncatedPayloadError(
            f"{path}: truncated payload ({(len(data) - pos) // 8} of {count} values present)"
        )
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return ModelParams(hyper, flat), {"step": header.get("step", 0), "extra": header.get("extra", {})}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

PATH_FIELDS = ("corpus", "stats", "checkpoint", "log", "resume")
LOG_FIELDS = ["step", "mode", "loss", "common", "independent", "wall_time"]


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    note: str = ""

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])


class _LogWriter:
    def __init__(self, path, note: str):
        self.fh = open(path, "w", newline="", encoding="utf-8") if path else None
        if self.fh:
            self.fh.write(f"# {note}\n")
            self.writer = csv.DictWriter(self.fh, fieldnames=LOG_FIELDS)
            self.writer.writeheader()

    def write(self, rec: dict) -> None:
        if self.fh:
            self.writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _step_path(path: Path, step: int) -> Path:
    return path.with_name(f"{path.stem}.step{step:06d}{path.suffix}")


def train(
    config: TrainConfig,
    corpus: Corpus,
    stats: ChannelStats,
    *,
    sampler: Callable[[ConceptIndex, np.random.Generator], ConceptBatch] | None = None,
    init: ModelParams | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Train on the corpus's training split.

    Each step samples ``config.concept_batches_per_step`` concept batches,
    averages their loss gradients and applies one Adam update. The result is
    a deterministic function of ``config.seed`` and the inputs.

    ``sampler`` replaces uniform concept-batch sampling (the memorization
    check reuses one batch). Checkpoints go to ``config.checkpoint`` and the
    CSV log to ``config.log`` when those are set.
    """
    hyper = config.hyper(corpus)
    vocab = corpus.vocab
    index = ConceptIndex(standardize(corpus.split("train"), stats), vocab)
    sampler = sampler or (lambda idx, rng: sample_concept_batch(idx, config.k, rng))
    batch_rng = rng_stream(config.seed, "concept-batches")

    start = 0
    if init is not None:
        params = init.copy()
    elif config.resume:
        params, meta = load_checkpoint(config.resume)
        if params.hyper != hyper:
            raise ConfigError(
                f"resume checkpoint hyperparameters {params.hyper.to_dict()} do not match {hyper.to_dict()}"
            )
        start = int(meta["step"])
    else:
        params = init_params(hyper, rng_stream(config.seed, "init"))
    if params.hyper != hyper:
        raise ConfigError("initial parameters do not match the corpus/config dimensions")

    adam = AdamState(params.flat.size, lr=config.lr, beta1=config.beta1,
                     beta2=config.beta2, epsilon=config.epsilon)
    per_step = config.concept_batches_per_step
    note = (f"batch_unit={config.batch_unit} batch_size={config.batch_size} "
            f"concept_batches_per_step={per_step} k={config.k} mode={config.mode}")
    tlog = TrainLog(note=note)
    writer = _LogWriter(config.log, note)
    ckpt = Path(config.checkpoint) if config.checkpoint else None
    t0 = time.perf_counter()
    try:
        for step in range(start + 1, config.steps + 1):
            grad = np.zeros_like(params.flat)
            tot = com = ind = 0.0
            for _ in range(per_step):
                batch = sampler(index, batch_rng)
                index.check(batch)
                V, t = batch_arrays(index, batch)
                out = forward_batch(V, t, params)
                parts = loss_total(out, batch.concept, config.mode)
                tot += parts.total
                com += parts.common
                ind += parts.independent
                grad += backward_from_outputs(out, params, batch.concept, config.mode, scale=1.0 / per_step)
            adam_step(params.flat, grad, adam)
            rec = {"step": step, "mode": config.mode, "loss": tot / per_step, "common": com / per_step,
                   "independent": ind / per_step, "wall_time": round(time.perf_counter() - t0, 3)}
            tlog.records.append(rec)
            writer.write(rec)
            if ckpt and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(params, step, _step_path(ckpt, step))
    finally:
        writer.close()
    if ckpt:
        # file locations stay out of the checkpoint so its bytes depend only on the run
        settings = {k: v for k, v in config.to_dict().items() if k not in PATH_FIELDS}
        save_checkpoint(params, max(config.steps, start), ckpt, extra={"config": settings})
    return params, tlog


def load_training_inputs(config: TrainConfig):
    """Load the corpus and stats files named in ``config``."""
    from .corpus import read_corpus

    if not config.corpus or not config.stats:
        raise ConfigError("training needs both a corpus and a stats path")
    for p in (config.corpus, config.stats):
        if not Path(p).exists():
            raise DataError(f"missing input file {p}")
    return read_corpus(config.corpus), ChannelStats.load(config.stats)
