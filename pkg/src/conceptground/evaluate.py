"""Pointing-game evaluation, baselines, the loss/k ablation and reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ConfigError, DataError
from .corpus import Box, ChannelStats, Corpus, CorpusHeader, Instance, eligible_concepts, rng_stream
from .grounder import ModelParams, attention_argmax_point, attention_forward, cell_center
from .train import TrainConfig, train

log = logging.getLogger(__name__)

NO_CONCEPT = "<none>"


def pointing_game(point: tuple[float, float], gt_boxes: Sequence[Box]) -> bool:
    """Hit when the point lies in any box, edges included."""
    if not gt_boxes:
        raise DataError("pointing game needs at least one ground-truth box")
    x, y = point
    return any(b.contains(x, y) for b in gt_boxes)


@dataclass
class EvalResult:
    hits: int = 0
    misses: int = 0
    # concept -> [hits, misses, summed area fraction, instances]
    per_concept: dict = field(default_factory=lambda: defaultdict(lambda: [0, 0, 0.0, 0]))
    records: list[dict] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def add(self, ident, point, hit: bool, concept: str, area_fraction: float) -> None:
        self.hits += int(hit)
        self.misses += int(not hit)
        row = self.per_concept[concept]
        row[0] += int(hit)
        row[1] += int(not hit)
        row[2] += area_fraction
        row[3] += 1
        self.records.append({"id": ident, "point": [float(point[0]), float(point[1])],
                             "hit": bool(hit), "concept": concept})

    def concept_rows(self) -> list[tuple[str, float, float, int]]:
        """``(concept, accuracy, mean area fraction, instances)`` sorted by concept."""
        return [(c, (h / (h + m)), area / cnt, cnt)
                for c, (h, m, area, cnt) in sorted(self.per_concept.items())]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["scope", "hits", "misses", "accuracy"])
            w.writerow(["all", self.hits, self.misses, repr(self.accuracy)])
            for c, (h, m, _, _) in sorted(self.per_concept.items()):
                w.writerow([c, h, m, repr(h / (h + m))])

    def write_records(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


def _area_fraction(inst: Instance, header: CorpusHeader) -> float:
    image = float(header.image_w) * float(header.image_h)
    return float(np.mean([b.area / image for b in inst.gt_boxes]))


def _report_concept(inst: Instance, corpus: Corpus) -> str:
    """Concept an instance is reported under: its first in-vocabulary noun."""
    found = eligible_concepts(inst, corpus.vocab)
    return corpus.header.vocabulary[found[0]] if found else NO_CONCEPT


def check_compatible(params: ModelParams, header: CorpusHeader) -> None:
    h = params.hyper
    model = dict(channels=h.channels, embed_dim=h.embed_dim, grid_h=h.grid_h, grid_w=h.grid_w,
                 num_concepts=h.num_concepts)
    data = dict(channels=header.channels, embed_dim=header.embed_dim, grid_h=header.grid_h,
                grid_w=header.grid_w, num_concepts=len(header.vocabulary))
    if model != data:
        raise ConfigError(f"checkpoint dimensions {model} do not match corpus dimensions {data}")


def _ground(params: ModelParams, inst: Instance, t: np.ndarray, stats: ChannelStats, header: CorpusHeader):
    attn = attention_forward(stats.standardize_features(inst.features), stats.standardize_text(t), params)
    return attn, attention_argmax_point(attn, header.image_h, header.image_w)


def evaluate(params: ModelParams, corpus: Corpus, stats: ChannelStats, split: str = "test") -> EvalResult:
    """Pointing-game accuracy of the model's attention on one corpus split."""
    check_compatible(params, corpus.header)
    result = EvalResult()
    for inst in corpus.split(split):
        _, point = _ground(params, inst, inst.embedding, stats, corpus.header)
        result.add(inst.id, point, pointing_game(point, inst.gt_boxes),
                   _report_concept(inst, corpus), _area_fraction(inst, corpus.header))
    return result


def evaluate_single_noun(params: ModelParams, corpus: Corpus, stats: ChannelStats,
                         rng: np.random.Generator, split: str = "test") -> EvalResult:
    """Like ``evaluate`` but each phrase is replaced by one random noun of it."""
    check_compatible(params, corpus.header)
    result = EvalResult()
    for inst in corpus.split(split):
        nouns = inst.nouns
        noun = nouns[int(rng.integers(len(nouns)))]
        _, point = _ground(params, inst, corpus.token_embedding(noun), stats, corpus.header)
        result.add(inst.id, point, pointing_game(point, inst.gt_boxes),
                   _report_concept(inst, corpus), _area_fraction(inst, corpus.header))
        result.records[-1]["noun"] = noun
    return result


def single_noun_report(full: EvalResult, single: EvalResult) -> dict:
    """Paired full-phrase vs single-noun accuracies and their difference."""
    by_id = {str(r["id"]): r for r in single.records}
    pairs = [(r["id"], r["hit"], by_id[str(r["id"])]["hit"]) for r in full.records]
    return {
        "instances": len(pairs),
        "full_phrase_accuracy": full.accuracy,
        "single_noun_accuracy": single.accuracy,
        "delta": full.accuracy - single.accuracy,
        "pairs": pairs,
    }


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def _covering_cells(inst: Instance, header: CorpusHeader) -> int:
    return sum(
        pointing_game(cell_center(j, header.grid_h, header.grid_w, header.image_h, header.image_w), inst.gt_boxes)
        for j in range(header.regions)
    )


def random_expectation(instances: Sequence[Instance], header: CorpusHeader) -> float:
    """Expected random-baseline accuracy: mean share of cells whose center is in a box."""
    return float(np.mean([_covering_cells(inst, header) / header.regions for inst in instances]))


def baseline_random(corpus: Corpus, trials: int, rng: np.random.Generator, split: str = "test") -> EvalResult:
    """Uniformly random cell per instance and trial.

    Hits and misses count instance-trials; per-instance records hold the hit
    rate over the trials.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    h = corpus.header
    result = EvalResult()
    for inst in corpus.split(split):
        cells = rng.integers(0, h.regions, size=trials)
        covered = np.array([pointing_game(cell_center(j, h.grid_h, h.grid_w, h.image_h, h.image_w), inst.gt_boxes)
                            for j in range(h.regions)])
        n_hit = int(covered[cells].sum())
        concept, area = _report_concept(inst, corpus), _area_fraction(inst, h)
        result.hits += n_hit
        result.misses += trials - n_hit
        row = result.per_concept[concept]
        row[0] += n_hit
        row[1] += trials - n_hit
        row[2] += area
        row[3] += 1
        result.records.append({"id": inst.id, "hit_rate": n_hit / trials, "concept": concept})
    return result


def baseline_center(corpus: Corpus, split: str = "test") -> EvalResult:
    h = corpus.header
    point = (h.image_w / 2, h.image_h / 2)
    result = EvalResult()
    for inst in corpus.split(split):
        result.add(inst.id, point, pointing_game(point, inst.gt_boxes),
                   _report_concept(inst, corpus), _area_fraction(inst, h))
    return result


def baseline_visual(corpus: Corpus, split: str = "test") -> EvalResult:
    """Argmax of the channel-averaged raw features; the phrase is ignored."""
    h = corpus.header
    result = EvalResult()
    for inst in corpus.split(split):
        point = attention_argmax_point(inst.features.mean(axis=0), h.image_h, h.image_w, h.grid_h, h.grid_w)
        result.add(inst.id, point, pointing_game(point, inst.gt_boxes),
                   _report_concept(inst, corpus), _area_fraction(inst, h))
    return result


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationTable:
    modes: list[str]
    ks: list[int]
    seeds: list[int]
    # (mode, k) -> per-seed accuracies, ordered like ``seeds``
    cells: dict = field(default_factory=dict)

    def mean(self, mode: str, k: int) -> float:
        return float(np.mean(self.cells[(mode, k)]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "k", "mean_accuracy", "seeds", "accuracies"])
            for mode in self.modes:
                for k in self.ks:
                    accs = self.cells[(mode, k)]
                    w.writerow([mode, k, repr(self.mean(mode, k)),
                                ";".join(map(str, self.seeds)), ";".join(repr(a) for a in accs)])

    def format(self) -> str:
        lines = ["mode  " + "  ".join(f"k={k:<6d}" for k in self.ks)]
        for mode in self.modes:
            lines.append(f"{mode:<5s} " + "  ".join(f"{self.mean(mode, k):.4f}  " for k in self.ks))
        return "\n".join(lines)


def _run_cell(args) -> float:
    base, mode, k, seed, corpus, stats = args
    cfg = dataclasses.replace(base, mode=mode, k=k, seed=seed,
                              checkpoint=None, log=None, resume=None)
    try:
        params, _ = train(cfg, corpus, stats)
        return evaluate(params, corpus, stats).accuracy
    except Exception as exc:
        raise RuntimeError(f"ablation cell mode={mode} k={k} seed={seed} failed: {exc}") from exc


def ablation_run(base: TrainConfig, corpus: Corpus, stats: ChannelStats, modes: Sequence[str],
                 ks: Sequence[int], seeds: Sequence[int], workers: int = 1) -> AblationTable:
    """Train and evaluate one model per (mode, k, seed) on a shared corpus.

    Seeds are paired: replicate ``seed`` trains every (mode, k) cell from the
    same initialization and concept-batch stream, so cells differ only in the
    loss and batch size.
    """
    if not modes or not ks or not seeds:
        raise ConfigError("ablation grid needs at least one mode, k and seed")
    jobs = [(base, m, k, s, corpus, stats) for m in modes for k in ks for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(_run_cell, jobs))
    else:
        accs = []
        for job in jobs:
            accs.append(_run_cell(job))
            log.info("ablation mode=%s k=%d seed=%d accuracy=%.4f", job[1], job[2], job[3], accs[-1])
    table = AblationTable(list(modes), list(ks), list(seeds))
    it = iter(accs)
    for m in modes:
        for k in ks:
            table.cells[(m, k)] = [next(it) for _ in seeds]
    return table


# ---------------------------------------------------------------------------
# per-concept report
# ---------------------------------------------------------------------------


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson correlation, or ``None`` when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    return float(dx @ dy) / np.sqrt(sxx * syy)


def concept_report(result: EvalResult, path=None) -> tuple[list[tuple], float | None]:
    """Per-concept accuracy against mean box-area fraction.

    Returns the rows and their Pearson correlation (``None`` when undefined);
    writes a CSV when ``path`` is given.
    """
    rows = [r for r in result.concept_rows() if r[0] != NO_CONCEPT]
    if len(rows) < 2:
        raise DataError("concept report needs at least two concepts with evaluated instances")
    r = pearson([row[1] for row in rows], [row[2] for row in rows])
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["concept", "accuracy", "mean_area_fraction", "instances"])
            for c, acc, area, cnt in rows:
                w.writerow([c, repr(acc), repr(area), cnt])
            w.writerow(["pearson_r", "undefined" if r is None else repr(r), "", ""])
    return rows, r
