"""Instruction-Following Difficulty scoring, misalignment filter and selectors.

For a rendered pair (Q, A) and a scorer:

* ``ca`` (conditioned answer score) is the mean negative log-likelihood of
  A's tokens given Q;
* ``da`` (direct answer score) is the same quantity with an empty context;
* ``ifd = ca / max(da, 1e-8)``.

Samples with ``ifd > 1`` are treated as misaligned (the instruction made the
answer harder to predict) and are excluded from top-IFD selection.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .dataset import PromptTemplate, RenderedPair, Sample, render
from .diversity import EmbeddingSet, kmeans, make_rng, squared_distances
from .errors import ConfigError, DataError, DomainError
from .scorer import Scorer

logger = logging.getLogger(__name__)

DA_FLOOR = 1e-8
DA_FLOOR_FLAG = "da_floor_applied"
MISALIGNMENT_THRESHOLD = 1.0


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    da: float
    ca: float
    ifd: float
    n_answer_tokens: int
    scorer_fingerprint: str
    flags: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"sample_id": self.sample_id, "da": self.da, "ca": self.ca, "ifd": self.ifd,
                "n_answer_tokens": self.n_answer_tokens,
                "scorer_fingerprint": self.scorer_fingerprint, "flags": list(self.flags)}

    @classmethod
    def from_json(cls, obj: dict) -> "ScoreRecord":
        rec = cls(sample_id=str(obj["sample_id"]), da=float(obj["da"]), ca=float(obj["ca"]),
                  ifd=float(obj["ifd"]), n_answer_tokens=int(obj["n_answer_tokens"]),
                  scorer_fingerprint=str(obj["scorer_fingerprint"]),
                  flags=tuple(obj.get("flags", ())))
        expected, _ = ifd_ratio(rec.ca, rec.da)
        if rec.n_answer_tokens < 1 or rec.ifd != expected:
            raise DataError("record fields are inconsistent")
        return rec


# --------------------------------------------------------------------------
# scores


def conditioned_answer_score(scorer: Scorer, pair: RenderedPair) -> tuple[float, int]:
    lp = scorer.score_continuation(pair.question_text, pair.answer_text)
    return lp.mean_nll(), len(lp)


def direct_answer_score(scorer: Scorer, pair: RenderedPair) -> tuple[float, int]:
    lp = scorer.score_continuation("", pair.answer_text)
    return lp.mean_nll(), len(lp)


def ifd_ratio(ca: float, da: float) -> tuple[float, tuple[str, ...]]:
    if not (ca >= 0 and da >= 0):  # also rejects NaN
        raise DomainError(f"scores must be non-negative (ca={ca}, da={da})")
    flags = (DA_FLOOR_FLAG,) if da < DA_FLOOR else ()
    return ca / max(da, DA_FLOOR), flags


def score_pair(scorer: Scorer, sample_id: str, pair: RenderedPair) -> ScoreRecord:
    ca, n_ca = conditioned_answer_score(scorer, pair)
    da, n_da = direct_answer_score(scorer, pair)
    if n_ca != n_da:
        raise DataError(f"{sample_id}: answer tokenized to {n_ca} tokens with context, {n_da} without")
    # -0.0 can appear for a certain answer; store it as 0.0
    ca, da = ca + 0.0, da + 0.0
    ifd, flags = ifd_ratio(ca, da)
    return ScoreRecord(sample_id, da, ca, ifd, n_ca, scorer.fingerprint, flags)


# --------------------------------------------------------------------------
# JSON-lines cache


class ScoreCache:
    """Append-only JSON-lines store keyed by (sample_id, scorer_fingerprint).

    Malformed lines and records from other scorers are skipped and counted.
    """

    def __init__(self, path: str | Path | None, fingerprint: str):
        self.path = Path(path) if path is not None else None
        self.fingerprint = fingerprint
        self.records: dict[str, ScoreRecord] = {}
        self.corrupt_lines: list[int] = []
        self.mismatched = 0
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._read()

    def _read(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = ScoreRecord.from_json(json.loads(line))
                except (ValueError, KeyError, TypeError) as exc:
                    self.corrupt_lines.append(lineno)
                    logger.warning("%s:%d: skipping corrupt cache line (%s)", self.path, lineno, exc)
                    continue
                if rec.scorer_fingerprint != self.fingerprint:
                    self.mismatched += 1
                    continue
                self.records[rec.sample_id] = rec
        if self.mismatched:
            logger.warning("%s: ignored %d entries from a different scorer", self.path, self.mismatched)

    def get(self, sample_id: str) -> ScoreRecord | None:
        return self.records.get(sample_id)

    def append(self, rec: ScoreRecord) -> None:
        with self._lock:
            self.records[rec.sample_id] = rec
            if self.path is None:
                return
            with open(self.path, "a+b") as fh:
                # a half-written line from an interrupted run must not swallow this one
                fh.seek(0, 2)
                if fh.tell():
                    fh.seek(-1, 2)
                    if fh.read(1) != b"\n":
                        fh.write(b"\n")
                fh.write((json.dumps(rec.to_json(), ensure_ascii=False) + "\n").encode("utf-8"))


def score_dataset(scorer: Scorer, samples: Sequence[Sample], template: PromptTemplate,
                  cache_path: str | Path | None = None, *, parallelism: int = 1) -> list[ScoreRecord]:
    """Score every sample, reusing cached records computed by the same scorer.

    The result is in dataset order whatever the completion order was.
    """
    cache = ScoreCache(cache_path, scorer.fingerprint)
    todo = [s for s in samples if cache.get(s.id) is None]
    logger.info("scoring %d samples (%d cached)", len(todo), len(samples) - len(todo))

    def work(sample: Sample) -> None:
        cache.append(score_pair(scorer, sample.id, render(sample, template)))

    if parallelism > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            for fut in [pool.submit(work, s) for s in todo]:
                fut.result()
    else:
        for s in todo:
            work(s)
    return [cache.records[s.id] for s in samples]


def read_scores(path: str | Path) -> list[ScoreRecord]:
    """All well-formed records in a cache file, last entry per id wins, in first-seen order."""
    out: dict[str, ScoreRecord] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                try:
                    rec = ScoreRecord.from_json(json.loads(line))
                except (ValueError, KeyError, TypeError):
                    continue
                out[rec.sample_id] = rec
    return list(out.values())


# --------------------------------------------------------------------------
# filtering and selection


def filter_misaligned(records: Iterable[ScoreRecord],
                      threshold: float = MISALIGNMENT_THRESHOLD) -> tuple[list[ScoreRecord], list[ScoreRecord]]:
    kept, dropped = [], []
    for r in records:
        (dropped if r.ifd > threshold else kept).append(r)
    return kept, dropped


@dataclass(frozen=True)
class TopIFD:
    name = "top_ifd"


@dataclass(frozen=True)
class LowIFD:
    name = "low_ifd"


@dataclass(frozen=True)
class HighCA:
    name = "high_ca"


@dataclass(frozen=True)
class Random:
    seed: int
    name = "random"


@dataclass(frozen=True)
class Diversity:
    k: int = 100
    seed: int = 0
    name = "diversity"


SelectionStrategy = Union[TopIFD, LowIFD, HighCA, Random, Diversity]


def parse_strategy(name: str, *, seed: int = 0, k: int = 100) -> SelectionStrategy:
    name = name.lower().replace("-", "_")
    table: dict[str, Callable[[], SelectionStrategy]] = {
        "top_ifd": TopIFD, "low_ifd": LowIFD, "high_ca": HighCA,
        "random": lambda: Random(seed), "diversity": lambda: Diversity(k, seed),
    }
    try:
        return table[name]()
    except KeyError:
        raise ConfigError(f"unknown selection strategy {name!r}; choose from {sorted(table)}") from None


def target_count(fraction: float, dataset_size: int) -> int:
    if not (0 < fraction <= 1):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    return min(dataset_size, math.ceil(fraction * dataset_size))


def rank_positions(values: Sequence[float], descending: bool) -> list[int]:
    """Positions sorted by value, ties broken by position (stable)."""
    if descending:
        return sorted(range(len(values)), key=lambda i: (-values[i], i))
    return sorted(range(len(values)), key=lambda i: (values[i], i))


def _ids_in_order(records: Sequence[ScoreRecord], positions: Iterable[int]) -> list[str]:
    return [records[i].sample_id for i in sorted(positions)]


def select(records: Sequence[ScoreRecord], strategy: SelectionStrategy, fraction: float, *,
           dataset_size: int | None = None, embeddings: EmbeddingSet | None = None) -> list[str]:
    """Pick ``ceil(fraction * dataset_size)`` sample ids.

    ``records`` must be in dataset order; ``dataset_size`` defaults to
    ``len(records)``. Top-IFD drops misaligned records first and returns fewer
    ids (with a warning) when too few remain. The result is in dataset order.
    """
    if not records:
        raise DataError("nothing to select from")
    total = len(records) if dataset_size is None else dataset_size
    want = target_count(fraction, total)

    if isinstance(strategy, TopIFD):
        pool = [i for i, r in enumerate(records) if r.ifd <= MISALIGNMENT_THRESHOLD]
        if len(pool) < want:
            logger.warning("top-IFD: only %d aligned records for a target of %d", len(pool), want)
        ranked = sorted(pool, key=lambda i: (-records[i].ifd, i))
        return _ids_in_order(records, ranked[:want])
    if isinstance(strategy, LowIFD):
        return _ids_in_order(records, rank_positions([r.ifd for r in records], False)[:want])
    if isinstance(strategy, HighCA):
        return _ids_in_order(records, rank_positions([r.ca for r in records], True)[:want])

    want = min(want, len(records))
    if isinstance(strategy, Random):
        picks = make_rng(strategy.seed).choice(len(records), size=want, replace=False)
        return _ids_in_order(records, (int(i) for i in picks))
    if isinstance(strategy, Diversity):
        if embeddings is None:
            raise ConfigError("diversity selection needs instruction embeddings")
        return _diversity_pick(records, embeddings, strategy, want)
    raise ConfigError(f"unsupported strategy {strategy!r}")


def _diversity_pick(records: Sequence[ScoreRecord], embeddings: EmbeddingSet,
                    strategy: Diversity, want: int) -> list[str]:
    row = {sid: i for i, sid in enumerate(embeddings.ids)}
    try:
        rows = [row[r.sample_id] for r in records]
    except KeyError as exc:
        raise DataError(f"no embedding for sample {exc.args[0]!r}") from None
    points = embeddings.matrix[rows]
    k = min(strategy.k, len(records))
    assignment = kmeans(points, k, strategy.seed)
    d2 = squared_distances(points, assignment.centroids)
    queues = []
    for c in range(k):
        members = assignment.members(c)
        queues.append(sorted(members.tolist(), key=lambda i: (d2[i, c], i)))
    picked: list[int] = []
    depth = 0
    while len(picked) < want:
        for q in queues:
            if depth < len(q):
                picked.append(q[depth])
                if len(picked) == want:
                    break
        depth += 1
    return _ids_in_order(records, picked)


@dataclass
class SelectionManifest:
    strategy: str
    fraction: float
    seed: int | None
    source_fingerprint: str
    count: int = 0
    extra: dict = field(default_factory=dict)


def write_selection(ids: Sequence[str], manifest: SelectionManifest, path: str | Path) -> None:
    """Write the id array to ``path`` and the manifest next to it."""
    path = Path(path)
    path.write_text(json.dumps(list(ids), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    doc = {"strategy": manifest.strategy, "fraction": manifest.fraction, "seed": manifest.seed,
           "source_fingerprint": manifest.source_fingerprint, "count": len(ids), **manifest.extra}
    manifest_path = path.with_name(path.stem + ".manifest.json")
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def ifd_array(records: Sequence[ScoreRecord]) -> np.ndarray:
    return np.array([r.ifd for r in records], dtype=np.float64)
