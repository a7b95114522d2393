"""End-to-end cherry-data selection run.

Phases, each leaving artifacts under ``cache_dir``:

``embed``      instruction embeddings from the base embedder (``embeddings.bin``)
``preselect``  pre-experience subset (``preexperience.json``, ``clusters.json``)
``fit``        pre-experienced scorer (``model.json``)
``score``      CA/DA/IFD for every sample (``scores.jsonl``, resumable)
``filter``     misalignment filter
``select``     cherry ids (``selection.json`` + manifest)
``write``      cherry dataset at ``output_path`` and ``MANIFEST.json``

For the built-in backend the base model is an n-gram model counted over every
instruction and answer as plain text, without the prompt template's
scaffolding; the pre-experienced model continues that model for one counting
pass over the template-rendered pre-experience pairs, so it learns how an
answer follows a prompt. A pre-experience size of 0 scores with the
base model directly.

``MANIFEST.json`` holds only deterministic content, so two runs of the same
config are byte-identical; wall-clock timings go to ``TIMINGS.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import shutil
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .dataset import RenderedPair, Sample, get_template, read_dataset, render, save_dataset
from .diversity import EmbeddingSet, kmeans, make_rng, sample_per_cluster
from .errors import CherryError, ConfigError, DataError
from .ifd import (SelectionManifest, filter_misaligned, parse_strategy, score_dataset, select,
                  target_count, write_selection)
from .scorer import HashEmbedder, NGramModel, RemoteBackend, fit_ngram

logger = logging.getLogger(__name__)

PHASES = ("embed", "preselect", "fit", "score", "filter", "select", "write")
STATE_FILE = "state.json"
MANIFEST_FILE = "MANIFEST.json"
TIMINGS_FILE = "TIMINGS.json"

# fields that never influence output bytes
_VOLATILE = {"output_path", "cache_dir", "parallelism", "timeout", "max_retries"}


@dataclass
class PipelineConfig:
    input_path: str
    output_path: str
    cache_dir: str
    seed: int
    template_name: str = "alpaca"
    scorer_kind: str = "builtin"
    ngram_order: int = 3
    smoothing_k: float = 0.1
    embed_dim: int = 256
    clusters_k: int = 100
    per_cluster_m: int = 10
    kmeans_max_iters: int = 100
    pre_experience_size_override: int | None = None
    pre_experience_strategy: str = "diversity"
    fraction: float = 0.1
    strategy: str = "top_ifd"
    parallelism: int = 1
    remote_url: str | None = None
    remote_model: str | None = None
    remote_base_model: str | None = None
    timeout: float = 60.0
    max_retries: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.seed is None or isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("an integer seed is required")
        if not (0 < self.fraction <= 1):
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.clusters_k < 1 or self.per_cluster_m < 1:
            raise ConfigError("clusters_k and per_cluster_m must be >= 1")
        if self.pre_experience_size_override is not None and self.pre_experience_size_override < 0:
            raise ConfigError("pre_experience_size_override must be >= 0")
        if self.scorer_kind not in ("builtin", "remote"):
            raise ConfigError(f"scorer_kind must be 'builtin' or 'remote', not {self.scorer_kind!r}")
        if self.pre_experience_strategy not in ("diversity", "random", "difficulty"):
            raise ConfigError(f"unknown pre_experience_strategy {self.pre_experience_strategy!r}")
        if self.scorer_kind == "remote" and not (self.remote_url and self.remote_model):
            raise ConfigError("remote scoring needs remote_url and remote_model")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        parse_strategy(self.strategy)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path: str | Path, **overrides: Any) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def fingerprint(self, input_digest: str) -> str:
        stable = {k: v for k, v in self.to_dict().items() if k not in _VOLATILE}
        blob = json.dumps({"config": stable, "input": input_digest}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def sub_seed(self, tag: str) -> int:
        """Independent per-phase seed, so changing one phase never shifts another's draws."""
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode()).digest()
        return int.from_bytes(digest[:8], "little")


@dataclass
class RunManifest:
    config: dict[str, Any]
    counts: dict[str, int]
    fingerprints: dict[str, str]
    input_sha256: str
    selection_ids: str
    version: str = __version__
    timings: dict[str, float] = field(default_factory=dict)
    skipped_phases: list[str] = field(default_factory=list)
    completed_phases: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        """Deterministic part only: no timings, no resume bookkeeping."""
        return {"tool": "cherry", "version": self.version, "config": self.config,
                "input_sha256": self.input_sha256, "counts": self.counts,
                "fingerprints": self.fingerprints, "selection_ids": self.selection_ids}


class _Run:
    def __init__(self, config: PipelineConfig, resume: bool):
        self.cfg = config
        self.cache = Path(config.cache_dir)
        self.cache.mkdir(parents=True, exist_ok=True)
        self.input_digest = hashlib.sha256(Path(config.input_path).read_bytes()).hexdigest()
        self.config_fp = config.fingerprint(self.input_digest)
        self.timings: dict[str, float] = {}
        self.skipped: list[str] = []
        self.completed: list[str] = []
        state_path = self.cache / STATE_FILE
        if resume and state_path.exists():
            state = json.loads(state_path.read_text("utf-8"))
            if state.get("config_fingerprint") != self.config_fp:
                raise ConfigError(
                    f"{self.cache} holds artifacts from a different config or input "
                    f"(cached {state.get('config_fingerprint')}, current {self.config_fp}); "
                    "use a fresh cache_dir or run without resume")
            self.completed = [p for p in state.get("completed", []) if p in PHASES]
        else:
            self._clear()
        self._save_state()

    def _clear(self):
        for name in (STATE_FILE, MANIFEST_FILE, TIMINGS_FILE, "embeddings.bin", "embeddings.bin.ids.json",
                     "preexperience.json", "preexperience_data.json", "clusters.json", "model.json",
                     "scores.jsonl", "scores_base.jsonl", "selection.json", "selection.manifest.json"):
            (self.cache / name).unlink(missing_ok=True)

    def _save_state(self):
        doc = {"config_fingerprint": self.config_fp, "completed": self.completed}
        (self.cache / STATE_FILE).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    def done(self, phase: str) -> bool:
        return phase in self.completed

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except CherryError as exc:
            exc.phase = name
            raise
        except OSError as exc:
            err = DataError(f"phase {name}: {exc}")
            err.phase = name
            raise err from exc
        self.timings[name] = time.perf_counter() - t0
        if name not in self.completed:
            self.completed.append(name)
        self._save_state()


def _backends(cfg: PipelineConfig):
    if cfg.scorer_kind == "remote":
        kw = dict(timeout=cfg.timeout, max_retries=cfg.max_retries, max_in_flight=cfg.parallelism)
        base = RemoteBackend(cfg.remote_url, cfg.remote_base_model or cfg.remote_model, **kw)
        tuned = RemoteBackend(cfg.remote_url, cfg.remote_model, **kw)
        return base, base, tuned
    return HashEmbedder(cfg.embed_dim), None, None


def _embed(samples: list[Sample], questions: list[str], embedder, parallelism: int) -> EmbeddingSet:
    if parallelism > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(parallelism) as pool:
            rows = list(pool.map(embedder.embed, questions))
    else:
        rows = [embedder.embed(q) for q in questions]
    return EmbeddingSet([s.id for s in samples], np.vstack(rows))


def run_pipeline(config: PipelineConfig, *, resume: bool = False,
                 stop_after: str | None = None) -> RunManifest:
    """Run (or, with ``resume=True``, continue) the selection pipeline.

    ``stop_after`` ends the run after the named phase; the cache then holds
    everything a later ``resume`` needs.
    """
    if stop_after is not None and stop_after not in PHASES:
        raise ConfigError(f"unknown phase {stop_after!r}; phases are {PHASES}")
    cfg = config
    cfg.validate()
    run = _Run(cfg, resume)
    cache = run.cache
    start = set(run.completed)

    loaded = read_dataset(cfg.input_path)
    samples = loaded.samples
    template = get_template(cfg.template_name)
    pairs = [render(s, template) for s in samples]
    ids = [s.id for s in samples]
    embedder, remote_base, remote_tuned = _backends(cfg)

    pre_size = (cfg.pre_experience_size_override if cfg.pre_experience_size_override is not None
                else cfg.clusters_k * cfg.per_cluster_m)
    pre_size = min(pre_size, len(samples))

    def stop(phase: str) -> bool:
        return stop_after == phase

    # base model for the built-in backend: raw text, no prompt scaffolding
    if remote_base is None:
        plain = get_template("plain")
        theta0: Any = fit_ngram([render(s, plain) for s in samples], cfg.ngram_order, cfg.smoothing_k)
    else:
        theta0 = remote_base

    emb_path = cache / "embeddings.bin"
    with run.phase("embed"):
        if run.done("embed") and emb_path.exists():
            embeddings = EmbeddingSet.load(emb_path)
            if embeddings.ids != ids:
                raise DataError("cached embeddings do not match the dataset ids")
        else:
            embeddings = _embed(samples, [p.question_text for p in pairs], embedder, cfg.parallelism)
            embeddings.save(emb_path)
    if stop("embed"):
        return _partial(run, cfg, loaded, start)

    pre_path = cache / "preexperience.json"
    with run.phase("preselect"):
        if run.done("preselect") and pre_path.exists():
            pre_ids = json.loads(pre_path.read_text("utf-8"))
        else:
            pre_ids = _preselect(cfg, samples, pairs, embeddings, theta0, pre_size, cache)
            pre_path.write_text(json.dumps(pre_ids, indent=1) + "\n", encoding="utf-8")
            if pre_ids:
                by_id = {s.id: s for s in samples}
                save_dataset([by_id[i] for i in pre_ids], cache / "preexperience_data.json")
    if stop("preselect"):
        return _partial(run, cfg, loaded, start)

    model_path = cache / "model.json"
    with run.phase("fit"):
        if remote_tuned is not None:
            theta = remote_tuned if pre_ids else theta0
        elif not pre_ids:
            theta = theta0
        elif run.done("fit") and model_path.exists():
            theta = NGramModel.load(model_path)
        else:
            pos = {sid: i for i, sid in enumerate(ids)}
            theta = fit_ngram([pairs[pos[i]] for i in pre_ids], cfg.ngram_order, cfg.smoothing_k, base=theta0)
            theta.save(model_path)
    if stop("fit"):
        return _partial(run, cfg, loaded, start)

    with run.phase("score"):
        records = score_dataset(theta, samples, template, cache / "scores.jsonl",
                                parallelism=cfg.parallelism)
    if stop("score"):
        return _partial(run, cfg, loaded, start)

    strategy = parse_strategy(cfg.strategy, seed=cfg.sub_seed("select"), k=cfg.clusters_k)
    with run.phase("filter"):
        kept, dropped = filter_misaligned(records)
        candidates = kept if strategy.name == "top_ifd" else records
    if stop("filter"):
        return _partial(run, cfg, loaded, start)

    sel_path = cache / "selection.json"
    with run.phase("select"):
        chosen = select(records, strategy, cfg.fraction, dataset_size=len(samples), embeddings=embeddings)
        write_selection(chosen, SelectionManifest(
            strategy=strategy.name, fraction=cfg.fraction,
            seed=getattr(strategy, "seed", None), source_fingerprint=theta.fingerprint,
            extra={"target": target_count(cfg.fraction, len(samples))}), sel_path)
    if stop("select"):
        return _partial(run, cfg, loaded, start)

    with run.phase("write"):
        chosen_set = set(chosen)
        save_dataset([s for s in samples if s.id in chosen_set], cfg.output_path)
        manifest = RunManifest(
            config=cfg.to_dict(),
            counts={"loaded": len(samples), "rejected": len(loaded.rejected),
                    "pre_experience": len(pre_ids), "scored": len(records),
                    "misaligned": len(dropped), "filtered": len(candidates),
                    "selected": len(chosen)},
            fingerprints={"embedder": embedder.fingerprint, "theta0": theta0.fingerprint,
                          "theta": theta.fingerprint},
            input_sha256=run.input_digest,
            selection_ids=sel_path.name,
        )
        (cache / MANIFEST_FILE).write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return _finish(run, manifest, start)


def _preselect(cfg: PipelineConfig, samples: list[Sample], pairs: list[RenderedPair],
               embeddings: EmbeddingSet, theta0, size: int, cache: Path) -> list[str]:
    ids = [s.id for s in samples]
    if size == 0:
        return []
    if cfg.pre_experience_strategy == "random":
        picks = make_rng(cfg.sub_seed("preselect")).choice(len(ids), size=size, replace=False)
        return [ids[i] for i in sorted(int(p) for p in picks)]
    if cfg.pre_experience_strategy == "difficulty":
        template = get_template(cfg.template_name)
        base_records = score_dataset(theta0, samples, template, cache / "scores_base.jsonl",
                                     parallelism=cfg.parallelism)
        aligned = [i for i, r in enumerate(base_records) if r.ifd <= 1.0]
        ranked = sorted(aligned, key=lambda i: (-base_records[i].ifd, i))[:size]
        return [ids[i] for i in sorted(ranked)]

    k = min(cfg.clusters_k, len(ids))
    if k < cfg.clusters_k:
        logger.warning("only %d samples; clustering into %d groups instead of %d", len(ids), k, cfg.clusters_k)
    assignment = kmeans(embeddings, k, cfg.sub_seed("kmeans"), cfg.kmeans_max_iters)
    assignment.save(cache / "clusters.json")
    m = cfg.per_cluster_m
    if cfg.pre_experience_size_override is not None:
        m = max(1, math.ceil(size / k))
    picked = sample_per_cluster(assignment, ids, m, cfg.sub_seed("sample"))
    if len(picked) > size:
        keep = make_rng(cfg.sub_seed("truncate")).choice(len(picked), size=size, replace=False)
        picked = [picked[i] for i in sorted(int(j) for j in keep)]
    return picked


def _partial(run: _Run, cfg: PipelineConfig, loaded, start: set[str]) -> RunManifest:
    manifest = RunManifest(config=cfg.to_dict(), counts={"loaded": len(loaded.samples)},
                           fingerprints={}, input_sha256=run.input_digest, selection_ids="")
    return _finish(run, manifest, start)


def _finish(run: _Run, manifest: RunManifest, start: set[str]) -> RunManifest:
    manifest.timings = run.timings
    manifest.skipped_phases = [p for p in PHASES if p in start]
    manifest.completed_phases = list(run.completed)
    timings = {"timings_s": run.timings, "skipped_phases": manifest.skipped_phases}
    (run.cache / TIMINGS_FILE).write_text(json.dumps(timings, indent=2) + "\n", encoding="utf-8")
    return manifest


def resume(config: PipelineConfig, *, stop_after: str | None = None) -> RunManifest:
    return run_pipeline(config, resume=True, stop_after=stop_after)


def copy_outputs(config: PipelineConfig, dest: str | Path) -> None:
    """Copy the cherry dataset and manifest somewhere else (handy for comparisons)."""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    shutil.copy2(config.output_path, dest / Path(config.output_path).name)
    shutil.copy2(Path(config.cache_dir) / MANIFEST_FILE, dest / MANIFEST_FILE)
