"""Command-line entry point: ``cherry <command> [options]``.

Settings come from, in increasing precedence: built-in defaults, the JSON
file given with ``--config``, then explicit command-line flags.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import cluster_density, compute_stats, emit_report, extreme_sets, pca_project
from .diversity import ClusterAssignment, EmbeddingSet, kmeans
from .errors import CherryError, ConfigError
from .evaluation import (Outcome, build_report, build_requests, read_jsonl, tally_majority,
                         write_jsonl)
from .ifd import ScoreCache
from .pipeline import MANIFEST_FILE, PipelineConfig, run_pipeline

# flag name -> config key
_CONFIG_FLAGS = {
    "input": "input_path", "output": "output_path", "cache_dir": "cache_dir",
    "template": "template_name", "scorer": "scorer_kind", "ngram_order": "ngram_order",
    "smoothing_k": "smoothing_k", "embed_dim": "embed_dim", "clusters": "clusters_k",
    "per_cluster": "per_cluster_m", "pre_size": "pre_experience_size_override",
    "pre_strategy": "pre_experience_strategy", "fraction": "fraction", "strategy": "strategy",
    "parallelism": "parallelism", "remote_url": "remote_url", "remote_model": "remote_model",
    "remote_base_model": "remote_base_model", "seed": "seed",
}

_STOP_AFTER = {"embed": "embed", "preselect": "preselect", "score": "score", "select": None,
               "run": None, "resume": None}


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="Alpaca-format JSON dataset")
    p.add_argument("--output", help="where to write the cherry dataset")
    p.add_argument("--cache-dir")
    p.add_argument("--template")
    p.add_argument("--scorer", choices=["builtin", "remote"])
    p.add_argument("--ngram-order", type=int)
    p.add_argument("--smoothing-k", type=float)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--clusters", type=int)
    p.add_argument("--per-cluster", type=int)
    p.add_argument("--pre-size", type=int, help="pre-experience size override (0 = score with base model)")
    p.add_argument("--pre-strategy", choices=["diversity", "random", "difficulty"])
    p.add_argument("--fraction", type=float)
    p.add_argument("--strategy", choices=["top_ifd", "low_ifd", "high_ca", "random", "diversity"])
    p.add_argument("--parallelism", type=int)
    p.add_argument("--remote-url")
    p.add_argument("--remote-model")
    p.add_argument("--remote-base-model")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand from resetting a flag given before it
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="cherry", description=__doc__.splitlines()[0],
                                     parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    helps = {
        "embed": "compute instruction embeddings",
        "preselect": "embed, cluster and pick the pre-experience subset",
        "score": "run through CA/DA/IFD scoring",
        "select": "run through selection and write the cherry dataset",
        "run": "fresh end-to-end run",
        "resume": "continue a run from its cache_dir",
    }
    for name, text in helps.items():
        _add_pipeline_flags(sub.add_parser(name, help=text, parents=[common]))

    an = sub.add_parser("analyze", help="score statistics, cluster density and 2-D projection",
                        parents=[common])
    an.add_argument("--cache-dir", required=True)
    an.add_argument("--out", help="report directory (default: <cache-dir>/analysis)")
    an.add_argument("--q", type=float, default=0.05, help="top/bottom fraction")
    an.add_argument("--clusters", type=int, default=100)

    ev = sub.add_parser("eval", help="pairwise judge harness", parents=[common])
    evs = ev.add_subparsers(dest="eval_command", required=True)
    req = evs.add_parser("requests", help="build double-ordered judge requests")
    req.add_argument("--items", required=True,
                     help="JSON-lines {item_id, question, answer_a, answer_b, [test_set]}")
    req.add_argument("--out", required=True)
    rep = evs.add_parser("report", help="adjudicate judge replies")
    rep.add_argument("--items", required=True)
    rep.add_argument("--replies", required=True, help="JSON-lines {item_id, order, text}")
    rep.add_argument("--out", required=True)
    hum = evs.add_parser("human", help="tally 3-annotator majority votes")
    hum.add_argument("--votes", required=True, help="JSON-lines {item_id, votes: [3 x win|tie|lose], [test_set]}")
    hum.add_argument("--out", required=True)
    return parser


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    overrides = {}
    for flag, key in _CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    config = getattr(args, "config", None)
    if config:
        return PipelineConfig.from_file(config, **overrides)
    return PipelineConfig.from_dict(overrides)


def _cmd_pipeline(args: argparse.Namespace) -> None:
    cfg = _config_from_args(args)
    fresh = args.command == "run"
    manifest = run_pipeline(cfg, resume=not fresh, stop_after=_STOP_AFTER[args.command])
    print(json.dumps({"counts": manifest.counts, "completed": manifest.completed_phases,
                      "skipped": manifest.skipped_phases}, indent=2))


def _cmd_analyze(args: argparse.Namespace) -> None:
    cache = Path(args.cache_dir)
    manifest_path = cache / MANIFEST_FILE
    if not manifest_path.exists():
        raise ConfigError(f"{cache} has no {MANIFEST_FILE}; finish a run first")
    manifest = json.loads(manifest_path.read_text("utf-8"))
    theta = manifest["fingerprints"]["theta"]
    cache_file = ScoreCache(cache / "scores.jsonl", theta)
    embeddings = EmbeddingSet.load(cache / "embeddings.bin")
    records = [cache_file.records[i] for i in embeddings.ids if i in cache_file.records]
    labels_file = cache / "clusters.json"
    if labels_file.exists():
        doc = json.loads(labels_file.read_text("utf-8"))
        labels = np.asarray(doc["labels"])
        assignment = ClusterAssignment(k=doc["k"], centroids=np.empty((doc["k"], 0)), labels=labels,
                                       inertia=doc["inertia"], seed=doc["seed"])
    else:
        assignment = kmeans(embeddings, min(args.clusters, len(embeddings)), getattr(args, "seed", 0))
    stats = compute_stats(records)
    densities = cluster_density(records, assignment, args.q, embeddings.ids)
    top, bottom = extreme_sets(records, args.q)
    projection = pca_project(embeddings)
    out = Path(args.out) if args.out else cache / "analysis"
    paths = emit_report(out, stats, densities, projection, records, labels=assignment.labels.tolist(),
                        top_ids=top, bottom_ids=bottom, q=args.q)
    print("\n".join(str(p) for p in paths))


def _cmd_eval(args: argparse.Namespace) -> None:
    if args.eval_command == "requests":
        rows = build_requests(read_jsonl(args.items))
        write_jsonl(rows, args.out)
        print(f"wrote {len(rows)} requests to {args.out}")
    elif args.eval_command == "report":
        report = build_report(read_jsonl(args.items), read_jsonl(args.replies))
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        print(json.dumps(report["per_test_set"], indent=2))
    else:
        grouped: dict[str, list] = {}
        for row in read_jsonl(args.votes):
            grouped.setdefault(row.get("test_set", "all"), []).append([Outcome(v) for v in row["votes"]])
        report = {"per_test_set": {k: tally_majority(v).to_json() for k, v in sorted(grouped.items())},
                  "invalid_count": 0}
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        print(json.dumps(report["per_test_set"], indent=2))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "analyze":
            _cmd_analyze(args)
        elif args.command == "eval":
            _cmd_eval(args)
        else:
            _cmd_pipeline(args)
    except CherryError as exc:
        where = f" [phase {exc.phase}]" if exc.phase else ""
        print(f"cherry: error{where}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:  # e.g. an unknown vote label
        print(f"cherry: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
