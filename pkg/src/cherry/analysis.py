"""IFD distribution statistics, per-cluster density of extreme scores, 2-D export.

Percentiles use linear interpolation between closest ranks (numpy's
``"linear"`` method): the p-th percentile of sorted values ``v[0..n-1]`` is
read at fractional index ``p/100 * (n-1)``. ``stdev`` is the population
standard deviation.

The 2-D projection is PCA rather than t-SNE so it is deterministic; the CSV
export carries everything needed to run t-SNE elsewhere.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .diversity import ClusterAssignment, EmbeddingSet
from .errors import ConfigError, DataError
from .ifd import ScoreRecord, ifd_array, target_count

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ("id", "ifd", "x", "y", "cluster", "top_flag", "bottom_flag")
PERCENTILES = (5, 25, 50, 75, 95)


@dataclass(frozen=True)
class ScoreStats:
    count: int
    mean: float
    stdev: float
    min: float
    max: float
    p5: float
    p25: float
    p50: float
    p75: float
    p95: float
    fraction_above_1: float


@dataclass(frozen=True)
class ClusterDensity:
    cluster: int
    size: int
    count_top: int
    count_bottom: int

    @property
    def density_top(self) -> float:
        return self.count_top / self.size if self.size else 0.0

    @property
    def density_bottom(self) -> float:
        return self.count_bottom / self.size if self.size else 0.0

    def to_json(self) -> dict:
        return {**asdict(self), "density_top": self.density_top, "density_bottom": self.density_bottom}


def compute_stats(records: Sequence[ScoreRecord]) -> ScoreStats:
    if not records:
        raise DataError("no records")
    v = ifd_array(records)
    pct = np.percentile(v, PERCENTILES, method="linear")
    return ScoreStats(
        count=len(v), mean=float(v.mean()), stdev=float(v.std()),
        min=float(v.min()), max=float(v.max()),
        **{f"p{p}": float(x) for p, x in zip(PERCENTILES, pct)},
        fraction_above_1=float(np.count_nonzero(v > 1.0) / len(v)),
    )


def extreme_sets(records: Sequence[ScoreRecord], q: float = 0.05) -> tuple[list[str], list[str]]:
    """Ids of the top-q and bottom-q IFD records.

    Both sets hold ``ceil(q * n)`` ids and use the same ranking as selection:
    IFD order with ties broken by dataset position. The top set is taken
    first; the bottom set is drawn from the remainder so the two never
    overlap. With ``q <= 0.5`` and ``2 * ceil(q * n) <= n`` both are full.
    """
    if not (0 < q <= 0.5):
        raise ConfigError(f"q must be in (0, 0.5], got {q}")
    n = len(records)
    want = target_count(q, n)
    if 2 * want > n:
        raise ConfigError(f"q={q} gives {want} records per side, more than half of {n}")
    order = sorted(range(n), key=lambda i: (-records[i].ifd, i))
    top = set(order[:want])
    rest = sorted((i for i in range(n) if i not in top), key=lambda i: (records[i].ifd, i))
    bottom = set(rest[:want])
    return ([records[i].sample_id for i in sorted(top)],
            [records[i].sample_id for i in sorted(bottom)])


def cluster_density(records: Sequence[ScoreRecord], assignment: ClusterAssignment, q: float,
                    ids: Sequence[str]) -> list[ClusterDensity]:
    if len(ids) != len(assignment.labels):
        raise DataError("ids and assignment labels differ in length")
    label_of = {sid: int(lbl) for sid, lbl in zip(ids, assignment.labels)}
    missing = [r.sample_id for r in records if r.sample_id not in label_of]
    if missing:
        raise DataError(f"{len(missing)} records have no cluster label, e.g. {missing[0]!r}")
    top, bottom = extreme_sets(records, q)
    size = np.zeros(assignment.k, dtype=int)
    n_top = np.zeros(assignment.k, dtype=int)
    n_bottom = np.zeros(assignment.k, dtype=int)
    for r in records:
        size[label_of[r.sample_id]] += 1
    for sid in top:
        n_top[label_of[sid]] += 1
    for sid in bottom:
        n_bottom[label_of[sid]] += 1
    return [ClusterDensity(c, int(size[c]), int(n_top[c]), int(n_bottom[c])) for c in range(assignment.k)]


@dataclass(frozen=True)
class PCAFit:
    mean: np.ndarray
    components: np.ndarray  # (dims, d), rows are unit principal directions
    explained_variance: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, float) - self.mean) @ self.components.T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return self.mean + np.asarray(z, float) @ self.components


def pca_fit(x: np.ndarray, dims: int = 2) -> PCAFit:
    """Eigen-decomposition of the scatter matrix ``Xc^T Xc`` via LAPACK ``syevd``.

    Components are taken by descending eigenvalue; each is sign-flipped so
    its first loading with magnitude above 1e-12 is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("PCA needs at least 2 rows")
    if dims > x.shape[1]:
        raise ConfigError(f"cannot project {x.shape[1]}-D data onto {dims} components")
    mean = x.mean(axis=0)
    xc = x - mean
    evals, evecs = np.linalg.eigh(xc.T @ xc)
    order = np.argsort(-evals, kind="stable")[:dims]
    comps = evecs[:, order].T.copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1
    return PCAFit(mean, comps, np.maximum(evals[order], 0.0) / (x.shape[0] - 1))


def pca_project(embeddings: EmbeddingSet | np.ndarray, dims: int = 2) -> np.ndarray:
    x = embeddings.matrix if isinstance(embeddings, EmbeddingSet) else embeddings
    return pca_fit(x, dims).transform(x)


REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema_version", "stats", "notes"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "q": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
        "stats": {
            "type": "object",
            "required": ["count", "mean", "stdev", "min", "max", "p5", "p25", "p50", "p75", "p95",
                         "fraction_above_1"],
            "properties": {"count": {"type": "integer", "minimum": 1},
                           "fraction_above_1": {"type": "number", "minimum": 0, "maximum": 1}},
            "additionalProperties": {"type": "number"},
        },
        "cluster_density": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["cluster", "size", "count_top", "count_bottom", "density_top",
                             "density_bottom"],
                "properties": {
                    "cluster": {"type": "integer", "minimum": 0},
                    "size": {"type": "integer", "minimum": 0},
                    "count_top": {"type": "integer", "minimum": 0},
                    "count_bottom": {"type": "integer", "minimum": 0},
                    "density_top": {"type": "number", "minimum": 0, "maximum": 1},
                    "density_bottom": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "projection": {
            "type": "object",
            "required": ["method", "csv"],
            "properties": {"method": {"const": "pca"}, "csv": {"type": "string"}},
        },
        "notes": {"type": "array", "items": {"type": "string"}},
    },
}


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, REPORT_SCHEMA)


def emit_report(out_dir: str | Path, stats: ScoreStats, densities: Sequence[ClusterDensity] | None,
                projection: np.ndarray | None, records: Sequence[ScoreRecord], *,
                labels: Sequence[int] | None = None, top_ids: Sequence[str] = (),
                bottom_ids: Sequence[str] = (), q: float | None = None) -> tuple[Path, Path]:
    """Write ``report.json`` and ``projection.csv`` (one row per record) into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(records)
    if projection is not None and len(projection) != n:
        raise DataError("projection rows do not match records")
    if labels is not None and len(labels) != n:
        raise DataError("labels do not match records")

    report: dict = {"schema_version": REPORT_SCHEMA_VERSION, "stats": asdict(stats), "notes": []}
    if q is not None:
        report["q"] = q
    if densities:
        report["cluster_density"] = [d.to_json() for d in densities]
    else:
        report["notes"].append("cluster_density omitted: no cluster assignment supplied")
    csv_path = out_dir / "projection.csv"
    if projection is not None:
        report["projection"] = {"method": "pca", "csv": csv_path.name}
    else:
        report["notes"].append("projection omitted: no embeddings supplied; x and y are blank")
    validate_report(report)

    top, bottom = set(top_ids), set(bottom_ids)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i, r in enumerate(records):
            x, y = (repr(float(projection[i, 0])), repr(float(projection[i, 1]))) if projection is not None else ("", "")
            w.writerow([r.sample_id, repr(r.ifd), x, y, "" if labels is None else int(labels[i]),
                        int(r.sample_id in top), int(r.sample_id in bottom)])
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return json_path, csv_path
