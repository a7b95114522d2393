"""K-means over instruction embeddings and per-cluster sampling.

Randomness comes from numpy's PCG64 bit generator seeded with the caller's
integer seed, so a given ``(embeddings, k, seed)`` always reproduces the same
partition. Distances are exact squared Euclidean differences computed in
fixed-size row blocks; ties go to the lowest centroid index.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

_BLOCK = 256
_HEADER = struct.Struct("<QQ")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class EmbeddingSet:
    ids: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise DataError(f"matrix shape {self.matrix.shape} does not match {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding ids are not unique")
        if not np.all(np.isfinite(self.matrix)):
            raise DataError("embedding matrix has non-finite entries")
        norms = np.linalg.norm(self.matrix, axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise DataError("embedding rows must be unit-norm")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def save(self, path: str | Path) -> None:
        """Write ``<QQ`` (dim, count) then row-major little-endian float64; ids go to a sidecar."""
        path = Path(path)
        count, dim = self.matrix.shape
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(dim, count))
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())
        _ids_path(path).write_text(json.dumps(self.ids, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingSet":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise DataError(f"{path}: truncated embedding cache")
        dim, count = _HEADER.unpack_from(raw)
        body = raw[_HEADER.size:]
        if len(body) != dim * count * 8:
            raise DataError(f"{path}: expected {dim * count} doubles, found {len(body) / 8:g}")
        matrix = np.frombuffer(body, dtype="<f8").reshape(count, dim).astype(np.float64)
        ids = json.loads(_ids_path(path).read_text("utf-8"))
        return cls(list(ids), matrix)


def _ids_path(path: Path) -> Path:
    return path.with_name(path.name + ".ids.json")


@dataclass
class ClusterAssignment:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    seed: int | None = None
    n_iter: int = 0
    history: list[float] = field(default_factory=list)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def to_json(self) -> dict:
        return {"k": self.k, "seed": self.seed, "labels": [int(x) for x in self.labels],
                "inertia": float(self.inertia)}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    out = np.empty((points.shape[0], centroids.shape[0]))
    for lo in range(0, points.shape[0], _BLOCK):
        block = points[lo:lo + _BLOCK]
        diff = block[:, None, :] - centroids[None, :, :]
        out[lo:lo + _BLOCK] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = squared_distances(points, centroids)
    labels = np.argmin(d2, axis=1)  # first minimum wins ties
    return labels, d2[np.arange(len(points)), labels]


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(points, points[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = float(closest.sum())
        if total > 0.0:
            cdf = np.cumsum(closest)
            idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            if idx >= n or closest[idx] == 0.0:  # r * total rounded up to total
                idx = int(np.flatnonzero(closest)[-1])
        else:
            # every point coincides with a chosen centre; take an unused index
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(free[rng.integers(len(free))])
        chosen.append(idx)
        closest = np.minimum(closest, squared_distances(points, points[idx][None, :])[:, 0])
    return points[chosen].copy()


def kmeans(embeddings: EmbeddingSet | np.ndarray, k: int = 100, seed: int = 0,
           max_iters: int = 100) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when labels stop changing or after ``max_iters`` assignment steps.
    A cluster left empty by an update is re-seeded with the point that is
    currently farthest from its own centroid. ``history`` records the inertia
    after every assignment and every centroid update; it never increases.
    """
    points = embeddings.matrix if isinstance(embeddings, EmbeddingSet) else np.asarray(embeddings, float)
    if points.ndim != 2:
        raise DataError("embeddings must be a 2-D matrix")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} must be in [1, {n}]")
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    if not np.all(np.isfinite(points)):
        raise DataError("embeddings contain non-finite values")

    rng = make_rng(seed)
    centroids = kmeans_plus_plus(points, k, rng)
    labels, d2 = _assign(points, centroids)
    history = [float(d2.sum())]
    n_iter = 1
    while n_iter < max_iters:
        centroids = _update(points, labels, centroids, k)
        history.append(float(squared_distances_to(points, centroids, labels).sum()))
        new_labels, d2 = _assign(points, centroids)
        n_iter += 1
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return ClusterAssignment(k=k, centroids=centroids, labels=labels, inertia=history[-1],
                             seed=seed, n_iter=n_iter, history=history)


def squared_distances_to(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> np.ndarray:
    diff = points - centroids[labels]
    return np.einsum("ij,ij->i", diff, diff)


def _update(points: np.ndarray, labels: np.ndarray, old: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=k)
    centroids = old.copy()
    for c in range(k):
        if counts[c]:
            centroids[c] = points[labels == c].mean(axis=0)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        dist = squared_distances_to(points, centroids, labels)
        order = np.lexsort((np.arange(len(points)), -dist))  # farthest first, then lowest index
        for c, idx in zip(empty, order):
            centroids[c] = points[idx]
    return centroids


def sample_per_cluster(assignment: ClusterAssignment, ids: Sequence[str], m: int = 10,
                       seed: int = 0) -> list[str]:
    """Draw ``min(m, size)`` distinct members from every cluster.

    Clusters are visited in index order with one shared generator; the result
    is returned in dataset order.
    """
    if m < 1:
        raise ConfigError("m must be >= 1")
    if len(ids) != len(assignment.labels):
        raise DataError("ids and labels differ in length")
    rng = make_rng(seed)
    picked: list[int] = []
    for c in range(assignment.k):
        members = assignment.members(c)
        if members.size == 0:
            continue
        take = min(m, members.size)
        picked.extend(int(i) for i in rng.choice(members, size=take, replace=False))
    return [ids[i] for i in sorted(picked)]
