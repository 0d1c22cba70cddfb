"""Diversity-preserving corpus subsampling: k-means over embeddings + per-cluster quotas.

Embeddings are an external input in production; hash_embed provides a
deterministic stand-in so the stage can run self-contained. Distances are
squared Euclidean on L2-normalized vectors, which orders the same as cosine.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .records import Document


@dataclass(frozen=True)
class EmbeddedDoc:
    doc_id: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64).copy()
        if vec.ndim != 1 or vec.size < 1:
            raise ValueError(f"doc {self.doc_id!r}: vector must be 1-D and non-empty")
        if not np.isfinite(vec).all():
            raise ValueError(f"doc {self.doc_id!r}: vector has NaN/Inf entries")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class ClusterModel:
    """Fitted k-means state: every doc is assigned to its nearest centroid."""

    centroids: np.ndarray          # (k, D)
    assignments: dict[str, int]    # doc_id -> cluster index
    sizes: np.ndarray              # (k,) int64
    objective: float               # sum of squared distances
    objective_history: tuple[float, ...] = ()  # objective after each assignment pass

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class ClusterStats:
    mean_size: float
    std_size: float
    histogram: tuple[tuple[float, float, int], ...]  # (lo, hi, count) buckets


def _sqdist(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, shape (N, k).

    Canonical distance for the whole module: fitting and any fixed-point
    verification must use the same float path so ties break identically.
    """
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ centroids.T)
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    closest = _sqdist(x, x[chosen[0]][None, :])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # remaining points duplicate chosen centroids; fall back to uniform
            candidates = np.setdiff1d(np.arange(n), chosen[:c])
            chosen[c] = rng.choice(candidates)
        else:
            chosen[c] = rng.choice(n, p=closest / total)
        closest = np.minimum(closest, _sqdist(x, x[chosen[c]][None, :])[:, 0])
    return x[chosen].copy()


def kmeans(
    docs: Sequence[EmbeddedDoc],
    k: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> ClusterModel:
    """Lloyd's k-means with k-means++ seeding, deterministic given the seed.

    The objective (sum of squared distances to assigned centroids) is checked
    to be non-increasing on every iteration. Empty clusters are repaired by
    reseeding their centroid to the point farthest from its assigned centroid.
    """
    if not docs:
        raise ValueError("kmeans: empty input")
    if k < 1:
        raise ValueError("kmeans: k must be positive")
    if k > len(docs):
        raise ValueError(f"kmeans: k={k} exceeds number of docs ({len(docs)})")
    if max_iters < 1:
        raise ValueError("kmeans: max_iters must be positive")
    if tol < 0:
        raise ValueError("kmeans: tol must be >= 0")
    dims = {d.vector.shape[0] for d in docs}
    if len(dims) != 1:
        raise ValueError(f"kmeans: inconsistent embedding dimensions {sorted(dims)}")

    x = np.stack([d.vector for d in docs])
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, k, rng)

    prev_obj = np.inf
    history: list[float] = []
    assign = np.zeros(n, dtype=np.int64)
    for it in range(max_iters):
        d2 = _sqdist(x, centroids)
        assign = np.argmin(d2, axis=1)  # argmin breaks ties toward the lowest index
        # objective by direct subtraction: exact zero for coincident points,
        # unlike the expanded form used for the argmin
        diff = x - centroids[assign]
        point_d2 = np.einsum("ij,ij->i", diff, diff)
        obj = float(point_d2.sum())
        if obj > prev_obj + 1e-9 * max(1.0, prev_obj if np.isfinite(prev_obj) else 1.0):
            raise AssertionError(f"kmeans objective increased: {prev_obj} -> {obj} at iter {it}")
        history.append(obj)
        if prev_obj - obj < tol or it == max_iters - 1:
            prev_obj = obj
            break
        prev_obj = obj

        new_centroids = np.empty_like(centroids)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty][:, None]
        if not nonempty.all():
            # reseed each empty cluster to the currently worst-fit point
            repair_d2 = point_d2.copy()
            for c in np.flatnonzero(~nonempty):
                far = int(np.argmax(repair_d2))
                new_centroids[c] = x[far]
                repair_d2[far] = -1.0
        centroids = new_centroids

    sizes = np.bincount(assign, minlength=k).astype(np.int64)
    assignments = {doc.doc_id: int(c) for doc, c in zip(docs, assign)}
    return ClusterModel(
        centroids=centroids,
        assignments=assignments,
        sizes=sizes,
        objective=prev_obj,
        objective_history=tuple(history),
    )


def quota_sample(model: ClusterModel, docs_per_cluster: int, seed: int) -> list[str]:
    """min(quota, size) doc ids per cluster, uniform without replacement.

    Ids are sorted within each cluster before drawing, so the result depends
    only on (model, quota, seed) and not on assignment insertion order.
    """
    if docs_per_cluster < 1:
        raise ValueError("quota_sample: docs_per_cluster must be positive")
    by_cluster: dict[int, list[str]] = {}
    for doc_id, c in model.assignments.items():
        by_cluster.setdefault(c, []).append(doc_id)
    rng = np.random.default_rng(seed)
    out: list[str] = []
    for c in range(model.k):
        ids = sorted(by_cluster.get(c, ()))
        if len(ids) <= docs_per_cluster:
            out.extend(ids)
        else:
            picks = rng.choice(len(ids), size=docs_per_cluster, replace=False)
            out.extend(ids[i] for i in sorted(picks))
    return out


def cluster_stats(model: ClusterModel, buckets: int = 10) -> ClusterStats:
    """Mean (exactly N/k), population std, and a bucketed size histogram."""
    sizes = model.sizes.astype(np.float64)
    mean = float(sizes.sum() / model.k)
    std = float(np.sqrt(np.mean((sizes - mean) ** 2)))
    lo, hi = float(sizes.min()), float(sizes.max())
    if hi == lo:
        hist = ((lo, hi, int(model.k)),)
    else:
        counts, edges = np.histogram(sizes, bins=buckets, range=(lo, hi))
        hist = tuple(
            (float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))
        )
    return ClusterStats(mean_size=mean, std_size=std, histogram=hist)


def verify_nearest_assignment(model: ClusterModel, docs: Sequence[EmbeddedDoc]) -> bool:
    """Fixed-point check: reassigning every point to its nearest centroid changes nothing."""
    x = np.stack([d.vector for d in docs])
    assign = np.argmin(_sqdist(x, model.centroids), axis=1)
    return all(model.assignments[d.doc_id] == int(c) for d, c in zip(docs, assign))


def hash_embed(docs: Sequence[Document], dim: int, seed: int) -> list[EmbeddedDoc]:
    """Deterministic signed feature hashing of word uni+bigrams, L2-normalized.

    Test stand-in for an external embedding model: same text always maps to
    the same unit vector, disjoint vocabularies land near-orthogonal.
    """
    if dim < 8:
        raise ValueError("hash_embed: dim must be >= 8")
    key = str(seed).encode("utf-8")
    out: list[EmbeddedDoc] = []
    for doc in docs:
        words = doc.text.lower().split()
        grams = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
        vec = np.zeros(dim, dtype=np.float64)
        for gram in grams:
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=key).digest()
            h = int.from_bytes(digest, "big")
            sign = 1.0 if h & 1 else -1.0
            vec[(h >> 1) % dim] += sign
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec /= norm
        out.append(EmbeddedDoc(doc_id=doc.id, vector=vec))
    return out


# -- embedding file I/O ({doc_id, vector} per line) --


def read_embeddings(path: str) -> list[EmbeddedDoc]:
    from .records import RecordError, _read_lines

    out: list[EmbeddedDoc] = []
    seen: set[str] = set()
    for lineno, obj in _read_lines(path):
        try:
            doc = EmbeddedDoc(doc_id=obj["doc_id"], vector=np.array(obj["vector"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as e:
            raise RecordError(f"{path}: invalid embedding on line {lineno}: {e}") from e
        if doc.doc_id in seen:
            raise RecordError(f"{path}: duplicate doc id {doc.doc_id!r} on line {lineno}")
        seen.add(doc.doc_id)
        out.append(doc)
    return out


def write_embeddings(docs: Sequence[EmbeddedDoc], path: str) -> None:
    import json

    with open(path, "w", encoding="utf-8") as f:
        for d in docs:
            rec = {"doc_id": d.doc_id, "vector": [float(v) for v in d.vector]}
            f.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")
