"""Shared record types and line-delimited file I/O.

Corpora, error-correction datasets, per-sample scores, and weights are stored
as one JSON object per line. An eval-matrix file is one JSON header line
(model_ids, sample_ids, metric_names) followed by one 0/1 measurement row per
model and then one live-metric row per model.

Text fields are NFC-normalized when a record is constructed, so downstream
equality checks are plain byte comparisons and read(write(x)) == x holds for
every constructible record. Records are immutable and safe to share across
threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .util import nfc

PROVENANCES = frozenset({"original", "synthetic", "synthetic_filtered"})

ERROR_CATEGORIES = frozenset(
    {
        "verb",
        "missing_word",
        "plural",
        "capitalization",
        "word_order",
        "article",
        "preposition",
        "spelling",
        "other",
    }
)


class RecordError(ValueError):
    """Malformed record, duplicate id, or invalid field value."""


@dataclass(frozen=True)
class Document:
    """One unit of clean text: a sentence or a short user utterance."""

    id: str
    text: str
    source_tag: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "text", nfc(self.text))
        if not self.id:
            raise RecordError("document id must be non-empty")
        if not self.text.strip():
            raise RecordError(f"document {self.id!r}: text is empty")


@dataclass(frozen=True)
class ErrorAnnotation:
    """One injected grammar error: its category and a free-text description."""

    category: str
    description: str = ""

    def __post_init__(self) -> None:
        if self.category not in ERROR_CATEGORIES:
            raise RecordError(f"unknown error category {self.category!r}")
        object.__setattr__(self, "description", nfc(self.description))


@dataclass(frozen=True)
class ECExample:
    """A (corrupted source, clean target) pair with optional sample weight."""

    id: str
    source: str
    target: str
    provenance: str = "synthetic"
    weight: float | None = None
    error_annotations: tuple[ErrorAnnotation, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "source", nfc(self.source))
        object.__setattr__(self, "target", nfc(self.target))
        object.__setattr__(self, "error_annotations", tuple(self.error_annotations))
        if not self.id:
            raise RecordError("example id must be non-empty")
        if not self.source:
            raise RecordError(f"example {self.id!r}: source is empty")
        if not self.target:
            raise RecordError(f"example {self.id!r}: target is empty")
        if self.provenance not in PROVENANCES:
            raise RecordError(f"example {self.id!r}: unknown provenance {self.provenance!r}")
        if self.weight is not None and not (self.weight > 0):
            raise RecordError(f"example {self.id!r}: weight must be > 0, got {self.weight}")

    def with_weight(self, weight: float) -> ECExample:
        return replace(self, weight=float(weight))


@dataclass(frozen=True)
class ScoredSample:
    """Average log-likelihood scores of one target sentence under two scorers."""

    sample_id: str
    s_p: float
    s_f: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.s_p) or not np.isfinite(self.s_f):
            raise RecordError(f"sample {self.sample_id!r}: scores must be finite")


@dataclass(frozen=True)
class EvalMatrix:
    """Per-(model, sample) binary measurements plus per-model live metrics.

    chi has shape (K, N) with entries in {0, 1}; live_metrics has shape (K, d).
    Arrays are copied and frozen at construction.
    """

    model_ids: tuple[str, ...]
    sample_ids: tuple[str, ...]
    chi: np.ndarray
    live_metrics: np.ndarray
    metric_names: tuple[str, ...]

    def __post_init__(self) -> None:
        model_ids = tuple(self.model_ids)
        sample_ids = tuple(self.sample_ids)
        metric_names = tuple(self.metric_names)
        chi = np.asarray(self.chi, dtype=np.float64).copy()
        live = np.asarray(self.live_metrics, dtype=np.float64).copy()
        if len(set(model_ids)) != len(model_ids):
            raise RecordError("duplicate model ids")
        if len(set(sample_ids)) != len(sample_ids):
            raise RecordError("duplicate sample ids")
        if len(metric_names) < 1:
            raise RecordError("at least one metric is required")
        if chi.shape != (len(model_ids), len(sample_ids)):
            raise RecordError(f"chi shape {chi.shape} does not match ids")
        if live.shape != (len(model_ids), len(metric_names)):
            raise RecordError(f"live_metrics shape {live.shape} does not match ids")
        if not np.isin(chi, (0.0, 1.0)).all():
            bad = chi[~np.isin(chi, (0.0, 1.0))][0]
            raise RecordError(f"chi entries must be 0 or 1, found {bad}")
        if not np.isfinite(live).all():
            raise RecordError("live metrics must be finite")
        chi.setflags(write=False)
        live.setflags(write=False)
        object.__setattr__(self, "model_ids", model_ids)
        object.__setattr__(self, "sample_ids", sample_ids)
        object.__setattr__(self, "metric_names", metric_names)
        object.__setattr__(self, "chi", chi)
        object.__setattr__(self, "live_metrics", live)

    @property
    def n_models(self) -> int:
        return len(self.model_ids)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_metrics(self) -> int:
        return len(self.metric_names)

    def without_model(self, index: int) -> EvalMatrix:
        """Copy of the matrix with one model row removed (for held-one-out CV)."""
        keep = [j for j in range(self.n_models) if j != index]
        return EvalMatrix(
            model_ids=tuple(self.model_ids[j] for j in keep),
            sample_ids=self.sample_ids,
            chi=self.chi[keep],
            live_metrics=self.live_metrics[keep],
            metric_names=self.metric_names,
        )


# -- line-delimited I/O --


def _read_lines(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordError(f"{path}: malformed record on line {lineno}: {e}") from e
            if not isinstance(obj, dict):
                raise RecordError(f"{path}: malformed record on line {lineno}: not an object")
            yield lineno, obj


def _dump(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def read_corpus(path: str | Path) -> list[Document]:
    """Read a corpus file; ids are verified unique, file order is preserved."""
    docs: list[Document] = []
    seen: set[str] = set()
    for lineno, obj in _read_lines(path):
        try:
            doc = Document(id=obj["id"], text=obj["text"], source_tag=obj.get("source_tag", ""))
        except (KeyError, TypeError, RecordError) as e:
            raise RecordError(f"{path}: invalid document on line {lineno}: {e}") from e
        if doc.id in seen:
            raise RecordError(f"{path}: duplicate document id {doc.id!r} on line {lineno}")
        seen.add(doc.id)
        docs.append(doc)
    return docs


def write_corpus(docs: Sequence[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(_dump({"id": doc.id, "text": doc.text, "source_tag": doc.source_tag}) + "\n")


def _example_to_obj(ex: ECExample) -> dict:
    obj: dict = {"id": ex.id, "source": ex.source, "target": ex.target}
    if ex.weight is not None:
        obj["weight"] = ex.weight
    obj["provenance"] = ex.provenance
    obj["error_annotations"] = [
        {"category": a.category, "description": a.description} for a in ex.error_annotations
    ]
    return obj


def _example_from_obj(obj: dict) -> ECExample:
    return ECExample(
        id=obj["id"],
        source=obj["source"],
        target=obj["target"],
        provenance=obj.get("provenance", "synthetic"),
        weight=obj.get("weight"),
        error_annotations=tuple(
            ErrorAnnotation(category=a["category"], description=a.get("description", ""))
            for a in obj.get("error_annotations", ())
        ),
    )


def read_ec_dataset(path: str | Path) -> list[ECExample]:
    """Read an EC dataset. Repeated ids are allowed: mixed datasets oversample."""
    examples: list[ECExample] = []
    for lineno, obj in _read_lines(path):
        try:
            examples.append(_example_from_obj(obj))
        except (KeyError, TypeError, RecordError) as e:
            raise RecordError(f"{path}: invalid example on line {lineno}: {e}") from e
    return examples


def write_ec_dataset(examples: Sequence[ECExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(_dump(_example_to_obj(ex)) + "\n")


def read_scores(path: str | Path) -> list[ScoredSample]:
    out: list[ScoredSample] = []
    seen: set[str] = set()
    for lineno, obj in _read_lines(path):
        try:
            s = ScoredSample(sample_id=obj["sample_id"], s_p=float(obj["s_p"]), s_f=float(obj["s_f"]))
        except (KeyError, TypeError, ValueError) as e:
            raise RecordError(f"{path}: invalid score on line {lineno}: {e}") from e
        if s.sample_id in seen:
            raise RecordError(f"{path}: duplicate sample id {s.sample_id!r} on line {lineno}")
        seen.add(s.sample_id)
        out.append(s)
    return out


def write_scores(scores: Sequence[ScoredSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in scores:
            f.write(_dump({"sample_id": s.sample_id, "s_p": s.s_p, "s_f": s.s_f}) + "\n")


def read_weights(path: str | Path) -> dict[str, float]:
    weights: dict[str, float] = {}
    for lineno, obj in _read_lines(path):
        try:
            sid, w = obj["sample_id"], float(obj["weight"])
        except (KeyError, TypeError, ValueError) as e:
            raise RecordError(f"{path}: invalid weight on line {lineno}: {e}") from e
        if sid in weights:
            raise RecordError(f"{path}: duplicate sample id {sid!r} on line {lineno}")
        weights[sid] = w
    return weights


def write_weights(weights: dict[str, float], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sid, w in weights.items():
            f.write(_dump({"sample_id": sid, "weight": w}) + "\n")


def read_eval_matrix(path: str | Path) -> EvalMatrix:
    """Read header + K chi rows + K live-metric rows; rejects chi entries outside {0,1}."""
    rows = list(_read_lines(path))
    if not rows:
        raise RecordError(f"{path}: empty eval-matrix file")
    _, header = rows[0]
    try:
        model_ids = tuple(header["model_ids"])
        sample_ids = tuple(header["sample_ids"])
        metric_names = tuple(header["metric_names"])
    except (KeyError, TypeError) as e:
        raise RecordError(f"{path}: invalid header: {e}") from e
    k = len(model_ids)
    if len(rows) != 1 + 2 * k:
        raise RecordError(f"{path}: expected {1 + 2 * k} lines for {k} models, got {len(rows)}")
    chi_rows, live_rows = [], []
    for j in range(k):
        lineno, obj = rows[1 + j]
        if obj.get("model_id") != model_ids[j] or "chi" not in obj:
            raise RecordError(f"{path}: line {lineno}: expected chi row for {model_ids[j]!r}")
        chi_rows.append(obj["chi"])
    for j in range(k):
        lineno, obj = rows[1 + k + j]
        if obj.get("model_id") != model_ids[j] or "live" not in obj:
            raise RecordError(f"{path}: line {lineno}: expected live-metric row for {model_ids[j]!r}")
        live_rows.append(obj["live"])
    try:
        return EvalMatrix(
            model_ids=model_ids,
            sample_ids=sample_ids,
            chi=np.array(chi_rows, dtype=np.float64),
            live_metrics=np.array(live_rows, dtype=np.float64),
            metric_names=metric_names,
        )
    except (ValueError, RecordError) as e:
        raise RecordError(f"{path}: {e}") from e


def write_eval_matrix(matrix: EvalMatrix, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(
            _dump(
                {
                    "model_ids": list(matrix.model_ids),
                    "sample_ids": list(matrix.sample_ids),
                    "metric_names": list(matrix.metric_names),
                }
            )
            + "\n"
        )
        for j, mid in enumerate(matrix.model_ids):
            f.write(_dump({"model_id": mid, "chi": [int(x) for x in matrix.chi[j]]}) + "\n")
        for j, mid in enumerate(matrix.model_ids):
            f.write(_dump({"model_id": mid, "live": [float(x) for x in matrix.live_metrics[j]]}) + "\n")
