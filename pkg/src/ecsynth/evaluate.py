"""Offline evaluation: sequence accuracy, top-k good ratio, reweighted metrics.

A Judge decides whether one candidate correction is acceptable against the
clean target. Good ratio at k takes the best of the first k ranked
candidates per sample and averages the 0/1 outcomes; the weighted variants
scale each sample's outcome by its reweighting score and normalize by N, the
same form the live-metric regression consumes.
"""

from __future__ import annotations

import json
import re
import string
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .records import ECExample, EvalMatrix
from .util import nfc


@dataclass(frozen=True)
class ModelOutputs:
    """Ranked candidate corrections per sample for one model."""

    model_id: str
    candidates: dict[str, tuple[str, ...]]

    def __post_init__(self) -> None:
        normalized = {}
        for sid, cands in self.candidates.items():
            cands = tuple(nfc(c) for c in cands)
            if not cands:
                raise ValueError(f"model {self.model_id!r}: empty candidate list for {sid!r}")
            normalized[sid] = cands
        object.__setattr__(self, "candidates", normalized)


class Judge(Protocol):
    def judge(self, candidate: str, target: str) -> int: ...


class ExactJudge:
    """Byte equality after NFC."""

    def judge(self, candidate: str, target: str) -> int:
        return int(nfc(candidate) == nfc(target))


_WS_RE = re.compile(r"\s+")


class NormalizedJudge:
    """Lowercase, collapse whitespace, strip trailing punctuation, then compare."""

    @staticmethod
    def _norm(text: str) -> str:
        text = _WS_RE.sub(" ", nfc(text).lower()).strip()
        return text.rstrip(string.punctuation + " ")

    def judge(self, candidate: str, target: str) -> int:
        return int(self._norm(candidate) == self._norm(target))


class ExternalJudge:
    """HTTP judge: POST {"prompt": ...} -> {"text": "yes"/"no"}.

    The prompt template must contain {candidate} and {target} placeholders.
    Verdicts are cached by (candidate, target) so repeated runs are
    deterministic and cheap.
    """

    def __init__(self, endpoint: str, prompt_template: str, token: str = "", timeout: float = 30.0):
        if "{candidate}" not in prompt_template or "{target}" not in prompt_template:
            raise ValueError("prompt_template needs {candidate} and {target} placeholders")
        self.endpoint = endpoint
        self.prompt_template = prompt_template
        self.token = token
        self.timeout = timeout
        self._cache: dict[tuple[str, str], int] = {}

    def judge(self, candidate: str, target: str) -> int:
        key = (candidate, target)
        if key in self._cache:
            return self._cache[key]
        prompt = self.prompt_template.format(candidate=candidate, target=target)
        payload = json.dumps({"prompt": prompt}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.endpoint, data=payload, headers=headers)
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            text = json.loads(resp.read().decode("utf-8"))["text"]
        first = text.strip().lower().split()
        if not first or first[0] not in ("yes", "no"):
            raise ValueError(f"judge returned neither yes nor no: {text!r}")
        verdict = int(first[0] == "yes")
        self._cache[key] = verdict
        return verdict


def _aligned_targets(outputs: ModelOutputs, dataset: Sequence[ECExample]) -> list[tuple[str, str, tuple[str, ...]]]:
    rows = []
    for ex in dataset:
        if ex.id not in outputs.candidates:
            raise ValueError(f"model {outputs.model_id!r}: no outputs for sample {ex.id!r}")
        rows.append((ex.id, ex.target, outputs.candidates[ex.id]))
    return rows


def export_chi_row(
    outputs: ModelOutputs, dataset: Sequence[ECExample], judge: Judge, k: int
) -> np.ndarray:
    """Per-sample best-of-k verdicts as a 0/1 vector aligned with the dataset."""
    if k < 1:
        raise ValueError("k must be >= 1")
    chi = np.zeros(len(dataset))
    for i, (_, target, cands) in enumerate(_aligned_targets(outputs, dataset)):
        chi[i] = max(judge.judge(c, target) for c in cands[:k])
    return chi


def good_ratio(
    outputs: ModelOutputs, dataset: Sequence[ECExample], judge: Judge, k: int
) -> float:
    """Fraction of samples whose best of the first k candidates is judged good."""
    if not dataset:
        raise ValueError("empty dataset")
    return float(export_chi_row(outputs, dataset, judge, k).mean())


def sequence_accuracy(outputs: ModelOutputs, dataset: Sequence[ECExample]) -> float:
    """Fraction of samples whose top-1 candidate equals the target exactly."""
    return good_ratio(outputs, dataset, ExactJudge(), k=1)


def weighted_metric(
    outputs: ModelOutputs,
    dataset: Sequence[ECExample],
    judge: Judge,
    k: int,
    weights: Mapping[str, float],
) -> float:
    """(1/N) * sum_i w_i * chi_i; weights must cover every sample."""
    missing = [ex.id for ex in dataset if ex.id not in weights]
    if missing:
        raise ValueError(f"weights missing for sample ids: {missing[:5]}")
    chi = export_chi_row(outputs, dataset, judge, k)
    w = np.array([weights[ex.id] for ex in dataset])
    return float((w * chi).sum() / len(dataset))


def build_eval_matrix(
    outputs_list: Sequence[ModelOutputs],
    dataset: Sequence[ECExample],
    judge: Judge,
    k: int,
    live_metrics: np.ndarray,
    metric_names: Sequence[str],
) -> EvalMatrix:
    """Stack per-model chi rows with observed live metrics into one matrix."""
    chi = np.stack([export_chi_row(o, dataset, judge, k) for o in outputs_list])
    return EvalMatrix(
        model_ids=tuple(o.model_id for o in outputs_list),
        sample_ids=tuple(ex.id for ex in dataset),
        chi=chi,
        live_metrics=np.asarray(live_metrics, dtype=np.float64),
        metric_names=tuple(metric_names),
    )


# -- report: Top-1 / Top-1 (w) / Top-3 / Top-3 (w) grid --


@dataclass(frozen=True)
class EvalReport:
    columns: tuple[str, ...]
    rows: tuple[tuple[str, tuple[tuple[float, float], ...]], ...]  # label -> (mean, std) per column

    def render(self) -> str:
        width = max([len(r[0]) for r in self.rows] + [8])
        header = " " * width + "  " + "  ".join(f"{c:>14}" for c in self.columns)
        lines = [header]
        for label, cells in self.rows:
            body = "  ".join(f"{m * 100:7.2f}±{s * 100:5.2f}" for m, s in cells)
            lines.append(f"{label:<{width}}  {body}")
        return "\n".join(lines)


def eval_report(
    groups: Sequence[tuple[str, Sequence[ModelOutputs]]],
    dataset: Sequence[ECExample],
    judge: Judge,
    weights: Mapping[str, float] | None = None,
    ks: Sequence[int] = (1, 3),
) -> EvalReport:
    """Metric grid over labeled groups of runs; mean ± std across runs per group.

    Without weights the (w) columns repeat the unweighted values with w == 1.
    """
    unit = {ex.id: 1.0 for ex in dataset}
    w = dict(unit) if weights is None else dict(weights)
    columns: list[str] = []
    for k in ks:
        columns.extend([f"Top-{k}", f"Top-{k} (w)"])
    rows = []
    for label, runs in groups:
        if not runs:
            raise ValueError(f"group {label!r} has no runs")
        per_run = []
        for outputs in runs:
            cells = []
            for k in ks:
                cells.append(good_ratio(outputs, dataset, judge, k))
                cells.append(weighted_metric(outputs, dataset, judge, k, w))
            per_run.append(cells)
        arr = np.array(per_run)
        rows.append(
            (label, tuple((float(m), float(s)) for m, s in zip(arr.mean(axis=0), arr.std(axis=0))))
        )
    return EvalReport(columns=tuple(columns), rows=tuple(rows))


# -- outputs file I/O ({sample_id, candidates[]} per line) --


def read_outputs(path: str | Path, model_id: str | None = None) -> ModelOutputs:
    from .records import RecordError, _read_lines

    candidates: dict[str, tuple[str, ...]] = {}
    for lineno, obj in _read_lines(path):
        try:
            sid, cands = obj["sample_id"], tuple(obj["candidates"])
        except (KeyError, TypeError) as e:
            raise RecordError(f"{path}: invalid outputs on line {lineno}: {e}") from e
        if sid in candidates:
            raise RecordError(f"{path}: duplicate sample id {sid!r} on line {lineno}")
        candidates[sid] = cands
    name = model_id if model_id is not None else Path(path).stem
    return ModelOutputs(model_id=name, candidates=candidates)


def write_outputs(outputs: ModelOutputs, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sid, cands in outputs.candidates.items():
            rec = {"sample_id": sid, "candidates": list(cands)}
            f.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")
