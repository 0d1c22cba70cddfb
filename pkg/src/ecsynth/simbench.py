"""Planted-model benchmark: synthetic scores, measurements, and live metrics.

Live deployment metrics are private in production, so the fitting machinery
is validated on instances generated from known ground truth: draw per-sample
scores, compute planted weights, draw per-model binary measurements whose
rates are correlated with those weights, and emit live metrics that are an
affine function of the planted weighted offline metric plus Gaussian noise.

By default the planted bias term is calibrated so the mean planted weight is
exactly 1 (the regularizer's fixed point), making the noiseless instance
fully realizable by the fitting objective. Two metric sets with deliberately
different scales are generated to exercise the per-set regression protocol.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .evaluate import Judge, ModelOutputs, NormalizedJudge
from .records import ECExample, EvalMatrix, ScoredSample
from .reweight import ReweightParams, calibrate_bias, weights_array


@dataclass(frozen=True)
class PlantedSpec:
    n_samples: int = 500
    n_models: int = 12
    n_metrics: int = 2
    n_sets: int = 2
    set_scales: tuple[float, ...] = (1.0, 100.0)
    theta_f: float = 8.0
    theta_p: float = -6.0
    theta_b: float = 0.0
    # when set, theta_b above is ignored and solved so mean weight hits this
    target_mean_weight: float | None = 1.0
    c_min: float = 0.01
    c_max: float = 2.0
    score_mean_p: float = -4.0
    score_std_p: float = 1.0
    score_shift_f: float = 0.3
    score_std_f: float = 0.8
    base_accuracy: tuple[float, float] = (0.55, 0.9)
    skill_std: float = 1.5
    noise_sigma: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_models < 2:
            raise ValueError("need at least 2 models")
        if self.n_sets < 1 or len(self.set_scales) < self.n_sets:
            raise ValueError("set_scales must cover n_sets")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.target_mean_weight is not None and not (
            self.c_min < self.target_mean_weight < self.c_max
        ):
            raise ValueError("target mean weight must lie inside (c_min, c_max)")


@dataclass(frozen=True)
class GroundTruth:
    params: ReweightParams                       # planted theta and constants
    alpha_sets: tuple[tuple[np.ndarray, np.ndarray], ...]  # per set (alpha_1, alpha_0)
    weights: np.ndarray                          # (N,) planted weights
    mean_weight: float
    noise_per_set: tuple[float, ...]             # realized sum ||eps_j||^2 per set
    noise_total: float


@dataclass(frozen=True)
class PlantedBenchmark:
    matrices: tuple[EvalMatrix, ...]
    scores: list[ScoredSample]
    truth: GroundTruth


def _default_alphas(spec: PlantedSpec) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    d = spec.n_metrics
    out = []
    for s in range(spec.n_sets):
        scale = spec.set_scales[s]
        alpha_1 = scale * (1.0 + 0.5 * np.arange(d))
        alpha_0 = scale * 0.1 * (np.arange(d) + 1.0)
        out.append((alpha_1, alpha_0))
    return tuple(out)


def _chi_matrix(
    rng: np.random.Generator, spec: PlantedSpec, w: np.ndarray
) -> np.ndarray:
    """Binary measurements with per-model rates correlated with planted weights."""
    k = spec.n_models
    base = rng.uniform(*spec.base_accuracy, size=k)
    skill = rng.normal(0.0, spec.skill_std, size=k)
    centered = w - w.mean()
    p = expit(logit(base)[:, None] + skill[:, None] * centered[None, :])
    p = np.clip(p, 0.02, 0.98)
    return (rng.random(p.shape) < p).astype(np.float64)


def generate(spec: PlantedSpec) -> PlantedBenchmark:
    """Deterministic benchmark instance for the given spec."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    s_p = rng.normal(spec.score_mean_p, spec.score_std_p, size=n)
    s_f = s_p + rng.normal(spec.score_shift_f, spec.score_std_f, size=n)

    theta_b = spec.theta_b
    if spec.target_mean_weight is not None:
        theta_b = calibrate_bias(
            spec.theta_f,
            spec.theta_p,
            s_f,
            s_p,
            spec.c_min,
            spec.c_max,
            target=spec.target_mean_weight,
        )
    params = ReweightParams(
        theta_f=spec.theta_f,
        theta_p=spec.theta_p,
        theta_b=theta_b,
        c_min=spec.c_min,
        c_max=spec.c_max,
    )
    w = weights_array(params, s_f, s_p)

    sample_ids = tuple(f"ps-{i:06d}" for i in range(n))
    scores = [
        ScoredSample(sample_id=sid, s_p=float(p), s_f=float(f))
        for sid, p, f in zip(sample_ids, s_p, s_f)
    ]

    alphas = _default_alphas(spec)
    matrices = []
    noise_per_set = []
    for s in range(spec.n_sets):
        chi = _chi_matrix(rng, spec, w)
        s_offline = chi @ w / n
        alpha_1, alpha_0 = alphas[s]
        eps = rng.normal(0.0, spec.noise_sigma, size=(spec.n_models, spec.n_metrics))
        v = np.outer(s_offline, alpha_1) + alpha_0 + eps
        noise_per_set.append(float((eps * eps).sum()))
        matrices.append(
            EvalMatrix(
                model_ids=tuple(f"set{s}-model{j:02d}" for j in range(spec.n_models)),
                sample_ids=sample_ids,
                chi=chi,
                live_metrics=v,
                metric_names=tuple(f"metric_{m}" for m in range(spec.n_metrics)),
            )
        )

    truth = GroundTruth(
        params=params,
        alpha_sets=alphas,
        weights=w,
        mean_weight=float(w.mean()),
        noise_per_set=tuple(noise_per_set),
        noise_total=float(sum(noise_per_set)),
    )
    return PlantedBenchmark(matrices=tuple(matrices), scores=scores, truth=truth)


# -- deployment simulator: planted metrics over actual candidate strings --


@dataclass(frozen=True)
class DeploymentSimSpec:
    """Synthesize ranked model outputs plus live metrics for a real dataset.

    Per-model top-1 correctness rates are modulated by the planted sample
    weights exactly as in the raw benchmark; a rescue probability plants the
    correct answer at rank 2 or 3 so top-3 strictly dominates top-1.
    """

    n_models: int = 8
    n_metrics: int = 2
    metric_names: tuple[str, ...] = ("click_through_rate", "accept_rate")
    theta_f: float = 8.0
    theta_p: float = -6.0
    target_mean_weight: float = 1.0
    c_min: float = 0.01
    c_max: float = 2.0
    base_accuracy: tuple[float, float] = (0.55, 0.9)
    skill_std: float = 1.5
    top3_rescue: float = 0.15
    casing_slip: float = 0.2  # fraction of correct top-1s emitted as a casing variant
    noise_sigma: float = 1e-3
    judge_k: int = 3
    seed: int = 0


@dataclass(frozen=True)
class DeploymentSim:
    outputs: tuple[ModelOutputs, ...]
    matrix: EvalMatrix
    params: ReweightParams     # planted reweighting model
    weights: np.ndarray        # planted per-sample weights
    alpha: tuple[np.ndarray, np.ndarray]
    noise_floor: float


def _near_miss(target: str) -> str:
    # equal under the normalized judge, different bytes
    return target.lower().rstrip(".!?")


def simulate_deployments(
    dataset: Sequence[ECExample],
    scores: Sequence[ScoredSample],
    spec: DeploymentSimSpec,
    judge: Judge | None = None,
) -> DeploymentSim:
    """Planted stand-in for live A/B testing over an actual EC dataset.

    The measurement matrix is produced by judging the synthesized candidate
    strings (top judge_k) with the same judge the evaluation stage uses, and
    live metrics are an affine function of the planted weighted offline
    metric plus Gaussian noise.
    """
    if judge is None:
        judge = NormalizedJudge()
    by_id = {s.sample_id: s for s in scores}
    missing = [ex.id for ex in dataset if ex.id not in by_id]
    if missing:
        raise ValueError(f"scores missing for sample ids: {missing[:5]}")
    s_f = np.array([by_id[ex.id].s_f for ex in dataset])
    s_p = np.array([by_id[ex.id].s_p for ex in dataset])

    theta_b = calibrate_bias(
        spec.theta_f, spec.theta_p, s_f, s_p, spec.c_min, spec.c_max,
        target=spec.target_mean_weight,
    )
    params = ReweightParams(
        theta_f=spec.theta_f, theta_p=spec.theta_p, theta_b=theta_b,
        c_min=spec.c_min, c_max=spec.c_max,
    )
    w = weights_array(params, s_f, s_p)

    rng = np.random.default_rng(spec.seed)
    base = rng.uniform(*spec.base_accuracy, size=spec.n_models)
    skill = rng.normal(0.0, spec.skill_std, size=spec.n_models)
    centered = w - w.mean()
    p1 = np.clip(expit(logit(base)[:, None] + skill[:, None] * centered[None, :]), 0.02, 0.98)

    outputs = []
    for j in range(spec.n_models):
        candidates: dict[str, tuple[str, ...]] = {}
        for i, ex in enumerate(dataset):
            wrong_a = ex.source if ex.source != ex.target else "uh " + ex.target
            wrong_b = "uh " + ex.source
            u = rng.random()
            if u < p1[j, i]:
                top = ex.target
                if rng.random() < spec.casing_slip:
                    top = _near_miss(ex.target)
                cands = (top, wrong_a, wrong_b)
            elif u < p1[j, i] + spec.top3_rescue:
                if rng.random() < 0.5:
                    cands = (wrong_a, ex.target, wrong_b)
                else:
                    cands = (wrong_a, wrong_b, ex.target)
            else:
                cands = (wrong_a, wrong_b, wrong_a + " uh")
            candidates[ex.id] = cands
        outputs.append(ModelOutputs(model_id=f"model{j:02d}", candidates=candidates))

    alpha_1 = np.array([1.5, 0.8])[: spec.n_metrics]
    alpha_0 = np.array([0.05, 0.2])[: spec.n_metrics]
    if spec.n_metrics > 2:
        alpha_1 = np.resize(alpha_1, spec.n_metrics)
        alpha_0 = np.resize(alpha_0, spec.n_metrics)
    chi = np.stack(
        [
            np.array(
                [
                    max(judge.judge(c, ex.target) for c in o.candidates[ex.id][: spec.judge_k])
                    for ex in dataset
                ],
                dtype=np.float64,
            )
            for o in outputs
        ]
    )
    s_offline = chi @ w / len(dataset)
    eps = rng.normal(0.0, spec.noise_sigma, size=(spec.n_models, spec.n_metrics))
    v = np.outer(s_offline, alpha_1) + alpha_0 + eps
    matrix = EvalMatrix(
        model_ids=tuple(o.model_id for o in outputs),
        sample_ids=tuple(ex.id for ex in dataset),
        chi=chi,
        live_metrics=v,
        metric_names=spec.metric_names[: spec.n_metrics],
    )
    return DeploymentSim(
        outputs=tuple(outputs),
        matrix=matrix,
        params=params,
        weights=w,
        alpha=(alpha_1, alpha_0),
        noise_floor=float((eps * eps).sum()),
    )
