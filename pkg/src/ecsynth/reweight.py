"""Bounded sigmoid sample reweighting fit against live deployment metrics.

The weight of a sample with scores (s_f, s_p) is

    w = c_min + (c_max - c_min) * sigmoid(theta_f * s_f + theta_p * s_p + theta_b)

and (theta, alpha) are learnt by minimizing, summed over metric sets,

    sum_j || alpha_1 * s_j + alpha_0 - v_j ||^2  +  lambda * (mean_i w_i - 1)^2

where s_j = (1/N) sum_i w_i * chi_{j,i} is model j's weighted offline metric
and v_j its observed live-metric vector. Gradients are analytic (chain rule
through the sigmoid); minimization is quasi-Newton from multiple seeded
restarts. Each metric set gets its own regression parameters because live
metric scales differ across deployments; theta is shared.

Uniform weights (w == 1) are reachable inside the hypothesis class, and one
restart always starts there, so the fitted training residual can never land
above the uniform baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .records import EvalMatrix, ScoredSample
from .scoring import heuristic_weight

# keeps weights strictly inside (c_min, c_max) in float64 even when the
# sigmoid saturates; 1 - 1e-12 survives the multiply by (c_max - c_min)
_SIG_EPS = 1e-12


@dataclass(frozen=True)
class ReweightParams:
    theta_f: float = 0.0
    theta_p: float = 0.0
    theta_b: float = 0.0
    c_min: float = 0.01
    c_max: float = 2.0
    lam: float = 0.01

    def __post_init__(self) -> None:
        if not 0 < self.c_min < self.c_max:
            raise ValueError(f"need 0 < c_min < c_max, got ({self.c_min}, {self.c_max})")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.theta_f, self.theta_p, self.theta_b])

    def with_theta(self, theta: Sequence[float]) -> ReweightParams:
        tf, tp, tb = (float(t) for t in theta)
        return replace(self, theta_f=tf, theta_p=tp, theta_b=tb)

    @staticmethod
    def uniform_theta(c_min: float = 0.01, c_max: float = 2.0) -> tuple[float, float, float]:
        """theta at which every weight equals exactly 1."""
        sig = (1.0 - c_min) / (c_max - c_min)
        return (0.0, 0.0, math.log(sig / (1.0 - sig)))


@dataclass(frozen=True)
class RegressionParams:
    """Per-metric-set affine map from the weighted offline metric to live metrics."""

    alpha_1: np.ndarray  # (d,)
    alpha_0: np.ndarray  # (d,)
    degenerate: bool = False

    def __post_init__(self) -> None:
        a1 = np.asarray(self.alpha_1, dtype=np.float64).copy()
        a0 = np.asarray(self.alpha_0, dtype=np.float64).copy()
        if a1.shape != a0.shape or a1.ndim != 1:
            raise ValueError("alpha_1 and alpha_0 must be 1-D and same shape")
        a1.setflags(write=False)
        a0.setflags(write=False)
        object.__setattr__(self, "alpha_1", a1)
        object.__setattr__(self, "alpha_0", a0)


@dataclass(frozen=True)
class ResidualSummary:
    per_holdout: tuple[float, ...]
    mean: float
    std: float


@dataclass(frozen=True)
class ReweightFit:
    params: ReweightParams
    regression: tuple[RegressionParams, ...]
    objective_train: float   # residual + regularizer at the optimum
    residual_train: float    # regression residual only
    mean_weight: float
    baseline_residuals: dict[str, float]
    containment_ok: bool     # residual_train <= uniform baseline + 1e-9
    restarts_run: int
    residual_cv: ResidualSummary | None = None
    residual_val: ResidualSummary | None = None


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 500
    grad_tol: float = 1e-8
    restarts: int = 8
    seed: int = 0
    theta_scale: float = 5.0


@dataclass(frozen=True)
class ObjectiveEval:
    value: float
    grad_theta: np.ndarray                                   # (3,)
    grad_alpha: tuple[tuple[np.ndarray, np.ndarray], ...]    # per set: (d_alpha1, d_alpha0)


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    return np.clip(expit(z), _SIG_EPS, 1.0 - _SIG_EPS)


def weight(params: ReweightParams, s: ScoredSample) -> float:
    """Bounded sigmoid weight of one sample, strictly inside (c_min, c_max)."""
    z = params.theta_f * s.s_f + params.theta_p * s.s_p + params.theta_b
    return float(params.c_min + (params.c_max - params.c_min) * sigmoid(z))


def weights_array(params: ReweightParams, s_f: np.ndarray, s_p: np.ndarray) -> np.ndarray:
    z = params.theta_f * s_f + params.theta_p * s_p + params.theta_b
    return params.c_min + (params.c_max - params.c_min) * sigmoid(z)


def weights_for(params: ReweightParams, scores: Sequence[ScoredSample]) -> dict[str, float]:
    s_f = np.array([s.s_f for s in scores])
    s_p = np.array([s.s_p for s in scores])
    w = weights_array(params, s_f, s_p)
    return {s.sample_id: float(x) for s, x in zip(scores, w)}


# -- internal problem representation --


@dataclass(frozen=True)
class _SetData:
    chi: np.ndarray  # (K, N)
    v: np.ndarray    # (K, d)
    s_f: np.ndarray  # (N,)
    s_p: np.ndarray  # (N,)


def _as_matrices(data: EvalMatrix | Sequence[EvalMatrix]) -> tuple[EvalMatrix, ...]:
    if isinstance(data, EvalMatrix):
        return (data,)
    matrices = tuple(data)
    if not matrices:
        raise ValueError("no eval matrices given")
    return matrices


def _aligned(matrix: EvalMatrix, scores: Sequence[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    by_id = {s.sample_id: s for s in scores}
    missing = [sid for sid in matrix.sample_ids if sid not in by_id]
    if missing:
        raise ValueError(f"scores missing for sample ids: {missing[:5]}")
    s_f = np.array([by_id[sid].s_f for sid in matrix.sample_ids])
    s_p = np.array([by_id[sid].s_p for sid in matrix.sample_ids])
    return s_f, s_p


def _problem(
    data: EvalMatrix | Sequence[EvalMatrix],
    scores: Sequence[ScoredSample],
    min_models: int = 2,
) -> list[_SetData]:
    sets = []
    for m in _as_matrices(data):
        if m.n_models < min_models:
            raise ValueError(f"need at least {min_models} models per metric set, got {m.n_models}")
        s_f, s_p = _aligned(m, scores)
        sets.append(_SetData(chi=m.chi, v=m.live_metrics, s_f=s_f, s_p=s_p))
    return sets


def _eval_set(
    theta: np.ndarray,
    alpha_1: np.ndarray,
    alpha_0: np.ndarray,
    st: _SetData,
    c_min: float,
    c_max: float,
    lam: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Objective value and gradients for one metric set."""
    n = st.chi.shape[1]
    z = theta[0] * st.s_f + theta[1] * st.s_p + theta[2]
    sig = sigmoid(z)
    w = c_min + (c_max - c_min) * sig
    s = st.chi @ w / n                               # (K,)
    resid = np.outer(s, alpha_1) + alpha_0 - st.v    # (K, d)
    wbar = float(w.mean())
    value = float((resid * resid).sum() + lam * (wbar - 1.0) ** 2)

    d_resid_ds = 2.0 * (resid @ alpha_1)             # (K,)
    g_w = (st.chi.T @ d_resid_ds) / n + 2.0 * lam * (wbar - 1.0) / n
    g_z = g_w * (c_max - c_min) * sig * (1.0 - sig)
    grad_theta = np.array([g_z @ st.s_f, g_z @ st.s_p, g_z.sum()])
    grad_a1 = 2.0 * (resid * s[:, None]).sum(axis=0)
    grad_a0 = 2.0 * resid.sum(axis=0)
    return value, grad_theta, grad_a1, grad_a0


def objective(
    params: ReweightParams,
    alphas: RegressionParams | Sequence[RegressionParams],
    data: EvalMatrix | Sequence[EvalMatrix],
    scores: Sequence[ScoredSample],
) -> ObjectiveEval:
    """Value and analytic gradients of the joint objective (summed over sets)."""
    alpha_list = [alphas] if isinstance(alphas, RegressionParams) else list(alphas)
    sets = _problem(data, scores)
    if len(alpha_list) != len(sets):
        raise ValueError(f"got {len(alpha_list)} regressions for {len(sets)} metric sets")
    theta = params.theta
    value = 0.0
    grad_theta = np.zeros(3)
    grad_alpha = []
    for st, a in zip(sets, alpha_list):
        if a.alpha_1.shape[0] != st.v.shape[1]:
            raise ValueError("regression dimension does not match metric dimension")
        val, g_t, g_a1, g_a0 = _eval_set(
            theta, a.alpha_1, a.alpha_0, st, params.c_min, params.c_max, params.lam
        )
        value += val
        grad_theta += g_t
        grad_alpha.append((g_a1, g_a0))
    return ObjectiveEval(value=value, grad_theta=grad_theta, grad_alpha=tuple(grad_alpha))


def _closed_form_alpha(s: np.ndarray, v: np.ndarray) -> RegressionParams:
    """Least-squares alpha for fixed per-model offline metrics s (K,) vs v (K, d).

    All-equal s is degenerate: the slope is set to 0 and the intercept to the
    metric mean, and the result is flagged.
    """
    s_mean = float(s.mean())
    v_mean = v.mean(axis=0)
    var = float(((s - s_mean) ** 2).sum())
    if var < 1e-300 or not np.isfinite(var):
        return RegressionParams(
            alpha_1=np.zeros(v.shape[1]), alpha_0=v_mean.copy(), degenerate=True
        )
    cov = (s - s_mean) @ (v - v_mean)  # (d,)
    alpha_1 = cov / var
    alpha_0 = v_mean - alpha_1 * s_mean
    return RegressionParams(alpha_1=alpha_1, alpha_0=alpha_0)


def _set_metric(w: np.ndarray, st: _SetData) -> np.ndarray:
    return st.chi @ w / st.chi.shape[1]


def _residual_with_weights(w_by_set: list[np.ndarray], sets: list[_SetData]) -> tuple[float, list[RegressionParams]]:
    total = 0.0
    alphas = []
    for w, st in zip(w_by_set, sets):
        s = _set_metric(w, st)
        a = _closed_form_alpha(s, st.v)
        resid = np.outer(s, a.alpha_1) + a.alpha_0 - st.v
        total += float((resid * resid).sum())
        alphas.append(a)
    return total, alphas


def refit_regression_only(
    fixed: ReweightParams,
    data: EvalMatrix | Sequence[EvalMatrix],
    scores: Sequence[ScoredSample],
) -> tuple[tuple[RegressionParams, ...], float]:
    """Closed-form regression at a fixed reweighting model; returns (alphas, residual)."""
    sets = _problem(data, scores, min_models=2)
    w_by_set = [weights_array(fixed, st.s_f, st.s_p) for st in sets]
    residual, alphas = _residual_with_weights(w_by_set, sets)
    return tuple(alphas), residual


def baseline_residuals(
    data: EvalMatrix | Sequence[EvalMatrix],
    scores: Sequence[ScoredSample],
) -> dict[str, float]:
    """Regression residuals for the two fixed-weight baselines.

    "uniform" is w == 1 for every sample; "heuristic" is the binary filter
    rule. If the heuristic zeroes out every sample the regression degenerates
    to the metric mean (flagged inside _closed_form_alpha).
    """
    sets = _problem(data, scores)
    uniform, _ = _residual_with_weights([np.ones(st.chi.shape[1]) for st in sets], sets)
    heuristic_w = []
    for st in sets:
        hw = np.array(
            [
                heuristic_weight(ScoredSample(sample_id=str(i), s_p=p, s_f=f))
                for i, (p, f) in enumerate(zip(st.s_p, st.s_f))
            ]
        )
        heuristic_w.append(hw)
    heuristic, _ = _residual_with_weights(heuristic_w, sets)
    return {"uniform": uniform, "heuristic": heuristic}


def _pack(theta: np.ndarray, alphas: Sequence[RegressionParams]) -> np.ndarray:
    parts = [theta]
    for a in alphas:
        parts.extend([a.alpha_1, a.alpha_0])
    return np.concatenate(parts)


def _unpack(x: np.ndarray, dims: Sequence[int]) -> tuple[np.ndarray, list[RegressionParams]]:
    theta = x[:3]
    alphas = []
    off = 3
    for d in dims:
        alphas.append(RegressionParams(alpha_1=x[off : off + d], alpha_0=x[off + d : off + 2 * d]))
        off += 2 * d
    return theta, alphas


class _NonFiniteObjective(RuntimeError):
    pass


def calibrate_bias(
    theta_f: float,
    theta_p: float,
    s_f: np.ndarray,
    s_p: np.ndarray,
    c_min: float = 0.01,
    c_max: float = 2.0,
    target: float = 1.0,
) -> float:
    """Bias term at which the mean weight over the given scores equals target.

    The mean weight is monotone increasing in the bias, so this is a plain
    root find on a widening bracket.
    """
    if not c_min < target < c_max:
        raise ValueError(f"target mean weight must lie inside ({c_min}, {c_max})")
    from scipy.optimize import brentq

    lin = theta_f * s_f + theta_p * s_p

    def gap(b: float) -> float:
        return float((c_min + (c_max - c_min) * sigmoid(lin + b)).mean()) - target

    lo, hi = -80.0, 80.0
    while gap(lo) > 0 and lo > -1e6:
        lo *= 2.0
    while gap(hi) < 0 and hi < 1e6:
        hi *= 2.0
    return float(brentq(gap, lo, hi, xtol=1e-13))


def fit(
    data: EvalMatrix | Sequence[EvalMatrix],
    scores: Sequence[ScoredSample],
    init: ReweightParams | None = None,
    opts: FitOptions | None = None,
    val_data: EvalMatrix | Sequence[EvalMatrix] | None = None,
    with_cv: bool = False,
) -> ReweightFit:
    """Joint minimization over (theta, alpha), best of seeded restarts.

    Each restart runs quasi-Newton on theta alone with the regression solved
    in closed form at every step (variable projection: the regression
    subproblem is exactly separable), then a joint quasi-Newton polish over
    (theta, alpha) from the best point. Restart inits: the caller's theta (or
    zero), the exact uniform-weight theta, four sign-pattern directions with
    the bias calibrated to mean weight 1, and N(0, theta_scale^2) draws.

    The uniform-weight init guarantees the fitted training residual never
    lands above the uniform baseline.

    val_data, when given, is scored by held-one-out regression-only refits at
    the fitted theta. with_cv runs full held-one-out cross validation on the
    first metric set.
    """
    params = init if init is not None else ReweightParams()
    options = opts if opts is not None else FitOptions()
    matrices = _as_matrices(data)
    sets = _problem(matrices, scores)
    dims = [st.v.shape[1] for st in sets]
    c_min, c_max, lam = params.c_min, params.c_max, params.lam
    lbfgs_options = {
        "maxiter": options.max_iters,
        "maxcor": 10,
        "gtol": options.grad_tol,
        "ftol": 1e-18,
    }

    def closed_alphas(theta: np.ndarray) -> list[RegressionParams]:
        out = []
        for st in sets:
            w = c_min + (c_max - c_min) * sigmoid(theta[0] * st.s_f + theta[1] * st.s_p + theta[2])
            out.append(_closed_form_alpha(_set_metric(w, st), st.v))
        return out

    def joint_fun(x: np.ndarray) -> tuple[float, np.ndarray]:
        theta, alphas = _unpack(x, dims)
        value = 0.0
        grad_theta = np.zeros(3)
        grads = []
        for st, a in zip(sets, alphas):
            val, g_t, g_a1, g_a0 = _eval_set(theta, a.alpha_1, a.alpha_0, st, c_min, c_max, lam)
            value += val
            grad_theta += g_t
            grads.extend([g_a1, g_a0])
        if not np.isfinite(value):
            raise _NonFiniteObjective
        return value, np.concatenate([grad_theta, *grads])

    def projected_fun(theta: np.ndarray) -> tuple[float, np.ndarray]:
        # envelope theorem: d/dtheta of min_alpha f equals the partial in
        # theta at the solved alpha, so the projected gradient is exact
        value = 0.0
        grad_theta = np.zeros(3)
        for st, a in zip(sets, closed_alphas(theta)):
            val, g_t, _, _ = _eval_set(theta, a.alpha_1, a.alpha_0, st, c_min, c_max, lam)
            value += val
            grad_theta += g_t
        if not np.isfinite(value):
            raise _NonFiniteObjective
        return value, grad_theta

    rng = np.random.default_rng(options.seed)
    scale = options.theta_scale
    theta_inits = [params.theta, np.array(ReweightParams.uniform_theta(c_min, c_max))]
    for tf, tp in ((scale, -scale), (-scale, scale), (scale, scale), (-scale, -scale)):
        try:
            b = calibrate_bias(tf, tp, sets[0].s_f, sets[0].s_p, c_min, c_max)
        except ValueError:
            b = 0.0
        theta_inits.append(np.array([tf, tp, b]))
    theta_inits = theta_inits[: max(options.restarts, 2)]
    while len(theta_inits) < max(options.restarts, 2):
        theta_inits.append(rng.normal(0.0, scale, size=3))

    best_theta: np.ndarray | None = None
    best_val = np.inf
    failures = 0
    for theta0 in theta_inits:
        shrink = 1.0
        for _attempt in range(3):
            try:
                res = minimize(
                    projected_fun,
                    theta0 * shrink,
                    jac=True,
                    method="L-BFGS-B",
                    options=lbfgs_options,
                )
            except _NonFiniteObjective:
                shrink *= 0.5  # retry this init with a halved step
                continue
            if np.isfinite(res.fun) and res.fun < best_val:
                best_val, best_theta = float(res.fun), res.x.copy()
            break
        else:
            failures += 1
    if best_theta is None:
        raise RuntimeError(f"fit failed: all {len(theta_inits)} restarts diverged")

    # joint polish over (theta, alpha) from the best projected solution
    x0 = _pack(best_theta, closed_alphas(best_theta))
    best_x = x0
    try:
        res = minimize(joint_fun, x0, jac=True, method="L-BFGS-B", options=lbfgs_options)
        if np.isfinite(res.fun) and res.fun <= best_val:
            best_val, best_x = float(res.fun), res.x
    except _NonFiniteObjective:
        pass
    theta_hat, _ = _unpack(best_x, dims)
    # final alpha always from the closed form at theta_hat (never worse)
    alpha_hat = closed_alphas(theta_hat)
    best_val = min(best_val, joint_fun(_pack(theta_hat, alpha_hat))[0])
    fitted = params.with_theta(theta_hat)
    residual_train = 0.0
    for st, a in zip(sets, alpha_hat):
        w = weights_array(fitted, st.s_f, st.s_p)
        resid = np.outer(_set_metric(w, st), a.alpha_1) + a.alpha_0 - st.v
        residual_train += float((resid * resid).sum())
    baselines = baseline_residuals(matrices, scores)
    all_w = np.concatenate([weights_array(fitted, st.s_f, st.s_p) for st in sets])
    containment = residual_train <= baselines["uniform"] + 1e-9

    cv = holdout_cv(matrices[0], scores, init=params, opts=options) if with_cv else None
    val_summary = None
    if val_data is not None:
        val_summary = _validation_residuals(fitted, val_data, scores)

    return ReweightFit(
        params=fitted,
        regression=tuple(alpha_hat),
        objective_train=best_val,
        residual_train=residual_train,
        mean_weight=float(all_w.mean()),
        baseline_residuals=baselines,
        containment_ok=bool(containment),
        restarts_run=len(theta_inits) - failures,
        residual_cv=cv,
        residual_val=val_summary,
    )


def holdout_cv(
    data: EvalMatrix,
    scores: Sequence[ScoredSample],
    init: ReweightParams | None = None,
    opts: FitOptions | None = None,
) -> ResidualSummary:
    """Held-one-out CV over models: fit on K-1, report the squared residual on the held-out one."""
    matrix = data
    if not isinstance(matrix, EvalMatrix):
        raise TypeError("holdout_cv operates on a single eval matrix")
    if matrix.n_models < 3:
        raise ValueError(f"holdout_cv needs at least 3 models, got {matrix.n_models}")
    params = init if init is not None else ReweightParams()
    residuals = []
    for j in range(matrix.n_models):
        sub = matrix.without_model(j)
        f = fit(sub, scores, init=params, opts=opts)
        s_f, s_p = _aligned(matrix, scores)
        w = weights_array(f.params, s_f, s_p)
        s_j = float(matrix.chi[j] @ w / matrix.n_samples)
        pred = f.regression[0].alpha_1 * s_j + f.regression[0].alpha_0
        err = pred - matrix.live_metrics[j]
        residuals.append(float(err @ err))
    arr = np.array(residuals)
    return ResidualSummary(
        per_holdout=tuple(residuals), mean=float(arr.mean()), std=float(arr.std())
    )


def _validation_residuals(
    fitted: ReweightParams,
    val_data: EvalMatrix | Sequence[EvalMatrix],
    scores: Sequence[ScoredSample],
) -> ResidualSummary:
    """Held-one-out on a validation set, refitting only regression at fixed theta."""
    residuals: list[float] = []
    for matrix in _as_matrices(val_data):
        s_f, s_p = _aligned(matrix, scores)
        w = weights_array(fitted, s_f, s_p)
        s_all = matrix.chi @ w / matrix.n_samples
        for j in range(matrix.n_models):
            keep = [i for i in range(matrix.n_models) if i != j]
            a = _closed_form_alpha(s_all[keep], matrix.live_metrics[keep])
            err = a.alpha_1 * s_all[j] + a.alpha_0 - matrix.live_metrics[j]
            residuals.append(float(err @ err))
    arr = np.array(residuals)
    return ResidualSummary(
        per_holdout=tuple(residuals), mean=float(arr.mean()), std=float(arr.std())
    )
