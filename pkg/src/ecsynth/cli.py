"""Command-line entry point: every stage as a subcommand plus a pipeline driver.

The `run` subcommand executes stages in dependency order from one strict
JSON config (unknown keys are rejected up front). Every stage writes its
artifact into the configured workdir along with a run-log record carrying
the seed, config hash, input/output hashes, and counts, so a rerun with the
same config produces byte-identical artifacts.

Exit codes: 0 success, 1 validation error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cluster as cluster_mod
from . import demo as demo_mod
from . import evaluate as eval_mod
from . import grammar as grammar_mod
from . import mix as mix_mod
from . import records
from . import reweight as reweight_mod
from . import scoring as scoring_mod
from . import simbench as simbench_mod
from . import typo as typo_mod
from .util import config_hash, derive_seed, file_sha256

TOKEN_ENV_VAR = "ECSYNTH_TOKEN"

STAGE_ORDER = (
    "cluster",
    "sample",
    "inject-grammar",
    "inject-typos",
    "score",
    "simbench",
    "fit-reweight",
    "filter",
    "mix",
    "plan",
    "evaluate",
)


class ConfigError(ValueError):
    """Invalid pipeline configuration; reported before any stage runs."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


# -- strict config schema --


@dataclass(frozen=True)
class PathsConfig:
    corpus: str
    domain_corpus: str
    original_dataset: str
    workdir: str


@dataclass(frozen=True)
class ClusterSection:
    k: int = 50
    embed_dim: int = 64
    max_iters: int = 50
    tol: float = 1e-8


@dataclass(frozen=True)
class SampleSection:
    per_cluster: int = 10


@dataclass(frozen=True)
class GrammarSection:
    client: str = "mock"
    failure_rate: float = 0.4
    concurrency: int = 1
    endpoint: str = ""
    timeout: float = 30.0
    max_retries: int = 2

    def __post_init__(self) -> None:
        if self.client not in ("mock", "http"):
            raise ConfigError(f"grammar.client must be mock or http, got {self.client!r}")
        if self.client == "http" and not self.endpoint:
            raise ConfigError("grammar.client http requires grammar.endpoint")


@dataclass(frozen=True)
class TypoSection:
    p_transpose: float = 0.01
    p_omit: float = 0.015
    p_repeat: float = 0.01
    p_spatial: float = 0.02
    max_errors: int = 3
    layout: str = ""


@dataclass(frozen=True)
class ScoringSection:
    order: int = 3
    delta: float = 0.1
    import_scores: str = ""


@dataclass(frozen=True)
class SimbenchSection:
    n_models: int = 8
    n_metrics: int = 2
    noise_sigma: float = 1e-3
    top3_rescue: float = 0.15


@dataclass(frozen=True)
class ReweightSection:
    c_min: float = 0.01
    c_max: float = 2.0
    lam: float = 0.01
    restarts: int = 8
    max_iters: int = 500
    grad_tol: float = 1e-8


@dataclass(frozen=True)
class MixSection:
    ratio: tuple[int, int] = (1, 4)
    filter_threshold: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "ratio", tuple(int(x) for x in self.ratio))
        if len(self.ratio) != 2:
            raise ConfigError(f"mix.ratio must have two components, got {self.ratio}")


@dataclass(frozen=True)
class EvalSection:
    judge: str = "normalized"
    judge_endpoint: str = ""
    judge_prompt: str = ""

    def __post_init__(self) -> None:
        if self.judge not in ("exact", "normalized", "http"):
            raise ConfigError(f"eval.judge must be exact, normalized or http, got {self.judge!r}")


@dataclass(frozen=True)
class PlanSection:
    strategy: str = "ContMixFil"

    def __post_init__(self) -> None:
        if self.strategy not in mix_mod.STRATEGIES:
            raise ConfigError(f"plan.strategy must be one of {mix_mod.STRATEGIES}")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    paths: PathsConfig
    cluster: ClusterSection = field(default_factory=ClusterSection)
    sample: SampleSection = field(default_factory=SampleSection)
    grammar: GrammarSection = field(default_factory=GrammarSection)
    typo: TypoSection = field(default_factory=TypoSection)
    scoring: ScoringSection = field(default_factory=ScoringSection)
    simbench: SimbenchSection = field(default_factory=SimbenchSection)
    reweight: ReweightSection = field(default_factory=ReweightSection)
    mix: MixSection = field(default_factory=MixSection)
    eval: EvalSection = field(default_factory=EvalSection)
    plan: PlanSection = field(default_factory=PlanSection)


_SECTION_TYPES = {
    "paths": PathsConfig,
    "cluster": ClusterSection,
    "sample": SampleSection,
    "grammar": GrammarSection,
    "typo": TypoSection,
    "scoring": ScoringSection,
    "simbench": SimbenchSection,
    "reweight": ReweightSection,
    "mix": MixSection,
    "eval": EvalSection,
    "plan": PlanSection,
}

# config files say "lambda"; the dataclass field is lam
_KEY_ALIASES = {"reweight": {"lambda": "lam"}}


def _load_section(name: str, cls, obj: object):
    if not isinstance(obj, dict):
        raise ConfigError(f"section {name!r} must be an object")
    aliases = _KEY_ALIASES.get(name, {})
    obj = {aliases.get(k, k): v for k, v in obj.items()}
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"section {name!r}: unknown keys {unknown}")
    if name == "mix" and "ratio" in obj:
        obj = dict(obj, ratio=tuple(obj["ratio"]))
    try:
        return cls(**obj)
    except TypeError as e:
        raise ConfigError(f"section {name!r}: {e}") from e


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a pipeline config; any unknown key is an error."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {"seed"} | set(_SECTION_TYPES)
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {unknown}")
    if "seed" not in obj:
        raise ConfigError(f"{path}: missing required key 'seed'")
    if "paths" not in obj:
        raise ConfigError(f"{path}: missing required section 'paths'")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        if name in obj:
            sections[name] = _load_section(name, cls, obj[name])
    try:
        return PipelineConfig(seed=int(obj["seed"]), **sections)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


# -- pipeline stages --


@dataclass
class RunContext:
    config: PipelineConfig
    config_dir: Path
    workdir: Path
    cfg_hash: str

    def path(self, configured: str) -> Path:
        """Input paths in the config resolve relative to the config file."""
        p = Path(configured)
        return p if p.is_absolute() else self.config_dir / p

    def artifact(self, name: str) -> Path:
        return self.workdir / name

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.config.seed, stage)

    def log(self, stage: str, inputs: Sequence[Path], outputs: Sequence[Path], counts: dict) -> None:
        logdir = self.workdir / "runlog"
        logdir.mkdir(parents=True, exist_ok=True)
        record = {
            "stage": stage,
            "seed": self.stage_seed(stage),
            "config_hash": self.cfg_hash,
            "inputs": {p.name: file_sha256(p) for p in inputs},
            "outputs": {p.name: file_sha256(p) for p in outputs},
            "counts": counts,
        }
        with open(logdir / f"{stage}.json", "w", encoding="utf-8") as f:
            json.dump(record, f, indent=2, sort_keys=True)
            f.write("\n")


def _write_clusters(model: cluster_mod.ClusterModel, docs, path: Path) -> None:
    by_id = {d.doc_id: d for d in docs}
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "k": model.k,
            "objective": model.objective,
            "sizes": [int(s) for s in model.sizes],
            "centroids": [[float(v) for v in c] for c in model.centroids],
        }
        f.write(json.dumps(header, separators=(",", ":")) + "\n")
        for doc_id, c in model.assignments.items():
            diff = by_id[doc_id].vector - model.centroids[c]
            rec = {"doc_id": doc_id, "cluster": int(c), "distance": float(diff @ diff)}
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_clusters(path: str | Path) -> cluster_mod.ClusterModel:
    with open(path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline())
        assignments = {}
        for line in f:
            if line.strip():
                rec = json.loads(line)
                assignments[rec["doc_id"]] = int(rec["cluster"])
    centroids = np.array(header["centroids"], dtype=np.float64)
    return cluster_mod.ClusterModel(
        centroids=centroids,
        assignments=assignments,
        sizes=np.array(header["sizes"], dtype=np.int64),
        objective=float(header["objective"]),
    )


def _stage_cluster(ctx: RunContext) -> None:
    cfg = ctx.config
    corpus_path = ctx.path(cfg.paths.corpus)
    docs = records.read_corpus(corpus_path)
    embedded = cluster_mod.hash_embed(
        docs, cfg.cluster.embed_dim, seed=ctx.stage_seed("cluster")
    )
    model = cluster_mod.kmeans(
        embedded,
        k=cfg.cluster.k,
        seed=ctx.stage_seed("cluster"),
        max_iters=cfg.cluster.max_iters,
        tol=cfg.cluster.tol,
    )
    out = ctx.artifact("clusters.jsonl")
    _write_clusters(model, embedded, out)
    stats = cluster_mod.cluster_stats(model)
    ctx.log(
        "cluster",
        [corpus_path],
        [out],
        {
            "docs": len(docs),
            "k": model.k,
            "objective": model.objective,
            "mean_size": stats.mean_size,
            "std_size": stats.std_size,
        },
    )


def _stage_sample(ctx: RunContext) -> None:
    cfg = ctx.config
    corpus_path = ctx.path(cfg.paths.corpus)
    clusters_path = ctx.artifact("clusters.jsonl")
    docs = {d.id: d for d in records.read_corpus(corpus_path)}
    model = read_clusters(clusters_path)
    ids = cluster_mod.quota_sample(model, cfg.sample.per_cluster, seed=ctx.stage_seed("sample"))
    sampled = [docs[i] for i in ids]
    out = ctx.artifact("sampled.jsonl")
    records.write_corpus(sampled, out)
    ctx.log("sample", [corpus_path, clusters_path], [out], {"sampled": len(sampled)})


def _make_injector(cfg: PipelineConfig, seed: int) -> grammar_mod.InjectorClient:
    g = cfg.grammar
    if g.client == "mock":
        return grammar_mod.MockInjector(failure_rate=g.failure_rate, seed=seed)
    return grammar_mod.HttpInjector(
        endpoint=g.endpoint,
        token=os.environ.get(TOKEN_ENV_VAR, ""),
        timeout=g.timeout,
        max_retries=g.max_retries,
    )


def _stage_inject_grammar(ctx: RunContext) -> None:
    cfg = ctx.config
    sampled_path = ctx.artifact("sampled.jsonl")
    docs = records.read_corpus(sampled_path)
    client = _make_injector(cfg, seed=ctx.stage_seed("inject-grammar"))
    run = grammar_mod.inject_corpus(docs, client, concurrency=cfg.grammar.concurrency)
    result = grammar_mod.roundtrip_filter(list(run.pairs))
    out = ctx.artifact("ec_grammar.jsonl")
    records.write_ec_dataset(list(result.kept), out)
    ctx.log(
        "inject-grammar",
        [sampled_path],
        [out],
        {
            "injected": len(run.pairs),
            "kept": len(result.kept),
            "dropped": result.dropped_count,
            "failed": run.failed,
            "skipped": run.skipped,
        },
    )


def _keyboard(cfg: PipelineConfig, ctx: RunContext) -> typo_mod.KeyboardModel:
    if cfg.typo.layout:
        return typo_mod.load_keyboard(ctx.path(cfg.typo.layout))
    return typo_mod.QWERTY


def _stage_inject_typos(ctx: RunContext) -> None:
    cfg = ctx.config
    in_path = ctx.artifact("ec_grammar.jsonl")
    examples = records.read_ec_dataset(in_path)
    typo_cfg = typo_mod.TypoConfig(
        p_transpose=cfg.typo.p_transpose,
        p_omit=cfg.typo.p_omit,
        p_repeat=cfg.typo.p_repeat,
        p_spatial=cfg.typo.p_spatial,
        max_errors_per_example=cfg.typo.max_errors,
        seed=ctx.stage_seed("inject-typos"),
    )
    corrupted = typo_mod.corrupt_dataset(examples, typo_cfg, _keyboard(cfg, ctx))
    out = ctx.artifact("ec_synth.jsonl")
    records.write_ec_dataset(corrupted, out)
    ctx.log("inject-typos", [in_path], [out], {"examples": len(corrupted)})


def _stage_score(ctx: RunContext) -> None:
    cfg = ctx.config
    ec_path = ctx.artifact("ec_synth.jsonl")
    examples = records.read_ec_dataset(ec_path)
    out = ctx.artifact("scores.jsonl")
    if cfg.scoring.import_scores:
        imported = records.read_scores(ctx.path(cfg.scoring.import_scores))
        by_id = {s.sample_id: s for s in imported}
        missing = [ex.id for ex in examples if ex.id not in by_id]
        if missing:
            raise ValueError(f"imported scores missing sample ids: {missing[:5]}")
        scores = [by_id[ex.id] for ex in examples]
        inputs = [ec_path, ctx.path(cfg.scoring.import_scores)]
    else:
        public_path = ctx.path(cfg.paths.corpus)
        domain_path = ctx.path(cfg.paths.domain_corpus)
        public = scoring_mod.train_ngram(
            records.read_corpus(public_path), cfg.scoring.order, cfg.scoring.delta
        )
        domain = scoring_mod.train_ngram(
            records.read_corpus(domain_path), cfg.scoring.order, cfg.scoring.delta
        )
        scores = scoring_mod.score_dataset(examples, public, domain)
        inputs = [ec_path, public_path, domain_path]
    records.write_scores(scores, out)
    ctx.log("score", inputs, [out], {"scored": len(scores)})


def _judge(cfg: PipelineConfig) -> eval_mod.Judge:
    if cfg.eval.judge == "exact":
        return eval_mod.ExactJudge()
    if cfg.eval.judge == "normalized":
        return eval_mod.NormalizedJudge()
    return eval_mod.ExternalJudge(
        endpoint=cfg.eval.judge_endpoint,
        prompt_template=cfg.eval.judge_prompt,
        token=os.environ.get(TOKEN_ENV_VAR, ""),
    )


def _stage_simbench(ctx: RunContext) -> None:
    cfg = ctx.config
    ec_path = ctx.artifact("ec_synth.jsonl")
    scores_path = ctx.artifact("scores.jsonl")
    examples = records.read_ec_dataset(ec_path)
    scores = records.read_scores(scores_path)
    spec = simbench_mod.DeploymentSimSpec(
        n_models=cfg.simbench.n_models,
        n_metrics=cfg.simbench.n_metrics,
        noise_sigma=cfg.simbench.noise_sigma,
        top3_rescue=cfg.simbench.top3_rescue,
        c_min=cfg.reweight.c_min,
        c_max=cfg.reweight.c_max,
        seed=ctx.stage_seed("simbench"),
    )
    sim = simbench_mod.simulate_deployments(examples, scores, spec, judge=_judge(cfg))
    outdir = ctx.artifact("outputs")
    outdir.mkdir(parents=True, exist_ok=True)
    out_files = []
    for o in sim.outputs:
        p = outdir / f"{o.model_id}.jsonl"
        eval_mod.write_outputs(o, p)
        out_files.append(p)
    matrix_path = ctx.artifact("eval_matrix.jsonl")
    records.write_eval_matrix(sim.matrix, matrix_path)
    planted_path = ctx.artifact("planted.json")
    with open(planted_path, "w", encoding="utf-8") as f:
        json.dump(
            {
                "theta": [sim.params.theta_f, sim.params.theta_p, sim.params.theta_b],
                "alpha_1": [float(x) for x in sim.alpha[0]],
                "alpha_0": [float(x) for x in sim.alpha[1]],
                "noise_floor": sim.noise_floor,
                "mean_weight": float(sim.weights.mean()),
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    ctx.log(
        "simbench",
        [ec_path, scores_path],
        out_files + [matrix_path, planted_path],
        {"models": len(sim.outputs), "noise_floor": sim.noise_floor},
    )


def _fit_report_text(fit: reweight_mod.ReweightFit) -> str:
    lines = ["reweighting fit report", ""]
    p = fit.params
    lines.append(
        f"theta: (theta_f={p.theta_f:.6g}, theta_p={p.theta_p:.6g}, theta_b={p.theta_b:.6g})"
    )
    lines.append(f"bounds: c_min={p.c_min}, c_max={p.c_max}, lambda={p.lam}")
    for i, a in enumerate(fit.regression):
        a1 = ", ".join(f"{x:.6g}" for x in a.alpha_1)
        a0 = ", ".join(f"{x:.6g}" for x in a.alpha_0)
        flag = " (degenerate)" if a.degenerate else ""
        lines.append(f"alpha set {i}: alpha_1=[{a1}] alpha_0=[{a0}]{flag}")
    lines.append(f"mean weight: {fit.mean_weight:.6f}")
    lines.append("")
    lines.append(f"{'residual':<10}{'w=1':>14}{'heuristic':>14}{'fitted':>14}")
    b = fit.baseline_residuals
    lines.append(
        f"{'train':<10}{b['uniform']:>14.4e}{b['heuristic']:>14.4e}{fit.residual_train:>14.4e}"
    )
    if fit.residual_cv is not None:
        cv = fit.residual_cv
        lines.append(f"{'crossval':<10}{'':>14}{'':>14}{cv.mean:>10.4e} ± {cv.std:.2e}")
    if fit.residual_val is not None:
        rv = fit.residual_val
        lines.append(f"{'val':<10}{'':>14}{'':>14}{rv.mean:>10.4e} ± {rv.std:.2e}")
    lines.append("")
    lines.append(f"containment (fitted <= uniform + 1e-9): {fit.containment_ok}")
    return "\n".join(lines) + "\n"


def _fit_report_json(fit: reweight_mod.ReweightFit) -> dict:
    out = {
        "theta": [fit.params.theta_f, fit.params.theta_p, fit.params.theta_b],
        "c_min": fit.params.c_min,
        "c_max": fit.params.c_max,
        "lambda": fit.params.lam,
        "regression": [
            {
                "alpha_1": [float(x) for x in a.alpha_1],
                "alpha_0": [float(x) for x in a.alpha_0],
                "degenerate": a.degenerate,
            }
            for a in fit.regression
        ],
        "objective_train": fit.objective_train,
        "residual_train": fit.residual_train,
        "mean_weight": fit.mean_weight,
        "baselines": fit.baseline_residuals,
        "containment_ok": fit.containment_ok,
    }
    if fit.residual_cv is not None:
        out["residual_cv"] = {
            "per_holdout": list(fit.residual_cv.per_holdout),
            "mean": fit.residual_cv.mean,
            "std": fit.residual_cv.std,
        }
    if fit.residual_val is not None:
        out["residual_val"] = {
            "per_holdout": list(fit.residual_val.per_holdout),
            "mean": fit.residual_val.mean,
            "std": fit.residual_val.std,
        }
    return out


def _stage_fit_reweight(ctx: RunContext) -> None:
    cfg = ctx.config
    matrix_path = ctx.artifact("eval_matrix.jsonl")
    scores_path = ctx.artifact("scores.jsonl")
    ec_path = ctx.artifact("ec_synth.jsonl")
    matrix = records.read_eval_matrix(matrix_path)
    scores = records.read_scores(scores_path)
    examples = records.read_ec_dataset(ec_path)
    init = reweight_mod.ReweightParams(
        c_min=cfg.reweight.c_min, c_max=cfg.reweight.c_max, lam=cfg.reweight.lam
    )
    opts = reweight_mod.FitOptions(
        max_iters=cfg.reweight.max_iters,
        grad_tol=cfg.reweight.grad_tol,
        restarts=cfg.reweight.restarts,
        seed=ctx.stage_seed("fit-reweight"),
    )
    fit = reweight_mod.fit(
        matrix, scores, init=init, opts=opts, with_cv=matrix.n_models >= 3
    )
    report_json = ctx.artifact("fit_report.json")
    with open(report_json, "w", encoding="utf-8") as f:
        json.dump(_fit_report_json(fit), f, indent=2, sort_keys=True)
        f.write("\n")
    report_txt = ctx.artifact("fit_report.txt")
    with open(report_txt, "w", encoding="utf-8") as f:
        f.write(_fit_report_text(fit))
    weights = reweight_mod.weights_for(fit.params, scores)
    weights_path = ctx.artifact("weights.jsonl")
    records.write_weights(weights, weights_path)
    weighted = [ex.with_weight(weights[ex.id]) for ex in examples]
    weighted_path = ctx.artifact("ec_weighted.jsonl")
    records.write_ec_dataset(weighted, weighted_path)
    ctx.log(
        "fit-reweight",
        [matrix_path, scores_path, ec_path],
        [report_json, report_txt, weights_path, weighted_path],
        {
            "residual_train": fit.residual_train,
            "uniform": fit.baseline_residuals["uniform"],
            "heuristic": fit.baseline_residuals["heuristic"],
            "mean_weight": fit.mean_weight,
        },
    )


def _stage_filter(ctx: RunContext) -> None:
    cfg = ctx.config
    in_path = ctx.artifact("ec_weighted.jsonl")
    examples = records.read_ec_dataset(in_path)
    kept = mix_mod.filter_by_weight(examples, cfg.mix.filter_threshold)
    out = ctx.artifact("ec_filtered.jsonl")
    records.write_ec_dataset(kept, out)
    ctx.log(
        "filter",
        [in_path],
        [out],
        {
            "input": len(examples),
            "kept": len(kept),
            "threshold": cfg.mix.filter_threshold,
            "retained_fraction": len(kept) / len(examples) if examples else 0.0,
        },
    )


def _stage_mix(ctx: RunContext) -> None:
    cfg = ctx.config
    original_path = ctx.path(cfg.paths.original_dataset)
    original = records.read_ec_dataset(original_path)
    spec = mix_mod.MixSpec(
        ratio=cfg.mix.ratio,
        filter_threshold=cfg.mix.filter_threshold,
        seed=ctx.stage_seed("mix"),
    )
    outs = []
    for src_name, out_name in (
        ("ec_weighted.jsonl", "mix.jsonl"),
        ("ec_filtered.jsonl", "mix_filtered.jsonl"),
    ):
        synthetic = records.read_ec_dataset(ctx.artifact(src_name))
        mixed = mix_mod.mix_datasets(original, synthetic, spec)
        out = ctx.artifact(out_name)
        records.write_ec_dataset(mixed, out)
        outs.append(out)
    ctx.log(
        "mix",
        [original_path, ctx.artifact("ec_weighted.jsonl"), ctx.artifact("ec_filtered.jsonl")],
        outs,
        {"original": len(original), "ratio": list(cfg.mix.ratio)},
    )


def _stage_plan(ctx: RunContext) -> None:
    cfg = ctx.config
    spec = mix_mod.MixSpec(
        ratio=cfg.mix.ratio,
        filter_threshold=cfg.mix.filter_threshold,
        seed=ctx.stage_seed("mix"),
    )
    # manifests carry workdir-relative paths so artifacts are byte-identical
    # across run directories; existence is checked against the workdir here
    paths = {
        "synthetic": "ec_synth.jsonl",
        "original": os.path.relpath(ctx.path(cfg.paths.original_dataset), ctx.workdir),
        "mix": "mix.jsonl",
        "mix_filtered": "mix_filtered.jsonl",
    }
    for key, rel in paths.items():
        if not (ctx.workdir / rel).exists():
            raise FileNotFoundError(f"{key} dataset not found: {ctx.workdir / rel}")
    manifest = mix_mod.continue_plan(cfg.plan.strategy, paths, spec, require_files=False)
    out = ctx.artifact("manifest.json")
    with open(out, "w", encoding="utf-8") as f:
        f.write(manifest.to_json())
        f.write("\n")
    ctx.log("plan", [], [out], {"strategy": cfg.plan.strategy, "phases": len(manifest.phases)})


def _stage_evaluate(ctx: RunContext) -> None:
    cfg = ctx.config
    ec_path = ctx.artifact("ec_synth.jsonl")
    weights_path = ctx.artifact("weights.jsonl")
    examples = records.read_ec_dataset(ec_path)
    weights = records.read_weights(weights_path)
    outdir = ctx.artifact("outputs")
    output_files = sorted(outdir.glob("*.jsonl"))
    if not output_files:
        raise FileNotFoundError(f"no model outputs found under {outdir}")
    groups = [(p.stem, [eval_mod.read_outputs(p)]) for p in output_files]
    report = eval_mod.eval_report(groups, examples, _judge(cfg), weights=weights)
    report_txt = ctx.artifact("eval_report.txt")
    with open(report_txt, "w", encoding="utf-8") as f:
        f.write(report.render())
        f.write("\n")
    report_json = ctx.artifact("eval_report.json")
    with open(report_json, "w", encoding="utf-8") as f:
        json.dump(
            {
                "columns": list(report.columns),
                "rows": [
                    {"label": label, "cells": [[m, s] for m, s in cells]}
                    for label, cells in report.rows
                ],
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    ctx.log(
        "evaluate",
        [ec_path, weights_path] + output_files,
        [report_txt, report_json],
        {"models": len(groups), "samples": len(examples)},
    )


_STAGE_FUNCS = {
    "cluster": _stage_cluster,
    "sample": _stage_sample,
    "inject-grammar": _stage_inject_grammar,
    "inject-typos": _stage_inject_typos,
    "score": _stage_score,
    "simbench": _stage_simbench,
    "fit-reweight": _stage_fit_reweight,
    "filter": _stage_filter,
    "mix": _stage_mix,
    "plan": _stage_plan,
    "evaluate": _stage_evaluate,
}


def run_pipeline(
    config: PipelineConfig,
    config_dir: str | Path = ".",
    stages: Sequence[str] | None = None,
) -> Path:
    """Execute the requested stages in dependency order; returns the workdir."""
    if stages is None:
        selected = list(STAGE_ORDER)
    else:
        unknown = sorted(set(stages) - set(STAGE_ORDER))
        if unknown:
            raise ConfigError(f"unknown stages: {unknown}")
        selected = [s for s in STAGE_ORDER if s in set(stages)]
    config_dir = Path(config_dir)
    workdir = Path(config.paths.workdir)
    if not workdir.is_absolute():
        workdir = config_dir / workdir
    workdir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(dataclasses.asdict(config))
    ctx = RunContext(config=config, config_dir=config_dir, workdir=workdir, cfg_hash=cfg_hash)
    for stage in selected:
        try:
            _STAGE_FUNCS[stage](ctx)
        except Exception as e:
            raise StageError(stage, e) from e
    return workdir


# -- subcommands --


def _cmd_run(args: argparse.Namespace) -> int:
    config_path = Path(args.config)
    config = load_config(config_path)
    stages = args.stages.split(",") if args.stages else None
    workdir = run_pipeline(config, config_dir=config_path.parent, stages=stages)
    print(f"pipeline complete; artifacts in {workdir}")
    return 0


def _cmd_demo(args: argparse.Namespace) -> int:
    config_path = demo_mod.materialize(args.out)
    print(f"demo bundle written; run: ecsynth run --config {config_path}")
    return 0


def _cmd_cluster(args: argparse.Namespace) -> int:
    if args.embeddings:
        embedded = cluster_mod.read_embeddings(args.embeddings)
    else:
        if not args.corpus:
            raise ConfigError("cluster requires --embeddings or --corpus")
        docs = records.read_corpus(args.corpus)
        embedded = cluster_mod.hash_embed(docs, args.embed_dim, seed=args.seed)
    model = cluster_mod.kmeans(
        embedded, k=args.k, seed=args.seed, max_iters=args.max_iters, tol=args.tol
    )
    _write_clusters(model, embedded, Path(args.out))
    stats = cluster_mod.cluster_stats(model)
    print(
        f"k={model.k} objective={model.objective:.6g} "
        f"sizes={stats.mean_size:.1f}±{stats.std_size:.1f}"
    )
    return 0


def _cmd_sample(args: argparse.Namespace) -> int:
    model = read_clusters(args.clusters)
    docs = {d.id: d for d in records.read_corpus(args.corpus)}
    ids = cluster_mod.quota_sample(model, args.per_cluster, seed=args.seed)
    records.write_corpus([docs[i] for i in ids], args.out)
    print(f"sampled {len(ids)} docs")
    return 0


def _cmd_inject_grammar(args: argparse.Namespace) -> int:
    docs = records.read_corpus(args.corpus)
    if args.client == "mock":
        client: grammar_mod.InjectorClient = grammar_mod.MockInjector(
            failure_rate=args.failure_rate, seed=args.seed
        )
    else:
        if not args.endpoint:
            raise ConfigError("--client http requires --endpoint")
        client = grammar_mod.HttpInjector(
            endpoint=args.endpoint,
            token=os.environ.get(TOKEN_ENV_VAR, ""),
            timeout=args.timeout,
            max_retries=args.max_retries,
        )
    run = grammar_mod.inject_corpus(docs, client, concurrency=args.concurrency)
    result = grammar_mod.roundtrip_filter(list(run.pairs))
    records.write_ec_dataset(list(result.kept), args.out)
    print(
        f"kept {len(result.kept)} dropped {result.dropped_count} "
        f"failed {run.failed} skipped {run.skipped}"
    )
    return 0


def _cmd_inject_typos(args: argparse.Namespace) -> int:
    examples = records.read_ec_dataset(args.dataset)
    cfg = typo_mod.TypoConfig(
        p_transpose=args.p_transpose,
        p_omit=args.p_omit,
        p_repeat=args.p_repeat,
        p_spatial=args.p_spatial,
        max_errors_per_example=args.max_errors,
        seed=args.seed,
    )
    keyboard = typo_mod.load_keyboard(args.layout) if args.layout else typo_mod.QWERTY
    records.write_ec_dataset(typo_mod.corrupt_dataset(examples, cfg, keyboard), args.out)
    print(f"corrupted {len(examples)} examples")
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    examples = records.read_ec_dataset(args.dataset)
    if args.import_scores:
        by_id = {s.sample_id: s for s in records.read_scores(args.import_scores)}
        missing = [ex.id for ex in examples if ex.id not in by_id]
        if missing:
            raise ConfigError(f"imported scores missing sample ids: {missing[:5]}")
        scores = [by_id[ex.id] for ex in examples]
    else:
        if not (args.public_corpus and args.domain_corpus):
            raise ConfigError("score requires --import or both --public-corpus and --domain-corpus")
        public = scoring_mod.train_ngram(
            records.read_corpus(args.public_corpus), args.order, args.delta
        )
        domain = scoring_mod.train_ngram(
            records.read_corpus(args.domain_corpus), args.order, args.delta
        )
        scores = scoring_mod.score_dataset(examples, public, domain)
    records.write_scores(scores, args.out)
    print(f"scored {len(scores)} samples")
    return 0


def _cmd_fit_reweight(args: argparse.Namespace) -> int:
    matrices = [records.read_eval_matrix(p) for p in args.eval_matrix]
    scores = records.read_scores(args.scores)
    init = reweight_mod.ReweightParams(c_min=args.c_min, c_max=args.c_max, lam=args.lam)
    opts = reweight_mod.FitOptions(restarts=args.restarts, seed=args.seed)
    val = [records.read_eval_matrix(p) for p in args.val_matrix] if args.val_matrix else None
    data = matrices[0] if len(matrices) == 1 else matrices
    fit = reweight_mod.fit(
        data,
        scores,
        init=init,
        opts=opts,
        val_data=val,
        with_cv=args.cv,
    )
    with open(args.report, "w", encoding="utf-8") as f:
        json.dump(_fit_report_json(fit), f, indent=2, sort_keys=True)
        f.write("\n")
    print(_fit_report_text(fit))
    if args.weights_out:
        records.write_weights(reweight_mod.weights_for(fit.params, scores), args.weights_out)
    return 0


def _cmd_simbench(args: argparse.Namespace) -> int:
    spec = simbench_mod.PlantedSpec(
        n_samples=args.n,
        n_models=args.k,
        n_metrics=args.d,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    bench = simbench_mod.generate(spec)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    records.write_scores(bench.scores, f"{prefix}_scores.jsonl")
    for i, m in enumerate(bench.matrices):
        records.write_eval_matrix(m, f"{prefix}_matrix{i}.jsonl")
    print(
        f"planted benchmark: {args.n} samples, {args.k} models x {len(bench.matrices)} sets, "
        f"noise floor {bench.truth.noise_total:.3e}"
    )
    return 0


def _cmd_filter(args: argparse.Namespace) -> int:
    examples = records.read_ec_dataset(args.dataset)
    if args.weights:
        weights = records.read_weights(args.weights)
        missing = [ex.id for ex in examples if ex.id not in weights]
        if missing:
            raise ConfigError(f"weights missing for sample ids: {missing[:5]}")
        examples = [ex.with_weight(weights[ex.id]) for ex in examples]
    kept = mix_mod.filter_by_weight(examples, args.threshold)
    records.write_ec_dataset(kept, args.out)
    print(f"kept {len(kept)} of {len(examples)}")
    return 0


def _cmd_mix(args: argparse.Namespace) -> int:
    a, b = (int(x) for x in args.ratio.split(":"))
    spec = mix_mod.MixSpec(ratio=(a, b), seed=args.seed)
    original = records.read_ec_dataset(args.original)
    synthetic = records.read_ec_dataset(args.synthetic)
    mixed = mix_mod.mix_datasets(original, synthetic, spec, total=args.total)
    records.write_ec_dataset(mixed, args.out)
    print(f"mixed {len(mixed)} examples at ratio {a}:{b}")
    return 0


def _cmd_plan(args: argparse.Namespace) -> int:
    paths = {}
    for key, value in (
        ("synthetic", args.synthetic),
        ("original", args.original),
        ("mix", args.mix),
        ("mix_filtered", args.mix_filtered),
    ):
        if value:
            paths[key] = value
    manifest = mix_mod.continue_plan(args.strategy, paths, mix_mod.MixSpec(seed=args.seed))
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(manifest.to_json())
        f.write("\n")
    print(f"{args.strategy}: {len(manifest.phases)} phases, {manifest.total_steps} steps")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    examples = records.read_ec_dataset(args.dataset)
    if args.judge == "exact":
        judge: eval_mod.Judge = eval_mod.ExactJudge()
    elif args.judge == "normalized":
        judge = eval_mod.NormalizedJudge()
    else:
        if not (args.judge_endpoint and args.judge_prompt):
            raise ConfigError("--judge http requires --judge-endpoint and --judge-prompt")
        judge = eval_mod.ExternalJudge(
            endpoint=args.judge_endpoint,
            prompt_template=args.judge_prompt,
            token=os.environ.get(TOKEN_ENV_VAR, ""),
        )
    weights = records.read_weights(args.weights) if args.weights else None
    groups = [(Path(p).stem, [eval_mod.read_outputs(p)]) for p in args.outputs]
    report = eval_mod.eval_report(groups, examples, judge, weights=weights, ks=tuple(args.k))
    print(report.render())
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(report.render())
            f.write("\n")
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    if args.dataset:
        stats = grammar_mod.error_stats(records.read_ec_dataset(args.dataset))
        print("error categories:")
        for cat, frac in stats.category_fractions.items():
            print(f"  {cat:<16} {frac * 100:5.1f}%")
        print("errors per example:")
        for n, frac in stats.errors_per_example.items():
            print(f"  {n}: {frac * 100:5.1f}%")
    if args.clusters:
        model = read_clusters(args.clusters)
        s = cluster_mod.cluster_stats(model)
        print(f"clusters: k={model.k} mean={s.mean_size:.1f} std={s.std_size:.1f}")
        for lo, hi, count in s.histogram:
            print(f"  [{lo:8.1f}, {hi:8.1f}] {count}")
    if not (args.dataset or args.clusters):
        raise ConfigError("stats requires --dataset and/or --clusters")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecsynth",
        description="Synthetic error-correction data pipeline with domain-adaptive reweighting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run pipeline stages from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--stages", default="", help="comma-separated subset of stages")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("demo", help="materialize the bundled demo corpus and config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_demo)

    p = sub.add_parser("cluster", help="k-means over document embeddings")
    p.add_argument("--embeddings", default="")
    p.add_argument("--corpus", default="")
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("sample", help="fixed quota per cluster")
    p.add_argument("--clusters", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--per-cluster", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("inject-grammar", help="grammar-error injection with roundtrip filtration")
    p.add_argument("--corpus", required=True)
    p.add_argument("--client", choices=("mock", "http"), default="mock")
    p.add_argument("--failure-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--endpoint", default="")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--max-retries", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_inject_grammar)

    p = sub.add_parser("inject-typos", help="simulated mobile typing errors")
    p.add_argument("--dataset", required=True)
    p.add_argument("--p-transpose", type=float, default=0.01)
    p.add_argument("--p-omit", type=float, default=0.015)
    p.add_argument("--p-repeat", type=float, default=0.01)
    p.add_argument("--p-spatial", type=float, default=0.02)
    p.add_argument("--max-errors", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layout", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_inject_typos)

    p = sub.add_parser("score", help="dual average log-likelihood scores per target")
    p.add_argument("--dataset", required=True)
    p.add_argument("--public-corpus", default="")
    p.add_argument("--domain-corpus", default="")
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--import", dest="import_scores", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("fit-reweight", help="fit the reweighting model to live metrics")
    p.add_argument("--eval-matrix", action="append", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--c-min", type=float, default=0.01)
    p.add_argument("--c-max", type=float, default=2.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-matrix", action="append", default=[])
    p.add_argument("--cv", action="store_true")
    p.add_argument("--report", required=True)
    p.add_argument("--weights-out", default="")
    p.set_defaults(func=_cmd_fit_reweight)

    p = sub.add_parser("simbench", help="generate a planted benchmark")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--noise", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_simbench)

    p = sub.add_parser("filter", help="keep samples at or above a weight threshold")
    p.add_argument("--dataset", required=True)
    p.add_argument("--weights", default="")
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("mix", help="interleave original and synthetic data at a ratio")
    p.add_argument("--original", required=True)
    p.add_argument("--synthetic", required=True)
    p.add_argument("--ratio", default="1:4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--total", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mix)

    p = sub.add_parser("plan", help="emit a continue-training manifest")
    p.add_argument("--strategy", choices=mix_mod.STRATEGIES, required=True)
    p.add_argument("--synthetic", required=True)
    p.add_argument("--original", default="")
    p.add_argument("--mix", default="")
    p.add_argument("--mix-filtered", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("evaluate", help="sequence accuracy / good-ratio report")
    p.add_argument("--outputs", nargs="+", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--judge", choices=("exact", "normalized", "http"), default="normalized")
    p.add_argument("--judge-endpoint", default="")
    p.add_argument("--judge-prompt", default="")
    p.add_argument("--k", type=int, nargs="+", default=[1, 3])
    p.add_argument("--weights", default="")
    p.add_argument("--report", default="")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("stats", help="error-category and cluster statistics")
    p.add_argument("--dataset", default="")
    p.add_argument("--clusters", default="")
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, records.RecordError, ValueError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
