"""End-to-end pipelines behind the command-line tool.

Everything here writes into a caller-provided run directory; file names are
fixed so that two runs of the same configuration can be compared with diff.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .adapt import AdaptConfig, maml_one_step
from .analysis import (AnalysisReport, analyze, optimal_policies, task_variance, teog,
                       write_curve_csv)
from .config import ExperimentConfig
from .meta import BILEVEL, MAML, MetaTrainConfig, TrainTrace, meta_train_batched
from .policy import SoftmaxPolicy
from .tasks import PRACTICAL_LAMBDA, TaskDistribution, preset_distribution

log = logging.getLogger("bilevel_metarl")

SUMMARY_COLUMNS = ("preset", "metric", "seed", "lam_train", "lam_theorem", "teog",
                   "teog_theorem_lambda", "bound", "within_bound", "variance", "epsilon",
                   "a_max", "bilevel_k1", "maml_k1", "grad_sq_first", "grad_sq_last",
                   "teog_theorem_checkpoint_mean", "optimal_residual", "K", "M")


# ----------------------------------------------------------------------------
# building blocks

def build_distribution(cfg: ExperimentConfig, preset: str) -> TaskDistribution:
    t = cfg.task
    return preset_distribution(preset, seed=cfg.run.seed, n_tasks=t.n_tasks, width=t.width,
                               height=t.height, slip_prob=t.slip_prob,
                               goal_reward=t.goal_reward, hole_reward=t.hole_reward,
                               gamma=t.gamma, rho_mix=t.rho_mix)


def training_lambda(cfg: ExperimentConfig, preset: Optional[str], metric: int) -> float:
    if cfg.adapt.lam is not None:
        return cfg.adapt.lam
    return PRACTICAL_LAMBDA[preset or "low"][metric]


def adapt_config(cfg: ExperimentConfig, preset: Optional[str], metric: int) -> AdaptConfig:
    a = cfg.adapt
    return AdaptConfig(metric=metric, lam=training_lambda(cfg, preset, metric), q_mode=a.q_mode,
                       n_rollouts=a.n_rollouts, horizon=a.horizon, inner_tol=a.inner_tol,
                       strict=a.strict)


def train_config(cfg: ExperimentConfig, acfg: AdaptConfig, seed: int,
                 algorithm: str = BILEVEL) -> MetaTrainConfig:
    m = cfg.meta
    return MetaTrainConfig(iterations=m.iterations, step_rule=m.step_rule, alpha=m.alpha,
                           clip_norm=m.clip_norm, adapt=acfg, batch_size=m.batch_size,
                           seed=seed, checkpoint_every=m.checkpoint_every, algorithm=algorithm)


def training_seeds(cfg: ExperimentConfig) -> List[int]:
    return [cfg.run.seed + k for k in range(cfg.meta.n_seeds)]


def algorithms(cfg: ExperimentConfig) -> List[str]:
    return [BILEVEL, MAML] if cfg.meta.baseline else [BILEVEL]


def grad_trend(trace: TrainTrace, frac: float = 0.2):
    """Mean squared gradient norm over the first and last `frac` of training."""
    g2 = trace.grad_norms() ** 2
    n = max(1, int(round(frac * g2.size)))
    return float(g2[:n].mean()), float(g2[-n:].mean())


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def _tag(preset, metric, algorithm=None, seed=None) -> str:
    parts = [preset, f"m{metric}"]
    if algorithm is not None:
        parts.append(algorithm)
    if seed is not None:
        parts.append(f"s{seed}")
    return "_".join(parts)


# ----------------------------------------------------------------------------
# subcommand pipelines

def gen_tasks(cfg: ExperimentConfig, out: Path) -> Dict[str, Path]:
    paths = {}
    for preset in cfg.task.presets:
        td = build_distribution(cfg, preset)
        paths[preset] = td.save(out / "tasks" / preset)
        log.info("wrote %d %s-preset tasks to %s", len(td), preset, paths[preset])
    return paths


def _train_one(td, cfg, preset, metric, seed, algorithm, out: Path) -> TrainTrace:
    acfg = adapt_config(cfg, preset, metric)
    t0 = time.perf_counter()
    trace = meta_train_batched(td, SoftmaxPolicy.uniform(*td.shape),
                               train_config(cfg, acfg, seed, algorithm))
    tag = _tag(preset, metric, algorithm, seed)
    trace.write_csv(out / "traces" / f"{tag}.csv", timing=cfg.run.timing)
    (out / "policies" / f"{tag}.json").write_text(json.dumps(trace.phi.to_json()))
    if trace.checkpoints:
        trace.write_checkpoints(out / "checkpoints" / tag)
    first, last = grad_trend(trace)
    log.info("%s: %d iterations in %.1fs, squared grad norm %.3e -> %.3e", tag, len(trace),
             time.perf_counter() - t0, first, last)
    return trace


def _prepare(out: Path):
    for sub in ("traces", "policies", "reports", "curves", "figures"):
        (out / sub).mkdir(parents=True, exist_ok=True)


def train(cfg: ExperimentConfig, out: Path) -> Dict[tuple, TrainTrace]:
    _prepare(out)
    traces = {}
    for preset in cfg.task.presets:
        td = build_distribution(cfg, preset)
        for metric in cfg.adapt.metrics:
            for seed in training_seeds(cfg):
                for alg in algorithms(cfg):
                    traces[preset, metric, seed, alg] = _train_one(td, cfg, preset, metric,
                                                                   seed, alg, out)
    if cfg.run.figures:
        from .plotting import plot_grad_norms
        for preset in cfg.task.presets:
            for metric in cfg.adapt.metrics:
                norms = {f"{alg} seed {s}": traces[preset, metric, s, alg].grad_norms()
                         for s in training_seeds(cfg) for alg in algorithms(cfg)}
                plot_grad_norms(out / "figures" / f"grad_norms_{_tag(preset, metric)}.png",
                                norms, f"{preset} preset, metric {metric}")
    return traces


def _report_files(report: AnalysisReport, out: Path, tag: str):
    report.write_csv(out / "reports" / f"{tag}.csv")
    report.write_json(out / "reports" / f"{tag}.json")
    write_curve_csv(out / "curves" / f"{tag}_bilevel.csv", report.meta_test_curve)
    if report.baseline_curve:
        write_curve_csv(out / "curves" / f"{tag}_maml.csv", report.baseline_curve)


def evaluate(cfg: ExperimentConfig, out: Path, tasks_dir: Optional[Path] = None,
             meta_path: Optional[Path] = None) -> List[AnalysisReport]:
    """Gap, bound and curves for a given (or uniform) meta-policy."""
    _prepare(out)
    if tasks_dir is not None:
        sources = [("tasks", None, TaskDistribution.load(tasks_dir))]
    else:
        sources = [(p, p, build_distribution(cfg, p)) for p in cfg.task.presets]
    reports = []
    for label, preset, td in sources:
        meta = SoftmaxPolicy.uniform(*td.shape) if meta_path is None else \
            SoftmaxPolicy.from_json(json.loads(Path(meta_path).read_text()))
        opt = optimal_policies(td, cfg.analysis.tol, cfg.analysis.logit_cap)
        for metric in cfg.adapt.metrics:
            acfg = adapt_config(cfg, preset, metric)
            rep = analyze(td, meta, acfg, opt, label=_tag(label, metric),
                          k_max=cfg.analysis.k_max)
            _report_files(rep, out, _tag(label, metric))
            log.info("%s: gap %.4g, bound %.4g, within bound: %s", rep.label, rep.teog,
                     rep.bound, rep.within_bound)
            reports.append(rep)
            if cfg.run.figures:
                from .plotting import plot_meta_test_curves
                plot_meta_test_curves(out / "figures" / f"curve_{_tag(label, metric)}.png",
                                      {"meta-policy": rep.meta_test_curve},
                                      f"{label}, metric {metric}")
    rows = [{"preset": r.label.rsplit("_", 1)[0], "seed": "", **r.summary_row(),
             "bilevel_k1": r.meta_test_curve[1][1]} for r in reports]
    write_rows(out / "summary.csv", SUMMARY_COLUMNS, rows)
    return reports


@dataclass
class PresetOutcome:
    rows: List[dict]
    curves: Dict[tuple, list]
    grad_norms: Dict[tuple, np.ndarray]


def _checkpoint_teog(td, trace: TrainTrace, acfg: AdaptConfig, lam: float, opt) -> float:
    phis = [c["phi"] for c in trace.checkpoints]
    if not phis or not np.isfinite(lam):
        return float("nan")
    vals = [teog(td, phi, acfg.with_(lam=lam, strict=False), opt).teog for phi in phis]
    return float(np.mean(vals))


def run_preset(cfg: ExperimentConfig, preset: str, out: Path) -> PresetOutcome:
    """Train every (metric, seed, algorithm), then analyze each trained meta-policy."""
    td = build_distribution(cfg, preset)
    opt = optimal_policies(td, cfg.analysis.tol, cfg.analysis.logit_cap)
    rows, curves, norms = [], {}, {}
    for metric in cfg.adapt.metrics:
        acfg = adapt_config(cfg, preset, metric)
        t0 = time.perf_counter()
        var = task_variance(td, metric, opt)
        log.info("%s metric %d: task variance %.6g (%.1fs)", preset, metric, var.variance,
                 time.perf_counter() - t0)
        for seed in training_seeds(cfg):
            traces = {alg: _train_one(td, cfg, preset, metric, seed, alg, out)
                      for alg in algorithms(cfg)}
            bo = traces[BILEVEL]
            for alg, tr in traces.items():
                norms[metric, seed, alg] = tr.grad_norms()
            base = traces.get(MAML)
            rep = analyze(td, bo.phi, acfg, opt, label=_tag(preset, metric, seed=seed),
                          k_max=cfg.analysis.k_max, probes=[c["phi"] for c in bo.checkpoints],
                          variance=var, baseline=None if base is None else base.phi,
                          baseline_step=maml_one_step, T=cfg.meta.iterations)
            _report_files(rep, out, _tag(preset, metric, seed=seed))
            curves[metric, seed, BILEVEL] = rep.meta_test_curve
            if base is not None:
                curves[metric, seed, MAML] = rep.baseline_curve
            first, last = grad_trend(bo)
            row = {"preset": preset, "seed": seed, **rep.summary_row(),
                   "bilevel_k1": rep.meta_test_curve[1][1],
                   "maml_k1": rep.baseline_curve[1][1] if base is not None else "",
                   "grad_sq_first": first, "grad_sq_last": last,
                   "teog_theorem_checkpoint_mean": _checkpoint_teog(td, bo, acfg,
                                                                    rep.lam_theorem, opt)}
            rows.append(row)
            log.info("%s metric %d seed %d: gap %.4g <= bound %.4g: %s; k=1 bilevel %.4f%s",
                     preset, metric, seed, rep.teog, rep.bound, rep.within_bound,
                     row["bilevel_k1"],
                     "" if base is None else f", baseline {row['maml_k1']:.4f}")
    return PresetOutcome(rows, curves, norms)


FIG1_COLUMNS = ("preset", "metric", "algorithm", "step", "mean", "std", "n_seeds")
AGG_COLUMNS = ("preset", "metric", "bilevel_k1_mean", "maml_k1_mean", "ordering_holds",
               "teog_max", "teog_theorem_lambda_max", "bound_min", "within_bound_all",
               "grad_sq_first_mean", "grad_sq_last_mean", "trend_holds_all")


def _seed_average(curves, metric, alg, seeds):
    arr = np.array([[m for _, m, _ in curves[metric, s, alg]] for s in seeds])
    std = np.array([[sd for _, _, sd in curves[metric, s, alg]] for s in seeds])
    return arr.mean(axis=0), std.mean(axis=0)


def aggregate(preset: str, outcome: PresetOutcome, cfg: ExperimentConfig):
    """Seed-averaged Figure-1 style table rows and one summary row per metric."""
    seeds = training_seeds(cfg)
    fig_rows, agg_rows = [], []
    for metric in cfg.adapt.metrics:
        for alg in algorithms(cfg):
            mean, std = _seed_average(outcome.curves, metric, alg, seeds)
            for k in range(mean.size):
                fig_rows.append({"preset": preset, "metric": metric, "algorithm": alg,
                                 "step": k, "mean": mean[k], "std": std[k],
                                 "n_seeds": len(seeds)})
        rows = [r for r in outcome.rows if r["metric"] == metric]
        bo_k1 = float(np.mean([r["bilevel_k1"] for r in rows]))
        maml_k1 = float(np.mean([r["maml_k1"] for r in rows])) if cfg.meta.baseline \
            else float("nan")
        agg_rows.append({
            "preset": preset, "metric": metric, "bilevel_k1_mean": bo_k1,
            "maml_k1_mean": maml_k1,
            "ordering_holds": bool(bo_k1 >= maml_k1) if cfg.meta.baseline else "",
            "teog_max": max(r["teog"] for r in rows),
            "teog_theorem_lambda_max": max(r["teog_theorem_lambda"] for r in rows),
            "bound_min": min(r["bound"] for r in rows),
            "within_bound_all": all(r["within_bound"] for r in rows),
            "grad_sq_first_mean": float(np.mean([r["grad_sq_first"] for r in rows])),
            "grad_sq_last_mean": float(np.mean([r["grad_sq_last"] for r in rows])),
            "trend_holds_all": all(r["grad_sq_last"] <= r["grad_sq_first"] for r in rows),
        })
    return fig_rows, agg_rows


def repro_fig1(cfg: ExperimentConfig, out: Path) -> List[dict]:
    """Both presets, bilevel vs one-step baseline, with tables and figures."""
    _prepare(out)
    all_rows, fig_all, agg_all = [], [], []
    # wall-clock seconds per preset; kept out of the CSVs so reruns stay byte-identical
    timings = {}
    for preset in cfg.task.presets:
        t0 = time.perf_counter()
        outcome = run_preset(cfg, preset, out)
        fig_rows, agg_rows = aggregate(preset, outcome, cfg)
        write_rows(out / f"fig1_{preset}.csv", FIG1_COLUMNS, fig_rows)
        all_rows += outcome.rows
        fig_all += fig_rows
        agg_all += agg_rows
        if cfg.run.figures:
            _fig1_figures(cfg, preset, outcome, out)
        timings[preset] = time.perf_counter() - t0
        log.info("%s preset finished in %.1fs", preset, timings[preset])
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    write_rows(out / "summary.csv", SUMMARY_COLUMNS, all_rows)
    write_rows(out / "fig1_summary.csv", AGG_COLUMNS, agg_all)
    if cfg.run.figures:
        from .plotting import plot_gap_vs_bound
        worst = [{"preset": r["preset"], "metric": r["metric"], "teog": r["teog_max"],
                  "teog_theorem_lambda": r["teog_theorem_lambda_max"], "bound": r["bound_min"]}
                 for r in agg_all]
        plot_gap_vs_bound(out / "figures" / "gap_vs_bound.png", worst,
                          "one-step gap against the variance bound")
    return agg_all


def _fig1_figures(cfg, preset, outcome: PresetOutcome, out: Path):
    from .plotting import METRIC_NAMES, plot_grad_norms, plot_meta_test_curves
    seeds = training_seeds(cfg)
    for metric in cfg.adapt.metrics:
        plot_grad_norms(out / "figures" / f"grad_norms_{_tag(preset, metric)}.png",
                        {f"{alg} seed {s}": outcome.grad_norms[metric, s, alg]
                         for s in seeds for alg in algorithms(cfg)},
                        f"{preset} variance, {METRIC_NAMES[metric]}")
        curves = {}
        for alg in algorithms(cfg):
            mean, std = _seed_average(outcome.curves, metric, alg, seeds)
            curves[alg] = list(zip(range(mean.size), mean, std))
        plot_meta_test_curves(out / "figures" / f"fig1_{_tag(preset, metric)}.png", curves,
                              f"{preset} variance, {METRIC_NAMES[metric]}")
