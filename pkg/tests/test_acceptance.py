"""Acceptance suite: one PASS/FAIL line per criterion.

Runs two full default Frozen-Lake reproductions (about 3 minutes each), so
the whole module takes roughly 7 minutes.  Run with ``-s`` to see the lines
as they are produced; they are also repeated in the terminal summary.
"""
import csv
import filecmp
import json
import time
from pathlib import Path

import pytest

from bilevel_metarl import checks
from bilevel_metarl.cli import EXIT_OK, main
from bilevel_metarl.config import ExperimentConfig, load_config

from conftest import ACCEPTANCE_LINES

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
PRESET_BUDGET_S = 15 * 60

pytestmark = pytest.mark.slow


def report(n: int, title: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {n} ({title}): {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)


def repro(out: Path, name: str) -> Path:
    rc = main(["repro-fig1", "--config", str(CONFIGS / "default.ini"), "--out", str(out),
               "--run-name", name, "-q"])
    assert rc == EXIT_OK, f"repro-fig1 exited with {rc}"
    return out / name


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("repro")
    return repro(base, "first"), repro(base, "second")


@pytest.fixture(scope="module")
def summary(runs):
    with (runs[0] / "fig1_summary.csv").open() as fh:
        return list(csv.DictReader(fh))


def test_hypergradients_match_finite_differences():
    t0 = time.perf_counter()
    tab = checks.hypergrad_tabular_vs_fd(n=25, tol=1e-4)
    lin = [checks.hypergrad_linear_vs_fd(n=25, tol=1e-3, n_features=f) for f in (8, 20)]
    elapsed = time.perf_counter() - t0
    ok = tab.passed and all(r.passed for r in lin) and elapsed < 120
    report(1, "hypergradient vs finite differences", ok,
           f"tabular worst {tab.worst:.2e} (tol 1e-4), linear worst "
           f"{max(r.worst for r in lin):.2e} (tol 1e-3, up to 20 features), {elapsed:.1f}s / 120s")
    assert ok


def test_lower_level_matches_brute_force():
    r = checks.lower_level_vs_brute_force(n=10, samples=1_000_000, tol=1e-6)
    ok = r.passed and r.seconds < 60
    report(2, "lower-level solver vs brute force", ok,
           f"worst {r.worst:.2e} (tol 1e-6), {r.seconds:.1f}s / 60s")
    assert ok


def test_surrogate_lower_bounds_hold():
    r = checks.surrogate_bounds(n_pairs=1000, slack=1e-10)
    report(3, "surrogate lower bounds", r.passed, r.detail)
    assert r.passed


def test_adaptation_improves_monotonically():
    r = checks.monotone_improvement(n=100, slack=1e-10)
    report(4, "monotone improvement at theorem lambda", r.passed, r.detail)
    assert r.passed


def test_default_run_uses_reference_setting(runs):
    cfg = load_config(runs[0] / "config.ini")
    # only the output directory differs from the defaults
    assert cfg.with_overrides([f"run.out={ExperimentConfig().run.out}"]) == ExperimentConfig()
    assert cfg.task.n_tasks == 20 and cfg.task.gamma == 0.8 and cfg.meta.iterations == 500
    assert cfg.meta.n_seeds == 3 and set(cfg.task.presets) == {"high", "low"}


def test_gap_within_bound(runs, summary):
    timings = json.loads((runs[0] / "timings.json").read_text())
    within = all(r["within_bound_all"] == "1" for r in summary)
    fast = all(t < PRESET_BUDGET_S for t in timings.values())
    ratio = max(float(r["teog_max"]) / float(r["bound_min"]) for r in summary)
    secs = ", ".join(f"{p} {t:.0f}s" for p, t in timings.items())
    report(5, "gap below variance bound", within and fast,
           f"{len(summary)} preset/metric rows, max gap/bound {ratio:.2e}; {secs} "
           f"(budget {PRESET_BUDGET_S}s each)")
    assert within and fast


def test_bilevel_beats_one_step_baseline(summary):
    margins = [float(r["bilevel_k1_mean"]) - float(r["maml_k1_mean"]) for r in summary]
    ok = all(m >= 0 for m in margins) and all(r["ordering_holds"] == "1" for r in summary)
    report(6, "bilevel >= one-step baseline", ok,
           f"min margin {min(margins):.4f} over {len(summary)} preset/metric rows, 3 seeds each")
    assert ok


def test_gradient_norm_trend_and_constants(summary):
    trend = all(r["trend_holds_all"] == "1" for r in summary) and all(
        float(r["grad_sq_last_mean"]) <= float(r["grad_sq_first_mean"]) for r in summary)
    const = checks.theorem_constants_consistency(tol=1e-12)
    ok = trend and const.passed
    report(7, "gradient-norm trend and step-size constants", ok,
           f"trend holds in all rows: {trend}; constants worst {const.worst:.1e} (tol 1e-12)")
    assert ok


def test_reruns_are_byte_identical(runs):
    first, second = runs
    names = sorted(p.relative_to(first) for p in first.rglob("*.csv"))
    assert names == sorted(p.relative_to(second) for p in second.rglob("*.csv"))
    diff = [str(n) for n in names if not filecmp.cmp(first / n, second / n, shallow=False)]
    report(8, "determinism", not diff and bool(names),
           f"{len(names)} CSV files compared, {len(diff)} differ {diff[:3] if diff else ''}")
    assert names and not diff


def test_oracle_command_exits_zero(tmp_path):
    rc = main(["oracle", "--out", str(tmp_path), "--run-name", "oracle", "-q"])
    with (tmp_path / "oracle" / "checks.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    failed = [r["name"] for r in rows if r["passed"] != "1"]
    report(9, "oracle sanity", rc == EXIT_OK,
           f"exit code {rc}, {len(rows) - len(failed)}/{len(rows)} oracle checks pass")
    assert rc == EXIT_OK
