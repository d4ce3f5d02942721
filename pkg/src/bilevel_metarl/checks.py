"""Seeded numerical cross-checks shared by the `verify` and `oracle` commands.

Each check returns a CheckResult with the worst observed error so that a
caller can print one pass/fail line per check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .adapt import (AdaptConfig, adapt, adapt_tabular, concavity_threshold, project_simplex,
                    solve_state, state_objective)
from .analysis import theorem_lambda
from .hypergrad import (central_differences, finite_difference_hypergrad, grad_q_wrt_meta,
                        hypergrad_linear, hypergrad_tabular)
from .mdp import (accumulated_reward, monte_carlo_value, monte_carlo_visitation,
                  policy_evaluation, random_mdp, state_visitation, successor_state_visitation)
from .meta import step_size_arms, step_size_crossover, theorem_constants
from .policy import SoftmaxPolicy, kl, policy_distance, total_variation
from .tasks import preset_distribution


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return (f"{tag} {self.name}: worst={self.worst:.3e} tol={self.tolerance:.1e} "
                f"({self.seconds:.1f}s){' ' + self.detail if self.detail else ''}")


def _timed(name: str, tol: float, fn: Callable[[], tuple]) -> CheckResult:
    t0 = time.perf_counter()
    worst, detail = fn()
    return CheckResult(name, bool(worst <= tol), float(worst), tol, detail,
                       time.perf_counter() - t0)


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def _random_tabular(S, A, rng, scale=1.0):
    return SoftmaxPolicy.tabular(rng.normal(size=(S, A)) * scale)


# ----------------------------------------------------------------------------
# gradients

def hypergrad_tabular_vs_fd(n: int = 25, seed: int = 0, tol: float = 1e-4,
                            metrics=(1, 2, 3)) -> CheckResult:
    """Tabular hypergradient against central differences on random 4x3 MDPs."""
    def run():
        worst = 0.0
        for metric in metrics:
            for k in range(n):
                rng = np.random.default_rng([seed, metric, k])
                mdp = random_mdp(4, 3, gamma=0.8, seed=int(rng.integers(2 ** 31)))
                meta = _random_tabular(4, 3, rng)
                cfg = AdaptConfig(metric=metric, lam=float(rng.uniform(0.5, 2.0)),
                                  inner_tol=1e-12, strict=False)
                res = adapt(mdp, meta, cfg)
                g = hypergrad_tabular(mdp, meta, res, metric, cfg.lam).grad
                fd = finite_difference_hypergrad(mdp, meta, cfg, step=1e-5).grad
                worst = max(worst, _rel(g, fd))
        return worst, f"{n} MDPs x metrics {tuple(metrics)}"
    return _timed("hypergrad_tabular_fd", tol, run)


def hypergrad_linear_vs_fd(n: int = 5, seed: int = 0, tol: float = 1e-3, n_features: int = 8,
                           metrics=(1, 2, 3)) -> CheckResult:
    """Linear-feature hypergradient against central differences.

    Logits only move in S (A - 1) directions, so the state count grows with
    the feature count to keep the inner optimum unique.
    """
    S = max(4, -(-n_features // 2))
    def run():
        worst = 0.0
        for metric in metrics:
            for k in range(n):
                rng = np.random.default_rng([seed, 100 + metric, k])
                mdp = random_mdp(S, 3, gamma=0.8, seed=int(rng.integers(2 ** 31)))
                F = rng.normal(size=(S, 3, n_features)) / np.sqrt(n_features)
                meta = SoftmaxPolicy.linear(rng.normal(size=n_features) * 0.5, F)
                a_max = policy_evaluation(mdp, meta).a_max
                lam = 2.0 if metric != 3 else 1.5 * concavity_threshold(meta.lipschitz, a_max)
                cfg = AdaptConfig(metric=metric, lam=lam, inner_tol=1e-12, strict=False)
                res = adapt(mdp, meta, cfg)
                g = hypergrad_linear(mdp, meta, res, cfg).grad
                fd = finite_difference_hypergrad(mdp, meta, cfg, step=1e-5).grad
                worst = max(worst, _rel(g, fd))
        return worst, f"{n} {S}x3 MDPs x metrics {tuple(metrics)}, {n_features} features"
    return _timed("hypergrad_linear_fd", tol, run)


def grad_q_vs_fd(n: int = 5, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    """d Q(s,a) / d theta against central differences of policy evaluation."""
    def run():
        worst = 0.0
        for k in range(n):
            rng = np.random.default_rng([seed, 200, k])
            mdp = random_mdp(4, 3, gamma=0.8, seed=int(rng.integers(2 ** 31)))
            meta = _random_tabular(4, 3, rng)
            for s in range(4):
                for a in range(3):
                    fd = central_differences(
                        lambda th: policy_evaluation(mdp, meta.with_theta(th)).q[s, a],
                        meta.theta, 1e-6)
                    worst = max(worst, _rel(grad_q_wrt_meta(mdp, meta, s, a), fd))
        return worst, f"{n} MDPs, all (s,a)"
    return _timed("grad_q_fd", tol, run)


# ----------------------------------------------------------------------------
# Monte-Carlo oracles

def policy_evaluation_vs_mc(n: int = 3, seed: int = 0, rollouts: int = 20_000) -> CheckResult:
    """|V - V_mc| in units of (4 stderr + truncation bias); passes below 1."""
    def run():
        worst = 0.0
        for k in range(n):
            rng = np.random.default_rng([seed, 300, k])
            mdp = random_mdp(5, 3, gamma=0.8, seed=int(rng.integers(2 ** 31)))
            pol = _random_tabular(5, 3, rng)
            v = policy_evaluation(mdp, pol).v
            mc = monte_carlo_value(mdp, pol, rollouts, seed=int(rng.integers(2 ** 31)))
            bias = mdp.gamma ** mc.horizon * np.abs(mdp.reward).max() / (1 - mdp.gamma)
            worst = max(worst, float(np.max(np.abs(mc.mean - v) / (4 * mc.stderr + bias))))
        return worst, f"{n} MDPs, {rollouts} rollouts per state"
    return _timed("policy_evaluation_mc", 1.0, run)


def visitation_vs_mc(n: int = 3, seed: int = 0, samples: int = 200_000,
                     tol: float = 1e-2) -> CheckResult:
    """Total variation between exact and sampled state visitation."""
    def run():
        worst = 0.0
        for k in range(n):
            rng = np.random.default_rng([seed, 400, k])
            mdp = random_mdp(5, 3, gamma=0.8, seed=int(rng.integers(2 ** 31)))
            pol = _random_tabular(5, 3, rng)
            nu = state_visitation(mdp, pol)
            est = monte_carlo_visitation(mdp, pol, samples, seed=int(rng.integers(2 ** 31)))
            worst = max(worst, 0.5 * float(np.abs(est - nu).sum()))
        return worst, f"{n} MDPs, {samples} samples"
    return _timed("state_visitation_mc", tol, run)


def successor_visitation_vs_series(n: int = 5, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    """Occupancy after each (s,a) against a truncated power series."""
    def run():
        worst = 0.0
        for k in range(n):
            rng = np.random.default_rng([seed, 500, k])
            mdp = random_mdp(4, 3, gamma=0.8, seed=int(rng.integers(2 ** 31)))
            pi = _random_tabular(4, 3, rng).probs()
            P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
            marg = successor_state_visitation(mdp, pi)
            d = mdp.transition.copy()
            acc = np.zeros_like(d)
            g = 1.0
            while g >= 1e-14:
                acc += g * d
                d = d @ P_pi
                g *= mdp.gamma
            worst = max(worst, float(np.abs((1 - mdp.gamma) * acc - marg).max()))
        return worst, f"{n} MDPs"
    return _timed("successor_visitation_series", tol, run)


# ----------------------------------------------------------------------------
# lower level

def _polish(metric, p, q, lam, x, iters=3000):
    """Mirror (metrics 1, 2) or projected (metric 3) gradient ascent from x."""
    best, best_val = x, state_objective(metric, p, q, lam, x)
    eta = 0.5 / (lam * 10 + np.abs(q).max())
    for _ in range(iters):
        if metric == 1:
            g = q + lam * p / x
        elif metric == 2:
            g = q - lam * (np.log(x / p) + 1.0)
        else:
            g = q - 2 * lam * (x - p)
        if metric == 3:
            y = project_simplex(x + eta * g)
        else:
            z = np.log(x) + eta * (g - g.max())
            y = np.exp(z - z.max())
            y /= y.sum()
        val = state_objective(metric, p, q, lam, y)
        if val >= best_val:
            best, best_val, x = y, val, y
        else:
            eta *= 0.5
            if eta < 1e-18:
                break
    return best_val


def lower_level_vs_brute_force(n: int = 10, seed: int = 0, samples: int = 1_000_000,
                               tol: float = 1e-6, metrics=(1, 2, 3)) -> CheckResult:
    """Per-state objective of the solver against random simplex search + polish."""
    def run():
        worst = 0.0
        for metric in metrics:
            for k in range(n):
                rng = np.random.default_rng([seed, 600 + metric, k])
                S, A = 3, 3
                mdp = random_mdp(S, A, gamma=0.8, seed=int(rng.integers(2 ** 31)))
                meta = _random_tabular(S, A, rng)
                cfg = AdaptConfig(metric=metric, lam=float(rng.uniform(0.3, 2.0)),
                                  inner_tol=1e-13, strict=False)
                res = adapt_tabular(mdp, meta, cfg)
                p_all, x_all = meta.probs(), res.adapted.probs()
                for s in range(S):
                    p, q = p_all[s], res.q_used[s]
                    mine = state_objective(metric, p, q, cfg.lam, x_all[s])
                    cand = rng.dirichlet(np.ones(A), size=samples)
                    cand = np.maximum(cand, 1e-300)
                    vals = state_objective(metric, p, q, cfg.lam, cand)
                    start = cand[int(np.argmax(vals))]
                    brute = _polish(metric, p, q, cfg.lam, start / start.sum())
                    worst = max(worst, abs(brute - mine), brute - mine)
        return worst, f"{n} instances x metrics {tuple(metrics)}, {samples} samples"
    return _timed("lower_level_brute_force", tol, run)


# ----------------------------------------------------------------------------
# surrogate lower bounds and monotone improvement

def _frozen_lake_tasks(seed: int):
    return preset_distribution("low", seed=seed, n_tasks=5, rho_mix=0.05).tasks \
        + preset_distribution("high", seed=seed, n_tasks=5, rho_mix=0.05).tasks


def surrogate_lower_bound_gap(mdp, metric: int, theta: SoftmaxPolicy,
                              theta_new: SoftmaxPolicy) -> float:
    """J(new) - J(old) - [E_{nu_old, pi_new} A_old / (1-gamma) - c D^2].

    Nonnegative whenever the surrogate is a lower bound.  A_max and the
    visitation floor are those of the old policy.
    """
    g = mdp.gamma
    vals = policy_evaluation(mdp, theta)
    nu = state_visitation(mdp, theta)
    eps, a_max = float(nu.min()), vals.a_max
    gain = nu @ np.sum(theta_new.probs() * vals.adv, axis=1) / (1 - g)
    if metric in (1, 2):
        pen = 2 * g * a_max / ((1 - g) ** 2 * eps) * policy_distance(mdp, metric, theta, theta_new)
    else:
        L1 = theta.lipschitz[0]
        pen = 4 * g * a_max * L1 ** 2 / ((1 - g) ** 2 * eps) \
            * float(np.sum((theta.theta - theta_new.theta) ** 2))
    return accumulated_reward(mdp, theta_new) - accumulated_reward(mdp, theta) - (gain - pen)


def surrogate_bounds(n_pairs: int = 1000, seed: int = 0, slack: float = 1e-10,
                     metrics=(1, 2, 3)) -> CheckResult:
    """Counts violations of the surrogate lower bound on Frozen-Lake tasks."""
    def run():
        tasks = _frozen_lake_tasks(seed)
        S, A = tasks[0].shape
        worst = -np.inf
        bad = 0
        for metric in metrics:
            rng = np.random.default_rng([seed, 700 + metric])
            for k in range(n_pairs):
                mdp = tasks[k % len(tasks)]
                old = _random_tabular(S, A, rng, scale=rng.uniform(0, 3))
                step = rng.normal(size=(S, A)) * 10 ** rng.uniform(-3, 0.5)
                new = old.with_theta(old.theta + step)
                v = -surrogate_lower_bound_gap(mdp, metric, old, new)
                worst = max(worst, v)
                bad += v > slack
        return (0.0 if bad == 0 else worst), f"{bad} violations in {n_pairs} pairs x metrics " \
            f"{tuple(metrics)}; max(rhs - lhs)={worst:.3e}"
    return _timed("surrogate_lower_bounds", slack, run)


def monotone_improvement(n: int = 100, seed: int = 0, slack: float = 1e-10,
                         metrics=(1, 2, 3)) -> CheckResult:
    """J(Alg(pi)) >= J(pi) at the theorem lambda of each (pi, task) pair."""
    def run():
        tasks = _frozen_lake_tasks(seed)
        S, A = tasks[0].shape
        worst = -np.inf
        for metric in metrics:
            rng = np.random.default_rng([seed, 800 + metric])
            for k in range(n):
                mdp = tasks[k % len(tasks)]
                pol = _random_tabular(S, A, rng, scale=rng.uniform(0, 3))
                eps = float(state_visitation(mdp, pol).min())
                a_max = policy_evaluation(mdp, pol).a_max
                lam = theorem_lambda(metric, a_max, eps, mdp.gamma, pol.lipschitz)
                res = adapt(mdp, pol, AdaptConfig(metric=metric, lam=lam, strict=False))
                drop = accumulated_reward(mdp, pol) - accumulated_reward(mdp, res.adapted)
                worst = max(worst, drop)
        return max(worst, 0.0), f"{n} pairs x metrics {tuple(metrics)}; max J drop {worst:.3e}"
    return _timed("monotone_improvement", slack, run)


# ----------------------------------------------------------------------------
# theorem constants

def _constants_reference(metric, r, g, a, lam, L):
    """Independent evaluation of (K, M) with exact rationals where possible."""
    from fractions import Fraction as Fr
    r, g, a, lam = Fr(r), Fr(g), Fr(a), Fr(lam)
    L1, L2, L3 = (Fr(x) for x in L)
    h = 1 - g
    if metric == 1:
        B = 16 * r / (lam * h ** 3) + 24 / h + 12 / lam
        C = 6 / h
        G = 4 * a / h ** 2
    elif metric == 2:
        B = 16 * r / (lam * h ** 3) + 18 / h ** 2
        C = 4 / h
        G = 2 * a / h ** 2
    else:
        X = lam + 2 * g / h * L1 ** 2 * a
        Y = lam - (6 * L1 ** 2 + 2 * L2) * a
        G = L1 * a * X / (h * Y)
        C = 2 * L1 * X / (h * Y)
        B = (160 * L1 ** 3 + 56 * L1 * L2 + 4 * L3) * X ** 2 / (h ** 3 * Y ** 2)
    core = B + 2 * C * C
    return float(2 * core * r * r / h ** 4), float(core * G * r / h ** 4)


def theorem_constants_consistency(n: int = 50, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    def run():
        rng = np.random.default_rng([seed, 900])
        worst = 0.0
        for _ in range(n):
            metric = int(rng.integers(1, 4))
            g = float(rng.uniform(0.5, 0.99))
            r = float(rng.uniform(0.1, 5))
            a = float(rng.uniform(0.1, 5))
            L = (float(rng.uniform(0.5, 2)), float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
            lam = (2 * a if metric < 3 else (6 * L[0] ** 2 + 2 * L[1]) * a) * rng.uniform(1.01, 50)
            c = theorem_constants(metric, r, g, a, lam, L)
            K, M = _constants_reference(metric, r, g, a, lam, L)
            worst = max(worst, abs(c.K - K) / abs(K), abs(c.M - M) / abs(M))
            # crossover: the two step-size arms coincide there
            T = step_size_crossover(c, r, g)
            s1, s2 = step_size_arms(c, r, g, 1)
            worst = max(worst, abs(s1 - 1.0 / (c.G * math.sqrt(T))) / s1)
        return worst, f"{n} random parameter sets"
    return _timed("theorem_constants", tol, run)


def pinsker(n: int = 1000, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng([seed, 1000])
        p = rng.dirichlet(np.ones(4), size=n)
        q = rng.dirichlet(np.ones(4) * 0.5, size=n)
        tv2 = total_variation(p, q) ** 2
        worst = max(float(np.max(tv2 - 0.5 * kl(p, q))), float(np.max(tv2 - 0.5 * kl(q, p))))
        return max(worst, 0.0), f"{n} pairs"
    return _timed("pinsker", 1e-15, run)


def state_solution_kkt(n: int = 200, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """First-order optimality of the closed-form and root-found state solutions."""
    def run():
        rng = np.random.default_rng([seed, 1100])
        worst = 0.0
        for _ in range(n):
            A = int(rng.integers(2, 7))
            p = rng.dirichlet(np.ones(A))
            q = rng.normal(size=A) * 2
            lam = float(10 ** rng.uniform(-1, 1))
            for metric in (1, 2, 3):
                x, _, _ = solve_state(metric, p, q, lam, 1e-13)
                if metric == 1:
                    g = q + lam * p / x
                elif metric == 2:
                    g = q - lam * (np.log(x / p) + 1.0)
                else:
                    g = q - 2 * lam * (x - p)
                # derivative along x -> vertex a; none may be positive at a maximizer
                scale = max(1.0, float(np.abs(g).max()))
                worst = max(worst, float(np.max(g - g @ x)) / scale)
        return worst, f"{n} rows x 3 metrics"
    return _timed("state_solution_kkt", tol, run)


ORACLE_CHECKS: Dict[str, Callable[[int], CheckResult]] = {
    "policy_evaluation_mc": lambda seed: policy_evaluation_vs_mc(seed=seed),
    "state_visitation_mc": lambda seed: visitation_vs_mc(seed=seed),
    "successor_visitation_series": lambda seed: successor_visitation_vs_series(seed=seed),
    "grad_q_fd": lambda seed: grad_q_vs_fd(seed=seed),
    "hypergrad_tabular_fd": lambda seed: hypergrad_tabular_vs_fd(n=5, seed=seed),
    "hypergrad_linear_fd": lambda seed: hypergrad_linear_vs_fd(n=2, seed=seed),
    "lower_level_brute_force": lambda seed: lower_level_vs_brute_force(n=2, seed=seed,
                                                                       samples=200_000),
}

VERIFY_CHECKS: Dict[str, Callable[[int], CheckResult]] = {
    "surrogate_lower_bounds": lambda seed: surrogate_bounds(n_pairs=200, seed=seed),
    "monotone_improvement": lambda seed: monotone_improvement(n=30, seed=seed),
    "theorem_constants": lambda seed: theorem_constants_consistency(seed=seed),
    "pinsker": lambda seed: pinsker(seed=seed),
    "state_solution_kkt": lambda seed: state_solution_kkt(seed=seed),
    "hypergrad_tabular_fd": lambda seed: hypergrad_tabular_vs_fd(n=5, seed=seed),
}


def run_checks(table: Dict[str, Callable[[int], CheckResult]], seed: int = 0) -> List[CheckResult]:
    out = []
    for name, fn in table.items():
        try:
            out.append(fn(seed))
        except Exception as exc:  # report and keep going
            out.append(CheckResult(name, False, float("inf"), 0.0, f"error: {exc!r}"))
    return out
