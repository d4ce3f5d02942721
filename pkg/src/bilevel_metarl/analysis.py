"""Evaluation quantities: optimal softmax policies, task variance, TEOG,
visitation floor, advantage bound, theorem constants and bound values."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .adapt import AdaptConfig, adapt, concavity_threshold
from .mdp import TabularMdp, accumulated_reward, policy_evaluation, state_visitation, value_iteration
from .meta import TheoremConstants, theorem_constants
from .policy import SoftmaxPolicy, check_metric, kl
from .tasks import TaskDistribution

DEFAULT_LOGIT_CAP = 30.0


class AssumptionViolation(ValueError):
    pass


# ----------------------------------------------------------------------------
# optimal softmax policies

@dataclass(eq=False)
class OptimalSoftmax:
    policy: SoftmaxPolicy
    beta: float
    residual: float  # J(optimal deterministic) - J(policy)
    j_star: float

    @property
    def j(self) -> float:
        return self.j_star - self.residual


def optimal_softmax_policy(mdp: TabularMdp, tol: float = 1e-6,
                           logit_cap: float = DEFAULT_LOGIT_CAP) -> OptimalSoftmax:
    """Smallest beta with J* - J(softmax(beta (Q* - max Q*))) < tol, logits >= -cap."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    q_star, v_star = value_iteration(mdp)
    j_star = float(mdp.rho @ v_star)
    gap = q_star - q_star.max(axis=1, keepdims=True)
    gap[gap > -1e-10] = 0.0

    def build(beta):
        pol = SoftmaxPolicy.tabular(np.maximum(beta * gap, -logit_cap))
        return pol, j_star - accumulated_reward(mdp, pol)

    if np.isinf(tol):
        pol, res = build(0.0)
        return OptimalSoftmax(pol, 0.0, res, j_star)
    nonzero = -gap[gap < 0]
    beta_cap = logit_cap / nonzero.min() if nonzero.size else 0.0
    pol, res = build(0.0)
    if res < tol:
        return OptimalSoftmax(pol, 0.0, res, j_star)
    beta = 1.0
    while True:
        pol, res = build(beta)
        if res < tol or beta >= beta_cap:
            break
        beta = min(2.0 * beta, beta_cap)
    if res >= tol:
        return OptimalSoftmax(pol, beta, res, j_star)
    lo, hi = beta / 2.0, beta
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if build(mid)[1] < tol:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-9 * hi:
            break
    pol, res = build(hi)
    return OptimalSoftmax(pol, hi, res, j_star)


def optimal_policies(task_dist: TaskDistribution, tol: float = 1e-6,
                     logit_cap: float = DEFAULT_LOGIT_CAP) -> List[OptimalSoftmax]:
    return [optimal_softmax_policy(m, tol, logit_cap) for m in task_dist.tasks]


# ----------------------------------------------------------------------------
# task variance

def _distance_and_grad(metric: int, pi: np.ndarray, target: np.ndarray, log_pi=None):
    """Per-state d^2(pi, target) and its gradient in the logits of pi."""
    if metric == 1:
        log_pi = np.log(pi) if log_pi is None else log_pi
        lr = log_pi - np.log(target)
        d = np.sum(pi * lr, axis=1)
        return d, pi * (lr - d[:, None])
    if metric == 2:
        log_pi = np.log(pi) if log_pi is None else log_pi
        d = np.sum(target * (np.log(target) - log_pi), axis=1)
        return d, pi - target
    diff = pi - target
    d = np.sum(diff ** 2, axis=1)
    return d, 2.0 * pi * (diff - np.sum(pi * diff, axis=1, keepdims=True))


def expected_distance(mdp: TabularMdp, metric: int, theta: np.ndarray, target: np.ndarray,
                      with_grad: bool = True):
    """D^2(pi_theta, target) = E_{nu^{pi_theta}} d^2 and its gradient in theta."""
    pol = SoftmaxPolicy.tabular(theta)
    pi = pol.probs()
    z = theta - theta.max(axis=1, keepdims=True)
    log_pi = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nu = state_visitation(mdp, pi)
    d, dgrad = _distance_and_grad(metric, pi, target, log_pi)
    val = float(nu @ d)
    if not with_grad:
        return val, None
    # d/dtheta of sum_s nu(s) c(s) with c fixed: policy gradient with state reward c
    cost = TabularMdp(mdp.transition, np.broadcast_to(d[:, None, None], mdp.transition.shape),
                      mdp.gamma, mdp.rho)
    adv_c = policy_evaluation(cost, pi).adv
    grad = nu[:, None] * pi * adv_c + nu[:, None] * dgrad
    return val, grad


def variance_objective(task_dist: TaskDistribution, metric: int,
                       targets: Sequence[np.ndarray], theta: np.ndarray, with_grad=True):
    """Weighted sum over tasks of D^2(pi_theta, target) and its gradient.

    All tasks are evaluated with stacked linear solves.
    """
    P = np.stack([m.transition for m in task_dist.tasks])  # (n, S, A, S)
    rho = np.stack([m.rho for m in task_dist.tasks])
    gamma = task_dist.tasks[0].gamma
    tgt = np.stack(targets)
    n, S, A, _ = P.shape
    z = theta - theta.max(axis=1, keepdims=True)
    log_pi = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    pi = np.exp(log_pi)
    P_pi = np.einsum("sa,nsat->nst", pi, P)
    eye = np.eye(S)[None]
    nu = (1 - gamma) * np.linalg.solve(eye - gamma * np.swapaxes(P_pi, 1, 2), rho[..., None])[..., 0]
    d = np.empty((n, S))
    dgrad = np.empty((n, S, A))
    for k in range(n):
        d[k], dgrad[k] = _distance_and_grad(metric, pi, tgt[k], log_pi)
    w = task_dist.weights
    total = float(w @ np.sum(nu * d, axis=1))
    if not with_grad:
        return total, None
    # gradient of sum_s nu(s) c(s) with c held fixed: policy gradient for state reward c
    v_c = np.linalg.solve(eye - gamma * P_pi, d[..., None])[..., 0]
    q_c = d[:, :, None] + gamma * np.einsum("nsat,nt->nsa", P, v_c)
    adv_c = q_c - v_c[:, :, None]
    grad = np.einsum("n,ns,sa,nsa->sa", w, nu, pi, adv_c) + np.einsum("n,ns,nsa->sa", w, nu, dgrad)
    return total, grad


@dataclass(eq=False)
class VarianceResult:
    variance: float
    phi_center: SoftmaxPolicy
    grad_norm: float
    start_values: List[float]
    converged: bool


def task_variance(task_dist: TaskDistribution, metric: int, opt: Sequence[OptimalSoftmax],
                  tol: float = 1e-10, max_iters: int = 2000,
                  extra_starts: Sequence[np.ndarray] = ()) -> VarianceResult:
    """min_phi E_tau D^2_{tau,i}(pi_phi, pi*_tau) with multi-start quasi-Newton descent."""
    metric = check_metric(metric)
    targets = [o.policy.probs() for o in opt]
    shape = task_dist.shape
    starts = [np.zeros(shape)] + [o.policy.theta for o in opt] + [np.asarray(s) for s in extra_starts]
    uniq = []
    for s in starts:
        if not any(np.array_equal(s, u) for u in uniq):
            uniq.append(s)

    def fun(x):
        v, g = variance_objective(task_dist, metric, targets, x.reshape(shape))
        return v, g.ravel()

    best = None
    start_values = []
    for x0 in uniq:
        start_values.append(variance_objective(task_dist, metric, targets, x0, False)[0])
        res = minimize(fun, x0.ravel(), jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iters, "gtol": tol, "ftol": 1e-15})
        if best is None or res.fun < best.fun:
            best = res
    theta = best.x.reshape(shape)
    gnorm = float(np.linalg.norm(best.jac))
    return VarianceResult(float(best.fun), SoftmaxPolicy.tabular(theta), gnorm, start_values,
                          bool(best.success or gnorm <= 1e-6))


# ----------------------------------------------------------------------------
# TEOG, visitation floor and advantage bound

@dataclass(eq=False)
class TeogResult:
    teog: float
    gaps: np.ndarray
    j_adapted: np.ndarray
    j_opt: np.ndarray


def teog(task_dist: TaskDistribution, meta: SoftmaxPolicy, adapt_cfg: AdaptConfig,
         opt: Sequence[OptimalSoftmax], step_fn=adapt) -> TeogResult:
    """E_tau [J(pi*_tau) - J(Alg(pi_meta, tau))] with exact values."""
    acfg = adapt_cfg.with_(q_mode="exact")
    j_ad = np.array([accumulated_reward(m, step_fn(m, meta, acfg).adapted)
                     for m in task_dist.tasks])
    j_opt = np.array([o.j for o in opt])
    gaps = j_opt - j_ad
    return TeogResult(task_dist.expectation(gaps), gaps, j_ad, j_opt)


def epsilon_and_amax(task_dist: TaskDistribution, phi_center: SoftmaxPolicy,
                     probe_policies: Sequence[SoftmaxPolicy] = ()):
    """(min visitation over tasks/probes/states, max |A| of the center policy)."""
    probes = [phi_center] + list(probe_policies)
    eps = min(float(state_visitation(m, p).min()) for m in task_dist.tasks for p in probes)
    if eps <= 0.0:
        raise AssumptionViolation("Assumption of sufficient state visits violated: a state has "
                                  "zero visitation; mix a uniform component into rho "
                                  "(GridSpec.rho_mix)")
    a_max = max(policy_evaluation(m, phi_center).a_max for m in task_dist.tasks)
    return eps, a_max


def theorem_lambda(metric: int, a_max: float, epsilon: float, gamma: float,
                   lipschitz=(1.0, 0.0, 0.0)) -> float:
    metric = check_metric(metric)
    if not a_max > 0:
        raise ValueError("theorem lambda undefined for A_max = 0")
    if not epsilon > 0:
        raise ValueError("theorem lambda needs epsilon > 0")
    if metric in (1, 2):
        return 2.0 * a_max / ((1.0 - gamma) * epsilon)
    return concavity_threshold(lipschitz, a_max) / ((1.0 - gamma) * epsilon)


@dataclass(frozen=True)
class BoundInputs:
    gamma: float
    r_max: float
    a_max: float
    epsilon: float
    variance: float
    lam: Optional[float] = None
    lipschitz: tuple = (1.0, 0.0, 0.0)
    T: Optional[int] = None

    def __post_init__(self):
        for name in ("gamma", "r_max", "a_max", "epsilon", "variance"):
            v = getattr(self, name)
            if v is None or not np.isfinite(v):
                raise ValueError(f"bound input {name!r} missing or non-finite")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.a_max < 0 or self.variance < 0:
            raise ValueError("a_max and variance must be non-negative")


def theoretical_bound(inputs: BoundInputs, metric: int) -> float:
    """Variance-proportional optimality-gap bound (asymptotic in T)."""
    metric = check_metric(metric)
    g, a, eps = inputs.gamma, inputs.a_max, inputs.epsilon
    if metric in (1, 2):
        coef = 2.0 * (1.0 + g) * a
    else:
        L1, L2, _ = inputs.lipschitz
        coef = ((6.0 + 4.0 * g) * L1 ** 2 + 2.0 * L2) * a
    return coef * inputs.variance / ((1.0 - g) ** 2 * eps)


# ----------------------------------------------------------------------------
# meta-test curves

def meta_test_curve(task_dist: TaskDistribution, meta: SoftmaxPolicy, adapt_cfg: AdaptConfig,
                    k_max: int, step_fn=adapt):
    """[(k, weighted mean J, weighted std J)] for k = 0..k_max adaptation steps."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    acfg = adapt_cfg.with_(q_mode="exact")
    J = np.zeros((len(task_dist), k_max + 1))
    for i, mdp in enumerate(task_dist.tasks):
        pol = meta
        J[i, 0] = accumulated_reward(mdp, pol)
        for k in range(1, k_max + 1):
            pol = step_fn(mdp, pol, acfg).adapted
            J[i, k] = accumulated_reward(mdp, pol)
    w = task_dist.weights
    mean = w @ J
    std = np.sqrt(np.maximum(w @ (J - mean) ** 2, 0.0))
    return [(k, float(mean[k]), float(std[k])) for k in range(k_max + 1)]


# ----------------------------------------------------------------------------
# report

@dataclass(eq=False)
class AnalysisReport:
    label: str
    metric: int
    lam_train: float
    lam_theorem: float
    teog: float
    teog_theorem_lambda: float
    bound: float
    variance: float
    epsilon: float
    a_max: float
    r_max_raw: float
    r_max_shifted: float
    gamma: float
    optimal_residual: float
    constants: dict
    per_task: List[dict] = field(default_factory=list)
    meta_test_curve: List[tuple] = field(default_factory=list)
    baseline_curve: List[tuple] = field(default_factory=list)
    h_term: str = "not evaluated (non-constructive); bound is asymptotic in T"

    @property
    def within_bound(self) -> bool:
        return self.teog <= self.bound

    def summary_row(self) -> dict:
        return {"label": self.label, "metric": self.metric, "lam_train": self.lam_train,
                "lam_theorem": self.lam_theorem, "teog": self.teog,
                "teog_theorem_lambda": self.teog_theorem_lambda, "bound": self.bound,
                "within_bound": int(self.within_bound), "variance": self.variance,
                "epsilon": self.epsilon, "a_max": self.a_max, "r_max_raw": self.r_max_raw,
                "r_max_shifted": self.r_max_shifted, "gamma": self.gamma,
                "optimal_residual": self.optimal_residual,
                **{f"{k}": v for k, v in self.constants.items()}}

    def to_json(self) -> dict:
        doc = self.summary_row()
        doc.update({"per_task": self.per_task, "meta_test_curve": self.meta_test_curve,
                    "baseline_curve": self.baseline_curve, "h_term": self.h_term,
                    "within_bound": self.within_bound})
        return doc

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)

    def write_csv(self, path):
        """One row per task plus a summary row."""
        cols = ["row", "task", "j_opt", "j_adapted", "gap", "teog", "bound", "variance",
                "epsilon", "a_max", "lam_train", "lam_theorem"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for t in self.per_task:
                w.writerow(["task", t["task"], _fmt(t["j_opt"]), _fmt(t["j_adapted"]),
                            _fmt(t["gap"]), "", "", "", "", "", "", ""])
            w.writerow(["summary", "", "", "", "", _fmt(self.teog), _fmt(self.bound),
                        _fmt(self.variance), _fmt(self.epsilon), _fmt(self.a_max),
                        _fmt(self.lam_train), _fmt(self.lam_theorem)])


def _fmt(x) -> str:
    return repr(float(x))


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean", "std"])
        for k, m, s in curve:
            w.writerow([k, _fmt(m), _fmt(s)])


def analyze(task_dist: TaskDistribution, meta: SoftmaxPolicy, adapt_cfg: AdaptConfig,
            opt: Sequence[OptimalSoftmax], label: str = "", k_max: int = 5,
            probes: Sequence[SoftmaxPolicy] = (), variance: Optional[VarianceResult] = None,
            baseline: Optional[SoftmaxPolicy] = None, baseline_step=None,
            T: Optional[int] = None) -> AnalysisReport:
    """TEOG of one-time adaptation against the variance bound, plus curves."""
    metric = adapt_cfg.metric
    gamma = task_dist.tasks[0].gamma
    var = task_variance(task_dist, metric, opt) if variance is None else variance
    eps, a_max = epsilon_and_amax(task_dist, var.phi_center,
                                  [meta] + list(probes) + [o.policy for o in opt])
    lipschitz = meta.lipschitz
    r_raw = max(m.reward_range()[1] for m in task_dist.tasks)
    r_shift = max(m.shifted_r_max() for m in task_dist.tasks)
    inputs = BoundInputs(gamma, r_shift, a_max, eps, var.variance, None, lipschitz, T)
    bound = theoretical_bound(inputs, metric)
    loose = adapt_cfg.with_(strict=False)
    tg = teog(task_dist, meta, loose, opt)
    if a_max > 0:
        lam_thm = theorem_lambda(metric, a_max, eps, gamma, lipschitz)
        consts = {k: float(v) for k, v in asdict(
            theorem_constants(metric, r_shift, gamma, a_max, lam_thm, lipschitz)).items()}
        tg_thm = teog(task_dist, meta, loose.with_(lam=lam_thm), opt).teog
    else:
        # every policy is optimal on every task; theorem lambda is undefined
        lam_thm = float("nan")
        consts = {k: float("nan") for k in ("B", "C", "G", "K", "M")}
        tg_thm = tg.teog
    per_task = [{"task": i, "j_opt": float(tg.j_opt[i]), "j_adapted": float(tg.j_adapted[i]),
                 "gap": float(tg.gaps[i])} for i in range(len(task_dist))]
    curve = meta_test_curve(task_dist, meta, loose, k_max)
    base_curve = []
    if baseline is not None:
        base_curve = meta_test_curve(task_dist, baseline, loose, k_max,
                                     step_fn=baseline_step or adapt)
    return AnalysisReport(
        label=label, metric=metric, lam_train=adapt_cfg.lam, lam_theorem=lam_thm,
        teog=tg.teog, teog_theorem_lambda=tg_thm, bound=bound, variance=var.variance,
        epsilon=eps, a_max=a_max, r_max_raw=r_raw, r_max_shifted=r_shift, gamma=gamma,
        optimal_residual=float(max(o.residual for o in opt)),
        constants=consts,
        per_task=per_task, meta_test_curve=curve, baseline_curve=base_curve)
