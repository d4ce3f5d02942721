"""One-time within-task adaptation of a meta-policy.

Tabular problems are solved state by state:

    max_pi  sum_a pi(a) Q(s,a) - lam * d^2(pi_meta(.|s), pi)

in closed form (metrics 2, 3) or with a one-dimensional root find on the
normalization multiplier (metric 1).  Policies with features are adapted on
the visitation-weighted objective

    sum_s nu(s) sum_a pi_theta(a|s) Q(s,a) - lam * D^2(pi_meta, pi_theta)

by damped Newton ascent with a backtracking line search.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from .mdp import NumericalError, TabularMdp, monte_carlo_q, policy_evaluation, state_visitation
from .policy import LINEAR, TABULAR, ZERO_PROB, SoftmaxPolicy, check_metric, kl, tabular_from_probs

EXACT = "exact"
MONTE_CARLO = "mc"
LOG_FLOOR = 1e-300


class LambdaTooSmall(ValueError):
    """Regularization weight below the level a solver or bound requires."""

    def __init__(self, message: str, a_max: float):
        super().__init__(f"{message} (max|A| = {a_max:.6g})")
        self.a_max = a_max


@dataclass(frozen=True)
class AdaptConfig:
    metric: int = 3
    lam: float = 1.0
    q_mode: str = EXACT
    n_rollouts: int = 10_000
    horizon: Optional[int] = None
    mc_seed: int = 0
    inner_tol: float = 1e-10
    inner_max_iters: int = 200
    # strict: raise on lambda preconditions instead of recording them
    strict: bool = True
    # check_invariants: assert ratio bounds and KKT residuals on every call
    check_invariants: bool = False

    def __post_init__(self):
        check_metric(self.metric)
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not self.inner_tol > 0:
            raise ValueError("inner_tol must be positive")
        if self.q_mode not in (EXACT, MONTE_CARLO):
            raise ValueError(f"q_mode must be {EXACT!r} or {MONTE_CARLO!r}")
        if self.inner_max_iters < 1:
            raise ValueError("inner_max_iters must be >= 1")

    def with_(self, **kw) -> "AdaptConfig":
        return replace(self, **kw)


@dataclass(eq=False)
class AdaptResult:
    adapted: SoftmaxPolicy
    q_used: np.ndarray
    multipliers: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "adapted": self.adapted.to_json(),
            "q_used": self.q_used.tolist(),
            "multipliers": None if self.multipliers is None else self.multipliers.tolist(),
            "diagnostics": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                            for k, v in self.diagnostics.items()},
        }


def estimate_q(mdp: TabularMdp, policy, cfg: AdaptConfig) -> np.ndarray:
    if cfg.q_mode == EXACT:
        return policy_evaluation(mdp, policy).q
    return monte_carlo_q(mdp, policy, cfg.n_rollouts, cfg.horizon, cfg.mc_seed).mean


# ----------------------------------------------------------------------------
# per-state tabular solvers

def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-and-threshold)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def state_objective(metric: int, p: np.ndarray, q: np.ndarray, lam: float, x: np.ndarray):
    """sum_a x(a) q(a) - lam d^2(p, x) for one or many candidate rows x."""
    x = np.asarray(x, dtype=float)
    if metric == 1:
        reg = kl(p, x)
    elif metric == 2:
        reg = kl(x, p)
    else:
        reg = np.sum((x - p) ** 2, axis=-1)
    return x @ q - lam * reg


def _metric1_row(p: np.ndarray, q: np.ndarray, lam: float, tol: float, max_iters: int):
    """pi'(a) = lam p(a) / (mu - q(a)) with sum pi' = 1.

    Solved for t = mu - max q on the bracket [lam p(a*), lam] where the
    normalization sum is >= 1 and <= 1 respectively.  Newton from the left
    end is monotone for this convex decreasing function; bisection guards it.
    """
    qmax = q.max()
    gap = qmax - q
    a_star = int(np.argmax(q))
    lo, hi = lam * p[a_star], lam

    def f(t):
        r = lam * p / (t + gap)
        return r.sum() - 1.0, -(r / (t + gap)).sum()

    t = lo
    it = 0
    for it in range(1, max_iters + 1):
        val, der = f(t)
        if val > 0:
            lo = t
        else:
            hi = t
        if abs(val) <= 1e-15 or hi - lo <= 1e-16 * max(1.0, hi):
            break
        t_new = t - val / der
        if not (lo <= t_new <= hi) or not np.isfinite(t_new):
            t_new = 0.5 * (lo + hi)
        t = t_new
    else:
        val, _ = f(t)
        if abs(val) > tol:
            raise NumericalError(f"metric-1 normalization root not found (residual {val:.3e})")
    x = lam * p / (t + gap)
    return x / x.sum(), qmax + t, it


def solve_state(metric: int, p: np.ndarray, q: np.ndarray, lam: float,
                tol: float = 1e-12, max_iters: int = 200):
    """Exact maximizer of the per-state regularized problem.

    Returns (row, multiplier or None, iterations).
    """
    if metric == 1:
        return _metric1_row(p, q, lam, tol, max_iters)
    if metric == 2:
        z = np.log(p) + q / lam
        e = np.exp(z - z.max())
        return e / e.sum(), None, 0
    return project_simplex(p + q / (2.0 * lam)), None, 0


def _kkt_residual(metric: int, p, q, lam, x, mu=None) -> float:
    if metric == 1:
        return float(np.abs(q + lam * p / x - mu).max())
    if metric == 2:
        g = q - lam * np.log(x / p)
        return float(g.max() - g.min())
    g = q - 2.0 * lam * (x - p)
    supp = x > ZERO_PROB
    level = g[supp].mean()
    res = np.abs(g[supp] - level).max()
    if (~supp).any():
        res = max(res, float(np.max(g[~supp] - level, initial=0.0)))
    return float(res)


def ratio_bounds(lam: float, a_max: float) -> Tuple[float, float]:
    """Provable range of pi'(a|s) / pi_meta(a|s) after metric-1 adaptation, lam > max|A|."""
    return lam / (lam + 2.0 * a_max), lam / (lam - a_max)


def adapt_tabular(mdp: TabularMdp, meta: SoftmaxPolicy, cfg: AdaptConfig,
                  q: Optional[np.ndarray] = None) -> AdaptResult:
    """Per-state regularized improvement of a tabular meta-policy."""
    if meta.kind != TABULAR:
        raise ValueError("adapt_tabular needs a tabular meta-policy")
    if meta.shape != mdp.shape:
        raise ValueError(f"policy shape {meta.shape} does not match MDP {mdp.shape}")
    metric, lam = cfg.metric, cfg.lam
    p_all = meta.probs()
    q = estimate_q(mdp, meta, cfg) if q is None else np.asarray(q, dtype=float)
    adv = q - np.sum(p_all * q, axis=1, keepdims=True)
    a_max = float(np.abs(adv).max())
    interior_ok = lam > a_max
    if metric == 1 and not interior_ok and cfg.strict:
        raise LambdaTooSmall("lambda too small for metric-1 adaptation", a_max)

    S, A = mdp.shape
    out = np.empty((S, A))
    mus = np.empty(S) if metric == 1 else None
    iters = 0
    kkt = 0.0
    for s in range(S):
        row, mu, it = solve_state(metric, p_all[s], q[s], lam, cfg.inner_tol, cfg.inner_max_iters)
        out[s] = row
        iters = max(iters, it)
        if metric == 1:
            mus[s] = mu
        kkt = max(kkt, _kkt_residual(metric, p_all[s], q[s], lam, row, mu))
    boundary = np.argwhere(out <= 0.0)
    diag = {
        "metric": metric,
        "lam": lam,
        "iterations": iters,
        "kkt_residual": kkt,
        "a_max_meta": a_max,
        "ratio_precondition": bool(interior_ok),
        "boundary_entries": boundary.tolist(),
    }
    if cfg.check_invariants:
        scale = max(1.0, float(np.abs(q).max()))
        assert kkt <= 1e-8 * scale, f"KKT residual {kkt:.3e}"
        if metric == 1 and interior_ok:
            # pi'/pi = lam / (lam + E_pi'[A] - A(a)) with 0 <= E_pi'[A] <= max|A|
            ratio = out / p_all
            lo_b, hi_b = ratio_bounds(lam, a_max)
            assert ratio.min() >= lo_b * (1 - 1e-9), "ratio lower bound violated"
            assert ratio.max() <= hi_b * (1 + 1e-9), "ratio upper bound violated"
    return AdaptResult(tabular_from_probs(out, LOG_FLOOR), q, mus, diag)


# ----------------------------------------------------------------------------
# feature-based (visitation-weighted) problem

def centered_features(F: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """f(s,a) - E_{a'~pi(.|s)} f(s,a'), shape (S, A, n)."""
    return F - np.einsum("sa,san->sn", pi, F)[:, None, :]


class FeatureProblem:
    """Visitation-weighted regularized objective over feature weights theta.

    ``F`` holds features (S, A, n); ``w`` the state weights; ``q`` the Q table;
    ``phi`` the meta weights.  Metric 3 uses the parameter distance
    ||theta - phi||^2, metrics 1-2 the w-weighted KL divergences.
    """

    def __init__(self, F, w, q, phi, metric, lam):
        self.F = F
        self.w = w
        self.q = q
        self.phi = phi
        self.metric = metric
        self.lam = lam
        self.p = self.probs(phi)
        self.logp = np.log(self.p)

    def probs(self, theta):
        z = self.F @ theta
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def regularizer(self, theta, pi=None):
        if self.metric == 3:
            d = theta - self.phi
            return float(d @ d)
        pi = self.probs(theta) if pi is None else pi
        per = kl(self.p, pi) if self.metric == 1 else kl(pi, self.p)
        return float(self.w @ per)

    def value(self, theta):
        pi = self.probs(theta)
        return float(self.w @ np.sum(pi * self.q, axis=1)) - self.lam * self.regularizer(theta, pi)

    def grad_hess(self, theta, need_hess=True):
        pi = self.probs(theta)
        Fc = centered_features(self.F, pi)
        qc = self.q - np.sum(pi * self.q, axis=1, keepdims=True)
        wpq = self.w[:, None] * pi * qc
        g = np.einsum("sa,san->n", wpq, Fc)
        H = np.einsum("sa,san,sam->nm", wpq, Fc, Fc) if need_hess else None
        if self.metric == 3:
            g = g - 2.0 * self.lam * (theta - self.phi)
            if need_hess:
                H = H - 2.0 * self.lam * np.eye(theta.size)
            return g, H
        wpi = self.w[:, None] * pi
        cov = np.einsum("sa,san,sam->nm", wpi, Fc, Fc) if need_hess else None
        if self.metric == 1:
            Fbar_t = np.einsum("sa,san->sn", pi, self.F)
            Fbar_p = np.einsum("sa,san->sn", self.p, self.F)
            g = g - self.lam * (self.w @ (Fbar_t - Fbar_p))
            if need_hess:
                H = H - self.lam * cov
            return g, H
        lr = np.log(pi) - self.logp
        lrc = lr - np.sum(pi * lr, axis=1, keepdims=True)
        g = g - self.lam * np.einsum("sa,san->n", wpi * lr, Fc)
        if need_hess:
            H = H - self.lam * (np.einsum("sa,san,sam->nm", wpi * lrc, Fc, Fc) + cov)
        return g, H


def newton_ascent(fun, grad_hess, x0, tol, max_iters):
    """Maximize a smooth function: Newton steps when the Hessian is negative
    definite, gradient steps otherwise, both with Armijo backtracking."""
    x = np.array(x0, dtype=float)
    fx = fun(x)
    g, H = grad_hess(x)
    gnorm = float(np.linalg.norm(g))
    it = 0
    while gnorm > tol and it < max_iters:
        it += 1
        try:
            L = np.linalg.cholesky(-H)
            d = np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            d = g / max(1.0, gnorm)
        slope = float(g @ d)
        t = 1.0
        accepted = False
        for _ in range(60):
            x_new = x + t * d
            f_new = fun(x_new)
            if f_new >= fx + 1e-4 * t * slope:
                accepted = True
                break
            g_new, _ = grad_hess(x_new, need_hess=False)
            if f_new >= fx - 1e-14 * (1 + abs(fx)) and np.linalg.norm(g_new) < gnorm:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        x, fx = x_new, f_new
        g, H = grad_hess(x)
        gnorm = float(np.linalg.norm(g))
    return x, fx, gnorm, it


def concavity_threshold(lipschitz, a_max: float) -> float:
    L1, L2, _ = lipschitz
    return (6.0 * L1 ** 2 + 2.0 * L2) * a_max


def adapt_linear(mdp: TabularMdp, meta: SoftmaxPolicy, cfg: AdaptConfig,
                 q: Optional[np.ndarray] = None) -> AdaptResult:
    """Visitation-weighted adaptation of a feature-based meta-policy."""
    if meta.kind != LINEAR:
        raise ValueError("adapt_linear needs a linear meta-policy")
    if meta.shape != mdp.shape:
        raise ValueError(f"policy shape {meta.shape} does not match MDP {mdp.shape}")
    q = estimate_q(mdp, meta, cfg) if q is None else np.asarray(q, dtype=float)
    p = meta.probs()
    a_max = float(np.abs(q - np.sum(p * q, axis=1, keepdims=True)).max())
    threshold = concavity_threshold(meta.lipschitz, a_max)
    concave_ok = cfg.lam > threshold
    if cfg.metric == 3 and not concave_ok and cfg.strict:
        raise LambdaTooSmall("lambda below concavity threshold "
                             f"{threshold:.6g} = (6 L1^2 + 2 L2) max|A|", a_max)
    nu = state_visitation(mdp, meta)
    prob = FeatureProblem(meta.features, nu, q, meta.theta, cfg.metric, cfg.lam)
    theta, fval, gnorm, it = newton_ascent(prob.value, prob.grad_hess, meta.theta,
                                           cfg.inner_tol, cfg.inner_max_iters)
    if gnorm > cfg.inner_tol:
        raise NumericalError(f"linear adaptation did not converge: |grad| = {gnorm:.3e} "
                             f"after {it} iterations")
    diag = {
        "metric": cfg.metric,
        "lam": cfg.lam,
        "iterations": it,
        "grad_norm": gnorm,
        "objective": fval,
        "objective_at_meta": prob.value(meta.theta),
        "a_max_meta": a_max,
        "concavity_threshold": threshold,
        "concavity_precondition": bool(concave_ok),
    }
    return AdaptResult(meta.with_theta(theta), q, None, diag)


def adapt(mdp: TabularMdp, meta: SoftmaxPolicy, cfg: AdaptConfig,
          q: Optional[np.ndarray] = None) -> AdaptResult:
    if meta.kind == TABULAR:
        return adapt_tabular(mdp, meta, cfg, q)
    return adapt_linear(mdp, meta, cfg, q)


# ----------------------------------------------------------------------------
# sample-based surrogate

def h_transform(x):
    """2 / (1 + exp(-2 (x - 1))): a smooth clip of the likelihood ratio."""
    return 2.0 / (1.0 + np.exp(-2.0 * (np.asarray(x, dtype=float) - 1.0)))


def h_transform_grad(x):
    e = np.exp(-2.0 * (np.asarray(x, dtype=float) - 1.0))
    return 4.0 * e / (1.0 + e) ** 2


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """(s, a, Q-estimate) triples collected under the meta-policy."""

    states: np.ndarray
    actions: np.ndarray
    q_values: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        s = np.asarray(self.states, dtype=int)
        a = np.asarray(self.actions, dtype=int)
        qv = np.asarray(self.q_values, dtype=float)
        if s.size == 0:
            raise ValueError("empty sample batch")
        if not (s.shape == a.shape == qv.shape) or s.ndim != 1:
            raise ValueError("states, actions and q_values must be equal-length vectors")
        w = np.full(s.size, 1.0 / s.size) if self.weights is None else \
            np.asarray(self.weights, dtype=float)
        if w.shape != s.shape or w.min() < 0 or w.sum() <= 0:
            raise ValueError("weights must be a non-negative vector matching the batch")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "q_values", qv)
        object.__setattr__(self, "weights", w / w.sum())


def sample_batch(mdp: TabularMdp, meta: SoftmaxPolicy, n: int, seed: int = 0,
                 q: Optional[np.ndarray] = None) -> SampleBatch:
    """Draw (s, a) ~ nu x pi_meta and attach Q estimates (exact by default)."""
    rng = np.random.default_rng(seed)
    pi = meta.probs()
    nu = state_visitation(mdp, meta)
    s = rng.choice(mdp.n_states, size=n, p=nu)
    a = np.array([rng.choice(mdp.n_actions, p=pi[si]) for si in s], dtype=int)
    q = policy_evaluation(mdp, meta).q if q is None else q
    return SampleBatch(s, a, q[s, a])


class SurrogateProblem:
    """Batch objective sum_b w_b h(pi_theta/pi_meta) Q_b - lam D^2_batch."""

    def __init__(self, batch: SampleBatch, meta: SoftmaxPolicy, metric: int, lam: float):
        self.b = batch
        self.meta = meta
        self.F = meta.feature_tensor()
        self.metric = metric
        self.lam = lam
        self.p = meta.probs()
        self.phi = meta.theta.ravel()

    def _probs(self, theta):
        z = self.F @ theta
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def value_grad(self, theta):
        b = self.b
        pi = self._probs(theta)
        Fc = centered_features(self.F, pi)
        s, a, w = b.states, b.actions, b.weights
        ratio = pi[s, a] / self.p[s, a]
        val = float(w @ (h_transform(ratio) * b.q_values))
        coef = w * h_transform_grad(ratio) * b.q_values * ratio
        grad = coef @ Fc[s, a]
        ps, pis, Fcs = self.p[s], pi[s], Fc[s]
        if self.metric == 3 and self.meta.kind == LINEAR:
            d = theta - self.phi
            reg, rgrad = float(d @ d), 2.0 * d
        elif self.metric == 3:
            diff = pis - ps
            reg = float(w @ np.sum(diff ** 2, axis=1))
            rgrad = np.einsum("b,ba,ban->n", 2.0 * w, diff * pis, Fcs)
        elif self.metric == 1:
            reg = float(w @ kl(ps, pis))
            rgrad = w @ np.einsum("ba,ban->bn", pis - ps, self.F[s])
        else:
            lr = np.log(pis) - np.log(ps)
            reg = float(w @ np.sum(pis * lr, axis=1))
            rgrad = np.einsum("b,ba,ban->n", w, pis * lr, Fcs)
        return val - self.lam * reg, grad - self.lam * rgrad


def adapt_sampled_surrogate(batch: SampleBatch, meta: SoftmaxPolicy,
                            cfg: AdaptConfig) -> AdaptResult:
    """Maximize the sampled, ratio-clipped surrogate from theta = phi."""
    prob = SurrogateProblem(batch, meta, cfg.metric, cfg.lam)

    def neg(theta):
        v, g = prob.value_grad(theta)
        return -v, -g

    res = minimize(neg, prob.phi, jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.inner_max_iters * 10, "gtol": cfg.inner_tol,
                            "ftol": 1e-15})
    theta = res.x.reshape(meta.theta.shape)
    q_table = np.full(meta.shape, np.nan)
    q_table[batch.states, batch.actions] = batch.q_values
    diag = {"metric": cfg.metric, "lam": cfg.lam, "iterations": int(res.nit),
            "grad_norm": float(np.linalg.norm(res.jac)), "objective": float(-res.fun),
            "converged": bool(res.success)}
    return AdaptResult(meta.with_theta(theta), q_table, None, diag)


# ----------------------------------------------------------------------------
# baselines and repetition

def policy_gradient_direction(mdp: TabularMdp, meta: SoftmaxPolicy, q: np.ndarray,
                              nu: Optional[np.ndarray] = None) -> np.ndarray:
    """E_{s~nu, a~pi}[grad ln pi(a|s) Q(s,a)] = (1 - gamma) grad J, shaped like theta."""
    pi = meta.probs()
    nu = state_visitation(mdp, meta) if nu is None else nu
    qc = q - np.sum(pi * q, axis=1, keepdims=True)
    if meta.kind == TABULAR:
        return nu[:, None] * pi * qc
    return np.einsum("s,sa,san->n", nu, pi * qc, meta.features)


def maml_one_step(mdp: TabularMdp, meta: SoftmaxPolicy, cfg: AdaptConfig,
                  q: Optional[np.ndarray] = None) -> AdaptResult:
    """theta' = phi + (1/lam) E_{nu,pi}[grad ln pi Q]."""
    q = estimate_q(mdp, meta, cfg) if q is None else q
    step = policy_gradient_direction(mdp, meta, q) / cfg.lam
    return AdaptResult(meta.with_theta(meta.theta + step), q, None,
                       {"lam": cfg.lam, "step_norm": float(np.linalg.norm(step))})


def repeat_adapt(mdp: TabularMdp, meta: SoftmaxPolicy, cfg: AdaptConfig, k: int,
                 step_fn=adapt) -> List[AdaptResult]:
    """k successive adaptations, each from the previous adapted policy."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out = []
    current = meta
    for j in range(k):
        try:
            res = step_fn(mdp, current, cfg)
        except (ValueError, NumericalError) as exc:
            exc.args = (f"adaptation step {j + 1}: {exc.args[0] if exc.args else exc}",) \
                + exc.args[1:]
            raise
        out.append(res)
        current = res.adapted
    return out
