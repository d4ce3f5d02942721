"""Hypergradients of J(adapted policy) with respect to the meta-parameter.

The adapted policy is an implicit function of the meta-parameter through the
stationarity conditions of the lower-level problem; differentiating those
conditions gives the Jacobian of the adapted policy, which is chained with
the policy gradient at the adapted policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .adapt import AdaptConfig, AdaptResult, FeatureProblem, adapt, centered_features
from .mdp import (NumericalError, TabularMdp, accumulated_reward, policy_evaluation,
                  policy_transition, state_visitation, successor_state_visitation)
from .policy import LINEAR, TABULAR, ZERO_PROB, SoftmaxPolicy, check_metric


class ConcavityError(NumericalError):
    """The lower-level Hessian is not negative definite at the solution."""


@dataclass(eq=False)
class Hypergradient:
    grad: np.ndarray
    per_state_jacobians: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad))


# ----------------------------------------------------------------------------
# gradient of Q with respect to the policy parameters

def grad_q_all(mdp: TabularMdp, meta: SoftmaxPolicy, values=None) -> np.ndarray:
    """grad_phi Q(s,a) for every start pair; shape (S, A) + theta.shape."""
    pi = meta.probs()
    values = policy_evaluation(mdp, meta) if values is None else values
    sigma = successor_state_visitation(mdp, meta)  # (S, A, S')
    pa = pi * values.adv
    scale = mdp.gamma / (1.0 - mdp.gamma)
    if meta.kind == TABULAR:
        return scale * sigma[:, :, :, None] * pa[None, None, :, :]
    return scale * np.einsum("ijs,sa,san->ijn", sigma, pa, meta.features)


def grad_q_wrt_meta(mdp: TabularMdp, meta: SoftmaxPolicy, s: int, a: int) -> np.ndarray:
    """gamma/(1-gamma) E_{(s',a') ~ sigma^{(s,a)}}[grad ln pi(a'|s') A(s',a')]."""
    return grad_q_all(mdp, meta)[s, a]


def policy_gradient(mdp: TabularMdp, policy: SoftmaxPolicy, values=None,
                    nu=None) -> np.ndarray:
    """grad_theta J = 1/(1-gamma) E_{nu, pi}[grad ln pi A], shaped like theta."""
    pi = policy.probs()
    values = policy_evaluation(mdp, policy) if values is None else values
    nu = state_visitation(mdp, policy) if nu is None else nu
    w = nu[:, None] * pi * values.adv / (1.0 - mdp.gamma)
    if policy.kind == TABULAR:
        return w
    return np.einsum("sa,san->n", w, policy.features)


# ----------------------------------------------------------------------------
# tabular (constrained) hypergradient

def _mixed_regularizer_rows(metric: int, p: np.ndarray, x: np.ndarray) -> np.ndarray:
    """grad_phi grad_pi d^2 for every (s, a); shape (S, A, A) in the state-s logits.

    Entry [s, a, c] is the derivative with respect to phi(s, c).
    """
    S, A = p.shape
    eye = np.eye(A)[None, :, :]
    centered = eye - p[:, None, :]  # 1(s,a) - pi_meta(.|s)
    if metric == 1:
        return -(p / x)[:, :, None] * centered
    if metric == 2:
        return -centered
    return -2.0 * p[:, :, None] * centered


def _inverse_diag(metric: int, p: np.ndarray, x: np.ndarray, lam: float) -> np.ndarray:
    """Diagonal of M(s)^{-1}, restricted to the support of x for metric 3."""
    if metric == 1:
        return x ** 2 / (lam * p)
    if metric == 2:
        return x / lam
    return np.where(x > ZERO_PROB, 1.0 / (2.0 * lam), 0.0)


def _rhs_blocks(mdp, meta, metric, lam, x):
    """grad_phi Q(s, .) - lam grad_phi grad_pi d^2 as (S, A, S, A)."""
    p = meta.probs()
    gq = grad_q_all(mdp, meta)
    mixed = _mixed_regularizer_rows(metric, p, x)
    S = p.shape[0]
    rhs = gq.copy()
    idx = np.arange(S)
    rhs[idx, :, idx, :] -= lam * mixed
    return rhs


def _outer(mdp: TabularMdp, adapted: SoftmaxPolicy):
    vals = policy_evaluation(mdp, adapted)
    nu = state_visitation(mdp, adapted)
    return vals, nu


def hypergrad_tabular_general(mdp: TabularMdp, meta: SoftmaxPolicy, result: AdaptResult,
                              metric: int, lam: float) -> Hypergradient:
    """Projected-inverse assembly with explicit per-state M(s) blocks."""
    x = result.adapted.probs()
    p = meta.probs()
    S, A = p.shape
    vals, nu = _outer(mdp, result.adapted)
    rhs = _rhs_blocks(mdp, meta, metric, lam, x).reshape(S, A, S * A)
    jac = np.zeros((S, A, S * A))
    conds = []
    for s in range(S):
        supp = x[s] > ZERO_PROB if metric == 3 else np.ones(A, dtype=bool)
        if metric == 1:
            M = lam * np.diag(p[s] / x[s] ** 2)
        elif metric == 2:
            M = lam * np.diag(1.0 / x[s])
        else:
            M = 2.0 * lam * np.eye(A)
        Ms = M[np.ix_(supp, supp)]
        cond = np.linalg.cond(Ms)
        if not np.isfinite(cond) or cond > 1e14:
            raise NumericalError(f"M(s) is singular at state {s}")
        conds.append(cond)
        Minv = np.linalg.inv(Ms)
        one = np.ones(Ms.shape[0])
        m1 = Minv @ one
        proj = Minv - np.outer(m1, m1) / (one @ m1)
        jac[s, supp] = proj @ rhs[s, supp]
    grad = np.einsum("s,sa,san->n", nu, vals.q, jac) / (1.0 - mdp.gamma)
    row_sum = float(np.abs(jac.sum(axis=1)).max())
    return Hypergradient(grad.reshape(S, A), jac.reshape(S, A, S, A),
                         {"form": "general", "max_cond_M": float(max(conds)),
                          "jacobian_row_sum": row_sum})


def hypergrad_metric1(mdp: TabularMdp, meta: SoftmaxPolicy, result: AdaptResult,
                      lam: float) -> Hypergradient:
    """Metric-1 formula with the recentering scalar c(s)."""
    x = result.adapted.probs()
    p = meta.probs()
    S, A = p.shape
    vals, nu = _outer(mdp, result.adapted)
    adv = vals.adv
    w2 = x ** 2 / p
    c = np.sum(adv * w2, axis=1) / np.sum(w2, axis=1)
    gq = grad_q_all(mdp, meta)
    coef = nu[:, None] * x * (adv - c[:, None]) / (1.0 - mdp.gamma)
    grad = np.einsum("sa,sa,saij->ij", coef, x / (lam * p), gq)
    centered = np.eye(A)[None] - p[:, None, :]
    grad += np.einsum("sa,sac->sc", coef, centered)
    return Hypergradient(grad, None, {"form": "metric1-centered", "c": c})


def hypergrad_metric2(mdp: TabularMdp, meta: SoftmaxPolicy, result: AdaptResult,
                      lam: float) -> Hypergradient:
    """Metric-2 formula: E_{nu', pi'}[A' (grad Q / lam + 1(s,a))] / (1 - gamma)."""
    x = result.adapted.probs()
    vals, nu = _outer(mdp, result.adapted)
    coef = nu[:, None] * x * vals.adv / (1.0 - mdp.gamma)
    gq = grad_q_all(mdp, meta)
    grad = np.einsum("sa,saij->ij", coef, gq) / lam + coef
    return Hypergradient(grad, None, {"form": "metric2"})


def hypergrad_metric3(mdp: TabularMdp, meta: SoftmaxPolicy, result: AdaptResult,
                      lam: float) -> Hypergradient:
    """Metric 3 with M(s) = 2 lam I on the active support of each adapted row."""
    x = result.adapted.probs()
    p = meta.probs()
    vals, nu = _outer(mdp, result.adapted)
    m = _inverse_diag(3, p, x, lam)
    c = np.sum(m * vals.adv, axis=1) / np.sum(m, axis=1)
    coef = nu[:, None] * m * (vals.adv - c[:, None]) / (1.0 - mdp.gamma)
    rhs = _rhs_blocks(mdp, meta, 3, lam, x)
    grad = np.einsum("sa,saij->ij", coef, rhs)
    n_boundary = int((x <= ZERO_PROB).sum())
    return Hypergradient(grad, None, {"form": "metric3-active-set", "boundary_entries": n_boundary})


def gradient_norm_bound(metric: int, gamma: float, a_max_adapted: float,
                        a_max_meta: float, lam: float) -> float:
    """Upper bound on |grad_phi J| for metrics 1 and 2 (inf when not applicable)."""
    a, g = a_max_adapted, gamma
    if metric == 1:
        if lam <= a_max_meta:
            return np.inf
        return a / (1 - g) * (a * g / ((lam - a_max_meta) * (1 - g)) + 2.0)
    if metric == 2:
        return a / (1 - g) * (a * g / (lam * (1 - g)) + 1.0)
    return np.inf


def hypergrad_tabular(mdp: TabularMdp, meta: SoftmaxPolicy, result: AdaptResult,
                      metric: Optional[int] = None, lam: Optional[float] = None,
                      check: bool = False) -> Hypergradient:
    """Exact hypergradient for tabular adaptation with metric 1, 2 or 3."""
    if meta.kind != TABULAR:
        raise ValueError("hypergrad_tabular needs a tabular meta-policy")
    metric = check_metric(result.diagnostics.get("metric") if metric is None else metric)
    lam = float(result.diagnostics.get("lam") if lam is None else lam)
    if metric == 1:
        hg = hypergrad_metric1(mdp, meta, result, lam)
    elif metric == 2:
        hg = hypergrad_metric2(mdp, meta, result, lam)
    else:
        hg = hypergrad_metric3(mdp, meta, result, lam)
    if not np.all(np.isfinite(hg.grad)):
        raise NumericalError("non-finite hypergradient")
    if check and metric in (1, 2):
        a_new = policy_evaluation(mdp, result.adapted).a_max
        a_old = policy_evaluation(mdp, meta).a_max
        bound = gradient_norm_bound(metric, mdp.gamma, a_new, a_old, lam)
        assert hg.norm <= bound * (1 + 1e-9), f"hypergradient norm {hg.norm} > bound {bound}"
    return hg


# ----------------------------------------------------------------------------
# conjugate gradient

@dataclass
class LinearOperator:
    """Matrix-free symmetric map v -> H v."""

    dim: int
    matvec: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_matrix(cls, H: np.ndarray) -> "LinearOperator":
        H = np.asarray(H, dtype=float)
        return cls(H.shape[0], lambda v: H @ v)

    def symmetry_gap(self, seed: int = 0) -> float:
        """|(Hu).v - (Hv).u| / (|u||v|) on one random probe pair."""
        rng = np.random.default_rng(seed)
        u, v = rng.standard_normal(self.dim), rng.standard_normal(self.dim)
        Hu, Hv = self.matvec(u), self.matvec(v)
        return abs(Hu @ v - Hv @ u) / (np.linalg.norm(u) * np.linalg.norm(v))


def conjugate_gradient(op: LinearOperator, b: np.ndarray, tol: float = 1e-10,
                       max_iters: Optional[int] = None, check_symmetry: bool = True):
    """Solve H x = b for symmetric positive-definite H.

    Returns (x, iterations, relative residual).  Raises ConcavityError on a
    non-positive curvature direction.
    """
    b = np.asarray(b, dtype=float)
    n = op.dim
    max_iters = 4 * n if max_iters is None else max_iters
    if check_symmetry:
        Hb = op.matvec(np.ones(n))
        scale = max(1.0, float(np.linalg.norm(Hb)) / np.sqrt(n))
        gap = op.symmetry_gap()
        if gap > 1e-8 * scale:
            raise NumericalError(f"operator is not symmetric (probe gap {gap:.3e})")
    bnorm = float(np.linalg.norm(b))
    x = np.zeros(n)
    if bnorm == 0.0:
        return x, 0, 0.0
    r = b.copy()
    d = r.copy()
    rr = r @ r
    for it in range(1, max_iters + 1):
        Hd = op.matvec(d)
        curv = d @ Hd
        if curv <= 0:
            raise ConcavityError("concavity condition violated: non-positive curvature "
                                 f"{curv:.3e} in conjugate gradient")
        alpha = rr / curv
        x += alpha * d
        r -= alpha * Hd
        rr_new = r @ r
        if np.sqrt(rr_new) <= tol * bnorm:
            return x, it, float(np.sqrt(rr_new) / bnorm)
        d = r + (rr_new / rr) * d
        rr = rr_new
    res = float(np.linalg.norm(b - op.matvec(x)) / bnorm)
    if res > tol:
        raise NumericalError(f"conjugate gradient did not converge: relative residual {res:.3e}")
    return x, max_iters, res


# ----------------------------------------------------------------------------
# hypergradient with features

def visitation_jacobian(mdp: TabularMdp, policy: SoftmaxPolicy, nu=None) -> np.ndarray:
    """d nu(s) / d theta, shape (S, n)."""
    pi = policy.probs()
    F = policy.feature_tensor()
    nu = state_visitation(mdp, policy) if nu is None else nu
    Fc = centered_features(F, pi)
    rhs = np.einsum("s,sa,sat,san->tn", nu, pi, mdp.transition, Fc)
    A = np.eye(mdp.n_states) - mdp.gamma * policy_transition(mdp, pi).T
    return mdp.gamma * np.linalg.solve(A, rhs)


def hypergrad_linear(mdp: TabularMdp, meta: SoftmaxPolicy, result: AdaptResult,
                     cfg: AdaptConfig, include_visitation_term: bool = True,
                     cg_tol: float = 1e-10) -> Hypergradient:
    """Implicit-function hypergradient for visitation-weighted adaptation.

    The adapted weights solve grad_theta L(theta, phi) = 0; with
    H = -grad^2_theta L and B = grad_phi grad_theta L at the solution,
    d theta'/d phi = H^{-1} B and grad_phi J = B^T H^{-1} grad_theta J(theta').
    ``include_visitation_term=False`` drops every derivative of the state
    weighting nu^{pi_phi}.
    """
    if meta.kind != LINEAR:
        raise ValueError("hypergrad_linear needs a linear meta-policy")
    metric, lam = cfg.metric, cfg.lam
    F = meta.features
    phi = meta.theta
    theta = result.adapted.theta
    vals_m = policy_evaluation(mdp, meta)
    nu = state_visitation(mdp, meta)
    prob = FeatureProblem(F, nu, vals_m.q, phi, metric, lam)
    g_stat, hess = prob.grad_hess(theta)
    H = -hess

    pi_t = prob.probs(theta)
    p = prob.p
    Fc_t = centered_features(F, pi_t)
    qc = vals_m.q - np.sum(pi_t * vals_m.q, axis=1, keepdims=True)
    gq = grad_q_all(mdp, meta, vals_m)  # (S, A, n)
    B = np.einsum("s,sa,sai,saj->ij", nu, pi_t, Fc_t, gq)
    dnu = visitation_jacobian(mdp, meta, nu) if include_visitation_term else None
    if dnu is not None:
        per_state_q = np.einsum("sa,sai->si", pi_t * qc, Fc_t)
        B += per_state_q.T @ dnu
    if metric == 3:
        B += 2.0 * lam * np.eye(phi.size)
    else:
        Fc_p = centered_features(F, p)
        if metric == 1:
            per_state = np.einsum("sa,sai->si", pi_t, F) - np.einsum("sa,sai->si", p, F)
            mixed = -np.einsum("s,sa,sai,saj->ij", nu, p, Fc_p, Fc_p)
        else:
            lr = np.log(pi_t) - np.log(p)
            per_state = np.einsum("sa,sai->si", pi_t * lr, Fc_t)
            mixed = -np.einsum("s,sa,sai,saj->ij", nu, pi_t, Fc_t, F - np.einsum(
                "sa,sai->si", p, F)[:, None, :])
        B -= lam * mixed
        if dnu is not None:
            B -= lam * (per_state.T @ dnu)

    adapted = result.adapted
    grad_outer = policy_gradient(mdp, adapted)
    op = LinearOperator.from_matrix(H)
    y, iters, res = conjugate_gradient(op, grad_outer, tol=cg_tol)
    grad = B.T @ y
    diag = {"cg_iterations": iters, "cg_residual": res,
            "stationarity": float(np.linalg.norm(g_stat)),
            "visitation_term": include_visitation_term,
            "min_eig_H": float(np.linalg.eigvalsh(0.5 * (H + H.T)).min())}
    return Hypergradient(grad, None, diag)


def hypergrad(mdp: TabularMdp, meta: SoftmaxPolicy, result: AdaptResult,
              cfg: AdaptConfig, check: bool = False) -> Hypergradient:
    if meta.kind == TABULAR:
        return hypergrad_tabular(mdp, meta, result, cfg.metric, cfg.lam, check=check)
    return hypergrad_linear(mdp, meta, result, cfg)


# ----------------------------------------------------------------------------
# one-step policy-gradient baseline

def maml_meta_gradient(mdp: TabularMdp, meta: SoftmaxPolicy, result: AdaptResult,
                       lam: float) -> Hypergradient:
    """Outer gradient through theta' = phi + g(phi)/lam with Q and nu held as data.

    d g / d phi = sum_s nu(s) sum_a pi(a|s) A(s,a) fc(s,a) fc(s,a)^T, where fc
    are the policy-centered features.
    """
    F = meta.feature_tensor()
    pi = meta.probs()
    nu = state_visitation(mdp, meta)
    q = result.q_used
    adv = q - np.sum(pi * q, axis=1, keepdims=True)
    Fc = centered_features(F, pi)
    jac = np.einsum("s,sa,sai,saj->ij", nu, pi * adv, Fc, Fc)
    outer = policy_gradient(mdp, result.adapted).ravel()
    grad = outer + jac @ outer / lam
    return Hypergradient(grad.reshape(meta.theta.shape), None, {"form": "maml"})


# ----------------------------------------------------------------------------
# finite differences

def central_differences(f: Callable[[np.ndarray], float], x: np.ndarray,
                        step: float = 1e-5) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    g = np.empty(flat.size)
    for k in range(flat.size):
        e = np.zeros(flat.size)
        e[k] = step
        g[k] = (f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))) / (2 * step)
    return g.reshape(x.shape)


def meta_objective_fn(mdp: TabularMdp, meta: SoftmaxPolicy, cfg: AdaptConfig,
                      adapt_fn=adapt) -> Callable[[np.ndarray], float]:
    """theta -> J(Alg(pi_theta)) with exact Q and an exact lower-level solve."""
    cfg = cfg.with_(q_mode="exact")

    def f(theta):
        return accumulated_reward(mdp, adapt_fn(mdp, meta.with_theta(theta), cfg).adapted)

    return f


def finite_difference_hypergrad(mdp: TabularMdp, meta: SoftmaxPolicy, cfg: AdaptConfig,
                                step: float = 1e-5,
                                fn: Optional[Callable[[np.ndarray], float]] = None
                                ) -> Hypergradient:
    """Central differences of the full adapt-then-evaluate pipeline."""
    f = meta_objective_fn(mdp, meta, cfg) if fn is None else fn
    return Hypergradient(central_differences(f, meta.theta, step), None,
                         {"form": "finite-difference", "step": step})
