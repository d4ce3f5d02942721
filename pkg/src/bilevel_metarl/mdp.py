"""Finite MDPs: exact dynamic-programming oracles and Monte-Carlo estimators.

Everything here is a pure function of immutable inputs.  Policies may be given
either as an (S, A) action-probability table or as any object exposing a
``probs()`` method (e.g. :class:`bilevel_metarl.policy.SoftmaxPolicy`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Any, Tuple

import numpy as np

SCHEMA_VERSION = 1
RESIDUAL_TOL = 1e-8


class NumericalError(RuntimeError):
    """A solver produced an answer that fails its own residual check."""


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite discounted MDP with rewards on (s, a, s')."""

    transition: np.ndarray  # P(s'|s,a), shape (S, A, S)
    reward: np.ndarray  # r(s,a,s'), shape (S, A, S)
    gamma: float
    rho: np.ndarray  # initial distribution, shape (S,)

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        rho = np.array(self.rho, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape:
            raise ValueError(f"reward shape {R.shape} != transition shape {P.shape}")
        if rho.shape != (P.shape[0],):
            raise ValueError(f"rho must have shape ({P.shape[0]},), got {rho.shape}")
        if not 0.0 < float(self.gamma) < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(R)) and np.all(np.isfinite(rho))):
            raise ValueError("MDP tensors must be finite")
        if P.min() < 0 or np.abs(P.sum(axis=2) - 1.0).max() > 1e-12:
            raise ValueError("each P(.|s,a) must be a probability vector")
        if rho.min() < 0 or abs(rho.sum() - 1.0) > 1e-12:
            raise ValueError("rho must be a probability vector")
        for arr in (P, R, rho):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n_states, self.n_actions

    @property
    def expected_reward(self) -> np.ndarray:
        """r(s,a) = sum_s' P(s'|s,a) r(s,a,s')."""
        return np.einsum("ijk,ijk->ij", self.transition, self.reward)

    def reward_range(self) -> Tuple[float, float]:
        return float(self.reward.min()), float(self.reward.max())

    def shifted_r_max(self) -> float:
        """r_max after the affine shift that moves all rewards into [0, r_max]."""
        lo, hi = self.reward_range()
        return hi - min(lo, 0.0)

    def with_rho(self, rho) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward, self.gamma, rho)

    def to_json(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "rho": self.rho.tolist(),
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TabularMdp":
        if doc.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported MDP schema version {doc.get('version')!r}")
        mdp = cls(np.asarray(doc["transition"]), np.asarray(doc["reward"]),
                  doc["gamma"], np.asarray(doc["rho"]))
        if mdp.shape != (doc["n_states"], doc["n_actions"]):
            raise ValueError("declared (n_states, n_actions) disagree with tensors")
        return mdp


@dataclass(frozen=True, eq=False)
class ValueTables:
    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray

    @property
    def a_max(self) -> float:
        return float(np.abs(self.adv).max())


def as_probs(policy: Any, mdp: TabularMdp | None = None) -> np.ndarray:
    """Return the (S, A) probability table of a policy-like object."""
    pi = policy.probs() if hasattr(policy, "probs") else np.asarray(policy, dtype=float)
    if pi.ndim != 2:
        raise ValueError(f"policy table must be 2-D, got shape {pi.shape}")
    if mdp is not None and pi.shape != mdp.shape:
        raise ValueError(f"policy shape {pi.shape} does not match MDP shape {mdp.shape}")
    if pi.min() < 0 or np.abs(pi.sum(axis=1) - 1.0).max() > 1e-9:
        raise ValueError("policy rows must be probability distributions")
    return pi


def policy_transition(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """P_pi(s, s') = sum_a pi(a|s) P(s'|s,a)."""
    return np.einsum("ij,ijk->ik", pi, mdp.transition)


def _checked_solve(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    x = np.linalg.solve(A, b)
    resid = np.abs(A @ x - b).max()
    if not np.isfinite(resid) or resid > RESIDUAL_TOL * max(1.0, np.abs(b).max()):
        raise NumericalError(f"{what}: linear-solve residual {resid:.3e} exceeds {RESIDUAL_TOL}")
    return x


def policy_evaluation(mdp: TabularMdp, policy) -> ValueTables:
    """Exact V, Q and advantage of a policy via one dense linear solve."""
    pi = as_probs(policy, mdp)
    r_sa = mdp.expected_reward
    P_pi = policy_transition(mdp, pi)
    r_pi = np.sum(pi * r_sa, axis=1)
    v = _checked_solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi, "policy evaluation")
    q = r_sa + mdp.gamma * mdp.transition @ v
    return ValueTables(v=v, q=q, adv=q - v[:, None])


def bellman_residual(mdp: TabularMdp, policy, values: ValueTables) -> float:
    pi = as_probs(policy, mdp)
    target = np.sum(pi * (mdp.expected_reward + mdp.gamma * mdp.transition @ values.v), axis=1)
    return float(np.abs(target - values.v).max())


def accumulated_reward(mdp: TabularMdp, policy) -> float:
    """J(pi) = sum_s rho(s) V(s)."""
    return float(mdp.rho @ policy_evaluation(mdp, policy).v)


def _visitation_from(mdp: TabularMdp, pi: np.ndarray, init: np.ndarray) -> np.ndarray:
    """(1-gamma)(I - gamma P_pi^T)^{-1} init; ``init`` may hold several columns."""
    A = np.eye(mdp.n_states) - mdp.gamma * policy_transition(mdp, pi).T
    nu = (1.0 - mdp.gamma) * _checked_solve(A, init, "visitation")
    return np.clip(nu, 0.0, None)


def state_visitation(mdp: TabularMdp, policy) -> np.ndarray:
    """Discounted state-visitation distribution nu^pi."""
    return _visitation_from(mdp, as_probs(policy, mdp), mdp.rho)


def successor_state_visitation(mdp: TabularMdp, policy) -> np.ndarray:
    """State marginals of sigma^{(s,a)} for every start pair, shape (S, A, S)."""
    pi = as_probs(policy, mdp)
    S, A = mdp.shape
    init = mdp.transition.reshape(S * A, S).T
    return _visitation_from(mdp, pi, init).T.reshape(S, A, S)


def state_action_visitation(mdp: TabularMdp, policy, start: Tuple[int, int]) -> np.ndarray:
    """sigma^{(s,a)}(s', a'): occupancy after starting from s0 ~ P(.|s,a)."""
    s, a = start
    S, A = mdp.shape
    if not (0 <= s < S and 0 <= a < A):
        raise ValueError(f"start pair {start} outside ({S}, {A})")
    pi = as_probs(policy, mdp)
    marginal = _visitation_from(mdp, pi, mdp.transition[s, a])
    return marginal[:, None] * pi


def default_horizon(gamma: float, bias: float = 1e-3) -> int:
    """Smallest H with gamma**H < bias."""
    return int(np.floor(np.log(bias) / np.log(gamma))) + 1


def _sample_rows(rng: np.random.Generator, cdf: np.ndarray) -> np.ndarray:
    """Draw one index per row of a batch of cumulative distributions."""
    u = rng.random(cdf.shape[0])[:, None]
    idx = (u > cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def simulate_returns(mdp: TabularMdp, pi: np.ndarray, states: np.ndarray,
                     actions: np.ndarray | None, horizon: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Truncated discounted returns of parallel rollouts.

    If ``actions`` is None the first action is drawn from the policy.
    """
    n = states.shape[0]
    ret = np.zeros(n)
    if horizon <= 0:
        return ret
    P_cdf = np.cumsum(mdp.transition, axis=2)
    pi_cdf = np.cumsum(pi, axis=1)
    s = states.copy()
    a = _sample_rows(rng, pi_cdf[s]) if actions is None else actions.copy()
    disc = 1.0
    for t in range(horizon):
        s_next = _sample_rows(rng, P_cdf[s, a])
        ret += disc * mdp.reward[s, a, s_next]
        disc *= mdp.gamma
        s = s_next
        if t + 1 < horizon:
            a = _sample_rows(rng, pi_cdf[s])
    return ret


@dataclass(frozen=True, eq=False)
class McEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    n_rollouts: int
    horizon: int


def monte_carlo_q(mdp: TabularMdp, policy, n_rollouts: int = 10_000,
                  horizon: int | None = None, seed: int = 0) -> McEstimate:
    """Per-(s,a) Monte-Carlo average of truncated discounted returns."""
    if n_rollouts <= 0:
        raise ValueError("n_rollouts must be positive")
    pi = as_probs(policy, mdp)
    H = default_horizon(mdp.gamma) if horizon is None else int(horizon)
    S, A = mdp.shape
    if H <= 0:
        warnings.warn("horizon 0: Monte-Carlo Q is all zeros (full truncation bias)",
                      RuntimeWarning, stacklevel=2)
        return McEstimate(np.zeros((S, A)), np.zeros((S, A)), n_rollouts, 0)
    rng = np.random.default_rng(seed)
    ss, aa = np.meshgrid(np.arange(S), np.arange(A), indexing="ij")
    states = np.repeat(ss.ravel(), n_rollouts)
    actions = np.repeat(aa.ravel(), n_rollouts)
    ret = simulate_returns(mdp, pi, states, actions, H, rng).reshape(S, A, n_rollouts)
    mean = ret.mean(axis=2)
    if n_rollouts > 1:
        stderr = ret.std(axis=2, ddof=1) / np.sqrt(n_rollouts)
    else:
        stderr = np.full((S, A), np.inf)
    return McEstimate(mean, stderr, n_rollouts, H)


def monte_carlo_value(mdp: TabularMdp, policy, n_rollouts: int, horizon: int | None = None,
                      seed: int = 0) -> McEstimate:
    """Per-state Monte-Carlo estimate of V."""
    pi = as_probs(policy, mdp)
    H = default_horizon(mdp.gamma, 1e-12) if horizon is None else int(horizon)
    rng = np.random.default_rng(seed)
    S = mdp.n_states
    states = np.repeat(np.arange(S), n_rollouts)
    ret = simulate_returns(mdp, pi, states, None, H, rng).reshape(S, n_rollouts)
    return McEstimate(ret.mean(axis=1), ret.std(axis=1, ddof=1) / np.sqrt(n_rollouts),
                      n_rollouts, H)


def monte_carlo_visitation(mdp: TabularMdp, policy, n_samples: int, seed: int = 0,
                           init: np.ndarray | None = None) -> np.ndarray:
    """Sample-based nu: the state at a Geometric(1-gamma) stopping time."""
    pi = as_probs(policy, mdp)
    rng = np.random.default_rng(seed)
    init = mdp.rho if init is None else np.asarray(init, dtype=float)
    P_cdf = np.cumsum(mdp.transition, axis=2)
    pi_cdf = np.cumsum(pi, axis=1)
    s = rng.choice(mdp.n_states, size=n_samples, p=init)
    stop = rng.geometric(1.0 - mdp.gamma, size=n_samples) - 1
    for t in range(int(stop.max())):
        alive = stop > t
        if not alive.any():
            break
        sa = s[alive]
        a = _sample_rows(rng, pi_cdf[sa])
        s[alive] = _sample_rows(rng, P_cdf[sa, a])
    return np.bincount(s, minlength=mdp.n_states) / n_samples


def value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iters: int = 100_000):
    """Optimal Q* by value iteration; returns (q_star, v_star)."""
    r_sa = mdp.expected_reward
    v = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        q = r_sa + mdp.gamma * mdp.transition @ v
        v_new = q.max(axis=1)
        if np.abs(v_new - v).max() < tol * (1.0 - mdp.gamma):
            v = v_new
            break
        v = v_new
    else:
        raise NumericalError("value iteration did not converge")
    q = r_sa + mdp.gamma * mdp.transition @ v
    return q, q.max(axis=1)


def random_mdp(n_states: int, n_actions: int, gamma: float = 0.9, seed: int = 0,
               r_max: float = 1.0, concentration: float = 1.0) -> TabularMdp:
    """Seeded random MDP with Dirichlet transitions and uniform rewards."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    R = rng.uniform(0.0, r_max, size=(n_states, n_actions, n_states))
    rho = rng.dirichlet(np.ones(n_states))
    return TabularMdp(P, R, gamma, rho)
