"""Softmax policies (tabular and linear-feature) and policy distances.

Distance convention: the first policy argument is the "from" policy (the
meta-policy in adaptation, the center policy in task variance).  With
``p`` the from-row and ``q`` the to-row,

* metric 1: KL(p || q)
* metric 2: KL(q || p)
* metric 3: squared Euclidean distance (probability rows for tabular
  policies, parameters for linear ones).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .mdp import TabularMdp, state_visitation

METRICS = (1, 2, 3)
TABULAR = "tabular"
LINEAR = "linear"
# Probabilities below this are treated as exact zeros by the KL metrics.
ZERO_PROB = 1e-250


def check_metric(i) -> int:
    if int(i) not in METRICS or int(i) != i:
        raise ValueError(f"metric must be one of {METRICS}, got {i!r}")
    return int(i)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    """pi(a|s) proportional to exp(theta(s,a)) or exp(theta . f(s,a))."""

    kind: str
    theta: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if self.kind == TABULAR:
            if theta.ndim != 2:
                raise ValueError(f"tabular theta must be (S, A), got {theta.shape}")
            if self.features is not None:
                raise ValueError("tabular policies carry no features")
        elif self.kind == LINEAR:
            feats = np.array(self.features, dtype=float)
            if feats.ndim != 3 or theta.shape != (feats.shape[2],):
                raise ValueError(f"linear policy needs features (S, A, n) and theta (n,), "
                                 f"got {feats.shape} and {theta.shape}")
            if not np.all(np.isfinite(feats)):
                raise ValueError("features must be finite")
            feats.setflags(write=False)
            object.__setattr__(self, "features", feats)
        else:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def tabular(cls, theta) -> "SoftmaxPolicy":
        return cls(TABULAR, theta)

    @classmethod
    def linear(cls, theta, features) -> "SoftmaxPolicy":
        return cls(LINEAR, theta, features)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "SoftmaxPolicy":
        return cls(TABULAR, np.zeros((n_states, n_actions)))

    @property
    def shape(self) -> Tuple[int, int]:
        if self.kind == TABULAR:
            return self.theta.shape
        return self.features.shape[:2]

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def lipschitz(self) -> Tuple[float, float, float]:
        if self.kind == TABULAR:
            return (1.0, 0.0, 0.0)
        return (float(np.linalg.norm(self.features, axis=2).max()), 0.0, 0.0)

    def with_theta(self, theta) -> "SoftmaxPolicy":
        return SoftmaxPolicy(self.kind, theta, self.features)

    def feature_tensor(self) -> np.ndarray:
        """f(s,a) as an (S, A, n) tensor; one-hot for tabular policies."""
        if self.kind == LINEAR:
            return self.features
        S, A = self.shape
        return np.eye(S * A).reshape(S, A, S * A)

    def logits(self) -> np.ndarray:
        z = self.theta if self.kind == TABULAR else self.features @ self.theta
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite logits")
        return z

    def probs(self) -> np.ndarray:
        return softmax(self.logits())

    def log_prob_gradient(self, s: int, a: int) -> np.ndarray:
        """grad_theta ln pi(a|s), shaped like theta."""
        pi = self.probs()[s]
        if self.kind == TABULAR:
            g = np.zeros_like(self.theta)
            g[s] = -pi
            g[s, a] += 1.0
            return g
        f = self.features[s]
        return f[a] - pi @ f

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "theta": self.theta.tolist(),
               "lipschitz": list(self.lipschitz)}
        if self.kind == LINEAR:
            doc["features"] = self.features.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SoftmaxPolicy":
        feats = doc.get("features")
        return cls(doc["kind"], np.asarray(doc["theta"], dtype=float),
                   None if feats is None else np.asarray(feats, dtype=float))


def tabular_from_probs(pi: np.ndarray, floor: float = 1e-300) -> SoftmaxPolicy:
    """Tabular softmax policy with logits ln(pi), zero entries floored."""
    return SoftmaxPolicy.tabular(np.log(np.maximum(pi, floor)))


def one_hot_features(n_states: int, n_actions: int) -> np.ndarray:
    return np.eye(n_states * n_actions).reshape(n_states, n_actions, n_states * n_actions)


def kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis; 0 log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return t.sum(axis=-1)


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def _reject_zeros(*rows):
    for r in rows:
        if np.min(r) <= ZERO_PROB:
            raise ValueError("KL metrics need strictly positive distributions")


def per_state_distance(i, p, q, theta_p=None, theta_q=None) -> float:
    """Squared distance d_i^2 between two action distributions."""
    i = check_metric(i)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if i == 1:
        _reject_zeros(p, q)
        return float(max(kl(p, q), 0.0))
    if i == 2:
        _reject_zeros(p, q)
        return float(max(kl(q, p), 0.0))
    if theta_p is None or theta_q is None:
        raise ValueError("metric 3 needs parameters")
    d = np.asarray(theta_p, dtype=float) - np.asarray(theta_q, dtype=float)
    return float(d.ravel() @ d.ravel())


def state_distances(i, pi_from: SoftmaxPolicy, pi_to: SoftmaxPolicy) -> np.ndarray:
    """Per-state squared distances d_i^2(pi_from(.|s), pi_to(.|s))."""
    i = check_metric(i)
    if pi_from.shape != pi_to.shape or pi_from.kind != pi_to.kind:
        raise ValueError("policies must share kind and (S, A) shape")
    p, q = pi_from.probs(), pi_to.probs()
    if i == 1:
        _reject_zeros(p, q)
        return np.maximum(kl(p, q), 0.0)
    if i == 2:
        _reject_zeros(p, q)
        return np.maximum(kl(q, p), 0.0)
    if pi_from.kind == TABULAR:
        return np.sum((p - q) ** 2, axis=1)
    d = pi_from.theta - pi_to.theta
    return np.full(p.shape[0], float(d @ d))


def policy_distance(mdp: TabularMdp, i, pi_theta: SoftmaxPolicy,
                    pi_prime: SoftmaxPolicy) -> float:
    """D^2_{tau,i}(pi_theta, pi_prime) = E_{s ~ nu^{pi_theta}} d_i^2."""
    if pi_theta.shape != mdp.shape:
        raise ValueError(f"policy shape {pi_theta.shape} does not match MDP {mdp.shape}")
    nu = state_visitation(mdp, pi_theta)
    return float(nu @ state_distances(i, pi_theta, pi_prime))
