"""Meta-training loop, theorem step sizes and the batched practical variant."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .adapt import AdaptConfig, adapt, maml_one_step
from .hypergrad import hypergrad, maml_meta_gradient
from .mdp import NumericalError, accumulated_reward
from .policy import SoftmaxPolicy, check_metric
from .tasks import TaskDistribution

THEOREM = "theorem"
FIXED = "fixed"
FIXED_CLIP = "fixed_clip"
BILEVEL = "bilevel"
MAML = "maml"
TRACE_HEADER = ("iter", "task_id", "grad_norm", "meta_obj", "ms")


# ----------------------------------------------------------------------------
# theorem constants and step sizes

@dataclass(frozen=True)
class TheoremConstants:
    B: float
    C: float
    G: float
    K: float
    M: float


def check_theorem_lambda(metric: int, lam: float, a_max: float, lipschitz=(1.0, 0.0, 0.0)):
    L1, L2, _ = lipschitz
    if metric in (1, 2) and lam < 2.0 * a_max:
        raise ValueError(f"metric {metric} needs lam >= 2 A_max = {2 * a_max:.6g}, got {lam}")
    if metric == 3 and lam <= (6 * L1 ** 2 + 2 * L2) * a_max:
        raise ValueError(f"metric 3 needs lam > (6 L1^2 + 2 L2) A_max = "
                         f"{(6 * L1 ** 2 + 2 * L2) * a_max:.6g}, got {lam}")


def theorem_constants(metric: int, r_max: float, gamma: float, a_max: float, lam: float,
                      lipschitz=(1.0, 0.0, 0.0)) -> TheoremConstants:
    """Smoothness (B), Lipschitz (C), gradient-bound (G) and rate (K, M) constants."""
    metric = check_metric(metric)
    check_theorem_lambda(metric, lam, a_max, lipschitz)
    g1 = 1.0 - gamma
    if metric == 1:
        B = 16 * r_max / (lam * g1 ** 3) + 24 / g1 + 12 / lam
        C = 6 / g1
        G = 4 * a_max / g1 ** 2
    elif metric == 2:
        B = 16 * r_max / (lam * g1 ** 3) + 18 / g1 ** 2
        C = 4 / g1
        G = 2 * a_max / g1 ** 2
    else:
        L1, L2, L3 = lipschitz
        X = lam + 2 * gamma / g1 * L1 ** 2 * a_max
        Y = lam - (6 * L1 ** 2 + 2 * L2) * a_max
        G = L1 * a_max * X / (g1 * Y)
        C = 2 * L1 * X / (g1 * Y)
        B = (160 * L1 ** 3 + 56 * L1 * L2 + 4 * L3) * X ** 2 / (g1 ** 3 * Y ** 2)
    K = 2 * (B + 2 * C ** 2) * r_max ** 2 / g1 ** 4
    M = (B + 2 * C ** 2) * G * r_max / g1 ** 4
    return TheoremConstants(B, C, G, K, M)


def step_size_arms(consts: TheoremConstants, r_max: float, gamma: float, T: int):
    smooth = 1.0 / (r_max * consts.B / (1 - gamma) ** 2
                    + 2 * gamma * r_max * consts.C ** 2 / (1 - gamma) ** 3)
    decay = 1.0 / (consts.G * np.sqrt(T)) if consts.G > 0 else np.inf
    return smooth, decay


def theorem_step_size(metric: int, r_max: float, gamma: float, a_max: float, lam: float,
                      T: int, lipschitz=(1.0, 0.0, 0.0)) -> float:
    consts = theorem_constants(metric, r_max, gamma, a_max, lam, lipschitz)
    return float(min(step_size_arms(consts, r_max, gamma, T)))


def step_size_crossover(consts: TheoremConstants, r_max: float, gamma: float) -> float:
    """T at which the two arms of the step-size minimum are equal."""
    smooth, _ = step_size_arms(consts, r_max, gamma, 1)
    return float((1.0 / (consts.G * smooth)) ** 2)


# ----------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class MetaTrainConfig:
    iterations: int = 100
    step_rule: str = FIXED
    alpha: float = 0.1
    clip_norm: float = np.inf
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    algorithm: str = BILEVEL
    # bound on |advantage| used by the theorem step rule (None: r_max / (1 - gamma))
    a_max: Optional[float] = None
    track_objective: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_rule not in (THEOREM, FIXED, FIXED_CLIP):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.algorithm not in (BILEVEL, MAML):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")

    def with_(self, **kw) -> "MetaTrainConfig":
        return replace(self, **kw)


@dataclass
class TraceRecord:
    iteration: int
    task_ids: Tuple[int, ...]
    grad_norm: float
    meta_obj: float
    ms: float
    full_obj: Optional[float] = None


@dataclass(eq=False)
class TrainTrace:
    records: List[TraceRecord]
    phi: SoftmaxPolicy
    alpha: float
    checkpoints: List[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def grad_norms(self) -> np.ndarray:
        return np.array([r.grad_norm for r in self.records])

    def write_csv(self, path, timing: bool = True):
        header = TRACE_HEADER if timing else TRACE_HEADER[:-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in self.records:
                row = [r.iteration, ";".join(map(str, r.task_ids)),
                       repr(float(r.grad_norm)), repr(float(r.meta_obj))]
                if timing:
                    row.append(f"{r.ms:.3f}")
                w.writerow(row)

    def write_checkpoints(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for ck in self.checkpoints:
            doc = {"iteration": ck["iteration"], "phi": ck["phi"].to_json(),
                   "rng_state_digest": ck["rng_state_digest"]}
            (d / f"checkpoint_{ck['iteration']:06d}.json").write_text(json.dumps(doc))


def rng_digest(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha256(state.encode()).hexdigest()


def task_outer_gradient(mdp, phi: SoftmaxPolicy, acfg: AdaptConfig, algorithm: str = BILEVEL):
    """(gradient of J after adaptation, J after adaptation) for one task."""
    if algorithm == MAML:
        res = maml_one_step(mdp, phi, acfg)
        hg = maml_meta_gradient(mdp, phi, res, acfg.lam)
    else:
        res = adapt(mdp, phi, acfg)
        hg = hypergrad(mdp, phi, res, acfg)
    return hg.grad, accumulated_reward(mdp, res.adapted)


def meta_objective(task_dist: TaskDistribution, phi: SoftmaxPolicy, acfg: AdaptConfig,
                   algorithm: str = BILEVEL) -> float:
    """E_tau J(Alg(pi_phi, tau)) over the finite task set, exact Q."""
    acfg = acfg.with_(q_mode="exact")
    step = maml_one_step if algorithm == MAML else adapt
    vals = [accumulated_reward(m, step(m, phi, acfg).adapted) for m in task_dist.tasks]
    return task_dist.expectation(vals)


def resolve_alpha(task_dist: TaskDistribution, init: SoftmaxPolicy, cfg: MetaTrainConfig) -> float:
    if cfg.step_rule != THEOREM:
        return cfg.alpha
    gamma = task_dist.tasks[0].gamma
    r_max = max(t.shifted_r_max() for t in task_dist.tasks)
    a_max = r_max / (1 - gamma) if cfg.a_max is None else cfg.a_max
    return theorem_step_size(cfg.adapt.metric, r_max, gamma, a_max, cfg.adapt.lam,
                             cfg.iterations, init.lipschitz)


def _select_batch(task_dist: TaskDistribution, rng: np.random.Generator, batch_size: int):
    n = len(task_dist)
    if batch_size >= n:
        return np.arange(n), task_dist.weights
    ids = np.sort(rng.choice(n, size=batch_size, replace=False, p=task_dist.weights))
    return ids, np.full(batch_size, 1.0 / batch_size)


def meta_train_batched(task_dist: TaskDistribution, init: SoftmaxPolicy,
                       cfg: MetaTrainConfig) -> TrainTrace:
    """Gradient ascent on the meta-objective with task batches and optional clipping.

    A batch as large as the task set uses every task with its weight, i.e.
    the exact expected hypergradient.
    """
    if init.shape != task_dist.shape:
        raise ValueError(f"init shape {init.shape} does not match tasks {task_dist.shape}")
    alpha = resolve_alpha(task_dist, init, cfg)
    rng = np.random.default_rng(cfg.seed)
    phi = init
    records, checkpoints = [], []
    clip = cfg.clip_norm if cfg.step_rule == FIXED_CLIP else np.inf
    for t in range(cfg.iterations):
        t0 = time.perf_counter()
        ids, w = _select_batch(task_dist, rng, cfg.batch_size)
        acfg = cfg.adapt
        if acfg.q_mode != "exact":
            acfg = acfg.with_(mc_seed=int(rng.integers(2 ** 31)))
        grad = np.zeros_like(phi.theta)
        obj = 0.0
        for i, wi in zip(ids, w):
            try:
                g, j = task_outer_gradient(task_dist.tasks[i], phi, acfg, cfg.algorithm)
            except (ValueError, NumericalError) as exc:
                exc.args = (f"iteration {t}, task {i}: {exc.args[0] if exc.args else exc}",) \
                    + exc.args[1:]
                raise
            grad += wi * g
            obj += wi * j
        grad /= w.sum()
        obj /= w.sum()
        gnorm = float(np.linalg.norm(grad))
        if gnorm > clip:
            grad = grad * (clip / gnorm)
        full = meta_objective(task_dist, phi, cfg.adapt, cfg.algorithm) \
            if cfg.track_objective else None
        phi = phi.with_theta(phi.theta + alpha * grad)
        ms = 1000.0 * (time.perf_counter() - t0)
        records.append(TraceRecord(t, tuple(int(i) for i in ids), gnorm, obj, ms, full))
        if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            checkpoints.append({"iteration": t + 1, "phi": phi, "rng_state_digest": rng_digest(rng)})
    return TrainTrace(records, phi, alpha, checkpoints)


def meta_train(task_dist: TaskDistribution, init: SoftmaxPolicy,
               cfg: MetaTrainConfig) -> TrainTrace:
    """Single-task stochastic hypergradient ascent."""
    return meta_train_batched(task_dist, init, cfg.with_(batch_size=1))


def averaged_gradient(task_dist: TaskDistribution, phi: SoftmaxPolicy, acfg: AdaptConfig,
                      ids: Sequence[int], algorithm: str = BILEVEL) -> np.ndarray:
    """Weighted mean of per-task outer gradients over the given task ids."""
    w = task_dist.weights[list(ids)]
    g = sum(wi * task_outer_gradient(task_dist.tasks[i], phi, acfg, algorithm)[0]
            for i, wi in zip(ids, w))
    return g / w.sum()
