"""Seeded Frozen-Lake task distributions and their on-disk format."""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .mdp import TabularMdp

# action order follows the classic Frozen Lake: left, down, right, up
MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))
N_ACTIONS = 4

PRESETS = {
    "high": {"hole_prob": 0.3},
    "low": {"hole_prob": 0.1},
}
PRACTICAL_LAMBDA = {
    "high": {1: 0.5, 2: 0.5, 3: 0.04},
    "low": {1: 0.25, 2: 0.25, 3: 0.02},
}
PRESET_TASKS = 20


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    width: int = 4
    height: int = 4
    hole_prob: float = 0.1
    slip_prob: float = 0.0
    goal_reward: float = 1.0
    hole_reward: float = -1.0
    gamma: float = 0.8
    seed: int = 0
    # weight of the uniform component mixed into the start distribution
    rho_mix: float = 0.0
    max_retries: int = 1000

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.width * self.height < 2:
            raise ValueError("grid needs at least two cells")
        if not 0.0 <= self.hole_prob < 1.0:
            raise ValueError("hole_prob must lie in [0, 1)")
        if not 0.0 <= self.slip_prob <= 1.0:
            raise ValueError("slip_prob must lie in [0, 1]")
        if not 0.0 <= self.rho_mix <= 1.0:
            raise ValueError("rho_mix must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def start(self) -> int:
        return 0

    @property
    def goal(self) -> int:
        return self.n_states - 1

    def with_(self, **kw) -> "GridSpec":
        return replace(self, **kw)


def preset_spec(name: str, **overrides) -> GridSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return GridSpec(**{**PRESETS[name], **overrides})


def _path_exists(spec: GridSpec, holes: np.ndarray) -> bool:
    W, H = spec.width, spec.height
    seen = {spec.start}
    todo = deque([spec.start])
    while todo:
        s = todo.popleft()
        if s == spec.goal:
            return True
        r, c = divmod(s, W)
        for dr, dc in MOVES:
            rr, cc = r + dr, c + dc
            if 0 <= rr < H and 0 <= cc < W:
                t = rr * W + cc
                if t not in seen and not holes[t]:
                    seen.add(t)
                    todo.append(t)
    return False


def sample_holes(spec: GridSpec) -> np.ndarray:
    """Boolean hole mask with a start-to-goal path; resamples as needed."""
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.max_retries):
        holes = rng.random(spec.n_states) < spec.hole_prob
        holes[spec.start] = holes[spec.goal] = False
        if _path_exists(spec, holes):
            return holes
    raise GenerationError(f"no start-to-goal path after {spec.max_retries} draws "
                          f"(seed {spec.seed}, hole_prob {spec.hole_prob})")


def build_grid_mdp(spec: GridSpec, holes: np.ndarray) -> TabularMdp:
    """Gridworld MDP for a given hole layout; goal and holes are absorbing."""
    W, H, S = spec.width, spec.height, spec.n_states
    P = np.zeros((S, N_ACTIONS, S))
    R = np.zeros((S, N_ACTIONS, S))

    def step(s, move):
        r, c = divmod(s, W)
        rr, cc = r + MOVES[move][0], c + MOVES[move][1]
        return rr * W + cc if (0 <= rr < H and 0 <= cc < W) else s

    for s in range(S):
        if holes[s] or s == spec.goal:
            P[s, :, s] = 1.0
            continue
        for a in range(N_ACTIONS):
            lateral = ((a - 1) % 4, (a + 1) % 4)
            outcomes = [(a, 1.0 - spec.slip_prob)] + [(m, spec.slip_prob / 2) for m in lateral]
            for move, prob in outcomes:
                if prob > 0:
                    P[s, a, step(s, move)] += prob
        for t in range(S):
            if t == spec.goal:
                R[s, :, t] = spec.goal_reward
            elif holes[t]:
                R[s, :, t] = spec.hole_reward
    rho = np.zeros(S)
    rho[spec.start] = 1.0
    if spec.rho_mix > 0:
        rho = (1.0 - spec.rho_mix) * rho + spec.rho_mix / S
    return TabularMdp(P, R, spec.gamma, rho)


def generate_frozen_lake(spec: GridSpec) -> TabularMdp:
    return build_grid_mdp(spec, sample_holes(spec))


def mdp_checksum(mdp: TabularMdp) -> str:
    return hashlib.sha256(_dumps(mdp.to_json()).encode()).hexdigest()


def _dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


@dataclass(eq=False)
class TaskDistribution:
    tasks: List[TabularMdp]
    weights: np.ndarray
    spec: Optional[dict] = None
    seed: Optional[int] = None
    layouts: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("a task distribution needs at least one task")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.tasks),) or w.min() < 0 or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector over tasks")
        shape = self.tasks[0].shape
        if any(t.shape != shape for t in self.tasks):
            raise ValueError("all tasks must share (S, A)")
        self.weights = w

    def __len__(self):
        return len(self.tasks)

    @property
    def shape(self):
        return self.tasks[0].shape

    @classmethod
    def uniform(cls, tasks, **kw) -> "TaskDistribution":
        n = len(tasks)
        return cls(list(tasks), np.full(n, 1.0 / n), **kw)

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        return rng.choice(len(self.tasks), size=size, p=self.weights)

    def expectation(self, values) -> float:
        return float(self.weights @ np.asarray(values, dtype=float))

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        checksums = []
        for i, mdp in enumerate(self.tasks):
            text = _dumps(mdp.to_json())
            (d / f"task_{i:03d}.json").write_text(text)
            checksums.append(hashlib.sha256(text.encode()).hexdigest())
        manifest = {"seed": self.seed, "spec": self.spec, "weights": self.weights.tolist(),
                    "checksums": checksums,
                    "files": [f"task_{i:03d}.json" for i in range(len(self.tasks))]}
        if self.layouts is not None:
            manifest["layouts"] = self.layouts.astype(int).tolist()
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "TaskDistribution":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        tasks = []
        for name, digest in zip(manifest["files"], manifest["checksums"]):
            text = (d / name).read_text()
            if hashlib.sha256(text.encode()).hexdigest() != digest:
                raise ValueError(f"checksum mismatch for {name}")
            tasks.append(TabularMdp.from_json(json.loads(text)))
        layouts = manifest.get("layouts")
        return cls(tasks, np.asarray(manifest["weights"]), manifest.get("spec"),
                   manifest.get("seed"), None if layouts is None else np.asarray(layouts, bool))


def task_seeds(seed: int, n: int) -> List[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def make_task_distribution(n_tasks: int, spec_template: GridSpec, seed: int) -> TaskDistribution:
    """n_tasks independently seeded grids with uniform weights."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    tasks, layouts = [], []
    for i, s in enumerate(task_seeds(seed, n_tasks)):
        spec = spec_template.with_(seed=s)
        try:
            holes = sample_holes(spec)
        except GenerationError as exc:
            raise GenerationError(f"task {i}: {exc}") from exc
        layouts.append(holes)
        tasks.append(build_grid_mdp(spec, holes))
    return TaskDistribution(tasks, np.full(n_tasks, 1.0 / n_tasks), asdict(spec_template),
                            seed, np.array(layouts))


def preset_distribution(name: str, seed: int = 0, n_tasks: int = PRESET_TASKS,
                        **overrides) -> TaskDistribution:
    return make_task_distribution(n_tasks, preset_spec(name, **overrides), seed)
