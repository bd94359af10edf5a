"""Experiment orchestration: config files, seed sweeps, aggregation, CSV.

Every run of a sweep gets an independent counter-based random stream
derived from (base_seed, run_index), so results are bit-reproducible and
order-independent regardless of how the sweep is scheduled.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .envs import (
    ObjectworldSpec,
    TaskChain,
    build_objectworld_family,
    multi_goal_family,
    paper_objectworld_duplicates,
    successor_chain,
    two_rooms_family,
)
from .mdp import TabularMdp, min_gap, value_iteration

SCENARIOS = ("two-rooms", "multi-goal", "objectworld", "synthetic-hmm")


class ConfigError(ValueError):
    """The experiment configuration is missing or malformed."""


@dataclass
class ExperimentConfig:
    """Validated experiment description loaded from a JSON document."""

    scenario: str
    num_runs: int
    base_seed: int
    params: dict = field(default_factory=dict)
    output_dir: Path | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(
                f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}"
            )
        if self.num_runs < 1:
            raise ConfigError("num_runs must be at least 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        try:
            scenario = doc["scenario"]
        except KeyError:
            raise ConfigError("config must set 'scenario'") from None
        params = {
            key: value for key, value in doc.items()
            if key not in ("scenario", "num_runs", "base_seed", "output_dir")
        }
        out_dir = doc.get("output_dir")
        return cls(
            scenario=scenario,
            num_runs=int(doc.get("num_runs", 1)),
            base_seed=int(doc.get("base_seed", 0)),
            params=params,
            output_dir=Path(out_dir) if out_dir else None,
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def get(self, key, default=None):
        return self.params.get(key, default)

    def require(self, key):
        try:
            return self.params[key]
        except KeyError:
            raise ConfigError(f"config must set {key!r}") from None


def run_rng(base_seed: int, run_index: int) -> np.random.Generator:
    """Independent counter-based stream for one run of a sweep."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([base_seed, run_index]))
    )


def worker_count() -> int:
    """Worker cap from SEQTRANSFER_THREADS; defaults to 1 (serial)."""
    raw = os.environ.get("SEQTRANSFER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("SEQTRANSFER_THREADS must be an integer") from None
    return max(n, 1)


def sweep(fn, num_runs: int):
    """Run fn(run_index) for each run; results ordered by run index."""
    workers = worker_count()
    indices = list(range(num_runs))
    if workers == 1:
        return [fn(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, indices))


@dataclass(frozen=True)
class AggregateResult:
    """Mean with a Student-t confidence half-width."""

    mean: float
    sd: float
    half_width: float
    count: int
    level: float

    def as_dict(self) -> dict:
        return {
            "mean": self.mean,
            "sd": self.sd,
            "half_width": self.half_width,
            "count": self.count,
            "level": self.level,
        }


def aggregate(values, level: float = 0.99) -> AggregateResult:
    """Mean, sample sd and t_{level, n-1} * sd / sqrt(n) half-width.

    A single value yields an infinite half-width; an empty list is an error.
    """
    vals = np.asarray(list(values), dtype=float)
    if vals.size == 0:
        raise ValueError("cannot aggregate an empty list")
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must be in (0, 1)")
    n = vals.size
    mean = float(vals.mean())
    if n == 1:
        return AggregateResult(mean=mean, sd=0.0, half_width=math.inf, count=1, level=level)
    sd = float(vals.std(ddof=1))
    quantile = float(stats.t.ppf(0.5 + level / 2.0, n - 1))
    return AggregateResult(
        mean=mean, sd=sd, half_width=quantile * sd / math.sqrt(n),
        count=n, level=level,
    )


def format_cell(value) -> str:
    """CSV cell with full round-trip float formatting."""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows) -> None:
    """Comma-separated with a header row and LF line endings."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_cell(c) for c in row))
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def build_family(cfg: ExperimentConfig):
    """The task family (and chain, when one applies) for a scenario."""
    if cfg.scenario == "two-rooms":
        family = two_rooms_family(
            num_tasks=int(cfg.get("num_tasks", 12)),
            width=int(cfg.get("width", 12)),
            height=int(cfg.get("height", 12)),
            action_failure_prob=float(cfg.get("action_failure_prob", 0.1)),
            gamma=float(cfg.get("gamma", 0.99)),
        )
        return family, None
    if cfg.scenario == "multi-goal":
        family = multi_goal_family(
            num_tasks=int(cfg.get("num_tasks", 7)),
            width=int(cfg.get("width", 12)),
            height=int(cfg.get("height", 12)),
            gamma=float(cfg.get("gamma", 0.9999)),
        )
        return family, None
    if cfg.scenario == "objectworld":
        duplicates = cfg.get("duplicate_of")
        if duplicates == "paper":
            duplicates = paper_objectworld_duplicates()
        elif duplicates is not None:
            duplicates = {int(a): int(b) for a, b in duplicates.items()}
        spec = ObjectworldSpec(
            side=int(cfg.get("side", 5)),
            gamma=float(cfg.get("gamma", 0.9)),
            transition_failure_prob=cfg.get("transition_failure_prob", 0.1),
            reward_failure_prob=float(cfg.get("reward_failure_prob", 0.012)),
            duplicate_of=duplicates,
        )
        k = int(cfg.get("num_tasks", 8))
        family = build_objectworld_family(spec, k, run_rng(cfg.base_seed, 2 ** 31))
        chain = successor_chain(
            k,
            p_succ=float(cfg.get("p_succ", 0.97)),
            p_skip=float(cfg.get("p_skip", 0.015)),
        )
        return family, chain
    raise ConfigError(f"scenario {cfg.scenario!r} has no task family")


def true_task_values(family):
    """Optimal value function of every task, for policy evaluation."""
    return [value_iteration(m)[0] for m in family]


def family_min_gap(family) -> float:
    values = true_task_values(family)
    return min_gap(family, values, star=0)


def export_models_json(family) -> dict:
    return {"models": [m.to_json_dict() for m in family]}


def random_hmm_family(k: int, S: int, A: int, U: int, gamma: float, rng):
    """Random task family and chain for the synthetic spectral benchmark.

    Dirichlet-distributed rows keep the observation columns well separated
    with probability 1.  The chain is a random permutation blended with a
    little random noise: the permutation keeps consecutive observations
    strongly correlated (the multi-view moments need that conditioning),
    the noise keeps the chain ergodic and the problem non-trivial.
    """
    family = []
    support = np.linspace(0.0, 1.0, U)
    for _ in range(k):
        p = rng.dirichlet(np.ones(S), size=(S, A))
        q = rng.dirichlet(np.ones(U), size=(S, A))
        family.append(TabularMdp(p=p, reward_support=support, q=q, gamma=gamma))
    perm = np.eye(k)[:, rng.permutation(k)]
    raw = rng.dirichlet(np.ones(k), size=k).T  # columns sum to 1
    trans = 0.85 * perm + 0.1 * raw + 0.05 / k
    init = np.full(k, 1.0 / k)
    return family, TaskChain(transition=trans, initial=init)


def simulate_hmm_observations(family, chain: TaskChain, steps: int, per_pair: int, rng):
    """Hidden chain rollout with one empirical-model observation per step.

    Each observation holds the empirical reward and transition frequencies
    from per_pair independent draws at every (s, a); draws are batched per
    task for speed (equivalent in law to querying one sample at a time).
    Returns (observations array of shape (steps, d), hidden path).
    """
    from .envs import sample_initial_task, sample_next_task
    from .spectral import ObservationLayout

    base = family[0]
    S, A, U = base.num_states, base.num_actions, base.num_rewards
    layout = ObservationLayout(S, A, U)
    path = np.empty(steps, dtype=int)
    task = None
    for t in range(steps):
        task = (sample_initial_task(chain, rng) if task is None
                else sample_next_task(chain, task, rng))
        path[t] = task
    obs = np.empty((steps, layout.dim))
    for j, mdp in enumerate(family):
        rows = np.flatnonzero(path == j)
        if rows.size == 0:
            continue
        q_hat = np.empty((rows.size, S, A, U))
        p_hat = np.empty((rows.size, S, A, S))
        for s in range(S):
            for a in range(A):
                q_hat[:, s, a] = rng.multinomial(per_pair, mdp.q[s, a],
                                                 size=rows.size) / per_pair
                p_hat[:, s, a] = rng.multinomial(per_pair, mdp.p[s, a],
                                                 size=rows.size) / per_pair
        obs[rows] = np.concatenate(
            [q_hat.reshape(rows.size, -1), p_hat.reshape(rows.size, -1)], axis=1
        )
    return obs, path
