"""Benchmark task families: two-rooms grids, multi-goal grids, objectworld,
the Markov chain over tasks, and the generative-model query interface."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMdp, PROB_TOL

# Action order: up, down, right, left.
ACTION_DELTAS = ((-1, 0), (1, 0), (0, 1), (0, -1))
NUM_ACTIONS = 4


class BudgetExceededError(RuntimeError):
    """A generative query was requested past the armed sample budget."""

    def __init__(self, queries_used: int):
        super().__init__(f"generative budget exhausted after {queries_used} queries")
        self.queries_used = queries_used


@dataclass(frozen=True)
class GridSpec:
    """Layout of a rectangular gridworld task.

    goal_cells maps flat cell index -> reward value.  When absorbing_goals
    is True a goal self-loops and emits its reward every step; otherwise it
    emits the reward once and drops into a zero-reward sink state appended
    after the grid cells.
    """

    width: int
    height: int
    goal_cells: dict
    action_failure_prob: float = 0.1
    wall_column: int | None = None
    door_row: int | None = None
    absorbing_goals: bool = True
    gamma: float = 0.99

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be positive")
        if not 0.0 <= self.action_failure_prob < 1.0:
            raise ValueError("action failure probability must be in [0, 1)")
        if self.wall_column is not None:
            if not 0 <= self.wall_column < self.width:
                raise ValueError("wall column outside the grid")
            if self.door_row is None or not 0 <= self.door_row < self.height:
                raise ValueError("door row must lie within the wall")
        for cell, value in self.goal_cells.items():
            if not 0 <= cell < self.width * self.height:
                raise ValueError(f"goal cell {cell} outside the grid")
            if not 0.0 <= value <= 1.0:
                raise ValueError("goal rewards must lie in [0, 1]")

    @property
    def num_cells(self) -> int:
        return self.width * self.height

    def is_wall(self, row: int, col: int) -> bool:
        return (
            self.wall_column is not None
            and col == self.wall_column
            and row != self.door_row
        )


def _grid_transitions(spec: GridSpec, num_states: int) -> np.ndarray:
    """Movement kernel with uniform action-failure redraw and blocked moves."""
    w, h = spec.width, spec.height
    f = spec.action_failure_prob
    p = np.zeros((num_states, NUM_ACTIONS, num_states))
    for row in range(h):
        for col in range(w):
            s = row * w + col
            targets = []
            for dr, dc in ACTION_DELTAS:
                r2, c2 = row + dr, col + dc
                blocked = not (0 <= r2 < h and 0 <= c2 < w) or spec.is_wall(r2, c2)
                targets.append(s if blocked else r2 * w + c2)
            for a in range(NUM_ACTIONS):
                # Intended action w.p. 1-f, else a uniform redraw over all four.
                for a2, t in enumerate(targets):
                    mass = f / NUM_ACTIONS + (1.0 - f) * (a2 == a)
                    p[s, a, t] += mass
    return p


def _build_grid(spec: GridSpec) -> TabularMdp:
    has_sink = not spec.absorbing_goals and bool(spec.goal_cells)
    S = spec.num_cells + (1 if has_sink else 0)
    sink = S - 1 if has_sink else None
    p = np.zeros((S, NUM_ACTIONS, S))
    p[: spec.num_cells, :, : spec.num_cells] = _grid_transitions(spec, spec.num_cells)

    support = np.array(sorted({0.0} | set(spec.goal_cells.values())))
    u_index = {v: i for i, v in enumerate(support)}
    q = np.zeros((S, NUM_ACTIONS, support.shape[0]))
    q[:, :, u_index[0.0]] = 1.0

    for cell, value in spec.goal_cells.items():
        p[cell, :, :] = 0.0
        p[cell, :, cell if spec.absorbing_goals else sink] = 1.0
        q[cell, :, :] = 0.0
        q[cell, :, u_index[value]] = 1.0
    if has_sink:
        p[sink, :, sink] = 1.0
    return TabularMdp(p=p, reward_support=support, q=q, gamma=spec.gamma)


def build_two_rooms(spec: GridSpec) -> TabularMdp:
    """Two-rooms gridworld: wall with a single door, absorbing goal cells."""
    return _build_grid(spec)


def build_multi_goal_grid(spec: GridSpec, per_task_goal_rewards) -> list:
    """One MDP per task over shared goal positions, differing only in rewards.

    per_task_goal_rewards: list (one entry per task) of dicts
    cell -> reward value; all tasks must use the same goal cells.
    """
    cells = set(spec.goal_cells)
    mdps = []
    for rewards in per_task_goal_rewards:
        if set(rewards) != cells:
            raise ValueError("all tasks must share the goal positions")
        task_spec = GridSpec(
            width=spec.width,
            height=spec.height,
            goal_cells=dict(rewards),
            action_failure_prob=spec.action_failure_prob,
            wall_column=spec.wall_column,
            door_row=spec.door_row,
            absorbing_goals=spec.absorbing_goals,
            gamma=spec.gamma,
        )
        mdps.append(_build_grid(task_spec))
    # Force a shared reward support across tasks.
    support = sorted({0.0} | {v for r in per_task_goal_rewards for v in r.values()})
    return [_with_support(m, np.array(support)) for m in mdps]


def _with_support(mdp: TabularMdp, support: np.ndarray) -> TabularMdp:
    """Re-express reward distributions over a (super)set support."""
    idx = {v: i for i, v in enumerate(support)}
    q = np.zeros((mdp.num_states, mdp.num_actions, support.shape[0]))
    for i, v in enumerate(mdp.reward_support):
        q[:, :, idx[float(v)]] += mdp.q[:, :, i]
    return TabularMdp(p=mdp.p, reward_support=support, q=q, gamma=mdp.gamma)


def two_rooms_family(
    num_tasks: int = 12,
    width: int = 12,
    height: int = 12,
    action_failure_prob: float = 0.1,
    gamma: float = 0.99,
    goal_reward: float = 1.0,
) -> list:
    """Family of two-rooms tasks with per-task door and goal positions.

    The wall sits in the middle column; task i has the door at row
    i mod height and an absorbing goal in the right room, spread over
    distinct cells.
    """
    wall = width // 2
    mdps = []
    for i in range(num_tasks):
        door_row = i % height
        goal_row = (i * 5 + 2) % height
        goal_col = wall + 1 + (i * 3) % (width - wall - 1)
        spec = GridSpec(
            width=width,
            height=height,
            goal_cells={goal_row * width + goal_col: goal_reward},
            action_failure_prob=action_failure_prob,
            wall_column=wall,
            door_row=door_row,
            absorbing_goals=True,
            gamma=gamma,
        )
        mdps.append(build_two_rooms(spec))
    support = np.array(sorted({0.0, goal_reward}))
    return [_with_support(m, support) for m in mdps]


def multi_goal_family(
    num_tasks: int = 7,
    width: int = 12,
    height: int = 12,
    action_failure_prob: float = 0.1,
    gamma: float = 0.9999,
    best_reward_true: float = 0.8,
    best_reward_other: float = 0.81,
    base_reward: float = 0.7,
) -> list:
    """Multi-goal family: shared goal cells in/near the corners, each task's
    best goal slightly better than the shared baseline value.

    Task 0 (the designated true task) has its best goal at best_reward_true;
    every other task has a different best goal at best_reward_other.
    """
    corners = [
        (0, 0), (0, width - 1), (height - 1, 0), (height - 1, width - 1),
        (0, width // 2), (height - 1, width // 2), (height // 2, width - 1),
    ]
    goal_cells = [r * width + c for r, c in corners[:num_tasks]]
    per_task = []
    for i in range(num_tasks):
        rewards = {g: base_reward for g in goal_cells}
        rewards[goal_cells[i]] = best_reward_true if i == 0 else best_reward_other
        per_task.append(rewards)
    spec = GridSpec(
        width=width,
        height=height,
        goal_cells=per_task[0],
        action_failure_prob=action_failure_prob,
        absorbing_goals=True,
        gamma=gamma,
    )
    return build_multi_goal_grid(spec, per_task)


@dataclass(frozen=True)
class ObjectworldSpec:
    """Parameters of the objectworld task family."""

    side: int = 5
    item_values: tuple = (0.0, 0.02, 0.04, 0.2, 0.22, 0.24, 0.5, 0.52, 0.54, 0.96, 0.98, 1.0)
    reward_failure_prob: float = 0.012
    transition_failure_prob: float = 0.1
    empty_prob: float = 0.5
    gamma: float = 0.9
    base_value_subset: tuple | None = (0.0, 0.2, 0.5, 0.96)
    duplicate_of: dict | None = None
    duplicate_up_prob: float = 0.9

    def __post_init__(self):
        values = tuple(self.item_values)
        if list(values) != sorted(values):
            raise ValueError("item values must be sorted")
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("item values must lie in [0, 1]")
        for prob in (self.reward_failure_prob, self.transition_failure_prob, self.empty_prob):
            if not 0.0 <= prob < 1.0:
                raise ValueError("probabilities must lie in [0, 1)")


def _objectworld_mdp(spec: ObjectworldSpec, placement, pick_actions, trans_fail) -> TabularMdp:
    grid = GridSpec(
        width=spec.side,
        height=spec.side,
        goal_cells={},
        action_failure_prob=trans_fail,
        gamma=spec.gamma,
    )
    S = spec.side * spec.side
    p = _grid_transitions(grid, S)
    support = np.array(spec.item_values)
    u_index = {float(v): i for i, v in enumerate(support)}
    zero_idx = u_index[0.0] if 0.0 in u_index else None
    if zero_idx is None:
        raise ValueError("item values must include 0 (the empty reward)")
    q = np.zeros((S, NUM_ACTIONS, support.shape[0]))
    q[:, :, zero_idx] = 1.0
    for cell, value in placement.items():
        a = pick_actions[cell]
        q[cell, a, :] = 0.0
        q[cell, a, u_index[float(value)]] = 1.0 - spec.reward_failure_prob
        q[cell, a, zero_idx] += spec.reward_failure_prob
    return TabularMdp(p=p, reward_support=support, q=q, gamma=spec.gamma)


def _sample_placement(spec: ObjectworldSpec, values, rng) -> dict:
    # Items placed with probability inversely proportional to their value,
    # smoothed so that a value of 0 stays finite.
    weights = np.array([1.0 / (v + 0.05) for v in values])
    weights /= weights.sum()
    placement = {}
    for cell in range(spec.side * spec.side):
        if rng.random() >= spec.empty_prob:
            placement[cell] = float(values[rng.choice(len(values), p=weights)])
    return placement


def _near_duplicate(spec: ObjectworldSpec, placement, rng) -> dict:
    """Perturb a base placement to a nearby, mostly slightly-better task."""
    ladder = list(spec.item_values)
    out = {}
    for cell, value in placement.items():
        i = ladder.index(value)
        if rng.random() < spec.duplicate_up_prob:
            j = min(i + 1, len(ladder) - 1)
        else:
            j = max(i - 1, 0)
        out[cell] = ladder[j]
    return out


def build_objectworld_family(spec: ObjectworldSpec, k: int, rng) -> list:
    """k objectworld tasks over a shared grid and reward support.

    Tasks listed in ``spec.duplicate_of`` (task index -> base task index) are
    near-duplicates of an earlier task; the rest are sampled independently,
    restricted to ``spec.base_value_subset`` when set.
    """
    if k < 2:
        raise ValueError("need at least 2 tasks")
    S = spec.side * spec.side
    base_values = spec.base_value_subset or spec.item_values
    duplicates = spec.duplicate_of or {}
    if any(not 0 <= b < k or b == i for i, b in duplicates.items()):
        raise ValueError("invalid duplicate mapping")
    trans_fail = spec.transition_failure_prob
    fails = list(trans_fail) if np.ndim(trans_fail) else [trans_fail] * k

    pick_actions = {cell: int(rng.integers(NUM_ACTIONS)) for cell in range(S)}
    placements: list = [None] * k
    for i in range(k):
        if i not in duplicates:
            placements[i] = _sample_placement(spec, base_values, rng)
    for i, b in sorted(duplicates.items()):
        if b in duplicates:
            raise ValueError("duplicate base task must not itself be a duplicate")
        placements[i] = _near_duplicate(spec, placements[b], rng)
    return [
        _objectworld_mdp(spec, placements[i], pick_actions, fails[i]) for i in range(k)
    ]


def paper_objectworld_duplicates() -> dict:
    """Near-duplicate layout used by the 8-task sequential experiments."""
    return {1: 0, 7: 0, 4: 5, 6: 5}


@dataclass(frozen=True)
class TaskChain:
    """Markov chain over task indices; column j holds P(next | current=j)."""

    transition: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=float)
        init = np.asarray(self.initial, dtype=float)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError("transition matrix must be square")
        if init.shape != (t.shape[0],):
            raise ValueError("initial distribution has wrong length")
        if np.any(t < -PROB_TOL) or np.any(init < -PROB_TOL):
            raise ValueError("negative probability entry")
        if np.max(np.abs(t.sum(axis=0) - 1.0)) > PROB_TOL:
            raise ValueError("columns must sum to 1")
        if abs(init.sum() - 1.0) > PROB_TOL:
            raise ValueError("initial distribution must sum to 1")
        t.setflags(write=False)
        init.setflags(write=False)
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "initial", init)

    @property
    def num_tasks(self) -> int:
        return self.transition.shape[0]

    def stationary(self) -> np.ndarray:
        """Stationary distribution via the leading eigenvector."""
        vals, vecs = np.linalg.eig(self.transition)
        j = int(np.argmin(np.abs(vals - 1.0)))
        w = np.real(vecs[:, j])
        w = np.abs(w)
        return w / w.sum()


def successor_chain(k: int, p_succ: float = 0.97, p_skip: float = 0.015) -> TaskChain:
    """Sparse chain: advance one w.p. p_succ, else skip two ahead or stay."""
    p_stay = 1.0 - p_succ - p_skip
    t = np.zeros((k, k))
    for j in range(k):
        t[(j + 1) % k, j] += p_succ
        t[(j + 2) % k, j] += p_skip
        t[j, j] += p_stay
    init = np.zeros(k)
    init[0] = 1.0
    return TaskChain(transition=t, initial=init)


def sample_next_task(chain: TaskChain, current: int, rng) -> int:
    """Draw the next task index from the chain column of the current task."""
    if not 0 <= current < chain.num_tasks:
        raise IndexError("task index out of range")
    return int(rng.choice(chain.num_tasks, p=chain.transition[:, current]))


def sample_initial_task(chain: TaskChain, rng) -> int:
    return int(rng.choice(chain.num_tasks, p=chain.initial))


class GenerativeModel:
    """Sampling oracle over a hidden ground-truth MDP.

    Exposes only structural information (sizes, support, discount); the
    hidden transition and reward tables never leave this object.
    """

    def __init__(self, mdp: TabularMdp, budget: int | None = None):
        self._mdp = mdp
        self.budget = budget
        self.queries_used = 0

    @property
    def num_states(self) -> int:
        return self._mdp.num_states

    @property
    def num_actions(self) -> int:
        return self._mdp.num_actions

    @property
    def reward_support(self) -> np.ndarray:
        return self._mdp.reward_support

    @property
    def gamma(self) -> float:
        return self._mdp.gamma

    def _charge(self, count: int) -> None:
        if self.budget is not None and self.queries_used + count > self.budget:
            raise BudgetExceededError(self.queries_used)
        self.queries_used += count

    def query(self, s: int, a: int, rng):
        """One independent draw of (next_state, reward_value) at (s, a)."""
        self._charge(1)
        s2 = int(rng.choice(self._mdp.num_states, p=self._mdp.p[s, a]))
        u = int(rng.choice(self._mdp.num_rewards, p=self._mdp.q[s, a]))
        return s2, float(self._mdp.reward_support[u])

    def query_batch(self, s: int, a: int, count: int, rng):
        """count i.i.d. draws at (s, a), returned as count vectors.

        Returns (next_state_counts, reward_index_counts); equivalent in law
        to count repeated single queries.
        """
        self._charge(count)
        next_counts = rng.multinomial(count, self._mdp.p[s, a])
        reward_counts = rng.multinomial(count, self._mdp.q[s, a])
        return next_counts, reward_counts
