"""Tabular MDP representation, exact planning, and gap/variance statistics.

All operations are pure functions over immutable arrays; a ``TabularMdp``
is never mutated after construction.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-9


class ShapeMismatchError(ValueError):
    """Two models that must share (S, A, U, gamma) do not."""


@dataclass(frozen=True)
class TabularMdp:
    """Finite discounted MDP with finite-support reward distributions.

    Attributes
    ----------
    p : ndarray, shape (S, A, S)
        Transition probabilities, each (s, a) row a distribution.
    reward_support : ndarray, shape (U,)
        Ordered reward values, all in [0, 1].
    q : ndarray, shape (S, A, U)
        Reward distribution over the support per (s, a).
    gamma : float
        Discount factor in [0, 1).
    """

    p: np.ndarray
    reward_support: np.ndarray
    q: np.ndarray
    gamma: float

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.p, dtype=float))
        u = np.ascontiguousarray(np.asarray(self.reward_support, dtype=float))
        q = np.ascontiguousarray(np.asarray(self.q, dtype=float))
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition tensor must be (S, A, S), got {p.shape}")
        S, A, _ = p.shape
        if q.shape != (S, A, u.shape[0]):
            raise ValueError(f"reward tensor must be (S, A, U), got {q.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if np.any(u < 0.0) or np.any(u > 1.0):
            raise ValueError("reward support values must lie in [0, 1]")
        if np.any(p < -PROB_TOL) or np.any(q < -PROB_TOL):
            raise ValueError("negative probability entry")
        if np.max(np.abs(p.sum(axis=2) - 1.0)) > PROB_TOL:
            raise ValueError("transition rows must sum to 1")
        if np.max(np.abs(q.sum(axis=2) - 1.0)) > PROB_TOL:
            raise ValueError("reward rows must sum to 1")
        for arr in (p, u, q):
            arr.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "reward_support", u)
        object.__setattr__(self, "q", q)

    @property
    def num_states(self) -> int:
        return self.p.shape[0]

    @property
    def num_actions(self) -> int:
        return self.p.shape[1]

    @property
    def num_rewards(self) -> int:
        return self.reward_support.shape[0]

    def reward_means(self) -> np.ndarray:
        """Expected reward per (s, a), shape (S, A)."""
        return self.q @ self.reward_support

    def reward_stds(self) -> np.ndarray:
        """Reward standard deviation per (s, a), shape (S, A)."""
        mean = self.reward_means()
        second = self.q @ (self.reward_support ** 2)
        var = np.maximum(second - mean ** 2, 0.0)
        return np.sqrt(var)

    def to_json_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "reward_support": self.reward_support.tolist(),
            "p": self.p.tolist(),
            "q": self.q.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TabularMdp":
        return cls(
            p=np.array(doc["p"], dtype=float),
            reward_support=np.array(doc["reward_support"], dtype=float),
            q=np.array(doc["q"], dtype=float),
            gamma=float(doc["gamma"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_json_dict(json.loads(text))


def same_shape(a: TabularMdp, b: TabularMdp) -> bool:
    return (
        a.p.shape == b.p.shape
        and a.q.shape == b.q.shape
        and np.array_equal(a.reward_support, b.reward_support)
        and a.gamma == b.gamma
    )


def _require_same_shape(a: TabularMdp, b: TabularMdp) -> None:
    if not same_shape(a, b):
        raise ShapeMismatchError("models must share (S, A, U, gamma)")


def _policy_matrices(mdp: TabularMdp, pi: np.ndarray):
    """Transition matrix and reward vector induced by a deterministic policy."""
    S = mdp.num_states
    idx = np.arange(S)
    p_pi = mdp.p[idx, pi, :]
    r_pi = mdp.reward_means()[idx, pi]
    return p_pi, r_pi


def policy_evaluation(mdp: TabularMdp, pi: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Value function of a deterministic policy, via direct linear solve.

    The solve is exact up to floating point, well inside any tol > 0.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p_pi, r_pi = _policy_matrices(mdp, np.asarray(pi, dtype=int))
    S = mdp.num_states
    return np.linalg.solve(np.eye(S) - mdp.gamma * p_pi, r_pi)


def value_iteration(mdp: TabularMdp, tol: float = 1e-8):
    """Optimal value function and greedy policy.

    Uses policy iteration (greedy step + exact evaluation), which converges
    in finitely many steps and is robust to discounts close to 1.  Stops once
    the Bellman residual of V is at most tol*(1-gamma)/(2*gamma), which
    guarantees sup-norm error at most tol.  Greedy ties break toward the
    lowest action index.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    gamma = mdp.gamma
    target = tol * (1.0 - gamma) / (2.0 * gamma) if gamma > 0 else tol
    r = mdp.reward_means()
    S = mdp.num_states
    v = np.zeros(S)
    prev_pi = None
    for _ in range(10_000):
        q = r + gamma * (mdp.p @ v)
        qmax = q.max(axis=1)
        residual = np.max(np.abs(qmax - v))
        # Treat actions within round-off of the best as exact ties; without
        # this, discounts near 1 make the greedy policy cycle on noise.
        tie_tol = 64.0 * np.finfo(float).eps * max(1.0, float(np.abs(qmax).max()))
        pi = np.argmax(q >= qmax[:, None] - tie_tol, axis=1)
        # A repeated greedy policy means v is its exact value and satisfies
        # the optimality equation, so v = V* up to the solve's round-off.
        if residual <= target or (prev_pi is not None and np.array_equal(pi, prev_pi)):
            return v, pi
        v = policy_evaluation(mdp, pi)
        prev_pi = pi
    raise RuntimeError("policy iteration failed to converge")  # pragma: no cover


def reward_mean_and_std(mdp: TabularMdp, s: int, a: int):
    """Mean and standard deviation of the reward distribution at (s, a)."""
    dist = mdp.q[s, a]
    mean = float(dist @ mdp.reward_support)
    var = float(dist @ (mdp.reward_support - mean) ** 2)
    return mean, float(np.sqrt(max(var, 0.0)))


def transition_value_std(mdp: TabularMdp, s: int, a: int, v: np.ndarray) -> float:
    """Standard deviation of v(S') under the transition at (s, a)."""
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.num_states,):
        raise ValueError("value function length must equal the state count")
    row = mdp.p[s, a]
    mean = float(row @ v)
    var = float(row @ (v - mean) ** 2)
    return float(np.sqrt(max(var, 0.0)))


def transition_value_std_table(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """Vectorized ``transition_value_std`` over all (s, a), shape (S, A)."""
    v = np.asarray(v, dtype=float)
    mean = mdp.p @ v
    second = mdp.p @ (v ** 2)
    return np.sqrt(np.maximum(second - mean ** 2, 0.0))


@dataclass(frozen=True)
class GapReport:
    """Componentwise reward/transition gaps between two models.

    ``min_gap`` is this pair's contribution to the minimum-gap statistic:
    the larger of the two sup-norm gap components.
    """

    reward_gap: np.ndarray
    transition_gap: np.ndarray
    min_gap: float


def model_gaps(theta: TabularMdp, theta2: TabularMdp, v_ref: np.ndarray) -> GapReport:
    """Reward gaps |r - r'| and transition gaps |(p - p')^T v_ref| per (s, a).

    ``v_ref`` is the reference optimal value function; callers pick whose
    (see the different uses in the stopping vs. index computations).
    """
    _require_same_shape(theta, theta2)
    v_ref = np.asarray(v_ref, dtype=float)
    if v_ref.shape != (theta.num_states,):
        raise ShapeMismatchError("v_ref length must equal the state count")
    reward_gap = np.abs(theta.reward_means() - theta2.reward_means())
    transition_gap = np.abs((theta.p - theta2.p) @ v_ref)
    pair_gap = float(max(reward_gap.max(), transition_gap.max()))
    return GapReport(reward_gap=reward_gap, transition_gap=transition_gap, min_gap=pair_gap)


def min_gap(models, values, star: int = 0) -> float:
    """Minimum over non-target models of the max reward/transition gap.

    Parameters
    ----------
    models : sequence of TabularMdp
    values : sequence of ndarray
        Optimal value functions, one per model; ``values[star]`` is used as
        the reference in the transition gaps.
    star : int
        Index of the designated target model.
    """
    if len(models) < 2:
        raise ValueError("need at least 2 models")
    gaps = []
    for j, m in enumerate(models):
        if j == star:
            continue
        gaps.append(model_gaps(m, models[star], values[star]).min_gap)
    gamma = min(gaps)
    if gamma == 0.0:
        warnings.warn("two identical models in the set; minimum gap is 0", stacklevel=2)
    return gamma


def discounted_occupancy(mdp: TabularMdp, pi: np.ndarray, start_state: int) -> np.ndarray:
    """Discounted state visitation frequencies of pi from a start state.

    Solves the occupancy linear system exactly; the result sums to
    1/(1 - gamma).
    """
    pi = np.asarray(pi, dtype=int)
    p_pi, _ = _policy_matrices(mdp, pi)
    S = mdp.num_states
    e = np.zeros(S)
    e[start_state] = 1.0
    return np.linalg.solve(np.eye(S) - mdp.gamma * p_pi.T, e)


def simulation_gap_bound(
    theta: TabularMdp, theta2: TabularMdp, pi: np.ndarray, start_state: int
) -> float:
    """Occupancy-weighted upper bound on |V^pi_theta(s) - V^pi_theta2(s)|.

    Diagnostic only: the occupancy is taken under theta2 and the value
    function under theta, matching the first simulation inequality.
    """
    _require_same_shape(theta, theta2)
    pi = np.asarray(pi, dtype=int)
    nu = discounted_occupancy(theta2, pi, start_state)
    v_pi = policy_evaluation(theta, pi)
    idx = np.arange(theta.num_states)
    r_gap = np.abs(theta.reward_means() - theta2.reward_means())[idx, pi]
    p_gap = np.abs((theta.p - theta2.p) @ v_pi)[idx, pi]
    return float(nu @ (r_gap + theta.gamma * p_gap))
