"""Active model identification with a generative model.

Implements the elimination loop (empirical model, Bernstein confidence
pruning, stopping check, information-index query selection), the uniform
sampling fallback, and the sample-complexity diagnostics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs import BudgetExceededError, GenerativeModel
from .mdp import (
    TabularMdp,
    policy_evaluation,
    same_shape,
    transition_value_std_table,
    value_iteration,
)

INF = math.inf


def transfer_gate(delta_max: float, eps: float, gamma: float) -> bool:
    """True iff model uncertainty is small enough to enter transfer mode.

    The threshold is eps*(1-gamma)/(4*(1+gamma)); the comparison is strict,
    except that delta_max = 0 always passes so that exact models admit
    eps = 0 (exact identification).
    """
    if delta_max < 0 or eps < 0 or not 0.0 <= gamma < 1.0:
        raise ValueError("negative uncertainty/accuracy or invalid discount")
    if delta_max == 0.0:
        return True
    if eps == 0.0:
        raise ValueError("eps = 0 requires exact models (delta_max = 0)")
    return delta_max < eps * (1.0 - gamma) / (4.0 * (1.0 + gamma))


@dataclass(frozen=True)
class UncertaintyBounds:
    """Known upper bounds on the approximation error of the model set."""

    reward: float = 0.0
    transition: float = 0.0
    reward_std: float = 0.0
    transition_std: float = 0.0

    def __post_init__(self):
        if min(self.reward, self.transition, self.reward_std, self.transition_std) < 0:
            raise ValueError("uncertainty bounds must be non-negative")

    @property
    def overall(self) -> float:
        return max(self.reward, self.transition, self.reward_std, self.transition_std)


class ApproxModelSet:
    """Candidate models with their planning byproducts, all precomputed.

    Holds, for k models over shared (S, A, U, gamma): optimal values and
    policies, the cross-evaluation table xval[i, j] = value of model i's
    optimal policy evaluated in model j, reward/transition-value standard
    deviations, pairwise gap tables, and the uncertainty bounds.
    Immutable once built; safe to share across concurrent runs.
    """

    def __init__(self, models, bounds: UncertaintyBounds = UncertaintyBounds(),
                 planning_tol: float = 1e-8):
        if len(models) < 1:
            raise ValueError("need at least one model")
        for m in models[1:]:
            if not same_shape(models[0], m):
                raise ValueError("models must share (S, A, U, gamma)")
        self.models = list(models)
        self.bounds = bounds
        self.planning_tol = planning_tol
        k = len(models)
        S, A = models[0].num_states, models[0].num_actions
        self.gamma = models[0].gamma

        self.values = np.empty((k, S))
        self.policies = np.empty((k, S), dtype=int)
        for i, m in enumerate(models):
            self.values[i], self.policies[i] = value_iteration(m, planning_tol)

        self.xval = np.empty((k, k, S))
        for i in range(k):
            for j in range(k):
                self.xval[i, j] = (
                    self.values[i] if i == j
                    else policy_evaluation(models[j], self.policies[i])
                )

        self.rewards = np.stack([m.reward_means() for m in models])      # (k, S, A)
        self.sigma_r = np.stack([m.reward_stds() for m in models])       # (k, S, A)
        # sigma_p[i, j] = std of V*_j(S') under model i's transitions.
        self.sigma_p = np.empty((k, k, S, A))
        # pv[i, j] = p_i(s, a) . V*_j, used by the pruning conditions.
        self.pv = np.empty((k, k, S, A))
        for i in range(k):
            for j in range(k):
                self.sigma_p[i, j] = transition_value_std_table(models[i], self.values[j])
                self.pv[i, j] = models[i].p @ self.values[j]

        # Gap tables; the transition gap of (i, j) is referenced to V*_i.
        self.reward_gap = np.abs(self.rewards[:, None] - self.rewards[None, :])
        self.trans_gap = np.empty((k, k, S, A))
        for i in range(k):
            for j in range(k):
                self.trans_gap[i, j] = np.abs(self.pv[i, i] - self.pv[j, i])

    @property
    def num_models(self) -> int:
        return len(self.models)

    @property
    def num_states(self) -> int:
        return self.models[0].num_states

    @property
    def num_actions(self) -> int:
        return self.models[0].num_actions

    @property
    def delta(self) -> float:
        return self.bounds.overall


class EmpiricalModel:
    """Per-(s, a) sufficient statistics collected from generative queries."""

    def __init__(self, num_states: int, num_actions: int, reward_support):
        S, A = num_states, num_actions
        self.reward_support = np.asarray(reward_support, dtype=float)
        U = self.reward_support.shape[0]
        self._u_index = {float(v): i for i, v in enumerate(self.reward_support)}
        self.counts = np.zeros((S, A), dtype=np.int64)
        self.reward_counts = np.zeros((S, A, U), dtype=np.int64)
        self.next_counts = np.zeros((S, A, S), dtype=np.int64)

    @property
    def num_states(self) -> int:
        return self.next_counts.shape[2]

    @property
    def num_actions(self) -> int:
        return self.counts.shape[1]

    def add_sample(self, s: int, a: int, next_state: int, reward_value: float) -> None:
        self.counts[s, a] += 1
        self.reward_counts[s, a, self._u_index[float(reward_value)]] += 1
        self.next_counts[s, a, next_state] += 1

    def add_batch(self, s: int, a: int, next_state_counts, reward_index_counts) -> None:
        total = int(np.sum(next_state_counts))
        if total != int(np.sum(reward_index_counts)):
            raise ValueError("inconsistent batch counts")
        self.counts[s, a] += total
        self.next_counts[s, a] += np.asarray(next_state_counts, dtype=np.int64)
        self.reward_counts[s, a] += np.asarray(reward_index_counts, dtype=np.int64)

    def reward_mean(self, s: int, a: int) -> float:
        n = self.counts[s, a]
        return float(self.reward_counts[s, a] @ self.reward_support) / n

    def reward_std(self, s: int, a: int) -> float:
        """Empirical reward std with N-1 denominator; 0 when N <= 1."""
        n = int(self.counts[s, a])
        if n <= 1:
            return 0.0
        mean = self.reward_mean(s, a)
        ss = float(self.reward_counts[s, a] @ (self.reward_support - mean) ** 2)
        return math.sqrt(max(ss / (n - 1), 0.0))

    def transition_probs(self, s: int, a: int) -> np.ndarray:
        n = self.counts[s, a]
        if n < 1:
            raise ValueError("no samples at this state-action pair")
        return self.next_counts[s, a] / n

    def transition_value_mean(self, s: int, a: int, v) -> float:
        return float(self.next_counts[s, a] @ v) / self.counts[s, a]

    def transition_value_std(self, s: int, a: int, v) -> float:
        """Empirical std of v(S') with N-1 denominator; 0 when N <= 1."""
        n = int(self.counts[s, a])
        if n <= 1:
            return 0.0
        mean = self.transition_value_mean(s, a, v)
        ss = float(self.next_counts[s, a] @ (np.asarray(v) - mean) ** 2)
        return math.sqrt(max(ss / (n - 1), 0.0))

    def min_count(self) -> int:
        return int(self.counts.min())

    def to_mdp(self, gamma: float) -> TabularMdp:
        """Empirical MDP from the counts; every (s, a) needs N >= 1."""
        if self.min_count() < 1:
            raise ValueError("every state-action pair needs at least one sample")
        n = self.counts[:, :, None]
        return TabularMdp(
            p=self.next_counts / n,
            reward_support=self.reward_support,
            q=self.reward_counts / n,
            gamma=gamma,
        )


@dataclass(frozen=True)
class ConfidenceParams:
    """Inputs shared by all Bernstein confidence radii of one run."""

    budget: int
    num_models: int
    delta: float
    gamma: float
    bounds: UncertaintyBounds

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")


def _log_terms(S: int, A: int, params: ConfidenceParams):
    base = S * A * max(params.budget, 1) * (params.num_models + 1)
    l_mean = math.log(8.0 * base / params.delta)
    l_std = math.log(4.0 * base / params.delta)
    return l_mean, l_std


def confidence_radii(emp: EmpiricalModel, s: int, a: int, v_ref, params: ConfidenceParams):
    """The four Bernstein radii (reward, transition, reward-std,
    transition-std) at (s, a); all infinite when N <= 1.

    ``v_ref`` is the optimal value function of the comparison model; it
    enters only through the empirical transition-value std.
    """
    n = int(emp.counts[s, a])
    if n <= 1:
        return INF, INF, INF, INF
    S, A = emp.num_states, emp.num_actions
    l_mean, l_std = _log_terms(S, A, params)
    gamma = params.gamma
    b = params.bounds
    sr = emp.reward_std(s, a)
    sp = emp.transition_value_std(s, a, v_ref)
    c_r = math.sqrt(2.0 * sr * sr * l_mean / n) + 7.0 * l_mean / (3.0 * (n - 1)) + b.reward
    c_p = (
        math.sqrt(2.0 * sp * sp * l_mean / n)
        + 7.0 * l_mean / (3.0 * (n - 1) * (1.0 - gamma))
        + b.transition
    )
    c_sr = math.sqrt(2.0 * l_std / (n - 1)) + b.reward_std
    c_sp = math.sqrt(2.0 * l_std / (n - 1)) / (1.0 - gamma) + b.transition_std
    return c_r, c_p, c_sr, c_sp


def _model_consistent_at(
    theta: int, s: int, a: int, emp: EmpiricalModel, approx: ApproxModelSet,
    params: ConfidenceParams,
) -> bool:
    """All four compatibility conditions for model theta at one (s, a).

    The transition conditions quantify over every model in the full set,
    not just the survivors.
    """
    n = int(emp.counts[s, a])
    if n <= 1:
        return True
    k = approx.num_models
    S, A = emp.num_states, emp.num_actions
    l_mean, l_std = _log_terms(S, A, params)
    gamma, b = params.gamma, params.bounds

    r_hat = emp.reward_mean(s, a)
    sr_hat = emp.reward_std(s, a)
    c_r = math.sqrt(2.0 * sr_hat * sr_hat * l_mean / n) + 7.0 * l_mean / (3.0 * (n - 1)) + b.reward
    if abs(r_hat - approx.rewards[theta, s, a]) > c_r:
        return False
    c_sr = math.sqrt(2.0 * l_std / (n - 1)) + b.reward_std
    if abs(sr_hat - approx.sigma_r[theta, s, a]) > c_sr:
        return False

    c_sp = math.sqrt(2.0 * l_std / (n - 1)) / (1.0 - gamma) + b.transition_std
    p_hat = emp.next_counts[s, a] / n
    for j in range(k):
        v = approx.values[j]
        mean = float(p_hat @ v)
        var = float(p_hat @ (v - mean) ** 2) * n / (n - 1)
        sp_hat = math.sqrt(max(var, 0.0))
        c_p = (
            math.sqrt(2.0 * sp_hat * sp_hat * l_mean / n)
            + 7.0 * l_mean / (3.0 * (n - 1) * (1.0 - gamma))
            + b.transition
        )
        if abs(mean - approx.pv[theta, j, s, a]) > c_p:
            return False
        if abs(sp_hat - approx.sigma_p[theta, j, s, a]) > c_sp:
            return False
    return True


def prune_confidence_set(active, emp: EmpiricalModel, approx: ApproxModelSet,
                         params: ConfidenceParams, pairs=None):
    """Models from ``active`` still compatible with the empirical MDP.

    ``pairs`` optionally restricts the (s, a) pairs re-checked; conditions at
    unvisited pairs hold vacuously, and eliminations are permanent, so
    callers updating one pair per step may pass just that pair.
    """
    if not active:
        raise ValueError("active set must be non-empty")
    if pairs is None:
        S, A = emp.num_states, emp.num_actions
        visited = np.argwhere(emp.counts > 1)
        pairs = [tuple(x) for x in visited]
    survivors = set()
    for theta in sorted(active):
        if all(_model_consistent_at(theta, s, a, emp, approx, params) for s, a in pairs):
            survivors.add(theta)
    return survivors


def stop_margin(eps: float, delta_max: float, gamma: float) -> float:
    """Slack of the stopping condition: eps - 2*delta*(1+gamma)/(1-gamma)."""
    margin = eps - 2.0 * delta_max * (1.0 + gamma) / (1.0 - gamma)
    if margin < 0:
        raise ValueError("stopping margin negative; the transfer gate should have failed")
    return margin


def check_stop(active, approx: ApproxModelSet, eps: float, delta_max: float | None = None,
               gamma: float | None = None):
    """Lowest-index active model whose optimal policy is good enough for
    every active model, or None.

    Returns (theta, policy) when some theta satisfies, at every state and
    for every active theta', xval[theta, theta'] >= V*_theta' - margin.
    """
    if not active:
        raise ValueError("active set must be non-empty")
    if delta_max is None:
        delta_max = approx.delta
    if gamma is None:
        gamma = approx.gamma
    margin = stop_margin(eps, delta_max, gamma)
    order = sorted(active)
    for i in order:
        ok = all(
            np.all(approx.xval[i, j] >= approx.values[j] - margin) for j in order
        )
        if ok:
            return i, approx.policies[i].copy()
    return None


def info_index(theta: int, theta2: int, s: int, a: int, approx: ApproxModelSet,
               delta_max: float | None = None) -> float:
    """Information for discriminating theta from theta2 at (s, a).

    Clipped gaps [gap - 8*delta]_+ over the first model's standard
    deviations; zero-variance components with a positive gap fall back to
    the linear term.
    """
    if delta_max is None:
        delta_max = approx.delta
    gamma = approx.gamma
    dr = max(approx.reward_gap[theta, theta2, s, a] - 8.0 * delta_max, 0.0)
    dp = max(approx.trans_gap[theta, theta2, s, a] - 8.0 * delta_max, 0.0)
    psi_r = 0.0
    if dr > 0.0:
        sr = approx.sigma_r[theta, s, a]
        psi_r = min((dr / sr) ** 2 if sr > 0 else INF, dr)
    psi_p = 0.0
    if dp > 0.0:
        sp = approx.sigma_p[theta, theta, s, a]
        psi_p = min((dp / sp) ** 2 if sp > 0 else INF, (1.0 - gamma) * dp)
    return max(psi_r, psi_p)


def info_index_table(approx: ApproxModelSet, delta_max: float | None = None) -> np.ndarray:
    """Vectorized info_index over all ordered pairs, shape (k, k, S, A)."""
    if delta_max is None:
        delta_max = approx.delta
    gamma = approx.gamma
    dr = np.maximum(approx.reward_gap - 8.0 * delta_max, 0.0)
    dp = np.maximum(approx.trans_gap - 8.0 * delta_max, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_r = np.where(approx.sigma_r[:, None] > 0, dr / approx.sigma_r[:, None], INF) ** 2
        sp_own = approx.sigma_p[np.arange(approx.num_models), np.arange(approx.num_models)]
        ratio_p = np.where(sp_own[:, None] > 0, dp / sp_own[:, None], INF) ** 2
    psi_r = np.where(dr > 0, np.minimum(ratio_r, dr), 0.0)
    psi_p = np.where(dp > 0, np.minimum(ratio_p, (1.0 - gamma) * dp), 0.0)
    return np.maximum(psi_r, psi_p)


def select_query(active, approx: ApproxModelSet, delta_max: float | None = None,
                 psi_table: np.ndarray | None = None):
    """The (s, a) maximizing the pairwise information over active models.

    Ties break toward the lowest flat index s * A + a.
    """
    if not active:
        raise ValueError("active set must be non-empty")
    if psi_table is None:
        psi_table = info_index_table(approx, delta_max)
    idx = sorted(active)
    psi = psi_table[np.ix_(idx, idx)].max(axis=(0, 1))
    flat = int(np.argmax(psi))
    A = approx.num_actions
    return flat // A, flat % A


@dataclass
class PtumResult:
    """Outcome of one identification run."""

    policy: np.ndarray
    tau: int
    mode: str  # transfer-stopped | fallback-gate | fallback-budget
    chosen_model: int | None
    survived_trace: list
    query_log: list
    queries_total: int
    empirical: EmpiricalModel | None = None

    @property
    def survived(self) -> set:
        return set(self.survived_trace[-1]) if self.survived_trace else set()

    def to_json_dict(self, include_query_log: bool = False) -> dict:
        doc = {
            "policy": self.policy.tolist(),
            "tau": self.tau,
            "mode": self.mode,
            "chosen_model": self.chosen_model,
            "queries_total": self.queries_total,
            "survived_sizes": [len(s) for s in self.survived_trace],
            "final_survivors": sorted(self.survived),
        }
        if include_query_log:
            doc["query_log"] = [[t, s, a] for t, s, a in self.query_log]
        return doc

    def trace_csv_rows(self):
        """Rows (t, s, a, active_size, stopped) for the trace CSV."""
        rows = []
        for t, s, a in self.query_log:
            size = len(self.survived_trace[min(t, len(self.survived_trace) - 1)])
            rows.append((t, s, a, size, 0))
        return rows


def default_fallback_per_pair(eps: float, delta: float, S: int, A: int, gamma: float) -> int:
    """Theory-flavored per-pair budget for the uniform fallback."""
    if eps <= 0:
        raise ValueError("the uniform fallback needs eps > 0")
    return math.ceil(2.0 * math.log(4.0 * S * A / delta) / (eps ** 2 * (1.0 - gamma) ** 3))


def uniform_pac_fallback(g: GenerativeModel, eps: float, delta: float,
                         per_pair_budget: int, rng,
                         emp: EmpiricalModel | None = None):
    """Query every (s, a) a fixed number of times and plan on the empirical
    MDP.  Returns (policy, empirical_model)."""
    if per_pair_budget < 1:
        raise ValueError("per-pair budget must be at least 1")
    if emp is None:
        emp = EmpiricalModel(g.num_states, g.num_actions, g.reward_support)
    for s in range(g.num_states):
        for a in range(g.num_actions):
            next_counts, reward_counts = g.query_batch(s, a, per_pair_budget, rng)
            emp.add_batch(s, a, next_counts, reward_counts)
    _, policy = value_iteration(emp.to_mdp(g.gamma))
    return policy, emp


def run_ptum(approx: ApproxModelSet, g: GenerativeModel, eps: float, delta: float,
             n: int, rng, fallback_per_pair: int | None = None,
             active: set | None = None) -> PtumResult:
    """Full identification loop: gate, elimination, stop, query selection.

    ``active`` restricts the initial candidate set (indices into the model
    set); pruning still quantifies over the full set.  On gate failure or
    budget exhaustion the uniform fallback provides the policy.
    """
    if n < 0:
        raise ValueError("budget must be non-negative")
    k = approx.num_models
    S, A = approx.num_states, approx.num_actions
    gamma = approx.gamma
    delta_max = approx.delta
    initial = set(range(k)) if active is None else set(active)
    if not initial:
        raise ValueError("initial active set must be non-empty")

    def _fallback(mode: str, emp, query_log, trace, tau):
        per_pair = fallback_per_pair
        if per_pair is None:
            # The theory count is often far past any practical budget; spend
            # the remaining budget uniformly instead.
            per_pair = min(
                default_fallback_per_pair(eps, delta, S, A, gamma),
                max(n // (S * A), 1),
            )
        policy, emp = uniform_pac_fallback(g, eps, delta, per_pair, rng, emp)
        return PtumResult(
            policy=policy, tau=tau, mode=mode, chosen_model=None,
            survived_trace=trace, query_log=query_log,
            queries_total=g.queries_used, empirical=emp,
        )

    if not transfer_gate(delta_max, eps, gamma):
        emp = EmpiricalModel(S, A, g.reward_support)
        return _fallback("fallback-gate", emp, [], [sorted(initial)], 0)

    params = ConfidenceParams(budget=n, num_models=k, delta=delta, gamma=gamma,
                              bounds=approx.bounds)
    psi_table = info_index_table(approx, delta_max)
    margin = stop_margin(eps, delta_max, gamma)
    # stop_ok[i, j]: policy of i is margin-good in model j at every state.
    stop_ok = np.all(approx.xval >= approx.values[None, :, :] - margin, axis=2)

    emp = EmpiricalModel(S, A, g.reward_support)
    active_set = set(initial)
    trace = [sorted(active_set)]
    query_log = []
    psi_active = psi_table[np.ix_(sorted(active_set), sorted(active_set))].max(axis=(0, 1))
    last_pair = None

    for t in range(n + 1):
        if last_pair is not None:
            new_active = prune_confidence_set(active_set, emp, approx, params,
                                              pairs=[last_pair])
            if not new_active:
                # Everything eliminated: identification failed outright.
                break
            if new_active != active_set:
                active_set = new_active
                idx = sorted(active_set)
                psi_active = psi_table[np.ix_(idx, idx)].max(axis=(0, 1))
            trace.append(sorted(active_set))
        idx = sorted(active_set)
        stopped = None
        for i in idx:
            if all(stop_ok[i, j] for j in idx):
                stopped = i
                break
        if stopped is not None:
            return PtumResult(
                policy=approx.policies[stopped].copy(), tau=t, mode="transfer-stopped",
                chosen_model=stopped, survived_trace=trace, query_log=query_log,
                queries_total=g.queries_used, empirical=emp,
            )
        if t == n:
            break
        flat = int(np.argmax(psi_active))
        s, a = flat // A, flat % A
        try:
            s2, u = g.query(s, a, rng)
        except BudgetExceededError:
            break
        emp.add_sample(s, a, s2, u)
        query_log.append((t, s, a))
        last_pair = (s, a)

    return _fallback("fallback-budget", emp, query_log, trace, len(query_log))


def theta_eps_and_bound(approx: ApproxModelSet, star: int, eps: float, delta: float,
                        n: int):
    """The set of models that must be eliminated before stopping, and the
    worst-case query bound for doing so.  Diagnostic only."""
    gamma = approx.gamma
    delta_max = approx.delta
    kappa = (1.0 - gamma) * eps / 4.0 - delta_max * (1.0 + gamma) / 2.0
    if eps > 0 and kappa <= 0:
        raise ValueError("transfer gate fails for these parameters")
    k = approx.num_models
    S, A = approx.num_states, approx.num_actions
    theta_eps = set()
    for j in range(k):
        if j == star:
            continue
        r_dev = float(np.max(np.abs(approx.rewards[j] - approx.rewards[star])))
        p_dev = float(np.max(np.abs(approx.pv[j, star] - approx.pv[star, star])))
        p_thresh = kappa / gamma if gamma > 0 else INF
        if r_dev > kappa or p_dev > p_thresh:
            theta_eps.add(j)
    if not theta_eps:
        return theta_eps, 0.0
    psi_table = info_index_table(approx)
    worst = psi_table[star, sorted(theta_eps)].min(axis=0)  # (S, A) min over theta
    denom = float(worst.max())
    log_term = math.log(8.0 * S * A * max(n, 1) * (k + 1) / delta)
    if denom <= 0:
        return theta_eps, INF
    bound = 128.0 * min(S * A, k) * log_term / denom
    return theta_eps, bound
