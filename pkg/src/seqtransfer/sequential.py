"""Sequential transfer across tasks drawn from a hidden Markov chain.

Each task is solved (by the elimination algorithm when the uncertainty
gate allows, by uniform sampling otherwise), its samples are turned into
an observation for the spectral learner, the candidate model set is
re-estimated, the uncertainty level is refreshed from the error-bound
schedule, and unlikely next tasks are pre-eliminated from the candidate
set of the following round.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs import GenerativeModel, TaskChain, sample_initial_task, sample_next_task
from .mdp import TabularMdp, policy_evaluation, value_iteration
from .ptum import (
    ApproxModelSet,
    EmpiricalModel,
    UncertaintyBounds,
    run_ptum,
    transfer_gate,
    uniform_pac_fallback,
)
from .spectral import (
    DecompositionFailureError,
    DegenerateMomentsError,
    HmmEstimate,
    ObservationLayout,
    model_error_bound,
    spectral_estimate,
    unpack_models,
    vectorize_observation,
)


@dataclass(frozen=True)
class SequentialConfig:
    """Knobs of one sequential-transfer run."""

    num_tasks: int
    startup_tasks: int
    startup_per_pair: int
    post_sample_per_pair: int
    eps: float
    delta: float
    delta_prime: float
    rho: float
    eta: float = 0.0
    rho_t: float = 0.0
    top_keep: int = 3
    pre_elimination: bool = True
    budget: int = 100_000
    fallback_per_pair: int | None = None
    rho_final: float | None = None
    rho_decay_tasks: int = 0
    rtp_restarts: int = 100
    rtp_iters: int = 100

    def __post_init__(self):
        if self.num_tasks < 1 or self.startup_tasks < 0:
            raise ValueError("task counts must be positive")
        if min(self.startup_per_pair, self.post_sample_per_pair) < 1:
            raise ValueError("per-pair sample counts must be at least 1")
        if not 0.0 < self.delta < 1.0 or not 0.0 < self.delta_prime < 1.0:
            raise ValueError("delta and delta_prime must be in (0, 1)")
        if self.pre_elimination and self.eta > 0:
            cap = self.delta_prime / (3.0 * self.num_tasks ** 2)
            if self.delta > cap:
                raise ValueError(
                    f"pre-elimination needs delta <= delta_prime/(3 m^2) = {cap:g}"
                )
        if self.rho < 0 or (self.rho_final is not None and self.rho_final < 0):
            raise ValueError("rho constants must be non-negative")

    def rho_at(self, h: int) -> float:
        """Linear decay of rho over the first ``rho_decay_tasks`` tasks."""
        if self.rho_final is None or self.rho_decay_tasks <= 0:
            return self.rho
        frac = min(max(h, 0) / self.rho_decay_tasks, 1.0)
        return self.rho + frac * (self.rho_final - self.rho)


@dataclass
class TaskRecord:
    """Everything logged about one task of the sequence."""

    h: int
    true_task: int
    mode: str
    queries: int
    queries_total: int
    eps_optimal: bool
    active_set_size: int
    delta_h: float
    o_col_err_max: float
    t_err_max: float
    degraded: bool = False
    tau: int | None = None
    oracle_tau: int | None = None
    true_in_active: bool = True


@dataclass
class SequenceTrace:
    """Per-task history of one sequence plus end-of-run summaries."""

    records: list = field(default_factory=list)

    CSV_HEADER = (
        "h,true_task,mode,queries,eps_optimal,active_set_size,"
        "delta_h,o_col_err_max,t_err_max"
    )

    def append(self, rec: TaskRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def csv_rows(self):
        rows = []
        for r in self.records:
            rows.append(
                f"{r.h},{r.true_task},{r.mode},{r.queries},{int(r.eps_optimal)},"
                f"{r.active_set_size},{r.delta_h!r},{r.o_col_err_max!r},{r.t_err_max!r}"
            )
        return rows

    def to_csv(self) -> str:
        return "\n".join([self.CSV_HEADER] + self.csv_rows()) + "\n"

    def eps_optimal_fraction(self) -> float:
        if not self.records:
            return float("nan")
        return sum(r.eps_optimal for r in self.records) / len(self.records)

    def degraded_fraction(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.degraded for r in self.records) / len(self.records)

    def queries_by_mode(self) -> dict:
        out: dict = {}
        for r in self.records:
            out.setdefault(r.mode, []).append(r.queries)
        return out


def collect_post_samples(g: GenerativeModel, emp: EmpiricalModel, per_pair: int, rng):
    """Top every (s, a) count up to per_pair with extra uniform queries."""
    if per_pair < 1:
        raise ValueError("per_pair must be at least 1")
    for s in range(emp.num_states):
        for a in range(emp.num_actions):
            need = per_pair - int(emp.counts[s, a])
            if need > 0:
                next_counts, reward_counts = g.query_batch(s, a, need, rng)
                emp.add_batch(s, a, next_counts, reward_counts)
    return emp


def pre_eliminate(t_hat: np.ndarray, survived, h: int, cfg: SequentialConfig,
                  obs_dim: int):
    """Candidate tasks for the next round, per the transition-probability rule.

    A task theta is eliminated when its predicted probability mass plus the
    estimation slack falls at or below eta; the top cfg.top_keep tasks by
    predicted mass are always retained.  Never returns an empty set.
    """
    t_hat = np.asarray(t_hat, dtype=float)
    k = t_hat.shape[0]
    survivors = sorted(set(survived))
    if not survivors:
        raise ValueError("the survived set must be non-empty")
    score = t_hat[:, survivors].sum(axis=1)
    slack = cfg.delta * k
    if cfg.rho_t > 0 and h > 0:
        log_arg = 9.0 * k * obs_dim * cfg.num_tasks ** 2 / cfg.delta_prime
        slack += cfg.rho_t * k * math.sqrt(math.log(log_arg) / h)
    keep = {theta for theta in range(k) if score[theta] + slack > cfg.eta}
    top = np.argsort(-score, kind="stable")[: max(cfg.top_keep, 1)]
    keep.update(int(t) for t in top)
    return keep


def _eps_optimal(truth: TabularMdp, v_star: np.ndarray, policy: np.ndarray,
                 eps: float, tol: float = 1e-6) -> bool:
    v_pi = policy_evaluation(truth, policy)
    return bool(np.max(v_star - v_pi) <= eps + tol)


def _truth_diagnostics(est: HmmEstimate, o_true: np.ndarray, t_true: np.ndarray):
    """Max column errors of the aligned estimates against the ground truth."""
    o_err = float(np.max(np.linalg.norm(est.observation - o_true, axis=0)))
    t_err = float(np.max(np.abs(est.transition - t_true)))
    return o_err, t_err


def run_sequential(cfg: SequentialConfig, family, chain: TaskChain, rng,
                   oracle: ApproxModelSet | None = None) -> SequenceTrace:
    """The full per-task loop over ``cfg.num_tasks`` tasks.

    ``family`` holds the hidden ground-truth models; they are used to draw
    samples, to evaluate returned policies, and (for diagnostics only) to
    align the spectral estimates to true task labels.  ``oracle`` optionally
    provides an exact model set; when given, every transfer-phase task also
    runs the identification loop with exact models on a forked stream,
    logging the oracle query count for normalized-complexity plots.
    """
    family = list(family)
    k = len(family)
    if chain.num_tasks != k:
        raise ValueError("chain size must match the family size")
    base = family[0]
    S, A, U = base.num_states, base.num_actions, base.num_rewards
    gamma = base.gamma
    layout = ObservationLayout(S, A, U)

    true_values = [value_iteration(m)[0] for m in family]
    o_true = np.stack(
        [layout.vectorize(m.q, m.p) for m in family], axis=1
    )
    t_true = chain.transition

    trace = SequenceTrace()
    observations: list = []
    estimate: HmmEstimate | None = None
    approx: ApproxModelSet | None = None
    delta_h = math.inf
    active: set = set(range(k))
    current_task: int | None = None

    for h in range(cfg.num_tasks):
        if current_task is None:
            current_task = sample_initial_task(chain, rng)
        else:
            current_task = sample_next_task(chain, current_task, rng)
        truth = family[current_task]
        g = GenerativeModel(truth)

        in_startup = h < cfg.startup_tasks
        gate_open = (
            not in_startup
            and approx is not None
            and transfer_gate(delta_h, cfg.eps, gamma)
        )
        tau = None
        if gate_open:
            result = run_ptum(
                approx, g, cfg.eps, cfg.delta, cfg.budget, rng,
                fallback_per_pair=cfg.fallback_per_pair, active=active,
            )
            policy, emp, mode = result.policy, result.empirical, result.mode
            tau = result.tau
            survived = result.survived or set(active)
        else:
            per_pair = cfg.startup_per_pair if in_startup else (
                cfg.fallback_per_pair or cfg.startup_per_pair
            )
            policy, emp = uniform_pac_fallback(g, cfg.eps, cfg.delta, per_pair, rng)
            mode = "startup" if in_startup else "fallback-gate"
            survived = set(range(k))
        solve_queries = g.queries_used

        if oracle is not None and not in_startup:
            oracle_g = GenerativeModel(truth)
            oracle_res = run_ptum(oracle, oracle_g, cfg.eps, cfg.delta,
                                  cfg.budget, rng)
            oracle_tau = oracle_res.tau
        else:
            oracle_tau = None

        collect_post_samples(g, emp, cfg.post_sample_per_pair, rng)
        observations.append(vectorize_observation(emp, layout))

        degraded = False
        if len(observations) >= 3:
            try:
                estimate = spectral_estimate(
                    observations, k, layout,
                    restarts=cfg.rtp_restarts, iters=cfg.rtp_iters,
                    rng=rng, reference=o_true,
                )
            except (DegenerateMomentsError, DecompositionFailureError):
                degraded = True

        if estimate is not None:
            bound = model_error_bound(len(observations), cfg.rho_at(h),
                                      cfg.delta_prime, S, A, U)
            delta_next = bound["max"]
            models = unpack_models(estimate, base.reward_support, gamma)
            approx = ApproxModelSet(models, UncertaintyBounds(
                reward=delta_next, transition=delta_next,
                reward_std=delta_next, transition_std=delta_next,
            ))
            o_err, t_err = _truth_diagnostics(estimate, o_true, t_true)
        else:
            delta_next = math.inf
            o_err = t_err = math.nan

        record = TaskRecord(
            h=h,
            true_task=current_task,
            mode=mode,
            queries=solve_queries,
            queries_total=g.queries_used,
            eps_optimal=_eps_optimal(truth, true_values[current_task], policy, cfg.eps),
            active_set_size=len(active),
            delta_h=delta_h,
            o_col_err_max=o_err,
            t_err_max=t_err,
            degraded=degraded,
            tau=tau,
            oracle_tau=oracle_tau,
            true_in_active=current_task in active,
        )
        trace.append(record)

        if cfg.pre_elimination and estimate is not None:
            active = pre_eliminate(estimate.transition, survived,
                                   len(observations), cfg, layout.dim)
        else:
            active = set(range(k))
        delta_h = delta_next

    return trace
