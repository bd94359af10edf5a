"""Unit tests for the identification loop and its pieces."""
import math

import numpy as np
import pytest

from seqtransfer.envs import (
    GenerativeModel,
    GridSpec,
    build_multi_goal_grid,
    multi_goal_family,
    two_rooms_family,
)
from seqtransfer.mdp import TabularMdp, policy_evaluation, value_iteration
from seqtransfer.ptum import (
    INF,
    ApproxModelSet,
    ConfidenceParams,
    EmpiricalModel,
    UncertaintyBounds,
    check_stop,
    confidence_radii,
    default_fallback_per_pair,
    info_index,
    info_index_table,
    prune_confidence_set,
    run_ptum,
    select_query,
    stop_margin,
    theta_eps_and_bound,
    transfer_gate,
    uniform_pac_fallback,
)


def small_family(num_tasks=3, width=4, height=3, gamma=0.9):
    """Tiny two-goal grids differing only in goal rewards."""
    cells = {0: 0.5, width * height - 1: 0.5}
    spec = GridSpec(width=width, height=height, goal_cells=cells, gamma=gamma)
    per_task = []
    for i in range(num_tasks):
        rewards = dict(cells)
        rewards[0] = 0.5 + 0.1 * i
        per_task.append(rewards)
    return build_multi_goal_grid(spec, per_task)


class TestTransferGate:
    def test_zero_uncertainty_passes(self):
        assert transfer_gate(0.0, 0.1, 0.99)

    def test_threshold_value(self):
        # eps=0.1, gamma=0.99: threshold 0.1 * 0.01 / (4 * 1.99).
        threshold = 0.1 * (1.0 - 0.99) / (4 * (1.0 + 0.99))
        assert threshold == pytest.approx(1.2563e-4, rel=1e-4)
        assert not transfer_gate(2e-4, 0.1, 0.99)
        assert transfer_gate(threshold * 0.999, 0.1, 0.99)
        assert not transfer_gate(threshold, 0.1, 0.99)  # strict inequality

    def test_exact_models_allow_eps_zero(self):
        assert transfer_gate(0.0, 0.0, 0.99)

    def test_eps_zero_with_uncertainty_rejected(self):
        with pytest.raises(ValueError):
            transfer_gate(0.01, 0.0, 0.99)

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            transfer_gate(-0.1, 0.1, 0.9)


class TestConfidenceRadii:
    @staticmethod
    def params(S=2, A=2, n=100, k=3, delta=0.1, gamma=0.9, bounds=None):
        return ConfidenceParams(budget=n, num_models=k, delta=delta, gamma=gamma,
                                bounds=bounds or UncertaintyBounds())

    def test_no_samples_gives_infinite_radii(self):
        emp = EmpiricalModel(2, 2, [0.0, 1.0])
        assert confidence_radii(emp, 0, 0, np.zeros(2), self.params()) == (INF,) * 4

    def test_one_sample_still_infinite(self):
        emp = EmpiricalModel(2, 2, [0.0, 1.0])
        emp.add_sample(0, 0, 1, 1.0)
        assert confidence_radii(emp, 0, 0, np.zeros(2), self.params())[0] == INF

    def test_reward_radius_formula(self):
        # S=2, A=2, n=100, |Theta|=3, delta=0.1, N=10 with 5 ones:
        # L = log(8*2*2*100*4/0.1) = log(128000), sigma_hat = sqrt(2.5/9).
        emp = EmpiricalModel(2, 2, [0.0, 1.0])
        for i in range(10):
            emp.add_sample(0, 0, i % 2, float(i % 2))
        L = math.log(8 * 2 * 2 * 100 * 4 / 0.1)
        sigma = math.sqrt(2.5 / 9)
        expected = math.sqrt(2 * sigma * sigma * L / 10) + 7 * L / (3 * 9)
        c_r, _, c_sr, _ = confidence_radii(emp, 0, 0, np.zeros(2), self.params())
        assert c_r == pytest.approx(expected, rel=1e-12)
        L2 = math.log(4 * 2 * 2 * 100 * 4 / 0.1)
        assert c_sr == pytest.approx(math.sqrt(2 * L2 / 9), rel=1e-12)

    def test_large_n_limit_is_model_uncertainty(self):
        bounds = UncertaintyBounds(reward=0.03)
        emp = EmpiricalModel(1, 1, [0.5])
        emp.counts[0, 0] = 2_000_000
        emp.reward_counts[0, 0, 0] = 2_000_000
        emp.next_counts[0, 0, 0] = 2_000_000
        c_r = confidence_radii(emp, 0, 0, np.zeros(1),
                               self.params(S=1, A=1, bounds=bounds))[0]
        assert c_r == pytest.approx(0.03, abs=1e-4)


class TestPruning:
    def test_no_samples_no_elimination(self):
        fam = small_family()
        approx = ApproxModelSet(fam)
        emp = EmpiricalModel(approx.num_states, approx.num_actions, fam[0].reward_support)
        params = ConfidenceParams(budget=100, num_models=3, delta=0.1,
                                  gamma=0.9, bounds=UncertaintyBounds())
        assert prune_confidence_set({0, 1, 2}, emp, approx, params) == {0, 1, 2}

    def test_gross_reward_deviation_eliminates(self):
        fam = small_family()
        approx = ApproxModelSet(fam)
        emp = EmpiricalModel(approx.num_states, approx.num_actions, fam[0].reward_support)
        # Cell 0 distinguishes the tasks: rewards 0.5 / 0.6 / 0.7. Feed a
        # large sample exactly matching task 0.
        for _ in range(5000):
            emp.add_sample(0, 0, 0, 0.5)
        params = ConfidenceParams(budget=10_000, num_models=3, delta=0.1,
                                  gamma=0.9, bounds=UncertaintyBounds())
        survivors = prune_confidence_set({0, 1, 2}, emp, approx, params)
        assert 0 in survivors
        assert 2 not in survivors

    def test_empty_active_rejected(self):
        fam = small_family()
        approx = ApproxModelSet(fam)
        emp = EmpiricalModel(approx.num_states, approx.num_actions, fam[0].reward_support)
        params = ConfidenceParams(budget=10, num_models=3, delta=0.1,
                                  gamma=0.9, bounds=UncertaintyBounds())
        with pytest.raises(ValueError):
            prune_confidence_set(set(), emp, approx, params)


class TestStopping:
    def test_singleton_stops(self):
        fam = small_family()
        approx = ApproxModelSet(fam)
        got = check_stop({1}, approx, eps=0.1)
        assert got is not None
        theta, policy = got
        assert theta == 1
        assert np.array_equal(policy, approx.policies[1])

    def test_identical_models_stop_immediately(self):
        fam = small_family()
        approx = ApproxModelSet([fam[0], fam[0]])
        got = check_stop({0, 1}, approx, eps=0.01)
        assert got is not None and got[0] == 0

    def test_multi_goal_family_no_stop_at_start(self):
        # Distinct best goals: no task's policy is eps-good for all others
        # even at eps=1, so the full set cannot stop at t=0.
        fam = multi_goal_family()
        approx = ApproxModelSet(fam)
        assert check_stop(set(range(7)), approx, eps=1.0) is None

    def test_negative_margin_rejected(self):
        with pytest.raises(ValueError):
            stop_margin(eps=0.1, delta_max=0.1, gamma=0.99)


class TestInfoIndex:
    def test_same_model_zero(self):
        fam = small_family()
        approx = ApproxModelSet(fam)
        assert info_index(1, 1, 0, 0, approx) == 0.0

    def test_unit_gap_unit_sigma(self):
        # Reward gap 1 with sigma 1 and no uncertainty: min(1, 1) = 1.
        p = np.ones((1, 1, 1))
        support = np.array([0.0, 1.0])
        qa = np.zeros((1, 1, 2)); qa[0, 0, 0] = 1.0
        qb = np.zeros((1, 1, 2)); qb[0, 0, 1] = 1.0
        a = TabularMdp(p=p, reward_support=support, q=qa, gamma=0.5)
        b = TabularMdp(p=p, reward_support=support, q=qb, gamma=0.5)
        approx = ApproxModelSet([a, b])
        # sigma_r of a point mass is 0, so the ratio term is infinite and the
        # min picks the linear term: Psi = gap = 1.
        assert info_index(0, 1, 0, 0, approx) == pytest.approx(1.0)

    def test_clipped_gap_vanishes(self):
        fam = small_family()
        approx = ApproxModelSet(fam, UncertaintyBounds(reward=0.02))
        # Tasks 0 and 1 differ by 0.1 < 8 * 0.02 at the distinguishing cell,
        # so the clipped gap [0.1 - 0.16]+ vanishes.
        assert info_index(0, 1, 0, 0, approx) == 0.0

    def test_monotone_in_delta(self):
        fam = small_family()
        approx = ApproxModelSet(fam)
        deltas = [0.0, 0.002, 0.005, 0.01, 0.02]
        vals = [info_index(0, 2, 0, 0, approx, delta_max=d) for d in deltas]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_table_matches_scalar(self):
        fam = small_family()
        approx = ApproxModelSet(fam, UncertaintyBounds(reward=0.001))
        table = info_index_table(approx)
        rng = np.random.default_rng(0)
        for _ in range(40):
            i, j = rng.integers(3, size=2)
            s = int(rng.integers(approx.num_states))
            a = int(rng.integers(approx.num_actions))
            assert table[i, j, s, a] == pytest.approx(
                info_index(int(i), int(j), s, a, approx), abs=1e-12)


class TestSelectQuery:
    def test_singleton_ties_break_low(self):
        fam = small_family()
        approx = ApproxModelSet(fam)
        assert select_query({1}, approx) == (0, 0)

    def test_unique_discriminating_pair(self):
        fam = small_family()
        approx = ApproxModelSet(fam)
        # All reward differences live at cell 0 (every action).
        s, a = select_query({0, 2}, approx)
        assert s == 0 and a == 0


class TestRunPtum:
    def test_singleton_stops_at_zero(self):
        fam = small_family(num_tasks=1)
        approx = ApproxModelSet(fam)
        g = GenerativeModel(fam[0])
        res = run_ptum(approx, g, eps=0.1, delta=0.05, n=100, rng=np.random.default_rng(0))
        assert res.mode == "transfer-stopped"
        assert res.tau == 0
        assert res.chosen_model == 0
        assert g.queries_used == 0

    def test_gate_failure_falls_back(self):
        fam = small_family()
        approx = ApproxModelSet(fam, UncertaintyBounds(reward=0.5))
        g = GenerativeModel(fam[0])
        res = run_ptum(approx, g, eps=0.1, delta=0.05, n=200,
                       rng=np.random.default_rng(1), fallback_per_pair=2)
        assert res.mode == "fallback-gate"
        assert g.queries_used == approx.num_states * approx.num_actions * 2

    def test_trace_monotone_and_deterministic(self):
        fam = small_family()
        approx = ApproxModelSet(fam)

        def run():
            g = GenerativeModel(fam[0])
            return run_ptum(approx, g, eps=0.3, delta=0.05, n=5000,
                            rng=np.random.default_rng(7))

        a, b = run(), run()
        assert a.mode == "transfer-stopped"
        assert a.query_log == b.query_log
        assert a.survived_trace == b.survived_trace
        sets = [set(step) for step in a.survived_trace]
        assert all(t1 >= t2 for t1, t2 in zip(sets, sets[1:]))
        assert all(0 in step for step in sets)

    def test_budget_exhaustion_falls_back(self):
        fam = small_family()
        approx = ApproxModelSet(fam)
        g = GenerativeModel(fam[0])
        res = run_ptum(approx, g, eps=0.3, delta=0.05, n=3,
                       rng=np.random.default_rng(2), fallback_per_pair=1)
        assert res.mode == "fallback-budget"
        assert res.policy.shape == (approx.num_states,)


class TestFallback:
    def test_deterministic_model_single_sample(self):
        p = np.zeros((2, 2, 2))
        p[:, 0, 0] = 1.0
        p[:, 1, 1] = 1.0
        support = np.array([0.0, 1.0])
        q = np.zeros((2, 2, 2))
        q[:, :, 0] = 1.0
        q[1, 1] = [0.0, 1.0]
        truth = TabularMdp(p=p, reward_support=support, q=q, gamma=0.9)
        g = GenerativeModel(truth)
        policy, emp = uniform_pac_fallback(g, 0.1, 0.1, 1, np.random.default_rng(3))
        v_star, pi_star = value_iteration(truth)
        assert np.allclose(policy_evaluation(truth, policy), v_star)

    def test_large_budget_near_optimal(self):
        rng = np.random.default_rng(4)
        truth = TabularMdp(
            p=rng.dirichlet(np.ones(4), size=(4, 2)),
            reward_support=np.linspace(0, 1, 3),
            q=rng.dirichlet(np.ones(3), size=(4, 2)),
            gamma=0.9,
        )
        g = GenerativeModel(truth)
        policy, _ = uniform_pac_fallback(g, 0.01, 0.1, 10_000, rng)
        v_star, _ = value_iteration(truth)
        assert np.max(v_star - policy_evaluation(truth, policy)) < 0.01

    def test_default_per_pair_formula(self):
        got = default_fallback_per_pair(0.5, 0.1, 4, 2, 0.9)
        expected = math.ceil(2 * math.log(4 * 8 / 0.1) / (0.25 * 0.1 ** 3))
        assert got == expected


class TestDiagnostics:
    def test_all_models_close_gives_empty_set(self):
        fam = small_family()
        approx = ApproxModelSet([fam[0], fam[0]])
        theta_eps, bound = theta_eps_and_bound(approx, 0, eps=0.5, delta=0.1, n=100)
        assert theta_eps == set()
        assert bound == 0.0

    def test_separated_models_flagged(self):
        fam = small_family()
        approx = ApproxModelSet(fam)
        theta_eps, bound = theta_eps_and_bound(approx, 0, eps=0.1, delta=0.1, n=1000)
        assert theta_eps == {1, 2}
        assert bound > 0.0 and math.isfinite(bound)

    def test_gate_failure_raises(self):
        fam = small_family()
        approx = ApproxModelSet(fam, UncertaintyBounds(reward=0.5))
        with pytest.raises(ValueError):
            theta_eps_and_bound(approx, 0, eps=0.1, delta=0.1, n=100)
