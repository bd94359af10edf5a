"""Unit tests for the sequential-transfer loop and its helpers."""
import math

import numpy as np
import pytest

from seqtransfer.envs import GenerativeModel, TaskChain, successor_chain
from seqtransfer.mdp import TabularMdp
from seqtransfer.ptum import EmpiricalModel
from seqtransfer.sequential import (
    SequenceTrace,
    SequentialConfig,
    TaskRecord,
    collect_post_samples,
    pre_eliminate,
    run_sequential,
)


def make_cfg(**overrides):
    base = dict(
        num_tasks=4,
        startup_tasks=2,
        startup_per_pair=5,
        post_sample_per_pair=5,
        eps=0.5,
        delta=1e-3,
        delta_prime=0.1,
        rho=0.1,
        eta=0.0,
        pre_elimination=False,
    )
    base.update(overrides)
    return SequentialConfig(**base)


def tiny_family(k=3, gamma=0.9, seed=0):
    """k random 2-state, 2-action models on a shared 3-point reward ladder."""
    rng = np.random.default_rng(seed)
    support = np.linspace(0.0, 1.0, 3)
    fam = []
    for _ in range(k):
        p = rng.dirichlet(np.ones(2), size=(2, 2))
        q = rng.dirichlet(np.ones(3), size=(2, 2))
        fam.append(TabularMdp(p=p, reward_support=support, q=q, gamma=gamma))
    return fam


class TestConfig:
    def test_pre_elimination_delta_cap(self):
        # With eta > 0 the failure-probability split requires
        # delta <= delta_prime / (3 m^2).
        with pytest.raises(ValueError):
            make_cfg(pre_elimination=True, eta=0.05, num_tasks=10,
                     delta=0.01, delta_prime=0.1)

    def test_pre_elimination_delta_ok(self):
        cfg = make_cfg(pre_elimination=True, eta=0.05, num_tasks=10,
                       delta=1e-4, delta_prime=0.1)
        assert cfg.eta == 0.05

    def test_bad_per_pair(self):
        with pytest.raises(ValueError):
            make_cfg(startup_per_pair=0)

    def test_bad_delta(self):
        with pytest.raises(ValueError):
            make_cfg(delta=0.0)

    def test_rho_at_endpoints(self):
        cfg = make_cfg(rho=0.135, rho_final=0.006, rho_decay_tasks=100,
                       num_tasks=150)
        assert cfg.rho_at(0) == pytest.approx(0.135)
        assert cfg.rho_at(100) == pytest.approx(0.006)
        assert cfg.rho_at(140) == pytest.approx(0.006)
        assert cfg.rho_at(50) == pytest.approx((0.135 + 0.006) / 2)

    def test_rho_at_without_decay(self):
        cfg = make_cfg(rho=0.2)
        assert cfg.rho_at(0) == cfg.rho_at(99) == 0.2


class TestPostSamples:
    def test_no_queries_when_satisfied(self):
        fam = tiny_family(1)
        g = GenerativeModel(fam[0])
        emp = EmpiricalModel(2, 2, fam[0].reward_support)
        rng = np.random.default_rng(0)
        for s in range(2):
            for a in range(2):
                nc, rc = g.query_batch(s, a, 7, rng)
                emp.add_batch(s, a, nc, rc)
        used = g.queries_used
        collect_post_samples(g, emp, 5, rng)
        assert g.queries_used == used

    def test_tops_up_fresh_model(self):
        fam = tiny_family(1)
        g = GenerativeModel(fam[0])
        emp = EmpiricalModel(2, 2, fam[0].reward_support)
        collect_post_samples(g, emp, 3, np.random.default_rng(1))
        assert g.queries_used == 2 * 2 * 3
        assert np.all(emp.counts == 3)

    def test_partial_top_up(self):
        fam = tiny_family(1)
        g = GenerativeModel(fam[0])
        emp = EmpiricalModel(2, 2, fam[0].reward_support)
        rng = np.random.default_rng(2)
        nc, rc = g.query_batch(0, 0, 10, rng)
        emp.add_batch(0, 0, nc, rc)
        collect_post_samples(g, emp, 4, rng)
        # Pair (0, 0) already exceeds the target; the other three pairs
        # each need 4 queries.
        assert g.queries_used == 10 + 3 * 4
        assert emp.counts[0, 0] == 10

    def test_rejects_zero_per_pair(self):
        fam = tiny_family(1)
        emp = EmpiricalModel(2, 2, fam[0].reward_support)
        with pytest.raises(ValueError):
            collect_post_samples(GenerativeModel(fam[0]), emp, 0,
                                 np.random.default_rng(3))


class TestPreEliminate:
    def test_zero_eta_keeps_everything(self):
        cfg = make_cfg(pre_elimination=True, eta=0.0, top_keep=1)
        t_hat = np.eye(5)
        keep = pre_eliminate(t_hat, {0}, h=10, cfg=cfg, obs_dim=30)
        assert keep == set(range(5))

    def test_identity_chain_keeps_successor(self):
        cfg = make_cfg(pre_elimination=True, eta=0.5, top_keep=1,
                       delta=1e-6, delta_prime=0.1, num_tasks=4)
        t_hat = np.eye(5)
        keep = pre_eliminate(t_hat, {2}, h=10, cfg=cfg, obs_dim=30)
        # Only task 2 carries mass from the survivor; slack is negligible.
        assert keep == {2}

    def test_top_keep_retains_leaders(self):
        cfg = make_cfg(pre_elimination=True, eta=2.0, top_keep=3,
                       delta=1e-6, delta_prime=0.1, num_tasks=4)
        chain = successor_chain(6)
        keep = pre_eliminate(chain.transition, {1}, h=50, cfg=cfg, obs_dim=30)
        # eta above any attainable score: only the forced top 3 survive,
        # led by the 0.97-probability successor.
        assert len(keep) == 3
        assert 2 in keep

    def test_slack_grows_with_rho_t(self):
        base = make_cfg(pre_elimination=True, eta=0.05, top_keep=1,
                        delta=1e-6, delta_prime=0.1, num_tasks=4)
        noisy = make_cfg(pre_elimination=True, eta=0.05, top_keep=1,
                         delta=1e-6, delta_prime=0.1, num_tasks=4, rho_t=0.5)
        t_hat = np.full((4, 4), 0.04)
        t_hat += np.diag(1.0 - t_hat.sum(axis=0))
        strict = pre_eliminate(t_hat, {0}, h=4, cfg=base, obs_dim=30)
        loose = pre_eliminate(t_hat, {0}, h=4, cfg=noisy, obs_dim=30)
        assert strict <= loose
        assert loose == {0, 1, 2, 3}

    def test_empty_survivors_rejected(self):
        cfg = make_cfg(pre_elimination=True)
        with pytest.raises(ValueError):
            pre_eliminate(np.eye(3), set(), h=1, cfg=cfg, obs_dim=10)


class TestTrace:
    @staticmethod
    def record(h, mode="transfer-stopped", eps_optimal=True, queries=10):
        return TaskRecord(h=h, true_task=0, mode=mode, queries=queries,
                          queries_total=queries + 5, eps_optimal=eps_optimal,
                          active_set_size=3, delta_h=0.25,
                          o_col_err_max=0.1, t_err_max=0.05)

    def test_csv_shape(self):
        trace = SequenceTrace()
        trace.append(self.record(0))
        trace.append(self.record(1, eps_optimal=False))
        text = trace.to_csv()
        lines = text.strip().split("\n")
        assert lines[0] == SequenceTrace.CSV_HEADER
        assert len(lines) == 3
        assert lines[1].startswith("0,0,transfer-stopped,10,1,3,")

    def test_fractions(self):
        trace = SequenceTrace()
        trace.append(self.record(0))
        trace.append(self.record(1, eps_optimal=False))
        assert trace.eps_optimal_fraction() == pytest.approx(0.5)
        assert trace.degraded_fraction() == 0.0

    def test_queries_by_mode(self):
        trace = SequenceTrace()
        trace.append(self.record(0, mode="startup", queries=100))
        trace.append(self.record(1, queries=8))
        trace.append(self.record(2, queries=12))
        by_mode = trace.queries_by_mode()
        assert by_mode["startup"] == [100]
        assert by_mode["transfer-stopped"] == [8, 12]

    def test_empty_fraction_is_nan(self):
        assert math.isnan(SequenceTrace().eps_optimal_fraction())


class TestRunSequential:
    def test_chain_family_size_mismatch(self):
        fam = tiny_family(3)
        chain = TaskChain(transition=np.eye(2), initial=np.array([1.0, 0.0]))
        with pytest.raises(ValueError):
            run_sequential(make_cfg(), fam, chain, np.random.default_rng(0))

    def test_startup_only_run(self):
        fam = tiny_family(3)
        chain = successor_chain(3)
        cfg = make_cfg(num_tasks=2, startup_tasks=5)
        trace = run_sequential(cfg, fam, chain, np.random.default_rng(1))
        assert len(trace) == 2
        assert all(r.mode == "startup" for r in trace.records)
        # Each startup task pays uniform sampling plus the post-sample top-up.
        assert all(r.queries == 2 * 2 * 5 for r in trace.records)

    def test_deterministic_replay(self):
        fam = tiny_family(3, seed=7)
        chain = successor_chain(3)
        cfg = make_cfg(num_tasks=6, startup_tasks=3, startup_per_pair=40,
                       post_sample_per_pair=40, rho=2.0)
        a = run_sequential(cfg, fam, chain, np.random.default_rng(42))
        b = run_sequential(cfg, fam, chain, np.random.default_rng(42))
        assert a.to_csv() == b.to_csv()

    def test_single_task_family_transfers_free(self):
        # With one candidate model the elimination loop stops immediately,
        # so every post-startup task costs only the post samples.
        fam = tiny_family(1, gamma=0.5)
        chain = TaskChain(transition=np.eye(1), initial=np.array([1.0]))
        cfg = make_cfg(num_tasks=8, startup_tasks=3, startup_per_pair=200,
                       post_sample_per_pair=20, rho=1e-4, eps=0.5)
        trace = run_sequential(cfg, fam, chain, np.random.default_rng(3))
        post = trace.records[3:]
        assert all(r.mode == "transfer-stopped" for r in post)
        assert all(r.tau == 0 and r.queries == 0 for r in post)
        assert all(r.eps_optimal for r in post)

    def test_gate_closed_falls_back(self):
        # A huge rho keeps the uncertainty above the gate forever, so the
        # post-startup tasks use the uniform fallback.
        fam = tiny_family(2, seed=9)
        chain = successor_chain(2)
        cfg = make_cfg(num_tasks=5, startup_tasks=3, rho=50.0,
                       fallback_per_pair=4)
        trace = run_sequential(cfg, fam, chain, np.random.default_rng(4))
        assert all(r.mode == "fallback-gate" for r in trace.records[3:])
        assert all(r.queries == 2 * 2 * 4 for r in trace.records[3:])

    def test_trace_columns_populated(self):
        fam = tiny_family(3, seed=11)
        chain = successor_chain(3)
        cfg = make_cfg(num_tasks=15, startup_tasks=15, startup_per_pair=200,
                       post_sample_per_pair=200, rho=2.0)
        trace = run_sequential(cfg, fam, chain, np.random.default_rng(5))
        for r in trace.records:
            assert 0 <= r.true_task < 3
            assert r.queries_total >= r.queries
        # Spectral estimation kicks in once enough observation triples exist
        # to support the rank-3 decomposition.
        late = trace.records[-1]
        assert not late.degraded
        assert math.isfinite(late.o_col_err_max)
        assert math.isfinite(late.t_err_max)
