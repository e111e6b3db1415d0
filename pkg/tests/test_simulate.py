import numpy as np
import pytest

from regretlab.agents import C1, C2, C3, AgentSpec, OracleAgent
from regretlab.envs import gen_cost_layered, gen_hard_chain, gen_jao, gen_random
from regretlab.mdp import bellman_optimal, policy_eval
from regretlab.simulate import (
    BankExhaustedError,
    ExpandedSampleBank,
    OnDemandSampler,
    RngContract,
    _cdf_table,
    pac_extract,
    policy_at,
    pow2_checkpoints,
    run_online,
)

from conftest import random_mdp

SCALED = AgentSpec("mvp", {"c1": C1 * 1e-3, "c2": C2 * 1e-3, "c3": C3 * 1e-3}, label="mvp_scaled")


def test_rng_streams_independent_and_reproducible():
    rngs = RngContract(42)
    a = rngs.stream("transitions", 0, 1, 2).random(5)
    assert np.array_equal(a, RngContract(42).stream("transitions", 0, 1, 2).random(5))
    assert not np.array_equal(a, rngs.stream("transitions", 0, 1, 3).random(5))
    assert not np.array_equal(a, rngs.stream("rewards", 0, 1, 2).random(5))
    with pytest.raises(ValueError):
        rngs.stream("bogus")


def test_block_draws_equal_scalar_draws():
    # the expanded bank relies on this property of the bit generator
    g1, g2 = RngContract(3).stream("transitions", 1), RngContract(3).stream("transitions", 1)
    assert g1.random(100).tolist() == [g2.random() for _ in range(100)]


def test_cdf_tail_pinned():
    cdf = _cdf_table(np.array([[0.1, 0.2, 0.7, 0.0]]))
    assert cdf[0, 2] == 1.0 and cdf[0, 3] == 1.0


def test_sampler_frequencies():
    mdp = gen_jao(6)
    sampler = OnDemandSampler(mdp, RngContract(0))
    draws = np.array([sampler.next_state(0, 1, 1) for _ in range(20000)])
    p_y = mdp.transitions[0, 1, 1, 1]
    assert abs(draws.mean() - p_y) < 4 * np.sqrt(p_y * (1 - p_y) / 20000)


def test_samplers_agree_sample_for_sample(rng):
    mdp = random_mdp(3, 2, 2, rng)
    on, ex = OnDemandSampler(mdp, RngContract(5)), ExpandedSampleBank(mdp, RngContract(5), capacity=500)
    for _ in range(300):
        h, s, a = int(rng.integers(2)), int(rng.integers(3)), int(rng.integers(2))
        assert on.next_state(h, s, a) == ex.next_state(h, s, a)
        assert on.reward(h, s, a) == ex.reward(h, s, a)


def test_bank_exhaustion():
    bank = ExpandedSampleBank(gen_jao(6), RngContract(0), capacity=3)
    for _ in range(3):
        bank.next_state(0, 0, 0)
    with pytest.raises(BankExhaustedError):
        bank.next_state(0, 0, 0)


class TestRunOnline:
    def test_oracle_on_deterministic_env(self):
        env = gen_hard_chain(4, 3, 6, seed=11)
        result = run_online(env, OracleAgent(env), 64, seed=0, keep_trajectories=True)
        v_star = bellman_optimal(env)[0].v[0]
        for traj in result.trajectories:
            assert sum(traj.rewards) == v_star[traj.states[0]]
        assert result.ledger.total == 0.0

    def test_oracle_regret_zero_everywhere(self):
        env = gen_cost_layered(5, 0.2, seed=1)
        result = run_online(env, OracleAgent(env), 100, seed=0)
        assert np.all(result.ledger.cumulative == 0.0)

    @pytest.mark.parametrize("spec", [AgentSpec("mvp"), SCALED, AgentSpec("ucbvi"), AgentSpec("random")])
    def test_reproducible(self, spec):
        env = gen_random(3, 2, 4, seed=7)
        a = run_online(env, spec, 300, seed=9, keep_trajectories=True)
        b = run_online(env, spec, 300, seed=9, keep_trajectories=True)
        assert a.trajectory_digest == b.trajectory_digest
        assert b"".join(t.to_bytes() for t in a.trajectories) == b"".join(t.to_bytes() for t in b.trajectories)
        assert np.array_equal(a.ledger.gaps, b.ledger.gaps)

    @pytest.mark.parametrize("env", [gen_random(3, 2, 4, seed=7), gen_jao(6), gen_cost_layered(4, 0.1)],
                             ids=["random", "jao", "cost"])
    @pytest.mark.parametrize("spec", [AgentSpec("mvp"), SCALED, AgentSpec("random")], ids=["mvp", "scaled", "random"])
    def test_backends_coupled(self, env, spec):
        K = 1024
        a = run_online(env, spec, K, seed=4, backend="ondemand", keep_trajectories=True)
        b = run_online(env, spec, K, seed=4, backend="expanded", keep_trajectories=True)
        assert a.trajectory_digest == b.trajectory_digest
        assert all(x.to_bytes() == y.to_bytes() for x, y in zip(a.trajectories, b.trajectories))
        assert np.array_equal(a.ledger.gaps, b.ledger.gaps)

    def test_stochastic_rewards_coupled(self, rng):
        env = random_mdp(3, 2, 3, rng)
        a = run_online(env, SCALED, 512, seed=1, backend="ondemand")
        b = run_online(env, SCALED, 512, seed=1, backend="expanded")
        assert a.trajectory_digest == b.trajectory_digest

    @pytest.mark.parametrize("spec", [AgentSpec("mvp"), SCALED, AgentSpec("ucbvi"), AgentSpec("random")])
    def test_ledger_bounds(self, spec):
        env = gen_jao(6)
        K = 512
        result = run_online(env, spec, K, seed=2)
        gaps = result.ledger.gaps
        assert np.all(gaps >= 0) and np.all(gaps <= env.horizon)
        assert np.all(np.diff(result.ledger.cumulative) >= 0)
        assert result.ledger.total <= env.horizon * K

    def test_instrumented_invariants(self):
        env = gen_random(3, 2, 4, seed=7)
        result = run_online(env, SCALED, 2048, seed=3, instrument=True)
        assert result.epoch_cache_mismatches == 0
        assert result.profile_mismatches == 0
        assert result.epochs > 1

    def test_optimism_on_deterministic_env(self):
        env = gen_hard_chain(2, 2, 3, seed=0)
        assert run_online(env, SCALED, 2048, seed=0).optimism_violations == 0

    def test_no_bonus_breaks_optimism(self):
        env = gen_jao(6)
        greedy = AgentSpec("mvp", {"c1": 0.0, "c2": 0.0, "c3": 0.0})
        assert run_online(env, greedy, 1024, seed=0).optimism_violations > 0

    def test_scaled_mvp_learns_small_chain(self):
        env = gen_hard_chain(2, 2, 3, seed=0)
        result = run_online(env, SCALED, 4096, seed=1)
        assert result.ledger.gaps[-1] == 0.0
        last_bad = np.flatnonzero(result.ledger.gaps)[-1]
        assert np.all(result.ledger.gaps[last_bad + 1:] == 0)

    @pytest.mark.xfail(strict=True, reason="default constants: the bonus stays above H for every batch reachable at K=2^12")
    def test_default_mvp_learns_small_chain(self):
        env = gen_hard_chain(2, 2, 3, seed=0)
        result = run_online(env, AgentSpec("mvp"), 2**12, seed=1)
        assert result.ledger.gaps[-1] == 0.0

    def test_checkpoints(self):
        assert pow2_checkpoints(16) == [1, 2, 4, 8, 16]
        assert pow2_checkpoints(20) == [1, 2, 4, 8, 16, 20]
        result = run_online(gen_jao(6), AgentSpec("random"), 20, seed=0)
        cp = result.ledger.at_checkpoints()
        assert list(cp) == [1, 2, 4, 8, 16, 20]
        assert cp[20] == pytest.approx(result.ledger.total)

    def test_k_one(self):
        result = run_online(gen_jao(6), AgentSpec("mvp"), 1, seed=0)
        assert result.agent.refreshes.max() <= 1


class TestPac:
    def test_oracle_zero(self):
        env = gen_random(3, 2, 3, seed=1)
        result = run_online(env, OracleAgent(env), 32, seed=0)
        _, gap = pac_extract(env, result.policy_log, 32, np.random.default_rng(0))
        assert gap == 0.0

    def test_single_epoch_returns_that_policy(self):
        env = gen_jao(6)
        result = run_online(env, AgentSpec("random"), 16, seed=0)
        assert len(result.policy_log) == 1
        pi, _ = pac_extract(env, result.policy_log, 16, np.random.default_rng(1))
        assert pi is result.policy_log[0][2]

    def test_average_matches_regret_per_episode(self):
        env = gen_random(3, 2, 4, seed=7)
        K = 2048
        result = run_online(env, SCALED, K, seed=2)
        rng = np.random.default_rng(0)
        samples = np.array([pac_extract(env, result.policy_log, K, rng)[1] for _ in range(4000)])
        # the ledger uses realized start states, so compare against its mu-averaged counterpart
        v_star = bellman_optimal(env)[0].v[0]
        expected = np.mean([env.init_dist @ (v_star - policy_eval(env, policy_at(result.policy_log, k)).v[0])
                            for k in range(1, K + 1)])
        se = samples.std(ddof=1) / np.sqrt(samples.size)
        assert abs(samples.mean() - expected) <= 3 * se + 1e-12
        ledger_se = result.ledger.gaps.std(ddof=1) / np.sqrt(K)
        assert abs(result.ledger.total / K - samples.mean()) <= 3 * np.hypot(se, ledger_se)
