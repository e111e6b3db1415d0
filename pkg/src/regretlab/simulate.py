"""Seeded online interaction, exact regret accounting, and PAC extraction.

Randomness is split into keyed streams (see :class:`RngContract`), one per
purpose and per (h, s, a) triple, so that a run is a pure function of its
master seed no matter how cells are scheduled. Two sampling backends read the
same streams:

* ``ondemand`` draws each next state / reward when the triple is visited;
* ``expanded`` pre-draws per-triple banks in blocks and consumes them in order
  without replacement.

Because both map the same uniforms through the same inverse CDF, they yield
bit-identical trajectories.
"""
from __future__ import annotations

import hashlib
import math
import time
import zlib
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .agents import Agent, AgentSpec
from .mdp import RewardKind, TabularMdp, bellman_optimal, policy_eval
from .metrics import profile_index_array

BACKENDS = ("ondemand", "expanded")
OPTIMISM_TOL = 1e-9
_PURPOSES = ("env", "init", "transitions", "rewards", "agent")


class BankExhaustedError(RuntimeError):
    pass


class RngContract:
    """Independent generators keyed by (master seed, purpose, indices)."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)

    def stream(self, purpose: str, *indices: int) -> np.random.Generator:
        if purpose not in _PURPOSES:
            raise ValueError(f"unknown stream purpose {purpose!r}")
        key = (zlib.crc32(purpose.encode()),) + tuple(int(i) for i in indices)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.master_seed, spawn_key=key)))


def _cdf_table(probs: np.ndarray) -> np.ndarray:
    """Cumulative sums with the tail pinned to 1 from the last positive entry on."""
    cum = np.cumsum(probs, axis=-1)
    positive = probs > 0
    last = probs.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    tail = np.arange(probs.shape[-1]) >= last[..., None]
    cum[tail] = 1.0
    return cum


class _Sampler:
    def __init__(self, mdp: TabularMdp, rngs: RngContract):
        self.mdp = mdp
        self.rngs = rngs
        self.cdf = _cdf_table(mdp.transitions)
        self.cdf_rows = self.cdf.tolist()
        self.stochastic_reward = (mdp.reward_kind == RewardKind.SCALED_BERNOULLI).tolist()
        self.reward_value = mdp.reward_value.tolist()
        self.reward_prob = mdp.reward_prob.tolist()
        self.sign = -1.0 if mdp.mode.value == "cost" else 1.0
        self._trans_gen: dict[tuple, np.random.Generator] = {}
        self._reward_gen: dict[tuple, np.random.Generator] = {}

    def _gen(self, table: dict, purpose: str, key: tuple) -> np.random.Generator:
        gen = table.get(key)
        if gen is None:
            gen = table[key] = self.rngs.stream(purpose, *key)
        return gen

    def _reward_from_uniform(self, h, s, a, u) -> float:
        return self.sign * (self.reward_value[h][s][a] if u < self.reward_prob[h][s][a] else 0.0)

    def reward(self, h: int, s: int, a: int) -> float:
        if not self.stochastic_reward[h][s][a]:
            return self.sign * self.reward_value[h][s][a]
        return self._reward_from_uniform(h, s, a, self._reward_uniform(h, s, a))

    def next_state(self, h: int, s: int, a: int) -> int:
        return bisect_right(self.cdf_rows[h][s][a], self._transition_uniform(h, s, a))


class OnDemandSampler(_Sampler):
    def _transition_uniform(self, h, s, a):
        return self._gen(self._trans_gen, "transitions", (h, s, a)).random()

    def _reward_uniform(self, h, s, a):
        return self._gen(self._reward_gen, "rewards", (h, s, a)).random()


class ExpandedSampleBank(_Sampler):
    """Per-triple pre-drawn samples, filled lazily in doubling blocks up to ``capacity``."""

    def __init__(self, mdp: TabularMdp, rngs: RngContract, capacity: int, first_block: int = 64):
        super().__init__(mdp, rngs)
        self.capacity = capacity
        self.first_block = first_block
        self.next_states: dict[tuple, list[int]] = {}
        self.reward_uniforms: dict[tuple, list[float]] = {}
        self.cursor: dict[tuple, int] = {}
        self.reward_cursor: dict[tuple, int] = {}

    def _extend(self, bank: dict, cursor: dict, gen_table: dict, purpose: str, key: tuple, mapper):
        have = len(bank.get(key, ()))
        if have >= self.capacity:
            raise BankExhaustedError(f"{purpose} bank for (h, s, a)={key} exhausted after {self.capacity} draws")
        size = min(max(self.first_block, have), self.capacity - have)
        u = self._gen(gen_table, purpose, key).random(size)
        bank.setdefault(key, []).extend(mapper(u))
        cursor.setdefault(key, 0)

    def next_state(self, h, s, a):
        key = (h, s, a)
        i = self.cursor.get(key, 0)
        if i >= len(self.next_states.get(key, ())):
            cdf = self.cdf[h, s, a]
            self._extend(self.next_states, self.cursor, self._trans_gen, "transitions", key,
                         lambda u: np.searchsorted(cdf, u, side="right").tolist())
        self.cursor[key] = i + 1
        return self.next_states[key][i]

    def _reward_uniform(self, h, s, a):
        key = (h, s, a)
        i = self.reward_cursor.get(key, 0)
        if i >= len(self.reward_uniforms.get(key, ())):
            self._extend(self.reward_uniforms, self.reward_cursor, self._reward_gen, "rewards", key,
                         lambda u: u.tolist())
        self.reward_cursor[key] = i + 1
        return self.reward_uniforms[key][i]


def make_sampler(mdp: TabularMdp, rngs: RngContract, backend: str, K: int) -> _Sampler:
    if backend == "ondemand":
        return OnDemandSampler(mdp, rngs)
    if backend == "expanded":
        return ExpandedSampleBank(mdp, rngs, capacity=K)
    raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")


@dataclass
class EpisodeTrajectory:
    k: int
    epoch: int
    states: list[int]  # length H + 1
    actions: list[int]
    rewards: list[float]

    def to_bytes(self) -> bytes:
        return (np.asarray(self.states, dtype=np.int64).tobytes()
                + np.asarray(self.actions, dtype=np.int64).tobytes()
                + np.asarray(self.rewards, dtype=np.float64).tobytes())


def run_episode(env: TabularMdp, agent: Agent, k: int, s1: int, sampler: _Sampler, diag=None) -> EpisodeTrajectory:
    """Play one episode from ``s1``; ``diag`` (if given) accumulates [sum 1/N, sum bonus]."""
    agent.begin_episode(k)
    epoch = agent.epoch
    states, actions, rewards = [s1], [], []
    s = s1
    for h in range(env.horizon):
        a = agent.select_action(h, s)
        if diag is not None:
            d = agent.step_diagnostics(h, s, a)
            if d is not None:
                diag[0] += d[0]
                diag[1] += d[1]
        r = sampler.reward(h, s, a)
        s_next = sampler.next_state(h, s, a)
        agent.observe(h, s, a, r, s_next)
        actions.append(a)
        rewards.append(r)
        states.append(s_next)
        s = s_next
    agent.end_episode()
    return EpisodeTrajectory(k, epoch, states, actions, rewards)


@dataclass
class RegretLedger:
    K: int
    gaps: np.ndarray  # per-episode V*_1(s1) - V^pi_1(s1)
    checkpoints: list[int]

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.gaps)

    @property
    def total(self) -> float:
        return float(self.gaps.sum())

    def at_checkpoints(self) -> dict[int, float]:
        cum = self.cumulative
        return {k: float(cum[k - 1]) for k in self.checkpoints}


@dataclass
class RunResult:
    ledger: RegretLedger
    agent: Agent
    backend: str
    seed: int
    trajectory_digest: str
    epochs: int
    refreshes: int
    optimism_violations: int
    inv_count_sum: float
    bonus_sum: float
    policy_log: list[tuple[int, int, np.ndarray]]  # (first episode, epoch, policy)
    profile_mismatches: int = 0
    epoch_cache_mismatches: int = 0
    wall_ms: float = 0.0
    trajectories: list[EpisodeTrajectory] = field(default_factory=list)
    initial_states: list[int] = field(default_factory=list)


def pow2_checkpoints(K: int) -> list[int]:
    out = [1 << j for j in range(K.bit_length()) if 1 << j <= K]
    if out[-1] != K:
        out.append(K)
    return out


def run_online(env: TabularMdp, agent: Agent | AgentSpec, K: int, seed: int, backend: str = "ondemand",
               checkpoints: list[int] | None = None, keep_trajectories: bool = False,
               instrument: bool = False) -> RunResult:
    """Run K episodes and account regret exactly with per-epoch policy evaluation.

    ``instrument`` additionally checks the profile/batch relation at every
    episode start and re-evaluates each policy from scratch against the cache.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    env.require_valid()
    checkpoints = sorted(set(checkpoints or pow2_checkpoints(K)))
    if checkpoints[0] < 1 or checkpoints[-1] > K:
        raise ValueError("checkpoints must lie in [1, K]")
    rngs = RngContract(seed)
    if isinstance(agent, AgentSpec):
        agent = agent.build(env, K, rngs.stream("agent"))
    sampler = make_sampler(env, rngs, backend, K)
    init_gen = rngs.stream("init")
    init_cdf = _cdf_table(env.init_dist).tolist()
    optimal, _ = bellman_optimal(env)
    v_star_1 = optimal.v[0]
    q_star = optimal.q
    H = env.horizon
    tracks_q = hasattr(agent, "q") and hasattr(agent, "backups")
    if tracks_q:
        agent.keep_history = True
        agent.q_history.append((1, agent.q.copy()))

    value_cache: dict[int, np.ndarray] = {}
    policy_log: list[tuple[int, int, np.ndarray]] = []
    gaps = np.zeros(K)
    diag = [0.0, 0.0]
    digest = hashlib.sha256()
    violations = int((agent.q < q_star - OPTIMISM_TOL).sum()) if tracks_q else 0
    profile_mismatches = 0
    cache_mismatches = 0
    trajectories: list[EpisodeTrajectory] = []
    initial_states: list[int] = []
    start = time.perf_counter()
    for k in range(1, K + 1):
        epoch = agent.epoch
        v1 = value_cache.get(epoch)
        if v1 is None:
            pi = np.array(agent.policy(), copy=True)
            v1 = policy_eval(env, pi).v[0]
            value_cache[epoch] = v1
            policy_log.append((k, epoch, pi))
        elif instrument:
            fresh = policy_eval(env, agent.policy()).v[0]
            cache_mismatches += int(np.any(np.abs(fresh - v1) > 1e-12))
        if instrument and hasattr(agent, "refreshes"):
            profile_mismatches += int(np.any(agent.refreshes != profile_index_array(agent.n_all)))
        s1 = bisect_right(init_cdf, init_gen.random())
        initial_states.append(s1)
        gap = float(v_star_1[s1] - v1[s1])
        if gap < 0:
            if gap < -1e-9:
                raise RuntimeError(f"negative regret {gap} at episode {k}: policy beats the planner")
            gap = 0.0
        gaps[k - 1] = gap
        backups_before = getattr(agent, "backups", 0)
        traj = run_episode(env, agent, k, s1, sampler, diag)
        digest.update(traj.to_bytes())
        if keep_trajectories:
            trajectories.append(traj)
        if tracks_q and agent.backups != backups_before:
            violations += int((agent.q < q_star - OPTIMISM_TOL).sum())
    wall_ms = (time.perf_counter() - start) * 1000.0

    refreshes = int(agent.refreshes.sum()) if hasattr(agent, "refreshes") else 0
    epochs = agent.backups + 1 if tracks_q else 1
    return RunResult(
        ledger=RegretLedger(K, gaps, checkpoints),
        agent=agent,
        backend=backend,
        seed=seed,
        trajectory_digest=digest.hexdigest(),
        epochs=epochs,
        refreshes=refreshes,
        optimism_violations=violations,
        inv_count_sum=diag[0],
        bonus_sum=diag[1],
        policy_log=policy_log,
        profile_mismatches=profile_mismatches,
        epoch_cache_mismatches=cache_mismatches,
        wall_ms=wall_ms,
        trajectories=trajectories,
        initial_states=initial_states,
    )


def policy_at(policy_log: list[tuple[int, int, np.ndarray]], k: int) -> np.ndarray:
    """The policy executed in episode k (1-based)."""
    starts = [entry[0] for entry in policy_log]
    return policy_log[bisect_right(starts, k) - 1][2]


def pac_extract(env: TabularMdp, policy_log, K: int, rng: np.random.Generator):
    """Pick k uniformly in [1, K]; return (pi^k, E_{s1~mu}[V*_1 - V^{pi^k}_1])."""
    if not policy_log:
        raise ValueError("empty policy log")
    k = int(rng.integers(1, K + 1))
    pi = policy_at(policy_log, k)
    optimal, _ = bellman_optimal(env)
    gap = optimal.v[0] - policy_eval(env, pi).v[0]
    return pi, float(env.init_dist @ gap)


def trivial_regret_bound(env: TabularMdp, K: int) -> float:
    return float(env.horizon * K)


def log2_floor(K: int) -> int:
    return int(math.floor(math.log2(K)))
