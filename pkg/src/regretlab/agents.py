"""Online agents: the batch-refresh MVP learner and baselines.

Every agent exposes the same episode protocol::

    agent.begin_episode(k)
    a = agent.select_action(h, s)        # for h = 0..H-1
    agent.observe(h, s, a, r, s_next)
    agent.end_episode()

``policy()`` returns the policy in force for the current episode, and
``epoch`` changes exactly when that policy may have changed, so callers can
cache anything derived from it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import Mode, TabularMdp, bellman_optimal

C1 = 460 / 9
C2 = 2 * math.sqrt(2)
C3 = 544 / 9


def is_refresh_count(n: int, K: int) -> bool:
    """True when a lifetime visit count ``n`` sits in the trigger set {1, 2, 4, ..., <= K}."""
    return n > 0 and n & (n - 1) == 0 and n <= K


def variance_under(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """V(p, v) = <p, v^2> - <p, v>^2, computed in centered form (never negative).

    Broadcasts over leading axes of ``p``; the last axis is the next state.
    """
    mean = p @ v
    return (p * (v - mean[..., None]) ** 2).sum(axis=-1)


@dataclass(frozen=True)
class BonusParams:
    S: int
    A: int
    H: int
    K: int
    delta: float = 0.1
    c1: float = C1
    c2: float = C2
    c3: float = C3

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if min(self.S, self.A, self.H, self.K) < 1:
            raise ValueError("S, A, H, K must be positive")

    @property
    def delta_prime(self) -> float:
        return self.delta / (200 * self.S * self.A * self.H**2 * self.K**2)

    @property
    def log_term(self) -> float:
        return math.log(1.0 / self.delta_prime)


def mvp_bonus(p_hat_row, v_next, sigma_hat: float, r_hat: float, n: int, params: BonusParams, H: int) -> float:
    """Three-term Bernstein-style bonus for a single (h, s, a)."""
    p_hat_row = np.asarray(p_hat_row, dtype=np.float64)
    v_next = np.asarray(v_next, dtype=np.float64)
    L = params.log_term
    m = max(n, 1)
    transition_var = float(variance_under(p_hat_row, v_next))
    reward_var = max(sigma_hat - r_hat * r_hat, 0.0)
    return (params.c1 * math.sqrt(transition_var * L / m)
            + params.c2 * math.sqrt(reward_var * L / m)
            + params.c3 * H * L / m)


def f_helper(p, v, n: int, H: float, L: float) -> float:
    """<p, v> + max{(20/3) sqrt(V(p,v) L / n), (400/9) H L / n}.

    Not used by the learner; exposed so its monotonicity in ``v`` can be tested.
    """
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    var = float(variance_under(p, v))
    return float(p @ v) + max(20 / 3 * math.sqrt(var * L / n), 400 / 9 * H * L / n)


class Agent:
    name = "agent"

    def __init__(self, S: int, A: int, H: int):
        self.S, self.A, self.H = S, A, H
        self.epoch = 0
        self.episode = 0

    def begin_episode(self, k: int) -> None:
        self.episode = k

    def select_action(self, h: int, s: int) -> int:
        raise NotImplementedError

    def observe(self, h: int, s: int, a: int, r: float, s_next: int) -> None:
        pass

    def end_episode(self) -> None:
        pass

    def policy(self) -> np.ndarray:
        raise NotImplementedError

    def step_diagnostics(self, h: int, s: int, a: int):
        """Per-step (1/max{N,1}, bonus) before observing, or None if not tracked."""
        return None

    def snapshot(self) -> dict:
        return {"agent": self.name, "S": self.S, "A": self.A, "H": self.H, "epoch": self.epoch}


class _OptimisticAgent(Agent):
    """Shared Q/V storage and greedy action selection for the optimistic learners."""

    def __init__(self, S, A, H, mode: Mode):
        super().__init__(S, A, H)
        self.mode = Mode(mode)
        self.q_init = float(H) if self.mode == Mode.REWARD else 0.0
        self.q = np.full((H, S, A), self.q_init)
        self.v = np.full((H + 1, S), self.q_init)
        self.v[H] = 0.0
        self._greedy = np.argmax(self.q, axis=2)
        self._greedy_rows = self._greedy.tolist()
        self.backups = 0
        self.q_history: list[tuple[int, np.ndarray]] = []  # (first episode using it, Q copy)
        self.keep_history = False

    def select_action(self, h, s):
        return self._greedy_rows[h][s]

    def policy(self):
        return self._greedy

    def _clip(self, q: np.ndarray) -> np.ndarray:
        if self.mode == Mode.REWARD:
            return np.minimum(q, self.H)
        return np.maximum(np.minimum(q, 0.0), -self.H)

    def _publish(self) -> None:
        greedy = np.argmax(self.q, axis=2)
        if not np.array_equal(greedy, self._greedy):
            self.epoch += 1
        self._greedy = greedy
        self._greedy_rows = greedy.tolist()
        self.backups += 1
        if self.keep_history:
            self.q_history.append((self.episode + 1, self.q.copy()))


class MvpAgent(_OptimisticAgent):
    """Monotonic Value Propagation with doubling epochs and batch-only refreshes.

    A (h, s, a) model is rebuilt when its lifetime count reaches a power of two,
    from the samples gathered since the previous rebuild only. The optimistic
    backward sweep runs once at the end of any episode in which a rebuild fired.
    """

    name = "mvp"

    def __init__(self, S: int, A: int, H: int, K: int, mode: Mode = Mode.REWARD, delta: float = 0.1,
                 c1: float = C1, c2: float = C2, c3: float = C3):
        super().__init__(S, A, H, mode)
        self.K = K
        self.params = BonusParams(S, A, H, K, delta, c1, c2, c3)
        L = self.params.log_term
        self.n_all = np.zeros((H, S, A), dtype=np.int64)
        self.batch_next = np.zeros((H, S, A, S), dtype=np.int64)
        self.theta = np.zeros((H, S, A))
        self.kappa = np.zeros((H, S, A))
        self.n = np.zeros((H, S, A), dtype=np.int64)  # 0 until first refresh; bonus uses max{N, 1}
        self.r_hat = np.zeros((H, S, A))
        self.sigma_hat = np.zeros((H, S, A))
        self.p_hat = np.full((H, S, A, S), 1.0 / S)
        self.bonus = np.full((H, S, A), self.params.c3 * H * L)
        self.refreshes = np.zeros((H, S, A), dtype=np.int64)
        self.refresh_log: list[tuple[int, int, int, int, int]] = []
        self.triggered = False
        self.idle_backups = 0

    def observe(self, h, s, a, r, s_next):
        idx = (h, s, a)
        n = int(self.n_all[idx]) + 1
        self.n_all[idx] = n
        self.batch_next[h, s, a, s_next] += 1
        self.theta[idx] += r
        self.kappa[idx] += r * r
        if is_refresh_count(n, self.K):
            self._refresh(h, s, a)

    def _refresh(self, h, s, a):
        idx = (h, s, a)
        counts = self.batch_next[idx]
        N = int(counts.sum())
        self.n[idx] = N
        self.r_hat[idx] = self.theta[idx] / N
        self.sigma_hat[idx] = self.kappa[idx] / N
        self.p_hat[idx] = counts / N
        self.theta[idx] = 0.0
        self.kappa[idx] = 0.0
        counts[:] = 0
        self.refreshes[idx] += 1
        self.refresh_log.append((self.episode, h, s, a, N))
        self.triggered = True

    def end_episode(self):
        if self.triggered:
            self.backup()

    def backup(self) -> None:
        if not self.triggered:
            self.idle_backups += 1
            return
        self.triggered = False
        H = self.H
        p = self.params
        L = p.log_term
        self.v[H] = 0.0
        for h in range(H - 1, -1, -1):
            v_next = self.v[h + 1]
            n = np.maximum(self.n[h], 1)
            expected = self.p_hat[h] @ v_next
            transition_var = variance_under(self.p_hat[h], v_next)
            reward_var = np.maximum(self.sigma_hat[h] - self.r_hat[h] ** 2, 0.0)
            b = (p.c1 * np.sqrt(transition_var * L / n)
                 + p.c2 * np.sqrt(reward_var * L / n)
                 + p.c3 * H * L / n)
            self.bonus[h] = b
            q = self._clip(self.r_hat[h] + expected + b)
            self.q[h] = np.where(self.n_all[h] > 0, q, self.q_init)
            self.v[h] = self.q[h].max(axis=1)
        self._publish()

    def step_diagnostics(self, h, s, a):
        return 1.0 / max(int(self.n[h, s, a]), 1), float(self.bonus[h, s, a])

    def snapshot(self):
        out = super().snapshot()
        out.update({
            "K": self.K,
            "mode": self.mode.value,
            "params": {"delta": self.params.delta, "c1": self.params.c1, "c2": self.params.c2,
                       "c3": self.params.c3, "log_term": self.params.log_term},
            "n_all": self.n_all.tolist(),
            "n": self.n.tolist(),
            "refreshes": self.refreshes.tolist(),
            "q": self.q.tolist(),
            "v": self.v.tolist(),
            "refresh_log": [list(x) for x in self.refresh_log],
        })
        return out


class UcbviAgent(_OptimisticAgent):
    """Hoeffding-bonus UCBVI on the all-samples model, re-planned every episode."""

    name = "ucbvi"

    def __init__(self, S, A, H, K, mode: Mode = Mode.REWARD, delta: float = 0.1):
        super().__init__(S, A, H, mode)
        self.K = K
        self.params = BonusParams(S, A, H, K, delta)
        self.n_all = np.zeros((H, S, A), dtype=np.int64)
        self.next_counts = np.zeros((H, S, A, S), dtype=np.int64)
        self.reward_sum = np.zeros((H, S, A))
        self.bonus = np.full((H, S, A), H * math.sqrt(self.params.log_term))

    def observe(self, h, s, a, r, s_next):
        self.n_all[h, s, a] += 1
        self.next_counts[h, s, a, s_next] += 1
        self.reward_sum[h, s, a] += r

    def end_episode(self):
        self.backup()

    def backup(self):
        H, S = self.H, self.S
        L = self.params.log_term
        n = np.maximum(self.n_all, 1)
        p_hat = np.where(self.n_all[..., None] > 0, self.next_counts / n[..., None], 1.0 / S)
        r_hat = self.reward_sum / n
        b = H * np.sqrt(L / n)
        self.bonus = b
        self.v[H] = 0.0
        for h in range(H - 1, -1, -1):
            q = self._clip(r_hat[h] + p_hat[h] @ self.v[h + 1] + b[h])
            self.q[h] = np.where(self.n_all[h] > 0, q, self.q_init)
            self.v[h] = self.q[h].max(axis=1)
        self._publish()

    def snapshot(self):
        out = super().snapshot()
        out.update({"K": self.K, "mode": self.mode.value, "n_all": self.n_all.tolist(),
                    "q": self.q.tolist(), "v": self.v.tolist()})
        return out


class RandomAgent(Agent):
    """Uniformly random actions; the executed policy is the uniform stochastic one."""

    name = "random"

    def __init__(self, S, A, H, rng: np.random.Generator):
        super().__init__(S, A, H)
        self.rng = rng
        self._uniform = np.full((H, S, A), 1.0 / A)
        self._actions: list[int] = []

    def begin_episode(self, k):
        super().begin_episode(k)
        # one draw per step, independent of the visited states
        self._actions = self.rng.integers(0, self.A, size=self.H).tolist()

    def select_action(self, h, s):
        return self._actions[h]

    def policy(self):
        return self._uniform


class OracleAgent(Agent):
    """Greedy with respect to the true Q*; calibration only."""

    name = "oracle"

    def __init__(self, mdp: TabularMdp):
        S, A, H = mdp.shape
        super().__init__(S, A, H)
        table, pi = bellman_optimal(mdp)
        self.q = table.q
        self._pi = pi
        self._rows = pi.tolist()

    def select_action(self, h, s):
        return self._rows[h][s]

    def policy(self):
        return self._pi


AGENT_NAMES = ("mvp", "ucbvi", "random", "oracle")


@dataclass
class AgentSpec:
    """Agent name plus constructor overrides (delta, bonus constants)."""

    name: str
    overrides: dict = field(default_factory=dict)
    label: str | None = None

    def __post_init__(self):
        if self.name not in AGENT_NAMES:
            raise ValueError(f"unknown agent {self.name!r}; expected one of {AGENT_NAMES}")
        allowed = {"mvp": {"delta", "c1", "c2", "c3"}, "ucbvi": {"delta"}}.get(self.name, set())
        extra = set(self.overrides) - allowed
        if extra:
            raise ValueError(f"agent {self.name!r} does not accept overrides {sorted(extra)}")
        if self.label is None:
            self.label = self.name

    def build(self, mdp: TabularMdp, K: int, rng: np.random.Generator) -> Agent:
        S, A, H = mdp.shape
        if self.name == "mvp":
            return MvpAgent(S, A, H, K, mdp.mode, **self.overrides)
        if self.name == "ucbvi":
            return UcbviAgent(S, A, H, K, mdp.mode, **self.overrides)
        if self.name == "random":
            return RandomAgent(S, A, H, rng)
        return OracleAgent(mdp)
