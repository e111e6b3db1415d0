"""Finite-horizon tabular MDPs, validation, and exact planners.

Indices are 0-based internally: step ``h`` runs over ``0..H-1`` and value
tables carry an extra terminal row ``H`` that is identically zero.

Cost-mode instances keep nonnegative cost distributions in their
:class:`RewardSpec` entries; every planner works on the *signed* mean table
(``-cost``) so that one maximizing code path serves both modes.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np

ROW_TOL = 1e-12
BRUTE_FORCE_CAP = 10**6
OVERRIDE_FLAG = "assume_bounded_total_reward"


class Mode(str, enum.Enum):
    REWARD = "reward"
    COST = "cost"


class RewardKind(enum.IntEnum):
    DETERMINISTIC = 0
    SCALED_BERNOULLI = 1


class InvalidMdpError(ValueError):
    """Raised when an instance fails validation where a valid one is required."""


class InstanceTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class RewardSpec:
    """Reward (or cost) distribution of a single (h, s, a) triple.

    ``Deterministic(mean)`` always pays ``mean``; ``ScaledBernoulli`` pays
    ``magnitude`` with probability ``success_prob`` and 0 otherwise.
    """

    kind: RewardKind
    mean_value: float = 0.0
    success_prob: float = 0.0
    magnitude: float = 0.0

    @classmethod
    def deterministic(cls, mean: float) -> "RewardSpec":
        return cls(RewardKind.DETERMINISTIC, mean_value=float(mean))

    @classmethod
    def scaled_bernoulli(cls, success_prob: float, magnitude: float) -> "RewardSpec":
        return cls(RewardKind.SCALED_BERNOULLI, success_prob=float(success_prob), magnitude=float(magnitude))

    @property
    def mean(self) -> float:
        if self.kind == RewardKind.DETERMINISTIC:
            return self.mean_value
        return self.success_prob * self.magnitude

    @property
    def variance(self) -> float:
        if self.kind == RewardKind.DETERMINISTIC:
            return 0.0
        p = self.success_prob
        return self.magnitude**2 * p * (1.0 - p)

    @property
    def support_max(self) -> float:
        if self.kind == RewardKind.DETERMINISTIC:
            return self.mean_value
        return self.magnitude if self.success_prob > 0 else 0.0

    @property
    def support_min(self) -> float:
        if self.kind == RewardKind.DETERMINISTIC:
            return self.mean_value
        return 0.0 if self.success_prob < 1 else self.magnitude


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Time-inhomogeneous episodic MDP.

    Rewards are stored as three (H, S, A) arrays (kind code, deterministic
    value / Bernoulli magnitude, Bernoulli success probability) rather than
    an object grid; :meth:`reward_spec` gives the per-triple view.
    """

    transitions: np.ndarray  # (H, S, A, S)
    reward_kind: np.ndarray  # (H, S, A) int, RewardKind codes
    reward_value: np.ndarray  # (H, S, A) deterministic mean or Bernoulli magnitude
    reward_prob: np.ndarray  # (H, S, A) Bernoulli success probability (1 for deterministic)
    init_dist: np.ndarray  # (S,)
    mode: Mode = Mode.REWARD
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        P = np.array(self.transitions, dtype=np.float64)
        if P.ndim != 4 or P.shape[1] != P.shape[3]:
            raise InvalidMdpError(f"transitions must have shape (H, S, A, S), got {P.shape}")
        H, S, A, _ = P.shape
        kind = np.broadcast_to(np.asarray(self.reward_kind, dtype=np.int64), (H, S, A)).copy()
        value = np.broadcast_to(np.asarray(self.reward_value, dtype=np.float64), (H, S, A)).copy()
        prob = np.broadcast_to(np.asarray(self.reward_prob, dtype=np.float64), (H, S, A)).copy()
        mu = np.array(self.init_dist, dtype=np.float64)
        if mu.shape != (S,):
            raise InvalidMdpError(f"init_dist must have shape ({S},), got {mu.shape}")
        for name, arr in (("transitions", P), ("reward_kind", kind), ("reward_value", value),
                          ("reward_prob", prob), ("init_dist", mu)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @classmethod
    def from_specs(cls, transitions, rewards, init_dist, mode=Mode.REWARD, metadata=None) -> "TabularMdp":
        """Build from a nested ``rewards[h][s][a]`` grid of :class:`RewardSpec`."""
        P = np.asarray(transitions, dtype=np.float64)
        H, S, A, _ = P.shape
        kind = np.zeros((H, S, A), dtype=np.int64)
        value = np.zeros((H, S, A))
        prob = np.ones((H, S, A))
        for h in range(H):
            for s in range(S):
                for a in range(A):
                    spec = rewards[h][s][a]
                    kind[h, s, a] = int(spec.kind)
                    if spec.kind == RewardKind.DETERMINISTIC:
                        value[h, s, a] = spec.mean_value
                    else:
                        value[h, s, a] = spec.magnitude
                        prob[h, s, a] = spec.success_prob
        return cls(P, kind, value, prob, init_dist, Mode(mode), dict(metadata or {}))

    @classmethod
    def deterministic_rewards(cls, transitions, rewards, init_dist, mode=Mode.REWARD, metadata=None):
        """Shortcut for instances whose every reward is deterministic."""
        r = np.asarray(rewards, dtype=np.float64)
        return cls(transitions, np.zeros(r.shape, dtype=np.int64), r, np.ones(r.shape), init_dist,
                   Mode(mode), dict(metadata or {}))

    @property
    def horizon(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        """``(S, A, H)``."""
        return self.num_states, self.num_actions, self.horizon

    def reward_spec(self, h: int, s: int, a: int) -> RewardSpec:
        if self.reward_kind[h, s, a] == RewardKind.DETERMINISTIC:
            return RewardSpec.deterministic(self.reward_value[h, s, a])
        return RewardSpec.scaled_bernoulli(self.reward_prob[h, s, a], self.reward_value[h, s, a])

    @cached_property
    def mean_rewards(self) -> np.ndarray:
        """Unsigned means r_h(s,a) (costs in Cost mode)."""
        det = self.reward_kind == RewardKind.DETERMINISTIC
        out = np.where(det, self.reward_value, self.reward_value * self.reward_prob)
        out.setflags(write=False)
        return out

    @cached_property
    def signed_rewards(self) -> np.ndarray:
        """Mean rewards as the planners see them: negated costs in Cost mode."""
        out = -self.mean_rewards if self.mode == Mode.COST else self.mean_rewards.copy()
        out.setflags(write=False)
        return out

    @cached_property
    def reward_variance(self) -> np.ndarray:
        det = self.reward_kind == RewardKind.DETERMINISTIC
        p = self.reward_prob
        out = np.where(det, 0.0, self.reward_value**2 * p * (1.0 - p))
        out.setflags(write=False)
        return out

    @cached_property
    def _validation(self) -> "ValidationReport":
        return validate(self)

    def require_valid(self) -> None:
        report = self._validation
        if not report.ok:
            raise InvalidMdpError(report.message)

    def equals(self, other: "TabularMdp") -> bool:
        """Field-by-field equality (arrays compared exactly)."""
        return (
            self.mode == other.mode
            and self.metadata == other.metadata
            and all(np.array_equal(getattr(self, n), getattr(other, n))
                    for n in ("transitions", "reward_kind", "reward_value", "reward_prob", "init_dist"))
        )


@dataclass
class ValidationReport:
    checks: dict[str, bool]
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def message(self) -> str:
        return "; ".join(self.failures) if self.failures else "ok"


def validate(mdp: TabularMdp) -> ValidationReport:
    """Check every structural invariant and report the first offender of each."""
    P = mdp.transitions
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    checks: dict[str, bool] = {}
    failures: list[str] = []

    neg = np.argwhere(P < 0)
    checks["transitions_nonnegative"] = neg.size == 0
    if neg.size:
        h, s, a, t = (int(x) for x in neg[0])
        failures.append(f"negative transition probability {P[h, s, a, t]!r} at (h={h}, s={s}, a={a}, s'={t})")

    sums = P.sum(axis=3)
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)
    checks["transition_rows_sum_to_one"] = bad.size == 0
    if bad.size:
        h, s, a = (int(x) for x in bad[0])
        failures.append(f"row sum {sums[h, s, a]:.17g} at (h={h}, s={s}, a={a})")

    mu = mdp.init_dist
    mu_ok = bool(np.all(mu >= 0) and abs(mu.sum() - 1.0) <= ROW_TOL)
    checks["init_dist"] = mu_ok
    if not mu_ok:
        failures.append(f"init_dist sums to {mu.sum():.17g} or has negative entries")

    kind = mdp.reward_kind
    det = kind == RewardKind.DETERMINISTIC
    known = det | (kind == RewardKind.SCALED_BERNOULLI)
    prob_ok = det | ((mdp.reward_prob >= 0) & (mdp.reward_prob <= 1))
    mag_ok = det | (mdp.reward_value >= 0)
    support_max = np.where(det, mdp.reward_value, np.where(mdp.reward_prob > 0, mdp.reward_value, 0.0))
    support_min = np.where(det, mdp.reward_value, np.where(mdp.reward_prob < 1, 0.0, mdp.reward_value))
    in_range = (support_min >= 0) & (support_max <= H)
    rewards_ok = known & prob_ok & mag_ok & in_range
    checks["reward_support"] = bool(rewards_ok.all())
    if not rewards_ok.all():
        h, s, a = (int(x) for x in np.argwhere(~rewards_ok)[0])
        failures.append(f"reward spec {mdp.reward_spec(h, s, a)} outside [0, {H}] at (h={h}, s={s}, a={a})")

    # conservative sufficient condition for the bounded-total-reward assumption
    total = float(support_max.reshape(H, -1).max(axis=1).sum())
    bounded = total <= H + ROW_TOL
    checks["bounded_total_reward"] = bounded or bool(mdp.metadata.get(OVERRIDE_FLAG, False))
    if not checks["bounded_total_reward"]:
        failures.append(f"sum over steps of max reward support {total:.17g} > H={H}")

    return ValidationReport(checks, failures)


@dataclass(frozen=True, eq=False)
class ValueTable:
    """``v`` has shape (H+1, S) with ``v[H] == 0``; ``q`` has shape (H, S, A)."""

    v: np.ndarray
    q: np.ndarray
    kind: str = "optimal"


def _check_policy(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi)
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    if pi.shape == (H, S):
        if not np.issubdtype(pi.dtype, np.integer):
            raise ValueError("deterministic policy must hold integer actions")
        if pi.size and (pi.min() < 0 or pi.max() >= A):
            bad = np.argwhere((pi < 0) | (pi >= A))[0]
            raise ValueError(f"action {pi[tuple(bad)]} out of range [0, {A}) at (h={bad[0]}, s={bad[1]})")
        return pi
    if pi.shape == (H, S, A):
        if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=2) - 1.0) > ROW_TOL):
            raise ValueError("stochastic policy rows must be distributions over actions")
        return pi
    raise ValueError(f"policy must have shape {(H, S)} or {(H, S, A)}, got {pi.shape}")


def bellman_optimal(mdp: TabularMdp) -> tuple[ValueTable, np.ndarray]:
    """Backward induction; ties go to the lowest action index."""
    mdp.require_valid()
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    r, P = mdp.signed_rewards, mdp.transitions
    v = np.zeros((H + 1, S))
    q = np.zeros((H, S, A))
    pi = np.zeros((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        q[h] = r[h] + P[h] @ v[h + 1]
        pi[h] = np.argmax(q[h], axis=1)
        v[h] = q[h, np.arange(S), pi[h]]
    return ValueTable(v, q, "optimal"), pi


def policy_eval(mdp: TabularMdp, pi: np.ndarray) -> ValueTable:
    """Exact evaluation of a deterministic (H, S) or stochastic (H, S, A) policy."""
    mdp.require_valid()
    pi = _check_policy(mdp, pi)
    H, S = mdp.horizon, mdp.num_states
    r, P = mdp.signed_rewards, mdp.transitions
    v = np.zeros((H + 1, S))
    q = np.zeros((H, S, mdp.num_actions))
    rows = np.arange(S)
    for h in range(H - 1, -1, -1):
        q[h] = r[h] + P[h] @ v[h + 1]
        if pi.ndim == 2:
            v[h] = r[h, rows, pi[h]] + P[h, rows, pi[h]] @ v[h + 1]
        else:
            v[h] = (pi[h] * q[h]).sum(axis=1)
    return ValueTable(v, q, "policy_eval")


def num_deterministic_policies(mdp: TabularMdp) -> int:
    return mdp.num_actions ** (mdp.num_states * mdp.horizon)


def enumerate_policies(mdp: TabularMdp, cap: int = BRUTE_FORCE_CAP, batch: int = 4096):
    """Yield every deterministic policy as (n, H, S) integer batches."""
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    total = num_deterministic_policies(mdp)
    if total > cap:
        raise InstanceTooLargeError(f"{A}^({S}*{H}) = {total} policies exceeds cap {cap}")
    powers = A ** np.arange(S * H, dtype=np.int64)
    for start in range(0, total, batch):
        idx = np.arange(start, min(start + batch, total), dtype=np.int64)
        digits = (idx[:, None] // powers[None, :]) % A
        yield digits.reshape(-1, H, S)


def batched_policy_values(mdp: TabularMdp, policies: np.ndarray) -> np.ndarray:
    """V^pi for a batch of deterministic policies; returns (n, H+1, S)."""
    H, S = mdp.horizon, mdp.num_states
    r, P = mdp.signed_rewards, mdp.transitions
    n = policies.shape[0]
    v = np.zeros((n, H + 1, S))
    rows = np.arange(S)
    for h in range(H - 1, -1, -1):
        acts = policies[:, h, :]
        r_sel = r[h][rows[None, :], acts]
        P_sel = P[h][rows[None, :], acts]  # (n, S, S)
        v[:, h] = r_sel + np.einsum("nst,nt->ns", P_sel, v[:, h + 1])
    return v


def brute_force_plan(mdp: TabularMdp, cap: int = BRUTE_FORCE_CAP) -> ValueTable:
    """Optimal values by enumerating every deterministic policy.

    Test oracle only: V*_h(s) is the maximum of V^pi_h(s) over all policies,
    and Q*_h(s,a) the maximum of r + <P, V^pi_{h+1}>.
    """
    mdp.require_valid()
    H, S = mdp.horizon, mdp.num_states
    r, P = mdp.signed_rewards, mdp.transitions
    best_v = np.full((H + 1, S), -np.inf)
    best_v[H] = 0.0
    best_q = np.full((H, S, mdp.num_actions), -np.inf)
    for batch in enumerate_policies(mdp, cap):
        v = batched_policy_values(mdp, batch)
        best_v[:H] = np.maximum(best_v[:H], v[:, :H].max(axis=0))
        for h in range(H):
            q = r[h][None] + np.einsum("sat,nt->nsa", P[h], v[:, h + 1])
            best_q[h] = np.maximum(best_q[h], q.max(axis=0))
    return ValueTable(best_v, best_q, "brute_force")
