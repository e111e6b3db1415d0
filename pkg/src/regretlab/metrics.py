"""Problem-dependent quantities, theory audits, and regret-scaling fits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .mdp import (
    BRUTE_FORCE_CAP,
    InstanceTooLargeError,
    Mode,
    TabularMdp,
    bellman_optimal,
    enumerate_policies,
    num_deterministic_policies,
)

UNAVAILABLE = "unavailable"
DEFAULT_FIT_MIN = 2**7


def _variance_under(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    mean = p @ v
    return (p * (v - mean[..., None]) ** 2).sum(axis=-1)


def compute_v_star(mdp: TabularMdp) -> float:
    if mdp.mode != Mode.REWARD:
        raise ValueError("v* is defined for reward-mode instances")
    table, _ = bellman_optimal(mdp)
    return float(mdp.init_dist @ table.v[0])


def compute_c_star(mdp: TabularMdp) -> float:
    if mdp.mode != Mode.COST:
        raise ValueError("c* is defined for cost-mode instances")
    table, _ = bellman_optimal(mdp)
    return float(-(mdp.init_dist @ table.v[0]))


def step_variance_rewards(mdp: TabularMdp) -> np.ndarray:
    """Per-(h,s,a) V(P_{s,a,h}, V*_{h+1}) + Var(R_h(s,a))."""
    table, _ = bellman_optimal(mdp)
    P = mdp.transitions
    out = np.empty((mdp.horizon, mdp.num_states, mdp.num_actions))
    for h in range(mdp.horizon):
        out[h] = _variance_under(P[h], table.v[h + 1])
    return out + mdp.reward_variance


def compute_var1(mdp: TabularMdp) -> float:
    """Largest expected sum of per-step variances; a second DP on the variance rewards."""
    aux = step_variance_rewards(mdp)
    P = mdp.transitions
    w = np.zeros(mdp.num_states)
    for h in range(mdp.horizon - 1, -1, -1):
        w = (aux[h] + P[h] @ w).max(axis=1)
    return float(mdp.init_dist @ w)


def var1_brute_force(mdp: TabularMdp, cap: int = BRUTE_FORCE_CAP) -> float:
    """Enumeration oracle for :func:`compute_var1`."""
    aux = step_variance_rewards(mdp)
    P = mdp.transitions
    H, S = mdp.horizon, mdp.num_states
    rows = np.arange(S)
    best = -np.inf
    for batch in enumerate_policies(mdp, cap):
        w = np.zeros((batch.shape[0], S))
        for h in range(H - 1, -1, -1):
            acts = batch[:, h, :]
            w = aux[h][rows, acts] + np.einsum("nst,nt->ns", P[h][rows, acts], w)
        best = max(best, float((w @ mdp.init_dist).max()))
    return best


def return_moments(mdp: TabularMdp, policies: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the total return from each start state, for a batch of
    deterministic policies (n, H, S), via the law of total variance."""
    H, S = mdp.horizon, mdp.num_states
    r, P, rvar = mdp.signed_rewards, mdp.transitions, mdp.reward_variance
    rows = np.arange(S)
    n = policies.shape[0]
    mean = np.zeros((n, S))
    var = np.zeros((n, S))
    for h in range(H - 1, -1, -1):
        acts = policies[:, h, :]
        P_sel = P[h][rows, acts]  # (n, S, S)
        next_mean = np.einsum("nst,nt->ns", P_sel, mean)
        spread = np.einsum("nst,nst->ns", P_sel, (mean[:, None, :] - next_mean[:, :, None]) ** 2)
        var = rvar[h][rows, acts] + spread + np.einsum("nst,nt->ns", P_sel, var)
        mean = r[h][rows, acts] + next_mean
    return mean, var


def compute_var2_oracle(mdp: TabularMdp, policy_cap: int = BRUTE_FORCE_CAP):
    """Largest total-return variance over deterministic policies and start states.

    Returns :data:`UNAVAILABLE` when enumeration would exceed ``policy_cap``.
    """
    if num_deterministic_policies(mdp) > policy_cap:
        return UNAVAILABLE
    mdp.require_valid()
    best = 0.0
    try:
        for batch in enumerate_policies(mdp, policy_cap):
            _, var = return_moments(mdp, batch)
            best = max(best, float(var.max()))
    except InstanceTooLargeError:
        return UNAVAILABLE
    return best


@dataclass
class ProblemMetrics:
    v_star: float | None
    c_star: float | None
    var1: float
    var2: float | str

    @property
    def var(self) -> float:
        if self.var2 == UNAVAILABLE:
            return self.var1
        return min(self.var1, self.var2)

    def to_dict(self, env_id: str) -> dict:
        return {"env_id": env_id, "v_star": self.v_star, "c_star": self.c_star,
                "var1": self.var1, "var2": self.var2, "var": self.var}


def problem_metrics(mdp: TabularMdp, policy_cap: int = BRUTE_FORCE_CAP) -> ProblemMetrics:
    v_star = compute_v_star(mdp) if mdp.mode == Mode.REWARD else None
    c_star = compute_c_star(mdp) if mdp.mode == Mode.COST else None
    return ProblemMetrics(v_star, c_star, compute_var1(mdp), compute_var2_oracle(mdp, policy_cap))


# ------------------------------------------------------------------ profiles

def profile_index(n_all: int) -> int:
    """0 for an unvisited triple, else max{j : 2^(j-1) <= n_all}."""
    return int(n_all).bit_length() if n_all > 0 else 0


def profile_index_array(n_all: np.ndarray) -> np.ndarray:
    n_all = np.asarray(n_all)
    return np.where(n_all > 0, np.frexp(np.maximum(n_all, 1).astype(np.float64))[1], 0)


def batch_size_for_profile(j: int) -> int:
    """Samples in the j-th batch: 1 for j = 1, 2^(j-2) for j >= 2 (0 for j = 0)."""
    if j <= 0:
        return 0
    return 1 if j == 1 else 2 ** (j - 2)


# -------------------------------------------------------------------- audits

def audit_optimism(snapshots, mdp: TabularMdp, tol: float = 1e-9) -> int:
    """Number of entries, summed over Q snapshots, that sit below Q* by more than ``tol``."""
    table, _ = bellman_optimal(mdp)
    q_star = table.q
    return int(sum(int((np.asarray(q) < q_star - tol).sum()) for q in snapshots))


@dataclass
class AuditOutcome:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


def refresh_bound(K: int) -> int:
    return int(math.floor(math.log2(K))) + 1


def inv_count_bound(S: int, A: int, H: int, K: int) -> float:
    return 2 * S * A * H * math.log2(K)


def audit_doubling(refresh_counts, S: int, A: int, H: int, K: int, inv_count_sum: float | None = None) -> AuditOutcome:
    """Per-triple refreshes <= floor(log2 K) + 1 and sum 1/max{N,1} <= 2SAH log2 K.

    The count-sum bound degenerates to 0 at K = 1 and is skipped there.
    """
    counts = np.asarray(refresh_counts)
    bound = refresh_bound(K)
    over = np.argwhere(counts > bound)
    detail: dict = {"refresh_bound": bound, "max_refreshes": int(counts.max()) if counts.size else 0}
    passed = over.size == 0
    if over.size:
        detail["offending_triples"] = [[int(x) for x in row] for row in over[:10]]
    if inv_count_sum is not None:
        if K >= 2:
            limit = inv_count_bound(S, A, H, K)
            detail.update(inv_count_sum=inv_count_sum, inv_count_bound=limit)
            passed = passed and inv_count_sum <= limit
        else:
            detail["inv_count_check"] = "skipped for K=1"
    return AuditOutcome("doubling", bool(passed), detail)


def audit_refresh_log(refresh_log, S: int, A: int, H: int) -> AuditOutcome:
    """Replay a refresh log: the j-th refresh of a triple must carry a batch of
    ``batch_size_for_profile(j)`` samples and episodes must not go backwards."""
    seen: dict[tuple, list[tuple[int, int]]] = {}
    for episode, h, s, a, n in refresh_log:
        seen.setdefault((h, s, a), []).append((int(episode), int(n)))
    bad = []
    for key, entries in seen.items():
        for j, (episode, n) in enumerate(entries, start=1):
            if n != batch_size_for_profile(j) or (j > 1 and episode < entries[j - 2][0]):
                bad.append([*key, j, n])
                break
    return AuditOutcome("profiles", not bad, {"offending": bad[:10], "triples": len(seen)})


def audit_regret_bound(cum_regret: float, H: int, K: int) -> AuditOutcome:
    return AuditOutcome("regret_le_HK", bool(cum_regret <= H * K),
                        {"cum_regret": cum_regret, "bound": H * K})


# ---------------------------------------------------------------- scaling fit

@dataclass
class ScalingFit:
    slope: float
    intercept: float
    stderr: float
    points: int


def fit_scaling(checkpoints, curves, k_min: int = DEFAULT_FIT_MIN, k_max: int | None = None) -> ScalingFit:
    """Least-squares slope of log2(mean cumulative regret) against log2(k).

    ``curves`` is (seeds, len(checkpoints)); only checkpoints in
    [k_min, k_max] enter the fit.
    """
    ks = np.asarray(checkpoints, dtype=np.float64)
    mean = np.asarray(curves, dtype=np.float64).reshape(-1, ks.size).mean(axis=0)
    keep = (ks >= k_min) & (ks <= (k_max if k_max is not None else np.inf))
    if keep.sum() < 2:
        raise ValueError(f"need at least two checkpoints in the fit window, got {int(keep.sum())}")
    if np.any(mean[keep] <= 0):
        raise ValueError("mean regret must be positive at every fitted checkpoint")
    fit = stats.linregress(np.log2(ks[keep]), np.log2(mean[keep]))
    return ScalingFit(float(fit.slope), float(fit.intercept), float(fit.stderr), int(keep.sum()))
