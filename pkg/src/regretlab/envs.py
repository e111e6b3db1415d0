"""Instance generators and the MDP JSON file format."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .mdp import InvalidMdpError, Mode, RewardKind, TabularMdp, validate

MDP_SCHEMA_VERSION = "regret-lab-mdp/1"
FAMILIES = ("random", "jao", "hard_chain", "branch_wrap_value", "cost_layered")


class MdpFormatError(ValueError):
    pass


def gen_random(S: int, A: int, H: int, seed: int, reward_density: float = 0.5) -> TabularMdp:
    """Random benchmark instance.

    Transition rows are uniform on the simplex; each (h, s, a) carries a
    deterministic reward in [0, 1] with probability ``reward_density`` (zero
    otherwise), so the per-step maxima sum to at most H.
    """
    if min(S, A, H) < 1:
        raise ValueError("S, A, H must be positive")
    if not 0 < reward_density <= 1:
        raise ValueError("reward_density must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(S), size=(H, S, A))
    mask = rng.random((H, S, A)) < reward_density
    r = np.where(mask, rng.random((H, S, A)), 0.0)
    mu = rng.dirichlet(np.ones(S))
    meta = {"family": "random", "params": {"S": S, "A": A, "H": H, "seed": seed,
                                           "reward_density": reward_density}}
    return TabularMdp.deterministic_rewards(P, r, mu, Mode.REWARD, meta)


def gen_jao(H: int, c1_const: float = 4.0, A: int = 2, epsilon: float | None = None) -> TabularMdp:
    """Two-state JAO-style instance with states x=0, y=1.

    Action 0 is ``a`` and action 1 is ``b`` (optimal in y); actions 2.. copy
    ``a``. Reward is 1 per step spent in y and 0 in x; the start state is
    uniform over {x, y}.
    """
    if H < 2:
        raise ValueError("H must be at least 2")
    if A < 2:
        raise ValueError("A must be at least 2")
    delta = c1_const / H
    eps = 1.0 / H if epsilon is None else float(epsilon)
    if delta <= 0 or eps < 0 or delta + eps > 1:
        raise ValueError(f"need 0 < delta and delta + epsilon <= 1, got delta={delta}, epsilon={eps}")
    P = np.zeros((H, 2, A, 2))
    P[:, :, :, 0] = 1 - delta
    P[:, :, :, 1] = delta
    P[:, 1, 1] = [1 - delta - eps, delta + eps]
    r = np.zeros((H, 2, A))
    r[:, 1, :] = 1.0
    meta = {"family": "jao", "params": {"H": H, "c1_const": c1_const, "A": A, "epsilon": eps},
            "delta": delta, "optimal_action_y": 1}
    return TabularMdp.deterministic_rewards(P, r, [0.5, 0.5], Mode.REWARD, meta)


def gen_hard_chain(S: int, A: int, H: int, seed: int) -> TabularMdp:
    """S/2 independent two-state chains with one hidden action each.

    Chain i uses states 2i (live) and 2i+1 (dumb). The hidden action keeps
    the learner live with reward 1; anything else drops it into the
    absorbing zero-reward dumb state.
    """
    if S < 2 or S % 2:
        raise ValueError(f"S must be even and >= 2, got {S}")
    if A < 1 or H < 1:
        raise ValueError("A and H must be positive")
    rng = np.random.default_rng(seed)
    hidden = [int(x) for x in rng.integers(0, A, size=S // 2)]
    P = np.zeros((H, S, A, S))
    r = np.zeros((H, S, A))
    mu = np.zeros(S)
    for i, a_star in enumerate(hidden):
        live, dumb = 2 * i, 2 * i + 1
        P[:, live, :, dumb] = 1.0
        P[:, live, a_star, dumb] = 0.0
        P[:, live, a_star, live] = 1.0
        r[:, live, a_star] = 1.0
        P[:, dumb, :, dumb] = 1.0
        mu[live] = 1.0
    mu /= mu.sum()
    meta = {"family": "hard_chain", "params": {"S": S, "A": A, "H": H, "seed": seed},
            "optimal_actions": hidden}
    return TabularMdp.deterministic_rewards(P, r, mu, Mode.REWARD, meta)


def gen_branch_wrap_value(inner: TabularMdp, p: float) -> TabularMdp:
    """Prepend a branching layer: reach ``inner`` w.p. ``p``, else a dumb state.

    The wrapped instance has states ``inner.S`` (start) and ``inner.S + 1``
    (dumb) appended and horizon ``inner.H + 1``. Works for either mode.
    """
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    inner.require_valid()
    S_in, A, H_in = inner.shape
    S, H = S_in + 2, H_in + 1
    start, dumb = S_in, S_in + 1
    P = np.zeros((H, S, A, S))
    kind = np.zeros((H, S, A), dtype=np.int64)
    value = np.zeros((H, S, A))
    prob = np.ones((H, S, A))
    # first layer: start branches, every other state is parked in the dumb state
    P[0, :, :, dumb] = 1.0
    P[0, start, :, :S_in] = p * inner.init_dist
    P[0, start, :, dumb] = 1.0 - p
    P[1:, :S_in, :, :S_in] = inner.transitions
    P[1:, start, :, dumb] = 1.0
    P[1:, dumb, :, dumb] = 1.0
    kind[1:, :S_in] = inner.reward_kind
    value[1:, :S_in] = inner.reward_value
    prob[1:, :S_in] = inner.reward_prob
    mu = np.zeros(S)
    mu[start] = 1.0
    meta = {"family": "branch_wrap_value", "params": {"p": p}, "inner": inner.metadata}
    if inner.metadata.get("assume_bounded_total_reward"):
        meta["assume_bounded_total_reward"] = True
    return TabularMdp(P, kind, value, prob, mu, inner.mode, meta)


def gen_cost_layered(H: int, p: float, A: int = 2, seed: int = 0) -> TabularMdp:
    """Cost-mode instance where a fresh hidden action must be found at every step.

    State 0 is live and state 1 is the absorbing zero-cost state. The hidden
    action at step h stays live at cost ``p``; others cost 1 and absorb.
    """
    if not 0 <= p <= 0.25:
        raise ValueError(f"p must lie in [0, 1/4], got {p}")
    if A < 2 or H < 1:
        raise ValueError("need A >= 2 and H >= 1")
    rng = np.random.default_rng(seed)
    hidden = [int(x) for x in rng.integers(0, A, size=H)]
    P = np.zeros((H, 2, A, 2))
    c = np.zeros((H, 2, A))
    P[:, 0, :, 1] = 1.0
    c[:, 0, :] = 1.0
    for h, a_star in enumerate(hidden):
        P[h, 0, a_star] = [1.0, 0.0]
        c[h, 0, a_star] = p
    P[:, 1, :, 1] = 1.0
    meta = {"family": "cost_layered", "params": {"H": H, "p": p, "A": A, "seed": seed},
            "optimal_actions": hidden}
    return TabularMdp.deterministic_rewards(P, c, [1.0, 0.0], Mode.COST, meta)


def generate(family: str, params: dict[str, Any]) -> TabularMdp:
    """Dispatch by family name; ``branch_wrap_value`` takes ``inner`` as a nested
    ``{"family": ..., "params": ...}`` record."""
    params = dict(params)
    if family == "random":
        return gen_random(**params)
    if family == "jao":
        return gen_jao(**params)
    if family == "hard_chain":
        return gen_hard_chain(**params)
    if family == "cost_layered":
        return gen_cost_layered(**params)
    if family == "branch_wrap_value":
        inner = params.pop("inner")
        return gen_branch_wrap_value(generate(inner["family"], inner.get("params", {})), **params)
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


# ---------------------------------------------------------------- JSON format

def _reward_record(mdp: TabularMdp, h: int, s: int, a: int) -> dict[str, Any]:
    if mdp.reward_kind[h, s, a] == RewardKind.DETERMINISTIC:
        return {"kind": "deterministic", "params": {"mean": float(mdp.reward_value[h, s, a])}}
    return {"kind": "scaled_bernoulli", "params": {"success_prob": float(mdp.reward_prob[h, s, a]),
                                                    "magnitude": float(mdp.reward_value[h, s, a])}}


def mdp_to_dict(mdp: TabularMdp) -> dict[str, Any]:
    S, A, H = mdp.shape
    return {
        "version": MDP_SCHEMA_VERSION,
        "mode": mdp.mode.value,
        "S": S,
        "A": A,
        "H": H,
        "transitions": mdp.transitions.tolist(),
        "rewards": [[[_reward_record(mdp, h, s, a) for a in range(A)] for s in range(S)] for h in range(H)],
        "init_dist": mdp.init_dist.tolist(),
        "metadata": mdp.metadata,
    }


def mdp_from_dict(doc: dict[str, Any]) -> TabularMdp:
    version = doc.get("version")
    if version != MDP_SCHEMA_VERSION:
        raise MdpFormatError(f"version mismatch: expected {MDP_SCHEMA_VERSION!r}, got {version!r}")
    try:
        S, A, H = int(doc["S"]), int(doc["A"]), int(doc["H"])
        P = np.asarray(doc["transitions"], dtype=np.float64)
        if P.shape != (H, S, A, S):
            raise MdpFormatError(f"transitions shape {P.shape} != {(H, S, A, S)}")
        kind = np.zeros((H, S, A), dtype=np.int64)
        value = np.zeros((H, S, A))
        prob = np.ones((H, S, A))
        for h in range(H):
            for s in range(S):
                for a in range(A):
                    rec = doc["rewards"][h][s][a]
                    if rec["kind"] == "deterministic":
                        value[h, s, a] = rec["params"]["mean"]
                    elif rec["kind"] == "scaled_bernoulli":
                        kind[h, s, a] = RewardKind.SCALED_BERNOULLI
                        value[h, s, a] = rec["params"]["magnitude"]
                        prob[h, s, a] = rec["params"]["success_prob"]
                    else:
                        raise MdpFormatError(f"unknown reward kind {rec['kind']!r} at (h={h}, s={s}, a={a})")
        return TabularMdp(P, kind, value, prob, doc["init_dist"], Mode(doc["mode"]), doc.get("metadata", {}))
    except (KeyError, IndexError, TypeError) as exc:
        raise MdpFormatError(f"malformed MDP document: {exc!r}") from exc


def dumps_mdp(mdp: TabularMdp) -> str:
    # float repr is the shortest string that round-trips to the same double
    return json.dumps(mdp_to_dict(mdp), indent=1) + "\n"


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(dumps_mdp(mdp))


def load_mdp(path) -> TabularMdp:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MdpFormatError(f"{path}: not valid JSON ({exc})") from exc
    mdp = mdp_from_dict(doc)
    report = validate(mdp)
    if not report.ok:
        raise InvalidMdpError(f"{path}: {report.message}")
    return mdp
