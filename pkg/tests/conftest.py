import numpy as np
import pytest

from regretlab.mdp import Mode, RewardSpec, TabularMdp


def random_mdp(S, A, H, rng, stochastic_rewards=True, mode=Mode.REWARD):
    """Small random instance with a mix of deterministic and Bernoulli rewards."""
    P = rng.dirichlet(np.ones(S), size=(H, S, A))
    rewards = []
    for h in range(H):
        layer = []
        for s in range(S):
            row = []
            for a in range(A):
                if stochastic_rewards and rng.random() < 0.5:
                    row.append(RewardSpec.scaled_bernoulli(rng.random(), rng.random()))
                else:
                    row.append(RewardSpec.deterministic(rng.random()))
            layer.append(row)
        rewards.append(layer)
    return TabularMdp.from_specs(P, rewards, rng.dirichlet(np.ones(S)), mode)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def monte_carlo_returns(mdp, pi, s1, n, rng):
    """Total returns of ``n`` independent rollouts of deterministic ``pi`` from ``s1``."""
    H, S = mdp.horizon, mdp.num_states
    states = np.full(n, s1)
    sign = 1.0 if mdp.mode == Mode.REWARD else -1.0
    total = np.zeros(n)
    for h in range(H):
        acts = pi[h][states]
        # deterministic entries carry success probability 1
        hit = rng.random(n) < mdp.reward_prob[h, states, acts]
        total += sign * np.where(hit, mdp.reward_value[h, states, acts], 0.0)
        cdf = np.cumsum(mdp.transitions[h, states, acts], axis=1)
        states = np.minimum((rng.random(n)[:, None] >= cdf).sum(axis=1), S - 1)
    return total


def variance_with_se(samples):
    """Sample variance and its large-sample standard error."""
    m = samples.mean()
    c = samples - m
    var = float((c**2).mean())
    m4 = float((c**4).mean())
    return var, float(np.sqrt(max(m4 - var**2, 0.0) / samples.size))


# acceptance verdicts, printed in the terminal summary in criterion order
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
