import numpy as np
import pytest

from promplab.envs import TabularMetaMDP
from promplab.policies import SoftmaxTabularPolicy


def bandit_mdp(rewards=(1.0, 0.0)):
    """One state, one step, one arm per reward."""
    A = len(rewards)
    return TabularMetaMDP(np.ones((1, A, 1)), np.ones(1), np.array([rewards], dtype=float), horizon=1)


@pytest.fixture
def bandit():
    mdp = bandit_mdp()
    return mdp.task_env(0), SoftmaxTabularPolicy(1, 2)


@pytest.fixture
def small_mdp():
    """Random 3-state / 2-action / H=3 task with a generic parameter vector."""
    mdp = TabularMetaMDP.random(3, 2, 3, seed=11)
    policy = SoftmaxTabularPolicy(3, 2)
    theta = np.random.default_rng(5).normal(size=policy.dim)
    return mdp.task_env(0), policy, theta


ACCEPTANCE_LINES = []


def report(label, passed, detail):
    line = f"{label} {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][3:])):
            terminalreporter.write_line(line)
