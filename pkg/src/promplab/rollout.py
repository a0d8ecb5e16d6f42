"""Trajectory sampling, returns/advantages and the exact enumeration oracle.

Discounting follows one convention everywhere: the reward at step ``t`` is
pre-multiplied by ``gamma**t`` and all formulas then use plain tail sums.

A :class:`TrajectoryBatch` stores ``N`` trajectories as stacked arrays plus an
optional probability weight per trajectory.  Monte-Carlo batches use uniform
weights ``1/N``; an :class:`EnumeratedDistribution` is a batch holding every
trajectory of a tabular MDP with its exact probability as weight, so any
estimator written as a weighted average over a batch computes its exact
expectation when handed an enumeration.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .envs import TaskSpec

MAX_ENUMERATION = 100_000


class RolloutError(RuntimeError):
    """A rollout produced a non-finite state or reward."""


class EnumerationTooLarge(ValueError):
    pass


def spawn_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``, e.g. ``(seed, task, traj)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    logps: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.rewards)


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """``N`` trajectories of horizon ``H`` sampled under ``theta_sampled``.

    ``states`` is ``(N, H+1, ...)``, ``actions`` ``(N, H, ...)``, ``rewards``
    and ``logps`` ``(N, H)``.  Rewards are stored undiscounted.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    logps: np.ndarray
    theta_sampled: np.ndarray
    task: TaskSpec | None = None
    gamma: float = 1.0
    weights: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __post_init__(self):
        if self.rewards.ndim != 2 or self.rewards.shape[0] < 1:
            raise ValueError("a batch needs at least one trajectory")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")

    @property
    def n(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    @property
    def w(self) -> np.ndarray:
        """Per-trajectory averaging weights (``1/N`` unless enumerated)."""
        if self.weights is None:
            return np.full(self.n, 1.0 / self.n)
        return self.weights

    @property
    def discounted_rewards(self) -> np.ndarray:
        return self.rewards * self.gamma ** np.arange(self.horizon)

    def reward_to_go(self) -> np.ndarray:
        return _suffix_sum(self.discounted_rewards)

    def returns(self) -> np.ndarray:
        """Discounted return of every trajectory."""
        return self.discounted_rewards.sum(axis=1)

    def mean_return(self, discounted: bool = False) -> float:
        r = self.returns() if discounted else self.rewards.sum(axis=1)
        return float(self.w @ r)

    def step_states(self) -> np.ndarray:
        """States at which actions were taken, flattened to ``(N*H, ...)``."""
        s = self.states[:, :-1]
        return s.reshape((self.n * self.horizon,) + s.shape[2:])

    def step_actions(self) -> np.ndarray:
        return self.actions.reshape((self.n * self.horizon,) + self.actions.shape[2:])

    @property
    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(self.states[i], self.actions[i], self.rewards[i], self.logps[i])
                for i in range(self.n)]

    def with_advantages(self, advantages) -> "TrajectoryBatch":
        return dataclasses.replace(self, advantages=np.asarray(advantages, dtype=float))


@dataclass(frozen=True, eq=False)
class EnumeratedDistribution(TrajectoryBatch):
    """Every trajectory of a tabular task under ``pi_theta``, probability-weighted."""

    env: object = None
    policy: object = None

    @property
    def probs(self) -> np.ndarray:
        return self.weights


def _suffix_sum(x: np.ndarray) -> np.ndarray:
    return np.cumsum(x[..., ::-1], axis=-1)[..., ::-1]


def reward_to_go(traj, gamma: float = 1.0) -> np.ndarray:
    """Tail sums of ``gamma**t * r_t`` for a trajectory or a reward array."""
    rewards = np.asarray(traj.rewards if hasattr(traj, "rewards") else traj, dtype=float)
    return _suffix_sum(rewards * gamma ** np.arange(rewards.shape[-1]))


def sample_batch(env, policy, theta, n: int, rng: np.random.Generator,
                 task: TaskSpec | None = None, gamma: float = 1.0) -> TrajectoryBatch:
    """Roll out ``n`` trajectories in lock-step for exactly ``env.horizon`` steps."""
    if n < 1:
        raise ValueError("need at least one trajectory")
    theta = np.array(theta, dtype=float)
    H = env.horizon
    s = env.reset(rng, n)
    states, actions, rewards = [s], [], []
    for _ in range(H):
        a = policy.sample_action(theta, s, rng)
        s, r = env.step(s, a, rng)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(s))):
            raise RolloutError(f"non-finite transition at step {len(actions)}: state={s!r}, reward={r!r}")
        actions.append(a)
        rewards.append(r)
        states.append(s)
    states = np.stack(states, axis=1)
    actions = np.stack(actions, axis=1)
    # log-probabilities in one vectorised pass over all visited steps
    flat_s = states[:, :-1].reshape((n * H,) + states.shape[2:])
    flat_a = actions.reshape((n * H,) + actions.shape[2:])
    logps = np.asarray(policy.log_prob(theta, flat_s, flat_a)).reshape(n, H)
    return TrajectoryBatch(
        states=states,
        actions=actions,
        rewards=np.stack(rewards, axis=1).astype(float),
        logps=logps,
        theta_sampled=theta,
        task=task,
        gamma=gamma,
    )


def rollout(env, policy, theta, rng: np.random.Generator) -> Trajectory:
    return sample_batch(env, policy, theta, 1, rng).trajectories[0]


def compute_advantages(batch: TrajectoryBatch, gamma: float | None = None) -> TrajectoryBatch:
    """Reward-to-go minus the (weighted) batch mean at each timestep."""
    if gamma is not None and gamma != batch.gamma:
        batch = dataclasses.replace(batch, gamma=gamma)
    rtg = batch.reward_to_go()
    baseline = batch.w @ rtg
    return batch.with_advantages(rtg - baseline)


# ---------------------------------------------------------------------------
# exact oracle for tabular tasks


def enumerate_trajectories(env, policy, theta, gamma: float = 1.0,
                           max_entries: int = MAX_ENUMERATION) -> EnumeratedDistribution:
    """All trajectories of a tabular task with non-zero probability under ``pi_theta``."""
    theta = np.array(theta, dtype=float)
    pi = policy.probs_table(theta)
    logpi = policy.log_probs_table(theta)
    P = env.mdp.transitions
    S, A = env.n_states, env.n_actions

    support = np.flatnonzero(env.mdp.p0 > 0)
    states = support[:, None]
    actions = np.zeros((len(support), 0), dtype=int)
    prob = env.mdp.p0[support]
    for _ in range(env.horizon):
        s = states[:, -1]
        # branch over (a, s') for every prefix
        branch = prob[:, None, None] * pi[s][:, :, None] * P[s]
        idx, a, s_next = np.nonzero(branch > 0)
        if len(idx) > max_entries:
            raise EnumerationTooLarge(
                f"enumeration exceeds {max_entries} trajectories; use fewer states/actions or a shorter horizon")
        states = np.concatenate([states[idx], s_next[:, None]], axis=1)
        actions = np.concatenate([actions[idx], a[:, None]], axis=1)
        prob = branch[idx, a, s_next]

    st = states[:, :-1]
    return EnumeratedDistribution(
        states=states,
        actions=actions,
        rewards=env.reward_table[st, actions],
        logps=logpi[st, actions],
        theta_sampled=theta,
        task=None,
        gamma=gamma,
        weights=prob,
        env=env,
        policy=policy,
    )


def exact_expected_return(enum: EnumeratedDistribution, gamma: float | None = None) -> float:
    g = enum.gamma if gamma is None else gamma
    disc = enum.rewards * g ** np.arange(enum.horizon)
    return float(enum.weights @ disc.sum(axis=1))


def value_tables(env, policy, theta, gamma: float = 1.0):
    """Backward recursion for the tabular task.

    Returns ``(Q, V, d)`` with ``Q[t, s, a]`` the expected discounted
    reward-to-go from ``(s, a)`` at step ``t``, ``V[t, s]`` its policy average
    (``V[H] = 0``) and ``d[t, s]`` the state distribution at step ``t``.
    """
    pi = policy.probs_table(theta)
    P = env.mdp.transitions
    R = env.reward_table
    H, S = env.horizon, env.n_states
    Q = np.zeros((H, S, env.n_actions))
    V = np.zeros((H + 1, S))
    for t in reversed(range(H)):
        Q[t] = gamma ** t * R + P @ V[t + 1]
        V[t] = np.sum(pi * Q[t], axis=1)
    d = np.zeros((H, S))
    d[0] = env.mdp.p0
    for t in range(1, H):
        d[t] = np.einsum("s,sa,sap->p", d[t - 1], pi, P)
    return Q, V, d


def exact_policy_gradient(enum: EnumeratedDistribution, theta=None, gamma: float | None = None) -> np.ndarray:
    """``sum_t sum_s d_t(s) sum_a pi(a|s) grad log pi(a|s) Q_t(s, a)``.

    Computed by dynamic programming over the task's tables, not from the
    enumerated trajectories, so it can serve as an independent reference.
    """
    theta = enum.theta_sampled if theta is None else np.asarray(theta, dtype=float)
    g = enum.gamma if gamma is None else gamma
    env, policy = enum.env, enum.policy
    Q, _, d = value_tables(env, policy, theta, g)
    pi = policy.probs_table(theta)
    S, A = pi.shape
    grad = np.zeros(policy.dim)
    for s in range(S):
        for a in range(A):
            w = pi[s, a] * np.sum(d[:, s] * Q[:, s, a])
            if w != 0.0:
                grad += w * policy.grad_log_prob(theta, s, a)
    return grad


def exact_hessian_fd(enum_builder, theta, gamma: float = 1.0, h: float = 1e-4) -> np.ndarray:
    """Central second differences of the enumerated expected return.

    ``enum_builder(theta)`` must return an :class:`EnumeratedDistribution`.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"finite-difference step must be in [1e-6, 1e-3], got {h}")
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    E = np.eye(d) * h

    def f(x):
        return exact_expected_return(enum_builder(x), gamma)

    H = np.zeros((d, d))
    f0 = f(theta)
    for i in range(d):
        H[i, i] = (f(theta + 2 * E[i]) - 2 * f0 + f(theta - 2 * E[i])) / (4 * h * h)
        for j in range(i + 1, d):
            H[i, j] = H[j, i] = (
                f(theta + E[i] + E[j]) - f(theta + E[i] - E[j])
                - f(theta - E[i] + E[j]) + f(theta - E[i] - E[j])
            ) / (4 * h * h)
    return H


def dump_jsonl(batch: TrajectoryBatch, path) -> None:
    """Debug dump, one JSON record per trajectory."""
    with open(path, "w") as fh:
        for tr in batch.trajectories:
            fh.write(json.dumps({
                "states": np.asarray(tr.states).tolist(),
                "actions": np.asarray(tr.actions).tolist(),
                "rewards": tr.rewards.tolist(),
                "logps": tr.logps.tolist(),
            }) + "\n")
