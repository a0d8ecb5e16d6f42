"""Finite-horizon task distributions.

Three families are provided:

* ``Point1D`` -- a point on the real line that must reach a goal at -1 or +1.
* ``Point2D`` -- a point in the plane with four corner goals and a reward that
  is only non-zero inside a radius around the goal.
* ``Tabular`` -- small finite MDPs sharing dynamics across tasks, with one
  reward table per task.  Small enough to enumerate every trajectory.

All environments are immutable.  ``step`` and ``reset`` are vectorised over a
leading batch dimension so that many trajectories can be advanced at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

ACTION_CLIP = 0.1


class EnvError(ValueError):
    """Invalid environment input (non-finite action, bad configuration...)."""


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    payload: Any


def _check_finite_action(action):
    action = np.asarray(action, dtype=float)
    if not np.all(np.isfinite(action)):
        raise EnvError(f"non-finite action: {action!r}")
    return action


# ---------------------------------------------------------------------------
# point environments


@dataclass(frozen=True)
class Point1DEnv:
    """Point on a line; ``x' = x + clip(a)``, reward ``-|x' - goal|``."""

    goal: float
    horizon: int = 100
    start_low: float = -0.5
    start_high: float = 0.5

    state_dim = 1
    action_dim = 1
    discrete = False

    def __post_init__(self):
        if self.horizon < 1:
            raise EnvError("horizon must be positive")
        if self.start_low > self.start_high:
            raise EnvError("empty start interval")

    def reset(self, rng: np.random.Generator, n: int | None = None):
        size = (1,) if n is None else (n, 1)
        if self.start_low == self.start_high:
            x = np.full(size, float(self.start_low))
        else:
            x = rng.uniform(self.start_low, self.start_high, size=size)
        return x

    def step(self, state, action, rng: np.random.Generator | None = None):
        action = _check_finite_action(action)
        state = np.asarray(state, dtype=float)
        nxt = state + np.clip(action, -ACTION_CLIP, ACTION_CLIP)
        reward = -np.abs(nxt - self.goal)
        if reward.ndim >= 1 and reward.shape[-1] == 1:
            reward = reward[..., 0]
        return nxt, reward


@dataclass(frozen=True)
class Point2DEnv:
    """Point in the plane that must reach one of four corners.

    ``reward_mode="proximity"`` pays ``radius - distance`` inside the reward
    radius, ``reward_mode="negative"`` pays ``-distance`` there.  Both pay 0
    outside.
    """

    goal: tuple[float, float]
    reward_radius: float = 1.0
    horizon: int = 100
    reward_mode: str = "proximity"

    state_dim = 2
    action_dim = 2
    discrete = False

    def __post_init__(self):
        if self.reward_radius <= 0:
            raise EnvError("reward_radius must be positive")
        if self.horizon < 1:
            raise EnvError("horizon must be positive")
        if self.reward_mode not in ("proximity", "negative"):
            raise EnvError(f"unknown reward_mode {self.reward_mode!r}")

    def reset(self, rng: np.random.Generator, n: int | None = None):
        if n is None:
            return np.zeros(2)
        return np.zeros((n, 2))

    def step(self, state, action, rng: np.random.Generator | None = None):
        action = _check_finite_action(action)
        state = np.asarray(state, dtype=float)
        nxt = state + np.clip(action, -ACTION_CLIP, ACTION_CLIP)
        dist = np.linalg.norm(nxt - np.asarray(self.goal), axis=-1)
        inside = dist <= self.reward_radius
        if self.reward_mode == "proximity":
            reward = np.where(inside, self.reward_radius - dist, 0.0)
        else:
            reward = np.where(inside, -dist, 0.0)
        return nxt, reward


# ---------------------------------------------------------------------------
# tabular environments


@dataclass(frozen=True, eq=False)
class TabularMetaMDP:
    """Finite MDP family: shared ``p(s'|s,a)`` and ``p0``, per-task rewards.

    ``rewards`` has shape ``(n_tasks, n_states, n_actions)``.
    """

    transitions: np.ndarray
    p0: np.ndarray
    rewards: np.ndarray
    horizon: int

    MAX_STATES = 5
    MAX_ACTIONS = 3
    MAX_HORIZON = 5

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=float)
        p0 = np.asarray(self.p0, dtype=float)
        R = np.asarray(self.rewards, dtype=float)
        if R.ndim == 2:
            R = R[None]
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "rewards", R)
        S, A = P.shape[:2]
        if P.shape != (S, A, S):
            raise EnvError(f"transition tensor must be (S, A, S), got {P.shape}")
        if S > self.MAX_STATES or A > self.MAX_ACTIONS:
            raise EnvError(f"tabular MDP too large: {S} states, {A} actions")
        if not 1 <= self.horizon <= self.MAX_HORIZON:
            raise EnvError(f"horizon must be in [1, {self.MAX_HORIZON}]")
        if np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1)) > 1e-12:
            raise EnvError("transition rows must be stochastic")
        if p0.shape != (S,) or np.any(p0 < 0) or abs(p0.sum() - 1) > 1e-12:
            raise EnvError("p0 must be a stochastic vector over states")
        if R.shape[1:] != (S, A) or not np.all(np.isfinite(R)):
            raise EnvError(f"reward tables must be finite (n_tasks, {S}, {A})")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_tasks(self) -> int:
        return self.rewards.shape[0]

    @classmethod
    def random(cls, n_states, n_actions, horizon, n_tasks=1, seed=0):
        """Dirichlet(1,...,1) transition rows and p0, U[0, 1] rewards."""
        rng = np.random.default_rng(seed)
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        p0 = rng.dirichlet(np.ones(n_states))
        R = rng.uniform(0.0, 1.0, size=(n_tasks, n_states, n_actions))
        # renormalise so rows sum to 1 to machine precision
        P /= P.sum(-1, keepdims=True)
        p0 /= p0.sum()
        return cls(P, p0, R, horizon)

    def task_env(self, task_id: int = 0) -> "TabularEnv":
        return TabularEnv(self, int(task_id))


@dataclass(frozen=True, eq=False)
class TabularEnv:
    """One task of a :class:`TabularMetaMDP`; states and actions are ints."""

    mdp: TabularMetaMDP
    task_id: int = 0
    _cdf: np.ndarray = field(init=False, repr=False, compare=False)

    discrete = True

    def __post_init__(self):
        if not 0 <= self.task_id < self.mdp.n_tasks:
            raise EnvError(f"task_id {self.task_id} out of range")
        object.__setattr__(self, "_cdf", np.cumsum(self.mdp.transitions, axis=-1))

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    @property
    def reward_table(self) -> np.ndarray:
        return self.mdp.rewards[self.task_id]

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def reset(self, rng: np.random.Generator, n: int | None = None):
        u = rng.random(1 if n is None else n)
        s = np.searchsorted(np.cumsum(self.mdp.p0), u, side="right")
        s = np.minimum(s, self.n_states - 1)
        return int(s[0]) if n is None else s

    def step(self, state, action, rng: np.random.Generator):
        action = _check_finite_action(action)
        if np.any(action != np.round(action)):
            raise EnvError(f"tabular actions must be integers: {action!r}")
        s = np.asarray(state, dtype=int)
        a = action.astype(int)
        if np.any((a < 0) | (a >= self.n_actions)):
            raise EnvError(f"action out of range: {a!r}")
        cdf = self._cdf[s, a]
        u = rng.random(s.shape)
        nxt = (u[..., None] >= cdf).sum(-1)
        nxt = np.minimum(nxt, self.n_states - 1)
        reward = self.reward_table[s, a]
        if nxt.ndim == 0:
            return int(nxt), float(reward)
        return nxt, reward


def chain_mdp(n_states=5, horizon=5, slip=0.2, n_tasks=1, seed=0):
    """Chain of ``n_states``: action 0 moves right (slips back with ``slip``),
    action 1 returns to the start.  The rightmost state pays 1 for staying and
    0.5 for leaving, returning from the start pays a small 0.2.  Extra tasks
    rescale the rewards."""
    S = n_states
    P = np.zeros((S, 2, S))
    for s in range(S):
        right = min(s + 1, S - 1)
        P[s, 0, right] += 1.0 - slip
        P[s, 0, 0] += slip
        P[s, 1, 0] = 1.0
    p0 = np.zeros(S)
    p0[0] = 1.0
    base = np.zeros((S, 2))
    base[S - 1, 0] = 1.0
    base[S - 1, 1] = 0.5
    base[0, 1] = 0.2
    rng = np.random.default_rng(seed)
    scales = np.ones(n_tasks) if n_tasks == 1 else rng.uniform(0.5, 1.5, n_tasks)
    R = scales[:, None, None] * base[None]
    return TabularMetaMDP(P, p0, R, horizon)


# ---------------------------------------------------------------------------
# task distributions


@dataclass(frozen=True)
class Point1DDistribution:
    horizon: int = 100

    family = "point1d"
    goals = (-1.0, 1.0)

    def sample_task(self, rng: np.random.Generator) -> TaskSpec:
        i = int(rng.integers(len(self.goals)))
        return TaskSpec(i, self.goals[i])

    def make_env(self, task: TaskSpec) -> Point1DEnv:
        return Point1DEnv(goal=float(task.payload), horizon=self.horizon)


@dataclass(frozen=True)
class Point2DDistribution:
    horizon: int = 100
    corner: float = 2.0
    reward_radius: float = 1.0
    reward_mode: str = "proximity"

    family = "point2d"

    @property
    def goals(self):
        c = self.corner
        return ((c, c), (-c, c), (-c, -c), (c, -c))

    def sample_task(self, rng: np.random.Generator) -> TaskSpec:
        i = int(rng.integers(4))
        return TaskSpec(i, self.goals[i])

    def make_env(self, task: TaskSpec) -> Point2DEnv:
        return Point2DEnv(
            goal=tuple(task.payload),
            reward_radius=self.reward_radius,
            horizon=self.horizon,
            reward_mode=self.reward_mode,
        )


@dataclass(frozen=True)
class TabularDistribution:
    mdp: TabularMetaMDP

    family = "tabular"

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    def sample_task(self, rng: np.random.Generator) -> TaskSpec:
        i = int(rng.integers(self.mdp.n_tasks))
        return TaskSpec(i, self.mdp.rewards[i])

    def make_env(self, task: TaskSpec) -> TabularEnv:
        return self.mdp.task_env(task.task_id)


def sample_task(distribution, rng: np.random.Generator) -> TaskSpec:
    return distribution.sample_task(rng)


def env_step(env, state, action, rng: np.random.Generator | None = None):
    return env.step(state, action, rng)


def env_reset(env, rng: np.random.Generator):
    return env.reset(rng)
