"""Experiment configuration: typed sections, INI serialisation and presets.

The on-disk format is INI (``configparser``) with one section per block::

    [env]
    family = point2d
    horizon = 100
    ...

Unknown sections or keys are rejected so that typos fail loudly.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .envs import (Point1DDistribution, Point2DDistribution, TabularDistribution,
                   TabularMetaMDP, chain_mdp)
from .policies import GaussianLinearPolicy, SoftmaxTabularPolicy

ENV_FAMILIES = ("tabular", "chain", "point1d", "point2d")
POLICY_FAMILIES = ("auto", "softmax", "gaussian", "gaussian2")
ESTIMATOR_TAGS = ("I+DICE", "I+LVC", "MAML", "EMAML")
OPTIMIZERS = ("promp", "vpg")


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    family: str = "point2d"
    horizon: int = 100
    gamma: float = 0.99
    seed: int = 0
    # tabular / chain
    n_states: int = 3
    n_actions: int = 2
    n_tasks: int = 4
    # point2d
    corner: float = 2.0
    reward_radius: float = 1.0
    reward_mode: str = "proximity"


@dataclass
class PolicyConfig:
    family: str = "auto"
    init_std: float = 0.0
    init_log_std: float = 0.0
    fixed_std: float = 1.0
    init_theta: list = field(default_factory=list)
    hidden: list = field(default_factory=list)


@dataclass
class EstimatorConfig:
    tag: str = "I+LVC"
    variance_tags: list = field(default_factory=lambda: ["I+DICE", "I+LVC"])


@dataclass
class OptimizerConfig:
    algo: str = "promp"
    alpha: float = 0.01
    beta: float = 0.001
    clip_eps: float = 0.3
    kl_coef: float = 0.0005
    n_steps: int = 5
    tasks_per_iter: int = 10
    traj_per_task: int = 20
    num_adapt_steps: int = 1
    advantages: str = "inner"


@dataclass
class RunConfig:
    iterations: int = 100
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    variance_k: int = 1000
    variance_batch: int = 20
    reference_theta: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        e, p, o = self.env, self.policy, self.optimizer
        if e.family not in ENV_FAMILIES:
            raise ConfigError(f"env.family must be one of {ENV_FAMILIES}, got {e.family!r}")
        if p.family not in POLICY_FAMILIES:
            raise ConfigError(f"policy.family must be one of {POLICY_FAMILIES}, got {p.family!r}")
        if p.hidden:
            raise ConfigError("policy.hidden is reserved; only linear/tabular policies are supported")
        if p.fixed_std <= 0:
            raise ConfigError("policy.fixed_std must be positive")
        if e.horizon < 1 or not 0 < e.gamma <= 1:
            raise ConfigError("env.horizon must be >= 1 and env.gamma in (0, 1]")
        for tag in [self.estimator.tag, *self.estimator.variance_tags]:
            if tag not in ESTIMATOR_TAGS:
                raise ConfigError(f"estimator tag must be one of {ESTIMATOR_TAGS}, got {tag!r}")
        if o.algo not in OPTIMIZERS:
            raise ConfigError(f"optimizer.algo must be one of {OPTIMIZERS}, got {o.algo!r}")
        if o.advantages not in ("none", "inner", "all"):
            raise ConfigError("optimizer.advantages must be none, inner or all")
        if o.beta <= 0 or o.clip_eps <= 0 or o.kl_coef < 0 or o.n_steps < 1:
            raise ConfigError("need beta > 0, clip_eps > 0, kl_coef >= 0, n_steps >= 1")
        if o.tasks_per_iter < 1 or o.traj_per_task < 1 or o.num_adapt_steps < 1:
            raise ConfigError("tasks_per_iter, traj_per_task and num_adapt_steps must be >= 1")
        if self.run.iterations < 0 or not self.run.seeds:
            raise ConfigError("run.iterations must be >= 0 and at least one seed given")
        # alpha is checked by the inner update itself so that a bad sign
        # surfaces as a precondition failure where it is used
        return self

    # -- derived objects ---------------------------------------------------

    def task_distribution(self):
        e = self.env
        if e.family == "point1d":
            return Point1DDistribution(horizon=e.horizon)
        if e.family == "point2d":
            return Point2DDistribution(horizon=e.horizon, corner=e.corner,
                                       reward_radius=e.reward_radius, reward_mode=e.reward_mode)
        if e.family == "chain":
            return TabularDistribution(chain_mdp(e.n_states, e.horizon, n_tasks=e.n_tasks, seed=e.seed))
        return TabularDistribution(TabularMetaMDP.random(e.n_states, e.n_actions, e.horizon,
                                                         n_tasks=e.n_tasks, seed=e.seed))

    def make_policy(self):
        fam = self.policy.family
        if fam == "auto":
            fam = {"point1d": "gaussian2", "point2d": "gaussian"}.get(self.env.family, "softmax")
        if fam == "softmax":
            if self.env.family not in ("tabular", "chain"):
                raise ConfigError("softmax policies need a tabular environment")
            n_actions = 2 if self.env.family == "chain" else self.env.n_actions
            return SoftmaxTabularPolicy(self.env.n_states, n_actions)
        if self.env.family in ("tabular", "chain"):
            raise ConfigError("Gaussian policies need a point environment")
        dim = 1 if self.env.family == "point1d" else 2
        if fam == "gaussian2":
            return GaussianLinearPolicy(dim, dim, learn_std=False, fixed_std=self.policy.fixed_std)
        return GaussianLinearPolicy(dim, dim, learn_std=True)

    def initial_theta(self, policy, rng: np.random.Generator) -> np.ndarray:
        if self.policy.init_theta:
            theta = np.array(self.policy.init_theta, dtype=float)
            if theta.shape != (policy.dim,):
                raise ConfigError(f"policy.init_theta must have {policy.dim} entries")
            return theta
        if isinstance(policy, GaussianLinearPolicy):
            return policy.init_params(rng, self.policy.init_std, self.policy.init_log_std)
        return policy.init_params(rng, self.policy.init_std)

    def digest(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]


SECTIONS = ("env", "policy", "estimator", "optimizer", "run")


def _format(value) -> str:
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False}[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            items = [t.strip() for t in text.split(",") if t.strip()]
            return [_parse_scalar(t) for t in items]
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text


def _parse_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def dumps(config: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        section = getattr(config, name)
        cp[name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    config = ExperimentConfig()
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        section = getattr(config, name)
        known = {f.name: f for f in dataclasses.fields(section)}
        for key, raw in cp[name].items():
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
            setattr(section, key, _parse(raw, getattr(section, key), f"{name}.{key}"))
    return config.validate()


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())


def save(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(config))


def preset(name: str) -> ExperimentConfig:
    """Named starting points.

    ``desk`` -- ProMP on the 2D point environment at laptop scale.
    ``paper-scale`` -- the same with 40 tasks per iteration.
    ``point2d`` -- ProMP, three adaptation steps.
    ``point1d`` -- two-parameter policy on the 1D environment, VPG.
    ``verify`` -- small random tabular MDP for the oracle suite.
    ``variance`` -- five-step chain for estimator variance comparisons.
    """
    c = ExperimentConfig()
    if name == "desk":
        pass
    elif name == "paper-scale":
        c.optimizer.tasks_per_iter = 40
    elif name == "point2d":
        c.optimizer.num_adapt_steps = 3
        c.optimizer.alpha = POINT2D_ALPHA
        c.optimizer.beta = POINT2D_BETA
        c.policy.family = "gaussian2"
        c.policy.fixed_std = POINT2D_STD
        c.run.iterations = 500
        c.run.seeds = [0, 1, 2]
    elif name == "point1d":
        c.env.family = "point1d"
        c.env.horizon = POINT1D_HORIZON
        c.optimizer.algo = "vpg"
        c.optimizer.alpha = POINT1D_ALPHA
        c.optimizer.beta = POINT1D_BETA
        c.estimator.tag = "I+DICE"
        c.policy.init_theta = list(POINT1D_INIT)
        c.run.iterations = 200
        c.run.seeds = [0, 1, 2, 3, 4]
        c.run.reference_theta = list(POINT1D_OPTIMUM)
    elif name == "verify":
        c.env = EnvConfig(family="tabular", horizon=3, gamma=1.0, n_states=3, n_actions=2, n_tasks=1)
        c.policy.init_std = 1.0
        c.optimizer.alpha = 0.1
    elif name == "variance":
        c.env = EnvConfig(family="chain", horizon=5, gamma=1.0, n_states=5, n_actions=2, n_tasks=1)
        c.policy.init_std = 0.5
        c.optimizer.alpha = 1.0
        c.run.variance_k = 1000
        c.run.variance_batch = 20
    else:
        raise ConfigError(f"unknown preset {name!r}")
    return c.validate()


# tuned values for the toy environments (see README)
POINT2D_ALPHA = 0.01
POINT2D_BETA = 0.0005
POINT2D_STD = 1.0
POINT1D_HORIZON = 20
POINT1D_ALPHA = 0.1
POINT1D_BETA = 0.005
POINT1D_INIT = (1.0, 1.0)
# maximiser of the one-step meta-objective: theta0 = 0 by the symmetry of the
# goals, theta1 from a quadratic fit to estimate_meta_objective on a grid
POINT1D_OPTIMUM = (0.0, -0.3)
