"""Outer-loop optimisers: meta-gradient ascent (VPG) and ProMP.

Both loops share one sampling phase so that, for a fixed seed, they see the
same tasks and the same random streams.  Each task owns a generator derived
from ``(seed, iteration, task index)``; results therefore do not depend on the
order in which tasks are processed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import (_symmetrize, inner_update, lr_terms, meta_gradient_I,
                         meta_gradient_II, meta_gradient_maml, step_ratios)
from .rollout import TrajectoryBatch, compute_advantages, sample_batch, spawn_rng

VPG_TAGS = ("I+DICE", "I+LVC", "MAML", "EMAML")
DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    """Parameters blew up or a return went non-finite; ``records`` holds the trace."""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass(frozen=True)
class PrompHyper:
    alpha: float = 0.01
    beta: float = 0.001
    eps: float = 0.3
    eta: float = 0.0005
    n_steps: int = 5
    tasks_per_iter: int = 40
    traj_per_task: int = 20

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        # eps = inf switches clipping off
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.n_steps < 1 or self.tasks_per_iter < 1 or self.traj_per_task < 1:
            raise ValueError("n_steps, tasks_per_iter and traj_per_task must be >= 1")

    @classmethod
    def from_config(cls, config) -> "PrompHyper":
        o = config.optimizer
        return cls(o.alpha, o.beta, o.clip_eps, o.kl_coef, o.n_steps, o.tasks_per_iter, o.traj_per_task)


@dataclass
class IterationRecord:
    iteration: int
    pre_return: float
    post_return: float
    grad_norm: float
    mean_kl: float
    distance_to_optimum: float | None = None
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# ProMP pieces


def clip_ratio(ratio, eps: float):
    return np.minimum(np.maximum(ratio, 1.0 - eps), 1.0 + eps)


def clip_objective_gradient(policy, post_batch: TrajectoryBatch, theta_prime, theta_prime_o=None,
                            eps: float = 0.3, diagnostics: dict | None = None) -> np.ndarray:
    """Gradient of the clipped surrogate at ``theta_prime``.

    ``post_batch`` must have been sampled under ``theta_prime_o`` and carry
    advantages.  Per timestep the unclipped branch ``ratio * A`` contributes
    ``ratio * A * grad log pi`` when it is the smaller one (ties included),
    otherwise the flat clipped branch contributes nothing.
    """
    if post_batch.advantages is None:
        raise ValueError("post-update batch needs advantages")
    if theta_prime_o is not None and not np.array_equal(post_batch.theta_sampled, theta_prime_o):
        raise ValueError("post-update batch was not sampled under theta_prime_o")
    theta_prime = np.asarray(theta_prime, dtype=float)
    A = post_batch.advantages
    ratio = step_ratios(policy, post_batch, theta_prime)
    dropped = ratio <= 0.0
    active = ratio * A <= clip_ratio(ratio, eps) * A
    coef = np.where(active & ~dropped, ratio * A, 0.0) * post_batch.w[:, None]
    if diagnostics is not None:
        diagnostics["clip_fraction"] = float(1.0 - active.mean())
        diagnostics["dropped_ratios"] = int(dropped.sum())
    n, H = coef.shape
    g = policy.grad_log_prob(theta_prime, post_batch.step_states(), post_batch.step_actions())
    return coef.reshape(-1) @ g.reshape(n * H, -1)


def mean_kl(policy, pre_batch: TrajectoryBatch, theta_o, theta) -> float:
    """Average ``KL(pi_theta_o || pi_theta)`` over the states visited in ``pre_batch``."""
    kl = policy.kl_divergence(theta_o, theta, pre_batch.step_states())
    return float(np.mean(kl))


def mean_kl_grad(policy, pre_batch: TrajectoryBatch, theta_o, theta) -> np.ndarray:
    g = policy.kl_grad(theta_o, theta, pre_batch.step_states())
    return g.mean(axis=0)


def adapted_params(policy, batches, theta, alpha: float):
    """Chain ``theta -> theta'_1 -> ...`` through likelihood-ratio steps.

    Returns the final parameters and the Jacobian ``d theta'_K / d theta``.
    """
    phi = np.asarray(theta, dtype=float)
    jac = np.eye(phi.size)
    for b in batches:
        grad, hess = lr_terms(policy, b, phi)
        step_jac = np.eye(phi.size) + alpha * _symmetrize(hess)
        phi = phi + alpha * grad
        jac = step_jac @ jac
    return phi, jac


def promp_meta_gradient(policy, pre_batch: TrajectoryBatch, post_batch: TrajectoryBatch, theta,
                        theta_o, hyper: PrompHyper, intermediate=(), diagnostics: dict | None = None):
    """Gradient of the ProMP objective for one task.

    ``pre_batch`` was sampled under ``theta_o``; ``intermediate`` holds the
    batches of any further adaptation steps, and ``post_batch`` was sampled
    under the adapted parameters reached from ``theta_o``.
    """
    if not np.array_equal(pre_batch.theta_sampled, np.asarray(theta_o, dtype=float)):
        raise ValueError("pre-update batch was not sampled under theta_o")
    for b in (pre_batch, *intermediate):
        if b.advantages is None:
            raise ValueError("adaptation batches need advantages")
    theta_prime, jac = adapted_params(policy, (pre_batch, *intermediate), theta, hyper.alpha)
    g_clip = clip_objective_gradient(policy, post_batch, theta_prime, eps=hyper.eps,
                                     diagnostics=diagnostics)
    grad = jac.T @ g_clip
    if hyper.eta:
        grad = grad - hyper.eta * mean_kl_grad(policy, pre_batch, theta_o, theta)
    return grad


# ---------------------------------------------------------------------------
# training loops


@dataclass
class _Setup:
    config: object
    seed: int
    distribution: object
    policy: object
    theta0: np.ndarray
    reference: np.ndarray | None


def _setup(config, seed: int) -> _Setup:
    policy = config.make_policy()
    theta0 = config.initial_theta(policy, spawn_rng(seed, 0))
    ref = np.array(config.run.reference_theta, dtype=float) if config.run.reference_theta else None
    return _Setup(config, seed, config.task_distribution(), policy, theta0, ref)


def _sample(env, setup, theta, rng, task):
    o = setup.config.optimizer
    b = sample_batch(env, setup.policy, theta, o.traj_per_task, rng, task=task,
                     gamma=setup.config.env.gamma)
    return compute_advantages(b)


def _task_rngs(seed, iteration, n_tasks):
    task_rng = spawn_rng(seed, iteration + 1, 0)
    return task_rng, [spawn_rng(seed, iteration + 1, 1, i) for i in range(n_tasks)]


def _check(theta, values, records, iteration):
    if not np.all(np.isfinite(theta)) or np.max(np.abs(theta)) > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"parameters diverged at iteration {iteration}: |theta|max="
                               f"{np.max(np.abs(theta)):.3g}", records)
    if not all(math.isfinite(v) for v in values):
        raise TrainingDiverged(f"non-finite return at iteration {iteration}", records)


def _distance(setup, theta):
    if setup.reference is None:
        return None
    return float(np.linalg.norm(theta - setup.reference))


def promp_train(config, seed: int | None = None, theta0=None, callback=None) -> list[IterationRecord]:
    """ProMP: one sampling phase per iteration, then ``n_steps`` updates on it."""
    seed = config.run.seeds[0] if seed is None else seed
    setup = _setup(config, seed)
    hyper = PrompHyper.from_config(config)
    policy = setup.policy
    K = config.optimizer.num_adapt_steps
    theta = setup.theta0.copy() if theta0 is None else np.array(theta0, dtype=float)
    records: list[IterationRecord] = []

    for it in range(config.run.iterations):
        theta_o = theta.copy()
        task_rng, rngs = _task_rngs(seed, it, hyper.tasks_per_iter)
        data = []
        for i in range(hyper.tasks_per_iter):
            task = setup.distribution.sample_task(task_rng)
            env = setup.distribution.make_env(task)
            batches = [_sample(env, setup, theta_o, rngs[i], task)]
            phi = theta_o
            for _ in range(K):
                phi = inner_update(policy, batches[-1], phi, hyper.alpha, objective="LR").theta_prime
                batches.append(_sample(env, setup, phi, rngs[i], task))
            data.append(batches)

        pre_ret = float(np.mean([b[0].mean_return() for b in data]))
        post_ret = float(np.mean([b[-1].mean_return() for b in data]))
        grad_norm = 0.0
        clip_fracs = []
        for n in range(hyper.n_steps):
            grads = []
            for batches in data:
                diag = {}
                grads.append(promp_meta_gradient(policy, batches[0], batches[-1], theta, theta_o, hyper,
                                                 intermediate=batches[1:-1], diagnostics=diag))
                clip_fracs.append(diag["clip_fraction"])
            g = np.mean(grads, axis=0)
            if n == 0:
                grad_norm = float(np.linalg.norm(g))
            theta = theta + hyper.beta * g
            _check(theta, [pre_ret, post_ret], records, it)
        kl = float(np.mean([mean_kl(policy, b[0], theta_o, theta) for b in data]))
        rec = IterationRecord(it, pre_ret, post_ret, grad_norm, kl, _distance(setup, theta),
                              {"clip_fraction": float(np.mean(clip_fracs))})
        records.append(rec)
        if callback is not None:
            callback(rec, theta)
    return records


def vpg_train(config, tag: str | None = None, seed: int | None = None, theta0=None,
              callback=None) -> list[IterationRecord]:
    """Plain meta-gradient ascent with one PGT adaptation step per task.

    ``optimizer.advantages`` selects where advantages replace raw returns:
    ``inner`` (adaptation gradient only), ``all`` (also the Hessian estimate
    and the outer gradient) or ``none``.
    """
    tag = tag or config.estimator.tag
    if tag not in VPG_TAGS:
        raise ValueError(f"estimator tag must be one of {VPG_TAGS}, got {tag!r}")
    o = config.optimizer
    if o.num_adapt_steps != 1:
        raise ValueError("vpg_train supports a single adaptation step")
    seed = config.run.seeds[0] if seed is None else seed
    setup = _setup(config, seed)
    policy = setup.policy
    inner_adv = o.advantages in ("inner", "all")
    all_adv = o.advantages == "all"
    hess_tag = {"I+DICE": "DICE", "I+LVC": "LVC", "MAML": "MAML", "EMAML": "MAML"}[tag]
    theta = setup.theta0.copy() if theta0 is None else np.array(theta0, dtype=float)
    records: list[IterationRecord] = []

    for it in range(config.run.iterations):
        task_rng, rngs = _task_rngs(seed, it, o.tasks_per_iter)
        grads, pres, posts, cos = [], [], [], []
        for i in range(o.tasks_per_iter):
            task = setup.distribution.sample_task(task_rng)
            env = setup.distribution.make_env(task)
            pre = _sample(env, setup, theta, rngs[i], task)
            ad = inner_update(policy, pre, theta, o.alpha, hessian=hess_tag,
                              use_advantages=inner_adv, hessian_advantages=all_adv)
            post = _sample(env, setup, ad.theta_prime, rngs[i], task)
            if tag == "EMAML":
                mg = meta_gradient_II(policy, pre, post, theta, ad, use_advantages=all_adv)
            elif tag == "MAML":
                mg = meta_gradient_maml(policy, pre, post, theta, ad, use_advantages=all_adv)
            else:
                mg = meta_gradient_I(policy, pre, post, theta, ad, use_advantages=all_adv)
            grads.append(mg.total)
            pres.append(pre)
            posts.append(post.mean_return())
            cos.append(mg.diagnostics["cos_delta"])
        g = np.mean(grads, axis=0)
        theta_old = theta
        theta = theta + o.beta * g
        pre_ret = float(np.mean([b.mean_return() for b in pres]))
        post_ret = float(np.mean(posts))
        _check(theta, [pre_ret, post_ret], records, it)
        kl = float(np.mean([mean_kl(policy, b, theta_old, theta) for b in pres]))
        rec = IterationRecord(it, pre_ret, post_ret, float(np.linalg.norm(g)), kl,
                              _distance(setup, theta), {"cos_delta": float(np.mean(cos))})
        records.append(rec)
        if callback is not None:
            callback(rec, theta)
    return records


def train(config, seed: int | None = None, callback=None) -> list[IterationRecord]:
    if config.optimizer.algo == "promp":
        return promp_train(config, seed, callback=callback)
    return vpg_train(config, seed=seed, callback=callback)


def adapt_eval(theta_meta, task, k_steps: int, config, rng: np.random.Generator | None = None,
               n_traj: int | None = None):
    """Adapt ``theta_meta`` to ``task`` with ``k_steps`` PGT steps on fresh samples.

    Returns the mean return before and after adaptation.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    policy = config.make_policy()
    env = config.task_distribution().make_env(task)
    n = n_traj or config.optimizer.traj_per_task
    theta = np.array(theta_meta, dtype=float)
    b = compute_advantages(sample_batch(env, policy, theta, n, rng, task, config.env.gamma))
    pre = b.mean_return()
    for _ in range(k_steps):
        theta = inner_update(policy, b, theta, config.optimizer.alpha, use_advantages=True).theta_prime
        b = compute_advantages(sample_batch(env, policy, theta, n, rng, task, config.env.gamma))
    return pre, b.mean_return()
