"""Experiment drivers: oracle verification, estimator variance, training runs."""

from __future__ import annotations

import csv
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dumps
from .envs import TaskSpec
from .estimators import (exact_hessian_terms, hessian_estimate, inner_update, lvc_gradient,
                         dice_gradient, meta_gradient_I, meta_gradient_II, meta_gradient_maml,
                         pgt_gradient)
from .meta_opt import IterationRecord, train
from .rollout import (EnumerationTooLarge, compute_advantages, enumerate_trajectories,
                      exact_expected_return, exact_hessian_fd, exact_policy_gradient, sample_batch,
                      spawn_rng)

CURVE_COLUMNS = ("iteration", "pre_return", "post_return", "grad_norm", "mean_kl")
EPS_NUM = 1e-8


# ---------------------------------------------------------------------------
# verify


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    message: str = ""


@dataclass
class VerifyReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def add(self, name, error, tol):
        self.checks.append(CheckResult(name, float(error), tol, bool(error < tol)))

    def lines(self):
        for c in self.checks:
            status = "ok  " if c.passed else "FAIL"
            extra = f"  {c.message}" if c.message else ""
            yield f"{status} {c.name:<28} max_err={c.max_error:.3e} tol={c.tolerance:.0e}{extra}"


def _maxabs(x) -> float:
    return float(np.max(np.abs(x)))


def nested_meta_objective(env, policy, theta, alpha, gamma):
    """Exact ``J(theta + alpha * grad J(theta))`` for a tabular task."""
    enum = enumerate_trajectories(env, policy, theta, gamma)
    theta_prime = np.asarray(theta, dtype=float) + alpha * exact_policy_gradient(enum)
    return exact_expected_return(enumerate_trajectories(env, policy, theta_prime, gamma))


def _verify_task(report, env, policy, theta, alpha, gamma, tag):
    enum = enumerate_trajectories(env, policy, theta, gamma)

    def named(name, tol, fn):
        try:
            report.add(f"{name}[{tag}]", fn(), tol)
        except (ValueError, ArithmeticError) as exc:
            report.checks.append(CheckResult(f"{name}[{tag}]", math.inf, tol, False,
                                             f"{type(exc).__name__}: {exc}"))

    terms = exact_hessian_terms(enum)
    named("decomposition", 1e-6, lambda: _maxabs(
        terms.total - exact_hessian_fd(lambda x: enumerate_trajectories(env, policy, x, gamma), theta, gamma)))
    named("dice_unbiased", 1e-10, lambda: _maxabs(hessian_estimate(policy, enum, theta, "DICE") - terms.total))
    named("lvc_bias", 1e-10, lambda: _maxabs(hessian_estimate(policy, enum, theta, "LVC") - terms.H1 - terms.H2))
    named("maml_bias", 1e-10, lambda: _maxabs(hessian_estimate(policy, enum, theta, "MAML") - terms.H2))
    g_exact = exact_policy_gradient(enum)
    named("gradient_agreement", 1e-10, lambda: max(
        _maxabs(f(policy, enum, theta) - g_exact) for f in (pgt_gradient, dice_gradient, lvc_gradient)))

    def meta_fd():
        ad = inner_update(policy, enum, theta, alpha, hessian="EXACT")
        post = enumerate_trajectories(env, policy, ad.theta_prime, gamma)
        mg = meta_gradient_I(policy, enum, post, theta, ad, hessian="EXACT")
        h = 1e-5
        fd = np.array([
            (nested_meta_objective(env, policy, theta + h * e, alpha, gamma)
             - nested_meta_objective(env, policy, theta - h * e, alpha, gamma)) / (2 * h)
            for e in np.eye(theta.size)])
        return _maxabs(mg.total - fd)

    named("meta_gradient_fd", 1e-5, meta_fd)


def run_verify(config: ExperimentConfig, seed: int = 0) -> VerifyReport:
    """Run the enumeration-backed oracle checks on every task of a tabular config."""
    if config.env.family not in ("tabular", "chain"):
        raise ConfigError("verify needs a tabular environment (env.family = tabular or chain)")
    dist = config.task_distribution()
    policy = config.make_policy()
    theta = config.initial_theta(policy, spawn_rng(seed, 0))
    report = VerifyReport()
    try:
        for task_id in range(dist.mdp.n_tasks):
            _verify_task(report, dist.mdp.task_env(task_id), policy, theta, config.optimizer.alpha,
                         config.env.gamma, f"task{task_id}")
    except EnumerationTooLarge as exc:
        raise ConfigError(f"{exc}; try n_states <= 3, n_actions <= 2, horizon <= 3") from exc
    return report


# ---------------------------------------------------------------------------
# variance


@dataclass
class VarianceReport:
    tag: str
    samples: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    relative_std: np.ndarray
    aggregate_relative_std: float
    norm_relative_std: float

    @classmethod
    def from_samples(cls, tag: str, samples) -> "VarianceReport":
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or samples.shape[0] < 2:
            raise ValueError("need at least two gradient samples")
        mean = samples.mean(axis=0)
        std = samples.std(axis=0, ddof=1)
        rel = std / (np.abs(mean) + EPS_NUM)
        spread = math.sqrt(np.sum((samples - mean) ** 2) / (samples.shape[0] - 1))
        norm_rel = spread / (float(np.linalg.norm(mean)) + EPS_NUM)
        return cls(tag, samples, mean, std, rel, float(rel.mean()), norm_rel)

    def summary(self) -> dict:
        return {"tag": self.tag, "K": int(self.samples.shape[0]),
                "aggregate_relative_std": self.aggregate_relative_std,
                "norm_relative_std": self.norm_relative_std,
                "mean": self.mean.tolist(), "std": self.std.tolist(),
                "relative_std": self.relative_std.tolist()}


def meta_gradient_sample(config, policy, env, theta, tag, rng):
    """One meta-gradient estimate from a fresh (pre, post) batch pair."""
    n = config.run.variance_batch
    gamma = config.env.gamma
    adv = config.optimizer.advantages
    hess = {"I+DICE": "DICE", "I+LVC": "LVC"}.get(tag, "MAML")
    pre = compute_advantages(sample_batch(env, policy, theta, n, rng, gamma=gamma))
    ad = inner_update(policy, pre, theta, config.optimizer.alpha, hessian=hess,
                      use_advantages=adv in ("inner", "all"), hessian_advantages=adv == "all")
    post = compute_advantages(sample_batch(env, policy, ad.theta_prime, n, rng, gamma=gamma))
    if tag == "EMAML":
        return meta_gradient_II(policy, pre, post, theta, ad, use_advantages=adv == "all").total
    if tag == "MAML":
        return meta_gradient_maml(policy, pre, post, theta, ad, use_advantages=adv == "all").total
    return meta_gradient_I(policy, pre, post, theta, ad, use_advantages=adv == "all").total


def run_variance(config: ExperimentConfig, K: int | None = None, seed: int = 0) -> list[VarianceReport]:
    """``K`` independent meta-gradients per estimator at one fixed ``theta``.

    Every estimator sees the same parameters, task and random streams.
    """
    K = config.run.variance_k if K is None else K
    if K < 2:
        raise ValueError("K must be at least 2")
    dist = config.task_distribution()
    policy = config.make_policy()
    theta = config.initial_theta(policy, spawn_rng(seed, 0))
    env = dist.make_env(dist.sample_task(spawn_rng(seed, 1)))
    reports = []
    for tag in config.estimator.variance_tags:
        samples = [meta_gradient_sample(config, policy, env, theta, tag, spawn_rng(seed, 2, k))
                   for k in range(K)]
        reports.append(VarianceReport.from_samples(tag, samples))
    return reports


# ---------------------------------------------------------------------------
# training runs and curve files


def _fmt(x) -> str:
    return format(float(x), ".17g")


def export_curves(records, path) -> Path:
    """Write one CSV row per iteration with 17 significant digits."""
    path = Path(path)
    extra = any(r.distance_to_optimum is not None for r in records)
    columns = CURVE_COLUMNS + (("distance_to_optimum",) if extra else ())
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in records:
                row = [str(r.iteration), _fmt(r.pre_return), _fmt(r.post_return), _fmt(r.grad_norm),
                       _fmt(r.mean_kl)]
                if extra:
                    row.append(_fmt(r.distance_to_optimum))
                w.writerow(row)
    except OSError as exc:
        raise OSError(f"cannot write curve file {path}: {exc}") from exc
    return path


def read_curves(path) -> list[IterationRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        dist = row.get("distance_to_optimum")
        out.append(IterationRecord(int(row["iteration"]), float(row["pre_return"]),
                                   float(row["post_return"]), float(row["grad_norm"]),
                                   float(row["mean_kl"]), float(dist) if dist is not None else None))
    return out


def run_train(config: ExperimentConfig, out_dir=None, seeds=None, force: bool = False,
              log=None) -> dict:
    """Train once per seed, write ``curves_seed<k>.csv`` files and ``manifest.json``."""
    out = Path(out_dir if out_dir is not None else config.run.output_dir)
    seeds = list(config.run.seeds if seeds is None else seeds)
    if out.exists() and not force:
        raise FileExistsError(f"output directory {out} already exists; pass --force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    start = time.time()
    files = []
    for seed in seeds:
        t0 = time.time()
        records = train(config, seed)
        name = f"curves_seed{seed}.csv"
        export_curves(records, out / name)
        files.append(name)
        if log:
            last = records[-1] if records else None
            log(f"seed {seed}: {len(records)} iterations in {time.time() - t0:.1f}s"
                + (f", final post_return {last.post_return:.4g}" if last else ""))
    manifest = {
        "config_hash": config.digest(),
        "config": dumps(config),
        "seeds": seeds,
        "files": files,
        "wall_time_s": time.time() - start,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    path = out / "manifest.json"
    try:
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2)
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}") from exc
    return manifest


# ---------------------------------------------------------------------------
# 1D meta-optimum


def estimate_meta_objective(config: ExperimentConfig, theta, n_inner: int = 200, n_eval: int = 200,
                            seed: int = 0) -> float:
    """Monte-Carlo value of the one-step meta-objective at ``theta``.

    For each task, ``n_inner`` inner batches of ``traj_per_task`` trajectories
    are drawn, each is turned into an adapted policy with the configured inner
    update, and the adapted policy is scored on ``n_eval`` fresh trajectories.
    Random streams depend only on ``seed``, so nearby ``theta`` values share
    noise.
    """
    dist = config.task_distribution()
    policy = config.make_policy()
    theta = np.asarray(theta, dtype=float)
    o = config.optimizer
    adv = o.advantages in ("inner", "all")
    tasks = [TaskSpec(i, g) for i, g in enumerate(dist.goals)]
    total = 0.0
    for i, task in enumerate(tasks):
        env = dist.make_env(task)
        for k in range(n_inner):
            rng = spawn_rng(seed, 7, i, k)
            pre = compute_advantages(sample_batch(env, policy, theta, o.traj_per_task, rng,
                                                 gamma=config.env.gamma))
            tp = theta + o.alpha * pgt_gradient(policy, pre, theta, use_advantages=adv)
            post = sample_batch(env, policy, tp, n_eval, rng, gamma=config.env.gamma)
            total += post.mean_return(discounted=True)
    return total / (len(tasks) * n_inner)


def evaluate_adaptation(config: ExperimentConfig, theta, n_tasks: int = 100, seed: int = 0):
    """Mean pre- and post-adaptation return of ``theta`` over ``n_tasks`` fresh tasks.

    Each task is adapted with ``optimizer.num_adapt_steps`` inner steps on
    batches of ``traj_per_task`` trajectories, as during training.
    """
    from .meta_opt import adapt_eval

    dist = config.task_distribution()
    rng = spawn_rng(seed, 0)
    pre, post = [], []
    for i in range(n_tasks):
        task = dist.sample_task(rng)
        a, b = adapt_eval(theta, task, config.optimizer.num_adapt_steps, config, spawn_rng(seed, 1, i))
        pre.append(a)
        post.append(b)
    return float(np.mean(pre)), float(np.mean(post))
