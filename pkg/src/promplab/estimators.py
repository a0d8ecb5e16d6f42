"""Policy-gradient, Hessian and meta-gradient estimators.

Everything here is an explicit formula over the per-step policy derivatives
``g_t = grad log pi(a_t|s_t)`` and ``h_t = hess log pi(a_t|s_t)``; nothing is
obtained by differentiating a computation graph.  All estimators average over
a batch with the batch's weights, so an
:class:`~promplab.rollout.EnumeratedDistribution` yields exact expectations.

Notation used below: ``r_t`` is the discounted reward, ``q_t`` its tail sum
(reward-to-go), ``G_t = sum_{t'<=t} g_t'`` the cumulative score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rollout import EnumeratedDistribution, TrajectoryBatch, value_tables

HESSIAN_TAGS = ("DICE", "LVC", "MAML", "EXACT", "LR")


class OffPolicyError(ValueError):
    """A batch was used with parameters other than the ones it was sampled under."""


@dataclass(frozen=True)
class HessianTerms:
    H1: np.ndarray
    H2: np.ndarray
    H12: np.ndarray

    @property
    def H12T(self) -> np.ndarray:
        return self.H12.T

    @property
    def total(self) -> np.ndarray:
        return self.H1 + self.H2 + self.H12 + self.H12.T

    def as_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("H1", "H2", "H12")}


@dataclass(frozen=True)
class AdaptationResult:
    theta_prime: np.ndarray
    inner_gradient: np.ndarray
    jacobian: np.ndarray
    hessian_tag: str
    alpha: float
    objective: str = "PGT"


@dataclass(frozen=True)
class MetaGradient:
    j_post: np.ndarray
    j_pre: np.ndarray
    formulation: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def total(self) -> np.ndarray:
        return self.j_post + self.j_pre


# ---------------------------------------------------------------------------
# per-step quantities


def _require_on_policy(batch: TrajectoryBatch, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if not np.array_equal(batch.theta_sampled, theta):
        raise OffPolicyError("batch was sampled under different parameters")
    return theta


def step_grads(policy, batch: TrajectoryBatch, theta) -> np.ndarray:
    """``g_t`` for every step, shape ``(N, H, d)``."""
    g = policy.grad_log_prob(theta, batch.step_states(), batch.step_actions())
    return g.reshape(batch.n, batch.horizon, -1)


def step_hessians(policy, batch: TrajectoryBatch, theta) -> np.ndarray:
    """``h_t`` for every step, shape ``(N, H, d, d)``."""
    h = policy.hess_log_prob(theta, batch.step_states(), batch.step_actions())
    d = h.shape[-1]
    return h.reshape(batch.n, batch.horizon, d, d)


def step_ratios(policy, batch: TrajectoryBatch, theta) -> np.ndarray:
    """``pi_theta(a_t|s_t) / pi_sampled(a_t|s_t)``, shape ``(N, H)``."""
    lp = policy.log_prob(theta, batch.step_states(), batch.step_actions())
    return np.exp(lp.reshape(batch.n, batch.horizon) - batch.logps)


def _step_weights(batch: TrajectoryBatch, use_advantages: bool) -> np.ndarray:
    if use_advantages:
        if batch.advantages is None:
            raise ValueError("batch has no advantages; call compute_advantages first")
        return batch.advantages
    return batch.reward_to_go()


def _weighted_outer(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``sum_{n,t} w[n,t] g[n,t] g[n,t]^T``."""
    d = g.shape[-1]
    g2 = g.reshape(-1, d)
    return (g2 * w.reshape(-1, 1)).T @ g2


def _weighted_sum(w: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``sum_{n,t} w[n,t] h[n,t]`` for per-step matrices ``h``."""
    d = h.shape[-1]
    return (w.reshape(-1) @ h.reshape(-1, d * d)).reshape(d, d)


def _symmetrize(H: np.ndarray) -> np.ndarray:
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# gradients


def pgt_gradient(policy, batch: TrajectoryBatch, theta, use_advantages: bool = False) -> np.ndarray:
    """Forward-looking policy gradient ``E[sum_t g_t q_t]`` (or ``A_t`` for ``q_t``)."""
    theta = _require_on_policy(batch, theta)
    g = step_grads(policy, batch, theta)
    psi = _step_weights(batch, use_advantages)
    return np.einsum("n,nt,nti->i", batch.w, psi, g)


def dice_gradient(policy, batch: TrajectoryBatch, theta) -> np.ndarray:
    """Backward-looking form ``E[sum_t G_t r_t]``: first derivative of the DiCE objective."""
    theta = _require_on_policy(batch, theta)
    G = np.cumsum(step_grads(policy, batch, theta), axis=1)
    return np.einsum("n,nt,nti->i", batch.w, batch.discounted_rewards, G)


def lvc_gradient(policy, batch: TrajectoryBatch, theta) -> np.ndarray:
    """First derivative of the LVC objective: per-step dry weights times ``g_t q_t``."""
    theta = _require_on_policy(batch, theta)
    # the per-step weight pi/stop_grad(pi) evaluates to one on-policy
    ratio = np.ones((batch.n, batch.horizon))
    g = step_grads(policy, batch, theta)
    return np.einsum("n,nt,nti->i", batch.w, ratio * batch.reward_to_go(), g)


def lr_gradient(policy, batch: TrajectoryBatch, theta) -> np.ndarray:
    """Gradient of the likelihood-ratio objective ``E_old[sum_t ratio_t A_t]`` at ``theta``."""
    ratio = step_ratios(policy, batch, theta)
    g = step_grads(policy, batch, theta)
    return np.einsum("n,nt,nti->i", batch.w, ratio * _step_weights(batch, True), g)


def dice_objective(traj, theta=None, gamma: float = 1.0) -> float:
    """Value of the DiCE objective: every dry weight is one, so this is the return."""
    rewards = np.asarray(traj.rewards, dtype=float)
    return float(np.sum(rewards * gamma ** np.arange(rewards.shape[-1])))


# ---------------------------------------------------------------------------
# Hessian estimators


def dice_hessian(policy, batch: TrajectoryBatch, theta) -> np.ndarray:
    """``E[sum_t (G_t G_t^T + sum_{t'<=t} h_t') r_t]``; unbiased for the full Hessian."""
    theta = _require_on_policy(batch, theta)
    G = np.cumsum(step_grads(policy, batch, theta), axis=1)
    C = np.cumsum(step_hessians(policy, batch, theta), axis=1)
    wr = batch.w[:, None] * batch.discounted_rewards
    return _weighted_outer(wr, G) + _weighted_sum(wr, C)


def lvc_hessian(policy, batch: TrajectoryBatch, theta, use_advantages: bool = False) -> np.ndarray:
    """``E[sum_t (g_t g_t^T + h_t) q_t]``; expectation is ``H1 + H2``."""
    theta = _require_on_policy(batch, theta)
    g = step_grads(policy, batch, theta)
    h = step_hessians(policy, batch, theta)
    wq = batch.w[:, None] * _step_weights(batch, use_advantages)
    return _weighted_outer(wq, g) + _weighted_sum(wq, h)


def maml_hessian(policy, batch: TrajectoryBatch, theta, use_advantages: bool = False) -> np.ndarray:
    """``E[sum_t h_t q_t]``: what differentiating the PGT surrogate twice gives (``H2`` only)."""
    theta = _require_on_policy(batch, theta)
    h = step_hessians(policy, batch, theta)
    wq = batch.w[:, None] * _step_weights(batch, use_advantages)
    return _weighted_sum(wq, h)


def lr_hessian(policy, batch: TrajectoryBatch, theta) -> np.ndarray:
    """Hessian of the likelihood-ratio objective at ``theta``."""
    return lr_terms(policy, batch, theta)[1]


def lr_terms(policy, batch: TrajectoryBatch, theta):
    """Gradient and Hessian of the likelihood-ratio objective, sharing one pass."""
    ratio = step_ratios(policy, batch, theta)
    g = step_grads(policy, batch, theta)
    h = step_hessians(policy, batch, theta)
    wa = batch.w[:, None] * ratio * _step_weights(batch, True)
    d = g.shape[-1]
    grad = wa.reshape(-1) @ g.reshape(-1, d)
    return grad, _weighted_outer(wa, g) + _weighted_sum(wa, h)


def exact_hessian_terms(enum: EnumeratedDistribution, theta=None, gamma: float | None = None) -> HessianTerms:
    """Exact ``H1``, ``H2`` and ``H12`` of a tabular task by dynamic programming.

    Expectations over trajectories are taken in marginal form,
    ``E[sum_t f(s_t, a_t) q_t] = sum_t sum_s d_t(s) sum_a pi(a|s) f(s, a) Q_t(s, a)``,
    so nothing here reuses the enumerated trajectories (only the task, policy
    and parameters they were built from).  ``grad Q_t`` follows the backward
    recursion ``grad Q_t(s,a) = sum_s' p(s'|s,a) grad V_{t+1}(s')`` with
    ``grad V_t(s) = sum_a pi(a|s) (g(s,a) Q_t(s,a) + grad Q_t(s,a))``.
    """
    theta = enum.theta_sampled if theta is None else np.asarray(theta, dtype=float)
    if gamma is not None and gamma != enum.gamma:
        raise ValueError("enumeration was built with a different discount")
    policy, env = enum.policy, enum.env
    Q, _, occ = value_tables(env, policy, theta, enum.gamma)
    pi = policy.probs_table(theta)
    P = env.mdp.transitions
    S, A = pi.shape
    Hz, d = env.horizon, policy.dim
    score = np.array([[policy.grad_log_prob(theta, s, a) for a in range(A)] for s in range(S)])
    curv = np.array([[policy.hess_log_prob(theta, s, a) for a in range(A)] for s in range(S)])

    dQ = np.zeros((Hz, S, A, d))
    dV_next = np.zeros((S, d))
    for t in reversed(range(Hz)):
        dQ[t] = np.einsum("sap,pi->sai", P, dV_next)
        dV_next = np.einsum("sa,sai->si", pi, score * Q[t][:, :, None] + dQ[t])

    # weight of (t, s, a): d_t(s) pi(a|s)
    w = occ[:, :, None] * pi[None]
    H1 = np.einsum("tsa,tsa,sai,saj->ij", w, Q, score, score)
    H2 = np.einsum("tsa,tsa,saij->ij", w, Q, curv)
    H12 = np.einsum("tsa,sai,tsaj->ij", w, score, dQ)
    return HessianTerms(H1, H2, H12)


def hessian_estimate(policy, batch: TrajectoryBatch, theta, tag: str,
                     use_advantages: bool = False) -> np.ndarray:
    tag = tag.upper()
    if tag == "DICE":
        return dice_hessian(policy, batch, theta)
    if tag == "LVC":
        return lvc_hessian(policy, batch, theta, use_advantages)
    if tag == "MAML":
        return maml_hessian(policy, batch, theta, use_advantages)
    if tag == "LR":
        return lr_hessian(policy, batch, theta)
    if tag == "EXACT":
        if not isinstance(batch, EnumeratedDistribution):
            raise ValueError("EXACT Hessian needs an enumerated distribution")
        return exact_hessian_terms(batch, theta).total
    raise ValueError(f"unknown Hessian estimator {tag!r}; expected one of {HESSIAN_TAGS}")


# ---------------------------------------------------------------------------
# inner update and meta-gradients


def update_jacobian(policy, batch: TrajectoryBatch, theta, alpha: float, tag: str,
                    use_advantages: bool = False) -> np.ndarray:
    """``I + alpha * H`` with ``H`` from the tagged estimator, symmetrised."""
    H = hessian_estimate(policy, batch, theta, tag, use_advantages)
    return np.eye(H.shape[0]) + alpha * _symmetrize(H)


def inner_update(policy, batch: TrajectoryBatch, theta, alpha: float, objective: str = "PGT",
                 hessian: str | None = None, use_advantages: bool = False,
                 hessian_advantages: bool = False) -> AdaptationResult:
    """One policy-gradient adaptation step ``theta' = theta + alpha * grad``.

    ``objective="PGT"`` needs an on-policy batch.  ``objective="LR"`` accepts a
    batch sampled under any earlier parameters (with advantages filled) and
    differentiates the likelihood-ratio objective at ``theta``.
    """
    if alpha < 0:
        raise ValueError(f"inner step size must be non-negative, got {alpha}")
    if batch.n == 0:
        raise ValueError("empty batch")
    theta = np.asarray(theta, dtype=float)
    objective = objective.upper()
    if objective == "PGT":
        grad = pgt_gradient(policy, batch, theta, use_advantages)
        tag = hessian or "LVC"
        jac = update_jacobian(policy, batch, theta, alpha, tag, hessian_advantages)
    elif objective == "LR":
        grad = lr_gradient(policy, batch, theta)
        tag = hessian or "LR"
        if tag.upper() != "LR":
            raise ValueError("the likelihood-ratio objective uses its own Hessian")
        jac = np.eye(theta.size) + alpha * _symmetrize(lr_hessian(policy, batch, theta))
    else:
        raise ValueError(f"unknown inner objective {objective!r}")
    return AdaptationResult(theta + alpha * grad, grad, jac, tag.upper(), float(alpha), objective)


def _check_meta_batches(pre_batch, post_batch, theta, adaptation):
    theta = _require_on_policy(pre_batch, theta)
    if not np.array_equal(post_batch.theta_sampled, adaptation.theta_prime):
        raise OffPolicyError("post-update batch was not sampled under the adapted parameters")
    return theta


def _post_term(policy, pre_batch, post_batch, theta, adaptation, use_advantages):
    """Outer gradient at ``theta'`` and ``j_post = (I + alpha H2)^T g_outer``."""
    alpha = adaptation.alpha
    g_out = pgt_gradient(policy, post_batch, adaptation.theta_prime, use_advantages)
    H2 = maml_hessian(policy, pre_batch, theta, use_advantages)
    j_post = g_out + alpha * _symmetrize(H2) @ g_out
    return g_out, j_post


def _alignment(g_inner, g_out) -> dict:
    ni, no = float(np.linalg.norm(g_inner)), float(np.linalg.norm(g_out))
    cos = float(g_inner @ g_out / (ni * no)) if ni > 0 and no > 0 else 0.0
    return {"inner_norm": ni, "outer_norm": no, "cos_delta": cos,
            "inner_product": ni * no * cos}


def meta_gradient_I(policy, pre_batch, post_batch, theta, adaptation: AdaptationResult,
                    hessian: str | None = None, pairing: str = "trajectory",
                    use_advantages: bool = False) -> MetaGradient:
    """Formulation-I meta-gradient split into ``j_post`` and ``j_pre``.

    ``j_post`` transforms the outer policy gradient by ``I + alpha H2``.
    ``j_pre`` carries the remaining curvature (``H1 + H12 + H12^T`` in
    expectation) as score-times-inner-product terms; its exact form depends
    on the Hessian estimator: ``DICE`` pairs each ``G_t r_t`` with
    ``G_t . g_outer``, ``LVC`` pairs ``g_t q_t`` with ``g_t . g_outer`` and
    ``EXACT`` uses the exact terms of an enumerated pre-update batch.

    ``pairing="batch"`` instead weights each pre-update trajectory's score by
    the inner product of the batch inner gradient and the outer gradient.
    """
    theta = _check_meta_batches(pre_batch, post_batch, theta, adaptation)
    tag = (hessian or adaptation.hessian_tag).upper()
    alpha = adaptation.alpha
    g_out, j_post = _post_term(policy, pre_batch, post_batch, theta, adaptation, use_advantages)
    g = step_grads(policy, pre_batch, theta)

    if pairing == "batch":
        score = g.sum(axis=1)
        j_pre = alpha * (pre_batch.w @ score) * float(adaptation.inner_gradient @ g_out)
    elif pairing != "trajectory":
        raise ValueError(f"unknown pairing {pairing!r}")
    elif tag == "DICE":
        G = np.cumsum(g, axis=1)
        coef = pre_batch.w[:, None] * pre_batch.discounted_rewards * (G @ g_out)
        j_pre = alpha * np.einsum("nt,nti->i", coef, G)
    elif tag == "LVC":
        coef = pre_batch.w[:, None] * _step_weights(pre_batch, use_advantages) * (g @ g_out)
        j_pre = alpha * np.einsum("nt,nti->i", coef, g)
    elif tag == "EXACT":
        if not isinstance(pre_batch, EnumeratedDistribution):
            raise ValueError("EXACT meta-gradient needs an enumerated pre-update distribution")
        terms = exact_hessian_terms(pre_batch, theta)
        j_pre = alpha * (terms.H1 + terms.H12 + terms.H12.T) @ g_out
    elif tag == "MAML":
        j_pre = np.zeros_like(g_out)
    else:
        raise ValueError(f"unknown Hessian estimator {tag!r} for formulation I")

    diag = _alignment(adaptation.inner_gradient, g_out)
    diag["outer_gradient"] = g_out
    return MetaGradient(j_post, j_pre, "I", diag)


def meta_gradient_II(policy, pre_batch, post_batch, theta, adaptation: AdaptationResult,
                     use_advantages: bool = False) -> MetaGradient:
    """E-MAML meta-gradient: ``j_pre = alpha * mean(score(tau)) * mean(R(tau'))``."""
    theta = _check_meta_batches(pre_batch, post_batch, theta, adaptation)
    g_out, j_post = _post_term(policy, pre_batch, post_batch, theta, adaptation, use_advantages)
    score = step_grads(policy, pre_batch, theta).sum(axis=1)
    post_return = float(post_batch.w @ post_batch.returns())
    j_pre = adaptation.alpha * (pre_batch.w @ score) * post_return
    diag = _alignment(adaptation.inner_gradient, g_out)
    diag["outer_gradient"] = g_out
    return MetaGradient(j_post, j_pre, "II", diag)


def meta_gradient_maml(policy, pre_batch, post_batch, theta, adaptation: AdaptationResult,
                       use_advantages: bool = False) -> MetaGradient:
    """Biased MAML meta-gradient: ``j_post`` only, no pre-update credit assignment."""
    theta = _check_meta_batches(pre_batch, post_batch, theta, adaptation)
    g_out, j_post = _post_term(policy, pre_batch, post_batch, theta, adaptation, use_advantages)
    diag = _alignment(adaptation.inner_gradient, g_out)
    diag["outer_gradient"] = g_out
    return MetaGradient(j_post, np.zeros_like(j_post), "MAML", diag)
