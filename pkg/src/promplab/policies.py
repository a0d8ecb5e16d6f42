"""Stochastic policies with closed-form log-likelihood derivatives.

Every method is vectorised: pass a single ``(s, a)`` pair to get a scalar /
``(d,)`` vector / ``(d, d)`` matrix, or stacks of ``n`` states and actions to
get arrays with a leading ``n`` axis.  Parameters are always a flat vector.
"""

from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class SoftmaxTabularPolicy:
    """``pi(a|s) = softmax(theta[s])`` with ``theta`` stored row-major (S, A)."""

    discrete = True

    def __init__(self, n_states: int, n_actions: int):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)

    @property
    def dim(self) -> int:
        return self.n_states * self.n_actions

    def init_params(self, rng: np.random.Generator, scale: float = 0.0) -> np.ndarray:
        return scale * rng.standard_normal(self.dim)

    def _logits(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected parameter vector of size {self.dim}, got {theta.shape}")
        return theta.reshape(self.n_states, self.n_actions)

    def log_probs_table(self, theta) -> np.ndarray:
        z = self._logits(theta)
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def probs_table(self, theta) -> np.ndarray:
        """All action probabilities, shape (S, A)."""
        return np.exp(self.log_probs_table(theta))

    def log_prob(self, theta, s, a):
        return self.log_probs_table(theta)[np.asarray(s, dtype=int), np.asarray(a, dtype=int)]

    def grad_log_prob(self, theta, s, a):
        s = np.asarray(s, dtype=int)
        a = np.asarray(a, dtype=int)
        single = s.ndim == 0
        s, a = np.atleast_1d(s), np.atleast_1d(a)
        pi = self.probs_table(theta)
        n = s.shape[0]
        g = np.zeros((n, self.n_states, self.n_actions))
        g[np.arange(n), s] = -pi[s]
        g[np.arange(n), s, a] += 1.0
        g = g.reshape(n, self.dim)
        return g[0] if single else g

    def hess_log_prob(self, theta, s, a):
        # independent of the action taken
        s = np.asarray(s, dtype=int)
        single = s.ndim == 0
        s = np.atleast_1d(s)
        pi = self.probs_table(theta)
        A = self.n_actions
        blocks = pi[:, :, None] * pi[:, None, :]
        blocks[:, np.arange(A), np.arange(A)] -= pi
        H = np.zeros((s.shape[0], self.dim, self.dim))
        for st in np.unique(s):
            rows = slice(st * A, (st + 1) * A)
            H[s == st, rows, rows] = blocks[st]
        return H[0] if single else H

    def sample_action(self, theta, s, rng: np.random.Generator):
        s = np.asarray(s, dtype=int)
        cdf = np.cumsum(self.probs_table(theta), axis=1)[s]
        u = rng.random(s.shape)
        a = (u[..., None] >= cdf).sum(-1)
        a = np.minimum(a, self.n_actions - 1)
        return int(a) if a.ndim == 0 else a

    def kl_divergence(self, theta_p, theta_q, s):
        """``KL(pi_p(.|s) || pi_q(.|s))``."""
        s = np.asarray(s, dtype=int)
        lp = self.log_probs_table(theta_p)[s]
        lq = self.log_probs_table(theta_q)[s]
        return np.sum(np.exp(lp) * (lp - lq), axis=-1)

    def kl_grad(self, theta_p, theta_q, s):
        """Gradient of :meth:`kl_divergence` with respect to ``theta_q``."""
        s = np.asarray(s, dtype=int)
        single = s.ndim == 0
        s = np.atleast_1d(s)
        pp = self.probs_table(theta_p)
        pq = self.probs_table(theta_q)
        n = s.shape[0]
        g = np.zeros((n, self.n_states, self.n_actions))
        g[np.arange(n), s] = pq[s] - pp[s]
        g = g.reshape(n, self.dim)
        return g[0] if single else g


class GaussianLinearPolicy:
    """Diagonal Gaussian with mean ``W s + b`` and per-dimension log-std.

    Parameter layout: ``b`` (m), then ``W`` row-major (m x k), then the log-std
    vector (m) when ``learn_std`` is set.  With ``state_dim=1, action_dim=1``
    and a fixed std this is the two-parameter policy ``mean = t0 + t1 * x``.
    The log-std is clamped below at ``log(min_std)``; the clamp has zero
    derivative.
    """

    discrete = False

    def __init__(self, state_dim: int, action_dim: int, learn_std: bool = True,
                 fixed_std: float = 1.0, min_std: float = 1e-3):
        if fixed_std <= 0 or min_std <= 0:
            raise ValueError("standard deviations must be positive")
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.learn_std = bool(learn_std)
        self.fixed_std = float(fixed_std)
        self.min_std = float(min_std)
        m, k = self.action_dim, self.state_dim
        # indices of the mean parameters for each action dimension: [b_j, W_j.]
        self._mean_idx = np.array(
            [[j] + [m + j * k + i for i in range(k)] for j in range(m)], dtype=int
        )
        self._std_idx = m * (k + 1) + np.arange(m)

    @property
    def dim(self) -> int:
        m, k = self.action_dim, self.state_dim
        return m * (k + 1) + (m if self.learn_std else 0)

    def init_params(self, rng: np.random.Generator, scale: float = 0.0,
                    log_std: float = 0.0) -> np.ndarray:
        theta = np.zeros(self.dim)
        n_mean = self.action_dim * (self.state_dim + 1)
        theta[:n_mean] = scale * rng.standard_normal(n_mean)
        if self.learn_std:
            theta[n_mean:] = log_std
        return theta

    def _unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected parameter vector of size {self.dim}, got {theta.shape}")
        m, k = self.action_dim, self.state_dim
        b = theta[:m]
        W = theta[m:m + m * k].reshape(m, k)
        floor = math.log(self.min_std)
        if self.learn_std:
            raw = theta[m * (k + 1):]
            log_std = np.maximum(raw, floor)
            active = (raw > floor).astype(float)
        else:
            log_std = np.full(m, max(math.log(self.fixed_std), floor))
            active = np.zeros(m)
        return W, b, log_std, active

    def _states(self, s):
        s = np.asarray(s, dtype=float)
        k = self.state_dim
        if s.ndim == 0 and k == 1:
            s = s.reshape(1)
        if s.ndim == 1 and s.shape[0] == k:
            return s.reshape(1, k), True
        if s.ndim == 2 and s.shape[1] == k:
            return s, False
        raise ValueError(f"states must have shape ({k},) or (n, {k}), got {s.shape}")

    def _actions(self, a, n):
        return np.asarray(a, dtype=float).reshape(n, self.action_dim)

    def mean(self, theta, s):
        W, b, _, _ = self._unpack(theta)
        S, single = self._states(s)
        mu = S @ W.T + b
        return mu[0] if single else mu

    def std(self, theta):
        return np.exp(self._unpack(theta)[2])

    def log_prob(self, theta, s, a):
        W, b, log_std, _ = self._unpack(theta)
        S, single = self._states(s)
        A = self._actions(a, S.shape[0])
        z = (A - (S @ W.T + b)) / np.exp(log_std)
        lp = np.sum(-0.5 * z ** 2 - log_std - 0.5 * LOG_2PI, axis=1)
        return lp[0] if single else lp

    def _features(self, S):
        return np.concatenate([np.ones((S.shape[0], 1)), S], axis=1)

    def grad_log_prob(self, theta, s, a):
        W, b, log_std, active = self._unpack(theta)
        S, single = self._states(s)
        n = S.shape[0]
        A = self._actions(a, n)
        var = np.exp(2 * log_std)
        diff = A - (S @ W.T + b)
        phi = self._features(S)
        g = np.zeros((n, self.dim))
        u = diff / var
        for j in range(self.action_dim):
            g[:, self._mean_idx[j]] = u[:, j:j + 1] * phi
        if self.learn_std:
            g[:, self._std_idx] = (diff ** 2 / var - 1.0) * active
        return g[0] if single else g

    def hess_log_prob(self, theta, s, a):
        W, b, log_std, active = self._unpack(theta)
        S, single = self._states(s)
        n = S.shape[0]
        A = self._actions(a, n)
        var = np.exp(2 * log_std)
        diff = A - (S @ W.T + b)
        phi = self._features(S)
        outer = phi[:, :, None] * phi[:, None, :]
        H = np.zeros((n, self.dim, self.dim))
        for j in range(self.action_dim):
            mi = self._mean_idx[j]
            H[:, mi[:, None], mi[None, :]] = -outer / var[j]
            if self.learn_std:
                li = self._std_idx[j]
                cross = -2.0 * (diff[:, j] / var[j])[:, None] * phi * active[j]
                H[:, mi, li] = cross
                H[:, li, mi] = cross
                H[:, li, li] = -2.0 * diff[:, j] ** 2 / var[j] * active[j]
        return H[0] if single else H

    def sample_action(self, theta, s, rng: np.random.Generator):
        W, b, log_std, _ = self._unpack(theta)
        S, single = self._states(s)
        mu = S @ W.T + b
        a = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        return a[0] if single else a

    def kl_divergence(self, theta_p, theta_q, s):
        """``KL(pi_p(.|s) || pi_q(.|s))`` summed over action dimensions."""
        Wp, bp, lp, _ = self._unpack(theta_p)
        Wq, bq, lq, _ = self._unpack(theta_q)
        S, single = self._states(s)
        dmu = (S @ Wp.T + bp) - (S @ Wq.T + bq)
        vp, vq = np.exp(2 * lp), np.exp(2 * lq)
        kl = np.sum(lq - lp + (vp + dmu ** 2) / (2 * vq) - 0.5, axis=1)
        return kl[0] if single else kl

    def kl_grad(self, theta_p, theta_q, s):
        """Gradient of :meth:`kl_divergence` with respect to ``theta_q``."""
        Wp, bp, lp, _ = self._unpack(theta_p)
        Wq, bq, lq, active = self._unpack(theta_q)
        S, single = self._states(s)
        n = S.shape[0]
        dmu = (S @ Wq.T + bq) - (S @ Wp.T + bp)
        vp, vq = np.exp(2 * lp), np.exp(2 * lq)
        phi = self._features(S)
        g = np.zeros((n, self.dim))
        for j in range(self.action_dim):
            g[:, self._mean_idx[j]] = (dmu[:, j] / vq[j])[:, None] * phi
        if self.learn_std:
            g[:, self._std_idx] = (1.0 - (vp + dmu ** 2) / vq) * active
        return g[0] if single else g


def log_prob(policy, theta, s, a):
    return policy.log_prob(theta, s, a)


def grad_log_prob(policy, theta, s, a):
    return policy.grad_log_prob(theta, s, a)


def hess_log_prob(policy, theta, s, a):
    return policy.hess_log_prob(theta, s, a)


def sample_action(policy, theta, s, rng):
    return policy.sample_action(theta, s, rng)


def kl_divergence(policy, theta_p, theta_q, s):
    return policy.kl_divergence(theta_p, theta_q, s)
