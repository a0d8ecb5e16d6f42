import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promplab.policies import (GaussianLinearPolicy, SoftmaxTabularPolicy, grad_log_prob,
                               hess_log_prob, kl_divergence, log_prob, sample_action)

LN3 = math.log(3.0)


def test_softmax_log_prob_examples():
    pol = SoftmaxTabularPolicy(1, 2)
    assert log_prob(pol, np.zeros(2), 0, 0) == pytest.approx(-0.693147, abs=1e-6)
    assert log_prob(pol, np.array([LN3, 0.0]), 0, 0) == pytest.approx(-0.287682, abs=1e-6)


def test_gaussian_log_prob_mode():
    pol = GaussianLinearPolicy(0, 1, learn_std=False)
    assert log_prob(pol, np.zeros(1), np.zeros(0), 0.0) == pytest.approx(-0.918939, abs=1e-6)


def test_grad_examples():
    pol = SoftmaxTabularPolicy(1, 2)
    np.testing.assert_allclose(grad_log_prob(pol, np.zeros(2), 0, 0), [0.5, -0.5])
    np.testing.assert_allclose(grad_log_prob(pol, np.array([LN3, 0.0]), 0, 1), [-0.75, 0.75])
    bias = GaussianLinearPolicy(0, 1, learn_std=False)
    np.testing.assert_allclose(grad_log_prob(bias, np.zeros(1), np.zeros(0), 2.0), [2.0])


def test_hess_examples():
    pol = SoftmaxTabularPolicy(1, 2)
    for a in (0, 1):
        np.testing.assert_allclose(hess_log_prob(pol, np.zeros(2), 0, a), [[-0.25, 0.25], [0.25, -0.25]])
    bias = GaussianLinearPolicy(0, 1, learn_std=False, fixed_std=2.0)
    for a in (-1.0, 0.3, 5.0):
        np.testing.assert_allclose(hess_log_prob(bias, np.array([0.7]), np.zeros(0), a), [[-0.25]])


def test_one_d_layout():
    # two parameters: bias then slope
    pol = GaussianLinearPolicy(1, 1, learn_std=False)
    assert pol.dim == 2
    assert pol.mean(np.array([0.5, 2.0]), 3.0)[0] == pytest.approx(6.5)


def test_kl_examples():
    pol = SoftmaxTabularPolicy(1, 2)
    th = np.array([0.3, -0.2])
    assert kl_divergence(pol, th, th, 0) == pytest.approx(0.0, abs=1e-15)
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert kl_divergence(pol, np.zeros(2), np.array([LN3, 0.0]), 0) == pytest.approx(expected)
    assert expected == pytest.approx(0.143841, abs=1e-6)
    g = GaussianLinearPolicy(0, 1, learn_std=False)
    assert kl_divergence(g, np.zeros(1), np.ones(1), np.zeros(0)) == pytest.approx(0.5)


def test_sampling_degenerate_and_uniform():
    rng = np.random.default_rng(0)
    pol = SoftmaxTabularPolicy(1, 3)
    a = sample_action(pol, np.array([0.0, 1e6, 0.0]), np.zeros(10_000, dtype=int), rng)
    assert np.all(a == 1)
    n = 100_000
    a = pol.sample_action(np.zeros(3), np.zeros(n, dtype=int), rng)
    freq = np.bincount(a, minlength=3) / n
    assert np.all(np.abs(freq - 1 / 3) < 3 * math.sqrt((1 / 3) * (2 / 3) / n))
    g = GaussianLinearPolicy(0, 1, learn_std=True, min_std=1e-3)
    theta = np.array([0.3, -50.0])
    s = g.sample_action(theta, np.zeros((1000, 0)), rng)
    assert np.all(np.abs(s - 0.3) <= 5e-3)


# -- finite-difference probes ------------------------------------------------


def _fd_grad(f, x, h=1e-6):
    return np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)])


finite = st.floats(-2.0, 2.0, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(finite, min_size=6, max_size=6), st.integers(0, 2), st.integers(0, 1))
def test_softmax_derivatives_match_fd(vals, s, a):
    pol = SoftmaxTabularPolicy(3, 2)
    th = np.array(vals)
    g = pol.grad_log_prob(th, s, a)
    np.testing.assert_allclose(g, _fd_grad(lambda x: pol.log_prob(x, s, a), th), atol=1e-7)
    H = pol.hess_log_prob(th, s, a)
    np.testing.assert_allclose(H, _fd_grad(lambda x: pol.grad_log_prob(x, s, a), th), atol=1e-7)
    assert np.array_equal(H, H.T)


@settings(max_examples=40, deadline=None)
@given(st.lists(finite, min_size=8, max_size=8), st.lists(finite, min_size=4, max_size=4))
def test_gaussian_derivatives_match_fd(vals, sa):
    pol = GaussianLinearPolicy(2, 2, learn_std=True)
    th = np.array(vals) * np.r_[np.ones(6), 0.5 * np.ones(2)]
    s, a = np.array(sa[:2]), np.array(sa[2:])
    g = pol.grad_log_prob(th, s, a)
    np.testing.assert_allclose(g, _fd_grad(lambda x: pol.log_prob(x, s, a), th), rtol=1e-6, atol=1e-6)
    H = pol.hess_log_prob(th, s, a)
    np.testing.assert_allclose(H, _fd_grad(lambda x: pol.grad_log_prob(x, s, a), th), rtol=1e-6, atol=1e-6)
    assert np.array_equal(H, H.T)


@settings(max_examples=30, deadline=None)
@given(st.lists(finite, min_size=16, max_size=16), st.lists(finite, min_size=2, max_size=2))
def test_kl_grad_and_nonnegativity(vals, s):
    pol = GaussianLinearPolicy(2, 2, learn_std=True)
    p, q = np.array(vals[:8]) * 0.5, np.array(vals[8:]) * 0.5
    s = np.array(s)
    assert pol.kl_divergence(p, q, s) >= 0
    np.testing.assert_allclose(pol.kl_grad(p, q, s), _fd_grad(lambda x: pol.kl_divergence(p, x, s), q),
                               rtol=1e-5, atol=1e-6)
    tab = SoftmaxTabularPolicy(2, 3)
    pt, qt = np.r_[p[:6]], np.r_[q[:6]]
    assert tab.kl_divergence(pt, qt, 1) >= 0
    np.testing.assert_allclose(tab.kl_grad(pt, qt, 1), _fd_grad(lambda x: tab.kl_divergence(pt, x, 1), qt),
                               atol=1e-7)


def test_score_and_fisher_identities():
    # E[g] = 0 and E[g g^T] = -E[h] under the policy
    pol = GaussianLinearPolicy(2, 1, learn_std=True)
    th = np.array([0.2, -0.4, 0.7, -0.3])
    rng = np.random.default_rng(0)
    n = 200_000
    s = np.tile([0.5, -1.0], (n, 1))
    a = pol.sample_action(th, s, rng)
    g = pol.grad_log_prob(th, s, a)
    h = pol.hess_log_prob(th, s, a)
    se = g.std(0) / math.sqrt(n)
    assert np.all(np.abs(g.mean(0)) < 5 * se)
    fisher = g.T @ g / n
    np.testing.assert_allclose(fisher, -h.mean(0), atol=0.05)
    tab = SoftmaxTabularPolicy(2, 3)
    tt = rng.normal(size=6)
    pi = tab.probs_table(tt)[1]
    G = np.stack([tab.grad_log_prob(tt, 1, b) for b in range(3)])
    np.testing.assert_allclose(pi @ G, 0, atol=1e-15)
    Hs = np.stack([tab.hess_log_prob(tt, 1, b) for b in range(3)])
    np.testing.assert_allclose(np.einsum("a,ai,aj->ij", pi, G, G), -np.einsum("a,aij->ij", pi, Hs), atol=1e-14)


def test_std_clamp_has_zero_derivative():
    pol = GaussianLinearPolicy(0, 1, learn_std=True, min_std=1e-2)
    th = np.array([0.0, math.log(1e-3)])
    g = pol.grad_log_prob(th, np.zeros(0), 0.01)
    assert g[1] == 0.0
    assert pol.std(th)[0] == pytest.approx(1e-2)


def test_bad_shapes():
    with pytest.raises(ValueError):
        SoftmaxTabularPolicy(2, 2).log_prob(np.zeros(3), 0, 0)
    with pytest.raises(ValueError):
        GaussianLinearPolicy(2, 2).mean(np.zeros(8), np.zeros(3))
