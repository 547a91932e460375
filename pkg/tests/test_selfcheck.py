import numpy as np

from augsearch.matcher import cosine_gradient, policy_grad, reward
from augsearch.nnet import loss_and_grad
from augsearch.policy import softmax
from augsearch.selfcheck import (
    backprop_suite,
    identity_suite,
    mc_enumeration_suite,
    policy_gradient_suite,
    run_selfcheck,
)


def test_all_suites_pass():
    results = run_selfcheck()
    assert [r.name for r in results] == ["policy-gradient", "backprop", "mc-vs-enumeration", "zero-expected-reward"]
    for r in results:
        assert r.passed, r.line()
        assert r.line().startswith("[PASS]")


def test_injected_sign_bug_fails_gradient_suite():
    def wrong(G, logits, v):
        p = softmax(logits)
        return -policy_grad(p, reward(G, p, v / np.linalg.norm(v)))

    assert not policy_gradient_suite(grad_fn=wrong, instances=3).passed


def test_injected_missing_baseline_fails_gradient_suite():
    def no_baseline(G, logits, v):
        p = softmax(logits)
        return p * reward(G, p, v / np.linalg.norm(v)) + 0.01 * p

    assert not policy_gradient_suite(grad_fn=no_baseline, instances=3).passed
    assert policy_gradient_suite(grad_fn=cosine_gradient, instances=3).passed


def test_injected_backprop_bug_fails():
    def scaled(net, img, label):
        loss, g = loss_and_grad(net, img, label)
        return loss, g * 1.01

    assert not backprop_suite(grad_fn=scaled, instances=2, coords=20).passed


def test_independent_g_breaks_identity():
    def shifted(G, p, v):
        return reward(G, p, v) + 1.0

    assert not identity_suite(reward_fn=shifted, instances=5).passed


def test_mc_suite_reports_slope():
    r = mc_enumeration_suite(chain_counts=(50, 500, 5000), repeats=3, tol=0.05)
    assert "slope" in r.detail
