"""Built-in oracle suites run by ``augsearch selfcheck``.

Each suite compares a production code path against an independent
reference (finite differences, exhaustive enumeration, an algebraic
identity) and reports the worst observed error against its tolerance.
The functions under test are injectable so a deliberately broken
implementation can be shown to fail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .imgops import build_transform_table
from .matcher import Jacobian, cosine_gradient, enumerate_jacobian, jacobian_mc, reward
from .nnet import conv_arch, init_network, loss_and_grad, mlp_arch
from .policy import PolicyLayer, PolicyStack, softmax


@dataclass
class SuiteResult:
    name: str
    passed: bool
    metric: float
    threshold: float
    detail: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _cos(v, g):
    return float(v @ g / (np.linalg.norm(v) * np.linalg.norm(g)))


def policy_gradient_suite(grad_fn: Callable = cosine_gradient, instances: int = 20, D: int = 500,
                          T: int = 10, eps: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> SuiteResult:
    """Analytic d cos(v, G softmax(theta)) / d theta against central differences."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        G = Jacobian(rng.normal(size=(D, T)))
        theta = rng.normal(size=T)
        v = rng.normal(size=D)
        analytic = np.asarray(grad_fn(G, theta, v))
        fd = np.empty(T)
        for i in range(T):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += eps
            tm[i] -= eps
            fd[i] = (_cos(v, G.columns @ softmax(tp)) - _cos(v, G.columns @ softmax(tm))) / (2 * eps)
        worst = max(worst, float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-12)))
    ok = worst < tol
    return SuiteResult("policy-gradient", ok, worst, tol,
                       f"max rel err {worst:.2e} over {instances} instances (tol {tol:g})",
                       time.perf_counter() - t0)


def backprop_suite(grad_fn: Callable = loss_and_grad, instances: int = 10, coords: int = 100,
                   eps: float = 1e-4, tol: float = 1e-3, seed: int = 0) -> SuiteResult:
    """Network parameter gradients against central differences on random coordinates."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        shape = (3, 8, 8)
        arch = conv_arch(shape, 4, (4, 6)) if i % 2 == 0 else mlp_arch(shape, 4, (16,))
        net = init_network(arch, rng)
        img = rng.random(shape)
        label = int(rng.integers(4))
        _, g = grad_fn(net, img, label)
        w0 = net.w.copy()
        for j in rng.choice(net.D, size=min(coords, net.D), replace=False):
            net.w = w0.copy()
            net.w[j] += eps
            lp, _ = loss_and_grad(net, img, label)
            net.w = w0.copy()
            net.w[j] -= eps
            lm, _ = loss_and_grad(net, img, label)
            fd = (lp - lm) / (2 * eps)
            err = abs(g[j] - fd) / max(abs(fd), abs(g[j]), 1e-6)
            worst = max(worst, float(err))
        net.w = w0
    ok = worst < tol
    return SuiteResult("backprop", ok, worst, tol,
                       f"max rel err {worst:.2e} over {instances}x{coords} coordinates (tol {tol:g})",
                       time.perf_counter() - t0)


def three_op_table():
    return build_transform_table({"levels": 12, "ops": [{"name": "identity"}, {"name": "invert"},
                                                        {"name": "equalize"}]})


def mc_enumeration_suite(chain_counts=(100, 1000, 10000), repeats: int = 4, tol: float = 0.02,
                         slope_band=(-0.65, -0.35), seed: int = 0) -> SuiteResult:
    """Layer-2 Monte Carlo Jacobian against exact enumeration; checks error and its 1/sqrt(n) decay."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    table = three_op_table()
    net = init_network(mlp_arch((3, 8, 8), 4, (16,)), rng)
    x = rng.random((3, 8, 8))
    label = 1
    stack = PolicyStack(table, [PolicyLayer.uniform(len(table))])
    exact = enumerate_jacobian(net, x, label, stack, 2).columns
    scale = np.linalg.norm(exact)
    errs = []
    for n in chain_counts:
        e = [np.linalg.norm(jacobian_mc(net, x, label, stack, 2, n, rng).columns - exact) / scale
             for _ in range(repeats)]
        errs.append(float(np.sqrt(np.mean(np.square(e)))))
    slope = float(np.polyfit(np.log(chain_counts), np.log(errs), 1)[0])
    ok = errs[-1] < tol and slope_band[0] <= slope <= slope_band[1]
    detail = ", ".join(f"n={n}: {e:.4f}" for n, e in zip(chain_counts, errs)) + f"; log-log slope {slope:.3f}"
    return SuiteResult("mc-vs-enumeration", ok, errs[-1], tol, detail, time.perf_counter() - t0)


def identity_suite(reward_fn: Callable = reward, instances: int = 100, tol: float = 1e-9,
                   seed: int = 0) -> SuiteResult:
    """Expected reward under the policy is zero: |p.r| <= tol * |p| |r|."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        D = int(rng.integers(5, 400))
        T = int(rng.integers(2, 40))
        G = Jacobian(rng.normal(size=(D, T)))
        p = rng.dirichlet(np.ones(T))
        v = rng.normal(size=D)
        r = np.asarray(reward_fn(G, p, v))
        ratio = abs(p @ r) / (np.linalg.norm(p) * np.linalg.norm(r))
        worst = max(worst, float(ratio))
    ok = worst <= tol
    return SuiteResult("zero-expected-reward", ok, worst, tol,
                       f"max |p.r|/(|p||r|) {worst:.1e} over {instances} instances (tol {tol:g})",
                       time.perf_counter() - t0)


def run_selfcheck(seed: int = 0) -> list[SuiteResult]:
    return [
        policy_gradient_suite(seed=seed),
        backprop_suite(seed=seed),
        mc_enumeration_suite(seed=seed),
        identity_suite(seed=seed),
    ]
