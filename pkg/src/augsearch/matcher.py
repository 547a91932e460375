"""Gradient-matching objective, per-transform rewards and the policy update.

The objective for one image ``x`` is the cosine similarity between the
validation gradient ``v`` and the policy-averaged augmented gradient
``g = G p``, where column ``n`` of ``G`` is the loss gradient on ``t_n``
applied on top of chains sampled from the frozen earlier layers. Its
gradient with respect to the softmax logits is ``p * (r - p.r)`` with the
per-transform reward ``r = G^T (v/|g| - (v.g/|g|^2) g/|g|)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateGradientError, NumericError
from .imgops import TransformTable, apply_chain, apply_transform
from .nnet import Network
from .policy import PolicyLayer, PolicyStack, sample_chains, softmax

NORM_FLOOR = 1e-12


def cosine_similarity(v: np.ndarray, g: np.ndarray) -> float:
    nv, ng = np.linalg.norm(v), np.linalg.norm(g)
    if nv == 0 or ng == 0:
        raise DegenerateGradientError("cosine similarity of a zero-norm gradient")
    return float(np.clip(np.dot(v, g) / (nv * ng), -1.0, 1.0))


@dataclass
class Jacobian:
    """Dense ``D x |T|`` matrix of per-transform gradients."""

    columns: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.columns.shape

    def column(self, n: int) -> np.ndarray:
        return self.columns[:, n]


# ---------------------------------------------------------------------------
# candidate images


def candidate_images(xs: np.ndarray, stack: PolicyStack, k: int, n_chains: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Images whose gradients form the layer-``k`` Jacobian columns.

    Returns ``(S, n, T, C, H, W)``: for each of ``S`` source images, ``n``
    chains drawn from layers ``1..k-1`` (``n = 1`` with an empty chain
    when ``k == 1``), each followed by every table transform. Random
    draws: chain indices, chain application, then the candidate transforms
    in table order, each applied to all ``S * n`` chain images at once.
    """
    if k < 1:
        raise ConfigError("layer index k must be >= 1")
    if n_chains < 1:
        raise ConfigError("n_chains must be >= 1")
    if k - 1 > len(stack):
        raise ConfigError(f"layer {k} needs {k - 1} frozen layers, stack has {len(stack)}")
    xs = np.asarray(xs, dtype=np.float64)
    S = xs.shape[0]
    table = stack.table
    n = 1 if k == 1 else n_chains
    base = np.repeat(xs, n, axis=0)
    if k > 1:
        chains = sample_chains(stack, k - 1, S * n, rng)
        base = apply_chain(base, chains, table, rng)
    T = len(table)
    out = np.empty((S * n, T) + xs.shape[1:])
    for t_idx, t in enumerate(table.entries):
        out[:, t_idx] = apply_transform(base, t, table, rng)
    return out.reshape((S, n, T) + xs.shape[1:])


def _jacobian_from_candidates(net: Network, cands: np.ndarray, label: int) -> Jacobian:
    n, T = cands.shape[:2]
    # transform-major so that each column is one segment of n chain gradients
    flat = np.swapaxes(cands, 0, 1).reshape((T * n,) + cands.shape[2:])
    _, facs = net.factors(flat, np.full(T * n, label))
    return Jacobian(net.weighted_grads(facs, np.full((T, n), 1.0 / n)).T.copy())


def jacobian_analytic(net: Network, x: np.ndarray, label: int, table: TransformTable,
                      rng: np.random.Generator) -> Jacobian:
    """Columns ``grad_w L(t_n(x))`` for every table transform."""
    cands = candidate_images(np.asarray(x)[None], PolicyStack(table), 1, 1, rng)[0]
    return _jacobian_from_candidates(net, cands, label)


def jacobian_mc(net: Network, x: np.ndarray, label: int, stack: PolicyStack, k: int,
                n_chains: int, rng: np.random.Generator) -> Jacobian:
    """Monte Carlo layer-``k`` Jacobian, averaged over ``n_chains`` prior chains."""
    cands = candidate_images(np.asarray(x)[None], stack, k, n_chains, rng)[0]
    return _jacobian_from_candidates(net, cands, label)


def enumerate_jacobian(net: Network, x: np.ndarray, label: int, stack: PolicyStack, k: int) -> Jacobian:
    """Exact layer-``k`` Jacobian by summing over every prior chain.

    Only valid for deterministic tables; cost is ``|T|^(k-1)`` chains.
    """
    table = stack.table
    if any(t.stochastic for t in table.entries):
        raise ConfigError("enumeration needs a table without stochastic transforms")
    T = len(table)
    grids = np.meshgrid(*[np.arange(T)] * (k - 1), indexing="ij")
    chains = np.stack([g.ravel() for g in grids], axis=1) if k > 1 else np.zeros((1, 0), dtype=np.intp)
    weight = np.ones(len(chains))
    for depth in range(k - 1):
        weight *= stack.layers[depth].probs[chains[:, depth]]
    dummy = np.random.default_rng(0)
    base = apply_chain(np.repeat(np.asarray(x)[None], len(chains), axis=0), chains, table, dummy)
    cols = np.zeros((net.D, T))
    for t_idx, t in enumerate(table.entries):
        imgs = apply_transform(base, t, table, dummy)
        _, facs = net.factors(imgs, np.full(len(chains), label))
        cols[:, t_idx] = net.weighted_grads(facs, weight[None])[0]
    return Jacobian(cols)


# ---------------------------------------------------------------------------
# rewards


def _check_simplex(p: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.min() < -tol or abs(p.sum() - 1.0) > tol:
        raise ConfigError("weights are not a probability vector")
    return p


def avg_gradient(G: Jacobian, p: np.ndarray) -> np.ndarray:
    p = _check_simplex(p)
    if G.columns.shape[1] != len(p):
        raise ConfigError("Jacobian and policy sizes differ")
    return G.columns @ p


def projection_vector(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``v/|g| - (v.g/|g|^2) g/|g|``; rows are independent when 2-D."""
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    ng = np.linalg.norm(g, axis=-1, keepdims=True)
    if np.any(ng == 0):
        raise DegenerateGradientError("augmented gradient has zero norm")
    ng = np.maximum(ng, NORM_FLOOR)
    vg = np.sum(v * g, axis=-1, keepdims=True)
    return v / ng - (vg / ng**2) * (g / ng)


def reward(G: Jacobian, p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-transform reward with ``g`` formed from the same columns."""
    g = avg_gradient(G, p)
    return G.columns.T @ projection_vector(v, g)


def regularized_reward(rewards, c: float) -> np.ndarray:
    """Mean over images minus ``c`` times the population standard deviation."""
    R = np.asarray(rewards, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] == 0:
        raise ConfigError("need at least one reward vector")
    if c < 0:
        raise ConfigError("regularization coefficient must be >= 0")
    return R.mean(axis=0) - c * R.std(axis=0)


def policy_grad(layer: PolicyLayer | np.ndarray, r: np.ndarray) -> np.ndarray:
    """Gradient of ``p(theta) . r`` through the softmax: ``p * (r - p.r)``."""
    p = layer.probs if isinstance(layer, PolicyLayer) else np.asarray(layer, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if p.shape != r.shape:
        raise ConfigError("reward and policy sizes differ")
    return p * (r - p @ r)


def cosine_gradient(G: Jacobian, logits: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact gradient of ``cos(v, G softmax(logits))`` with respect to the logits."""
    p = softmax(logits)
    return policy_grad(p, reward(G, p, v / np.linalg.norm(v)))


# ---------------------------------------------------------------------------
# streaming evaluation


@dataclass
class ImageRewards:
    rewards: np.ndarray  # (S, T)
    g_norm: np.ndarray  # (S,)
    cosine: np.ndarray  # (S,)
    g: np.ndarray | None = None  # (S, D), kept only on request


def _segment_pass(net: Network, imgs: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                  v: np.ndarray, budget: int, *, g_override: np.ndarray | None = None,
                  keep_g: bool = False):
    """Weighted gradients per segment, then dot products with each segment's projection.

    ``imgs`` is ``(S, M, C, H, W)``; ``weights`` ``(S, M)``; ``v`` ``(S, D)``.
    Gradient factors are kept in memory when they fit in ``budget`` bytes,
    otherwise they are recomputed chunk by chunk in a second pass.
    """
    S, M = weights.shape
    lab = np.repeat(labels, M)
    per_ex = net.factor_nbytes() + imgs[0, 0].nbytes
    if S * M * per_ex <= budget:
        _, facs = net.factors(imgs.reshape((S * M,) + imgs.shape[2:]), lab)
        g = net.weighted_grads(facs, weights) if g_override is None else g_override
        u = projection_vector(v, g)
        dots = net.grad_dots(facs, u)
    else:
        step = max(1, budget // (S * per_ex))
        chunks = [slice(s, min(s + step, M)) for s in range(0, M, step)]

        def chunk_factors(sl):
            m = sl.stop - sl.start
            sub = imgs[:, sl].reshape((S * m,) + imgs.shape[2:])
            return net.factors(sub, np.repeat(labels, m))[1]

        if g_override is None:
            g = np.zeros((S, net.D))
            for sl in chunks:
                g += net.weighted_grads(chunk_factors(sl), weights[:, sl])
        else:
            g = g_override
        u = projection_vector(v, g)
        dots = np.concatenate([net.grad_dots(chunk_factors(sl), u) for sl in chunks], axis=1)
    return g, dots


def image_rewards(net: Network, xs: np.ndarray, labels: np.ndarray, stack: PolicyStack, k: int,
                  probs: np.ndarray, v: np.ndarray, n_chains: int, rng: np.random.Generator, *,
                  shared_samples: bool = True, memory_budget: int = 256 << 20,
                  keep_g: bool = False) -> ImageRewards:
    """Per-image layer-``k`` rewards without materialising any Jacobian.

    ``probs`` is layer ``k``'s current distribution and ``v`` either one
    validation gradient ``(D,)`` or one per image ``(S, D)``. With
    ``shared_samples`` the averaged gradient is ``G p`` from the same
    candidate gradients as the rewards; otherwise it is estimated from
    ``n_chains`` independently sampled full ``k``-chains.
    """
    xs = np.asarray(xs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    S = len(xs)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), (S, net.D))
    probs = _check_simplex(probs)
    cands = candidate_images(xs, stack, k, n_chains, rng)
    n, T = cands.shape[1:3]
    M = n * T
    imgs = cands.reshape((S, M) + xs.shape[1:])
    weights = np.tile(probs / n, n)[None].repeat(S, axis=0)

    g_override = None
    if not shared_samples:
        full = PolicyStack(stack.table, list(stack.layers[: k - 1]) + [PolicyLayer(np.log(np.maximum(probs, 1e-300)))])
        chains = sample_chains(full, k, S * n_chains, rng)
        aug = apply_chain(np.repeat(xs, n_chains, axis=0), chains, stack.table, rng)
        _, facs = net.factors(aug, np.repeat(labels, n_chains))
        g_override = net.weighted_grads(facs, np.full((S, n_chains), 1.0 / n_chains))

    g, dots = _segment_pass(net, imgs, labels, weights, v, memory_budget, g_override=g_override)
    r = dots.reshape(S, n, T).mean(axis=1)
    g_norm = np.linalg.norm(g, axis=1)
    cos = np.sum(v * g, axis=1) / (np.linalg.norm(v, axis=1) * np.maximum(g_norm, NORM_FLOOR))
    return ImageRewards(r, g_norm, cos, g if keep_g else None)


# ---------------------------------------------------------------------------
# Adam ascent


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.025
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, layer: PolicyLayer, grad: np.ndarray) -> tuple[PolicyLayer, AdamState]:
    """One bias-corrected Adam *ascent* step on the layer's logits."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape or grad.shape != layer.logits.shape:
        raise ConfigError("gradient, optimizer state and logits differ in size")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NumericError(f"refusing Adam update: non-finite gradient at {bad[:5].tolist()}")
    s = state.copy()
    s.step += 1
    s.m = s.beta1 * s.m + (1 - s.beta1) * grad
    s.v = s.beta2 * s.v + (1 - s.beta2) * grad * grad
    m_hat = s.m / (1 - s.beta1**s.step)
    v_hat = s.v / (1 - s.beta2**s.step)
    logits = layer.logits + s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
    return PolicyLayer(logits, layer.terminal), s
