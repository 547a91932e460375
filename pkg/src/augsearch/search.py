"""Progressive layer-by-layer policy search."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, sample_images, sample_val_batch
from .errors import AugSearchError, ConfigError
from .imgops import TransformTable, describe
from .matcher import AdamState, adam_step, image_rewards, policy_grad, regularized_reward
from .nnet import Network, batch_grad, per_example_grads
from .policy import PolicyLayer, PolicyStack

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    iterations_per_layer: int = 512
    lr: float = 0.025
    c: float = 1.0
    images_per_iter: int = 16
    n_chains: int = 16
    val_batch: int = 64
    max_layers: int = 8
    identity_threshold: float = 0.5
    seed: int = 0
    class_conditioned_val: bool = False
    shared_samples: bool = True
    uniform_policy: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    memory_budget_mb: int = 256

    def validate(self) -> None:
        for name in ("images_per_iter", "n_chains", "val_batch", "max_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.iterations_per_layer < 0:
            raise ConfigError("iterations_per_layer must be >= 0")
        if self.c < 0:
            raise ConfigError("c must be >= 0")
        if not 0 < self.identity_threshold <= 1:
            raise ConfigError("identity_threshold must be in (0, 1]")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class IterationRecord:
    iteration: int
    layer: int
    cosine_similarity: float
    g_norm: float
    entropy: float
    top3: list[tuple[str, float]]
    elapsed_ms: float


@dataclass
class LayerSummary:
    layer: int
    iterations: int
    probs: np.ndarray
    identity_prob: float
    terminal: bool


@dataclass
class SearchTrace:
    records: list[IterationRecord] = field(default_factory=list)
    layers: list[LayerSummary] = field(default_factory=list)
    improvement: list[tuple[float, float]] | None = None


class SearchError(AugSearchError):
    """A layer failed; ``stack`` and ``trace`` hold the partial result."""

    def __init__(self, message, stack, trace, cause):
        super().__init__(message)
        self.stack = stack
        self.trace = trace
        self.exit_code = getattr(cause, "exit_code", 1)


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _top3(table: TransformTable, p: np.ndarray) -> list[tuple[str, float]]:
    idx = np.argsort(-p, kind="stable")[:3]
    return [(describe(table, int(i)), float(p[i])) for i in idx]


def _val_gradients(net, val, labels, cfg, rng):
    """Unit-norm validation gradient(s): one shared, or one per search image."""
    if cfg.class_conditioned_val:
        out = np.empty((len(labels), net.D))
        for i, lab in enumerate(labels):
            size = min(cfg.val_batch, int(np.sum(val.labels == lab)))
            imgs, labs = sample_val_batch(val, size, rng, label=int(lab))
            out[i] = batch_grad(net, imgs, labs)
        return out / np.linalg.norm(out, axis=1, keepdims=True)
    imgs, labs = sample_val_batch(val, min(cfg.val_batch, len(val)), rng)
    v = batch_grad(net, imgs, labs)
    return v / np.linalg.norm(v)


def search_layer(net: Network, stack: PolicyStack, train: Dataset, val: Dataset, cfg: SearchConfig,
                 rng: np.random.Generator, on_record=None) -> tuple[PolicyLayer, list[IterationRecord]]:
    """Optimise layer ``len(stack) + 1`` with the existing layers frozen."""
    cfg.validate()
    k = len(stack) + 1
    T = len(stack.table)
    layer = PolicyLayer.uniform(T)
    records: list[IterationRecord] = []
    if cfg.uniform_policy:
        return layer, records
    state = AdamState.zeros(T, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    budget = cfg.memory_budget_mb << 20
    for it in range(cfg.iterations_per_layer):
        t0 = time.perf_counter()
        try:
            xs, labels = sample_images(train, cfg.images_per_iter, rng)
            v = _val_gradients(net, val, labels, cfg, rng)
            p = layer.probs
            res = image_rewards(net, xs, labels, stack, k, p, v, cfg.n_chains, rng,
                                shared_samples=cfg.shared_samples, memory_budget=budget)
            r = regularized_reward(res.rewards, cfg.c)
            layer, state = adam_step(state, layer, policy_grad(p, r))
        except AugSearchError as exc:
            exc.args = (f"layer {k}, iteration {it}: {exc}",)
            exc.iteration = it
            raise
        p = layer.probs
        rec = IterationRecord(
            iteration=it,
            layer=k,
            cosine_similarity=float(res.cosine.mean()),
            g_norm=float(res.g_norm.mean()),
            entropy=_entropy(p),
            top3=_top3(stack.table, p),
            elapsed_ms=(time.perf_counter() - t0) * 1e3,
        )
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return layer, records


def identity_converged(layer: PolicyLayer, table: TransformTable, threshold: float = 0.5) -> bool:
    return bool(layer.probs[table.identity_index] >= threshold)


def progressive_search(net: Network, train: Dataset, val: Dataset, table: TransformTable,
                       cfg: SearchConfig, on_record=None) -> tuple[PolicyStack, SearchTrace]:
    """Stack searched layers until the newest one is identity-dominated or ``max_layers`` is hit."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    stack = PolicyStack(table, metadata={"config_digest": cfg.digest(), "seed": cfg.seed})
    trace = SearchTrace()
    for k in range(1, cfg.max_layers + 1):
        frozen = [l.logits.copy() for l in stack.layers]
        try:
            layer, records = search_layer(net, stack, train, val, cfg, rng, on_record)
        except AugSearchError as exc:
            raise SearchError(str(exc), stack, trace, exc) from exc
        assert all(np.array_equal(a, b.logits) for a, b in zip(frozen, stack.layers))
        converged = identity_converged(layer, table, cfg.identity_threshold)
        layer.terminal = converged
        stack.append(layer)
        trace.records.extend(records)
        p = layer.probs
        trace.layers.append(LayerSummary(k, len(records), p, float(p[table.identity_index]), converged))
        log.info("layer %d done: p(identity)=%.3f top=%s", k, p[table.identity_index], _top3(table, p))
        if converged:
            break
    return stack, trace


def similarity_improvement_stats(net: Network, stack: PolicyStack, train: Dataset, val: Dataset,
                                 n_images: int = 256, rng: np.random.Generator | None = None, *,
                                 n_chains: int = 16, val_batch: int = 64,
                                 class_conditioned_val: bool = False,
                                 memory_budget_mb: int = 256) -> list[tuple[float, float]]:
    """Mean and std over images of ``cos(v, g_d(x)) - cos(v, grad L(x))`` for each depth ``d``.

    ``g_d`` is the policy-averaged gradient of ``x`` under the first ``d``
    layers (exact over layer ``d``, Monte Carlo over earlier layers).
    Entry 0 is the un-augmented baseline and is identically zero. The same
    ``(x, v)`` pairs are used at every depth.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    xs, labels = sample_images(train, n_images, rng)
    if class_conditioned_val:
        v = np.empty((n_images, net.D))
        for i, lab in enumerate(labels):
            size = min(val_batch, int(np.sum(val.labels == lab)))
            imgs, labs = sample_val_batch(val, size, rng, label=int(lab))
            v[i] = batch_grad(net, imgs, labs)
    else:
        v = np.empty((n_images, net.D))
        for i in range(n_images):
            imgs, labs = sample_val_batch(val, min(val_batch, len(val)), rng)
            v[i] = batch_grad(net, imgs, labs)
    vn = np.linalg.norm(v, axis=1)
    base = per_example_grads(net, xs, labels)
    cos0 = np.sum(v * base, axis=1) / (vn * np.linalg.norm(base, axis=1))
    out = [(0.0, 0.0)]
    budget = memory_budget_mb << 20
    chunk = 16
    for d in range(1, len(stack) + 1):
        p = stack.layers[d - 1].probs
        prefix = stack.prefix(d - 1)
        cos = np.empty(n_images)
        for s in range(0, n_images, chunk):
            sl = slice(s, s + chunk)
            res = image_rewards(net, xs[sl], labels[sl], prefix, d, p, v[sl], n_chains, rng,
                                memory_budget=budget)
            cos[sl] = res.cosine
        imp = cos - cos0
        out.append((float(imp.mean()), float(imp.std())))
    return out


def operation_distribution(stack: PolicyStack) -> list[dict[str, float]]:
    """Per layer, each operation's probability summed over its magnitude levels."""
    table = stack.table
    ops = table.ops()
    rows = []
    for layer in stack.layers:
        p = layer.probs
        rows.append({op: float(p[table.op_indices(op)].sum()) for op in ops})
    return rows


def op_mass(layer: PolicyLayer, table: TransformTable, op: str) -> float:
    return float(layer.probs[table.op_indices(op)].sum())
