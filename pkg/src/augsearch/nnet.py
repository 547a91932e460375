"""Small proxy classifier with a hand-written backward pass.

Every parametrised layer produces *gradient factors* per example: an input
tensor ``A`` of shape ``(N, P, K)`` and an output-delta tensor ``Delta`` of
shape ``(N, P, O)`` such that the example's weight gradient is
``sum_p Delta[p] outer A[p]`` and its bias gradient ``sum_p Delta[p]``
(``P`` is 1 for dense layers and the number of output pixels for a
convolution). Weighted sums of per-example gradients and dot products of
per-example gradients with a fixed vector are then cheap matrix products,
without ever forming the ``N x D`` gradient matrix.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataFormatError, TrainingError

CHECKPOINT_MAGIC = b"AUGSNET\x00"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# layers


class _Dense:
    def __init__(self, n_in, n_out):
        self.shapes = [(n_out, n_in), (n_out,)]
        self.fan_in = n_in

    def forward(self, a, W, b):
        return a @ W.T + b, a

    def backward(self, dz, a, W, need_input):
        factor = (a[:, None, :], dz[:, None, :])
        return (dz @ W if need_input else None), factor


class _Conv3x3:
    """3x3 convolution, stride 1, zero padding 1, channel-last activations."""

    def __init__(self, c_in, c_out):
        self.shapes = [(c_out, c_in * 9), (c_out,)]
        self.fan_in = c_in * 9

    def forward(self, a, W, b):
        n, h, w, c = a.shape
        padded = np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)))
        # (N, H, W, C, 3, 3) -> (N, HW, C*9) with (c, ky, kx) ordering
        patches = sliding_window_view(padded, (3, 3), axis=(1, 2)).reshape(n, h * w, c * 9)
        z = patches @ W.T + b
        return z.reshape(n, h, w, -1), (patches, a.shape)

    def backward(self, dz, cache, W, need_input):
        patches, shape = cache
        n, h, w, c = shape
        dz = dz.reshape(n, h * w, -1)
        factor = (patches, dz)
        if not need_input:
            return None, factor
        dpatches = (dz @ W).reshape(n, h, w, c, 3, 3)
        dpad = np.zeros((n, h + 2, w + 2, c))
        for ky in range(3):
            for kx in range(3):
                dpad[:, ky : ky + h, kx : kx + w, :] += dpatches[..., ky, kx]
        return dpad[:, 1:-1, 1:-1, :], factor


class _ReLU:
    shapes: list = []

    def forward(self, a):
        mask = a > 0
        return a * mask, mask

    def backward(self, d, mask):
        return d * mask


class _MaxPool2:
    shapes: list = []

    def forward(self, a):
        n, h, w, c = a.shape
        if h % 2 or w % 2:
            raise ConfigError("max-pool needs even spatial dims")
        blocks = a.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (arg, a.shape)

    def backward(self, d, cache):
        arg, (n, h, w, c) = cache
        blocks = np.zeros(d.shape + (4,))
        np.put_along_axis(blocks, arg[..., None], d[..., None], axis=-1)
        return blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


class _GlobalAvgPool:
    shapes: list = []

    def forward(self, a):
        return a.mean(axis=(1, 2)), a.shape

    def backward(self, d, shape):
        n, h, w, c = shape
        return np.broadcast_to(d[:, None, None, :] / (h * w), shape)


# ---------------------------------------------------------------------------
# network


def _build_layers(arch: dict):
    kind = arch.get("kind")
    c, h, w = arch["input"]
    classes = int(arch["classes"])
    if kind == "mlp":
        layers = []
        width = c * h * w
        for hidden in arch.get("hidden", [32]):
            layers += [_Dense(width, int(hidden)), _ReLU()]
            width = int(hidden)
        layers.append(_Dense(width, classes))
        return layers
    if kind == "conv":
        c1, c2 = arch.get("channels", [48, 64])
        return [
            _Conv3x3(c, c1), _ReLU(), _MaxPool2(),
            _Conv3x3(c1, c2), _ReLU(), _GlobalAvgPool(),
            _Dense(c2, classes),
        ]
    raise ConfigError(f"unknown architecture kind {kind!r}")


def mlp_arch(input_shape: Sequence[int], classes: int, hidden: Sequence[int] = (32,),
             standardize: bool = False) -> dict:
    """``standardize`` rescales each input image to zero mean and unit variance."""
    return {"kind": "mlp", "input": [int(s) for s in input_shape], "classes": int(classes),
            "hidden": [int(s) for s in hidden], "standardize": bool(standardize)}


def conv_arch(input_shape: Sequence[int], classes: int, channels: Sequence[int] = (48, 64),
              standardize: bool = False) -> dict:
    return {"kind": "conv", "input": [int(s) for s in input_shape], "classes": int(classes),
            "channels": [int(s) for s in channels], "standardize": bool(standardize)}


STANDARDIZE_EPS = 1e-2


def standardize_images(X: np.ndarray) -> np.ndarray:
    """Per-image ``(x - mean) / sqrt(var + eps^2)`` over all pixels and channels."""
    axes = tuple(range(1, X.ndim))
    mu = X.mean(axis=axes, keepdims=True)
    var = X.var(axis=axes, keepdims=True)
    return (X - mu) / np.sqrt(var + STANDARDIZE_EPS**2)


class Network:
    """Proxy classifier with flat float64 weights ``w`` of length ``D``."""

    def __init__(self, arch: dict, weights: np.ndarray | None = None):
        self.arch = json.loads(json.dumps(arch))
        self.layers = _build_layers(self.arch)
        self.param_layers = [l for l in self.layers if l.shapes]
        self.shapes = [s for l in self.param_layers for s in l.shapes]
        self.sizes = [math.prod(s) for s in self.shapes]
        self.D = sum(self.sizes)
        self.input_shape = tuple(self.arch["input"])
        self.classes = int(self.arch["classes"])
        if weights is None:
            weights = np.zeros(self.D)
        self.set_flat(weights)

    # flat parameter vector
    def flat(self) -> np.ndarray:
        return self.w.copy()

    def set_flat(self, weights: np.ndarray) -> None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (self.D,):
            raise ConfigError(f"expected {self.D} weights, got shape {weights.shape}")
        self.w = weights.copy()

    def unflatten(self, flat: np.ndarray | None = None) -> list[np.ndarray]:
        flat = self.w if flat is None else np.asarray(flat)
        out, pos = [], 0
        for shape, size in zip(self.shapes, self.sizes):
            out.append(flat[pos : pos + size].reshape(shape))
            pos += size
        return out

    @staticmethod
    def flatten(params: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.ravel(p) for p in params])

    def copy(self) -> "Network":
        return Network(self.arch, self.w)

    def descriptor(self) -> str:
        return json.dumps(self.arch, sort_keys=True, separators=(",", ":"))

    # passes
    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1:] != self.input_shape:
            raise ConfigError(f"input shape {X.shape[1:]} does not match network input {self.input_shape}")
        return X

    def _entry(self, X):
        if self.arch.get("standardize"):
            X = standardize_images(X)
        if self.arch["kind"] == "mlp":
            return X.reshape(X.shape[0], -1)
        return X.transpose(0, 2, 3, 1)

    def _forward(self, X, keep: bool):
        params = self.unflatten()
        a = self._entry(X)
        caches = []
        pi = 0
        for layer in self.layers:
            if layer.shapes:
                a, cache = layer.forward(a, params[pi], params[pi + 1])
                pi += 2
            else:
                a, cache = layer.forward(a)
            if keep:
                caches.append(cache)
        return a, caches

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = self._check_input(X)
        return self._forward(X, keep=False)[0]

    def factors(self, X: np.ndarray, labels: np.ndarray):
        """Per-example losses and gradient factors, one ``(A, Delta)`` per param layer."""
        X = self._check_input(X)
        labels = np.asarray(labels, dtype=np.intp)
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= self.classes:
            raise ConfigError(f"label out of range for {self.classes} classes")
        logits, caches = self._forward(X, keep=True)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(len(labels))
        losses = logz - shifted[rows, labels]
        d = np.exp(shifted - logz[:, None])
        d[rows, labels] -= 1.0

        params = self.unflatten()
        pi = len(params)
        found = []
        first_param = next(i for i, l in enumerate(self.layers) if l.shapes)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.shapes:
                pi -= 2
                d, fac = layer.backward(d, caches[i], params[pi], need_input=i > first_param)
                found.append(fac)
            else:
                d = layer.backward(d, caches[i])
        return losses, found[::-1]

    # factor algebra
    def weighted_grads(self, factors, weights: np.ndarray) -> np.ndarray:
        """Weighted sums of per-example gradients.

        ``weights`` has shape ``(S, M)`` with ``S * M`` equal to the number
        of examples (row-major); returns ``(S, D)``.
        """
        weights = np.asarray(weights, dtype=np.float64)
        S, M = weights.shape
        out = np.empty((S, self.D))
        pos = 0
        for A, Dl in factors:
            P = A.shape[1]
            wd = (Dl * weights.reshape(-1, 1, 1)).reshape(S, M * P, -1)
            gW = np.matmul(wd.transpose(0, 2, 1), A.reshape(S, M * P, -1))
            gb = wd.sum(axis=1)
            nW = gW.shape[1] * gW.shape[2]
            out[:, pos : pos + nW] = gW.reshape(S, -1)
            out[:, pos + nW : pos + nW + gb.shape[1]] = gb
            pos += nW + gb.shape[1]
        return out

    def grad_dots(self, factors, U: np.ndarray) -> np.ndarray:
        """Dot products of each example's gradient with its segment's ``U`` row.

        ``U`` has shape ``(S, D)``; the examples form ``S`` equal row-major
        segments. Returns ``(S, M)``.
        """
        U = np.asarray(U, dtype=np.float64)
        S = U.shape[0]
        N = factors[0][0].shape[0]
        M = N // S
        out = np.zeros((S, M))
        pos = 0
        for A, Dl in factors:
            P, K = A.shape[1], A.shape[2]
            O = Dl.shape[2]
            UW = U[:, pos : pos + O * K].reshape(S, O, K)
            ub = U[:, pos + O * K : pos + O * K + O]
            pos += O * K + O
            T = np.matmul(Dl.reshape(S, M * P, O), UW)
            dots = (T * A.reshape(S, M * P, K)).sum(axis=2)
            dots += np.einsum("sno,so->sn", Dl.reshape(S, M * P, O), ub)
            out += dots.reshape(S, M, P).sum(axis=2)
        return out

    def factor_nbytes(self) -> int:
        """Approximate bytes of gradient factors stored per example."""
        total = 0
        probe = np.zeros((1,) + self.input_shape)
        _, caches = self._forward(probe, keep=True)
        for layer, cache in zip(self.layers, caches):
            if isinstance(layer, _Dense):
                total += layer.shapes[0][1] + layer.shapes[0][0]
            elif isinstance(layer, _Conv3x3):
                patches = cache[0]
                total += patches.shape[1] * (patches.shape[2] + layer.shapes[0][0])
        return 8 * total


# ---------------------------------------------------------------------------
# public operations


def init_network(arch: dict, rng: np.random.Generator) -> Network:
    """He-normal weights, zero biases."""
    net = Network(arch)
    params = []
    for layer in net.param_layers:
        (o, k), _ = layer.shapes
        params.append(rng.normal(0.0, math.sqrt(2.0 / layer.fan_in), size=(o, k)))
        params.append(np.zeros(o))
    net.set_flat(Network.flatten(params))
    return net


def forward(net: Network, img: np.ndarray) -> np.ndarray:
    """Class scores for one image ``(C,H,W)`` or a batch."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return net.logits(img[None])[0]
    return net.logits(img)


def loss_and_grad(net: Network, img: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    losses, facs = net.factors(np.asarray(img)[None], np.array([label]))
    return float(losses[0]), net.weighted_grads(facs, np.ones((1, 1)))[0]


def per_example_grads(net: Network, imgs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Dense ``(N, D)`` matrix of per-example gradients; for small problems and tests."""
    _, facs = net.factors(imgs, labels)
    n = len(labels)
    return net.weighted_grads(facs, np.ones((n, 1)))


def batch_grad(net: Network, imgs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mean gradient over a batch."""
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ConfigError("batch_grad needs a non-empty batch")
    _, facs = net.factors(imgs, labels)
    return net.weighted_grads(facs, np.full((1, n), 1.0 / n))[0]


def mean_loss(net: Network, imgs: np.ndarray, labels: np.ndarray, chunk: int = 1024) -> tuple[float, float]:
    """Mean cross-entropy and accuracy."""
    total, correct = 0.0, 0
    for s in range(0, len(labels), chunk):
        logits = net.logits(imgs[s : s + chunk])
        lab = np.asarray(labels[s : s + chunk])
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        total += float((logz - shifted[np.arange(len(lab)), lab]).sum())
        correct += int((logits.argmax(axis=1) == lab).sum())
    n = len(labels)
    return total / n, correct / n


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class TrainResult:
    net: Network
    initial_loss: float
    final_loss: float
    final_accuracy: float
    curve: list[dict] = field(default_factory=list)


def pretrain(net: Network, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """Mini-batch SGD with momentum; returns a trained copy and the loss curve."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n = len(labels)
    if n == 0:
        raise ConfigError("cannot pretrain on an empty dataset")
    if cfg.epochs < 0 or cfg.batch_size < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    initial, acc = mean_loss(net, images, labels)
    curve = [{"epoch": 0, "loss": initial, "accuracy": acc}]
    velocity = np.zeros(net.D)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            losses, facs = net.factors(images[idx], labels[idx])
            loss = float(losses.mean())
            g = net.weighted_grads(facs, np.full((1, len(idx)), 1.0 / len(idx)))[0]
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                raise TrainingError(
                    f"training diverged at epoch {epoch}, step {step} (loss={loss})",
                    epoch=epoch, step=step, last_loss=loss,
                )
            if cfg.weight_decay:
                g = g + cfg.weight_decay * net.w
            velocity = cfg.momentum * velocity - cfg.lr * g
            net.w = net.w + velocity
            running += loss * len(idx)
            step += 1
        loss, acc = mean_loss(net, images, labels)
        if not math.isfinite(loss):
            raise TrainingError(f"training diverged after epoch {epoch}", epoch=epoch, step=step, last_loss=loss)
        curve.append({"epoch": epoch, "loss": loss, "accuracy": acc, "batch_loss": running / n})
    final, acc = curve[-1]["loss"], curve[-1]["accuracy"]
    return TrainResult(net=net, initial_loss=initial, final_loss=final, final_accuracy=acc, curve=curve)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(net: Network) -> bytes:
    desc = net.descriptor().encode("utf-8")
    header = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(desc)) + desc
    return header + struct.pack("<Q", net.D) + net.w.astype("<f8").tobytes()


def save_checkpoint(net: Network, path: str | Path) -> None:
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(net))


def load_checkpoint(path: str | Path) -> Network:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a network checkpoint")
    try:
        version, dlen = struct.unpack_from("<II", blob, 8)
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        desc = blob[16 : 16 + dlen].decode("utf-8")
        (D,) = struct.unpack_from("<Q", blob, 16 + dlen)
        body = blob[24 + dlen :]
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: truncated checkpoint header") from exc
    if len(body) != 8 * D:
        raise DataFormatError(f"{path}: expected {D} weights, found {len(body) / 8:g}")
    net = Network(json.loads(desc))
    if net.D != D:
        raise DataFormatError(f"{path}: descriptor implies D={net.D}, header says {D}")
    net.set_flat(np.frombuffer(body, dtype="<f8").astype(np.float64))
    return net
