"""Stacked categorical augmentation policies and their JSON file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, PolicyLoadError
from .fileio import atomic_write_text
from .imgops import TransformTable, apply_chain, build_transform_table

POLICY_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def table_hash(table: TransformTable) -> str:
    return f"{fnv1a64(table.canonical_listing().encode('utf-8')):016x}"


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("policy logits contain non-finite values")
    z = np.exp(logits - logits.max())
    return z / z.sum()


@dataclass
class PolicyLayer:
    logits: np.ndarray
    terminal: bool = False

    @classmethod
    def uniform(cls, size: int) -> "PolicyLayer":
        return cls(np.zeros(size))

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def __len__(self) -> int:
        return len(self.logits)


def layer_probs(layer: PolicyLayer) -> np.ndarray:
    return layer.probs


@dataclass
class PolicyStack:
    table: TransformTable
    layers: list[PolicyLayer] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.layers)

    def prefix(self, depth: int) -> "PolicyStack":
        return PolicyStack(self.table, self.layers[:depth], dict(self.metadata))

    def append(self, layer: PolicyLayer) -> None:
        if len(layer) != len(self.table):
            raise ValueError(f"layer has {len(layer)} logits, table has {len(self.table)} entries")
        self.layers.append(layer)

    def active_layers(self, skip_terminal: bool = False) -> list[PolicyLayer]:
        if skip_terminal:
            return [l for l in self.layers if not l.terminal]
        return list(self.layers)


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs)
    return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1)


def sample_chains(stack: PolicyStack, depth: int, n: int, rng: np.random.Generator,
                  layers: list[PolicyLayer] | None = None) -> np.ndarray:
    """``(n, depth)`` transform indices; column ``i`` drawn from layer ``i``.

    One uniform vector of length ``n`` is consumed per layer, in layer order.
    """
    layers = stack.layers if layers is None else layers
    if depth > len(layers):
        raise ValueError(f"chain depth {depth} exceeds {len(layers)} policy layers")
    out = np.empty((n, depth), dtype=np.intp)
    for i in range(depth):
        out[:, i] = _inverse_cdf(layers[i].probs, rng.random(n))
    return out


def sample_chain(stack: PolicyStack, depth: int, rng: np.random.Generator) -> list[int]:
    return [int(i) for i in sample_chains(stack, depth, 1, rng)[0]]


def apply_policy(stack: PolicyStack, img: np.ndarray, rng: np.random.Generator,
                 skip_terminal: bool = False) -> np.ndarray:
    """Sample one full-depth chain per image and apply it, layer 1 first."""
    layers = stack.active_layers(skip_terminal)
    if not stack.layers:
        raise ValueError("cannot apply an empty policy")
    img = np.asarray(img, dtype=np.float64)
    single = img.ndim == 3
    batch = img[None] if single else img
    chains = sample_chains(stack, len(layers), len(batch), rng, layers)
    out = apply_chain(batch, chains, stack.table, rng)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# file format


def policy_document(stack: PolicyStack) -> dict:
    return {
        "version": POLICY_VERSION,
        "table_config": stack.table.config,
        "table_hash": table_hash(stack.table),
        "layers": [
            {"logits": [float(x).hex() for x in layer.logits], "terminal": bool(layer.terminal)}
            for layer in stack.layers
        ],
        "metadata": stack.metadata,
    }


def dumps_policy(stack: PolicyStack) -> str:
    return json.dumps(policy_document(stack), indent=1, sort_keys=True) + "\n"


def save_policy(stack: PolicyStack, path: str | Path) -> None:
    atomic_write_text(path, dumps_policy(stack))


def loads_policy(text: str, source: str = "<string>") -> PolicyStack:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyLoadError(f"{source}: not valid JSON ({exc})") from exc
    if doc.get("version") != POLICY_VERSION:
        raise PolicyLoadError(f"{source}: unsupported policy version {doc.get('version')!r}")
    try:
        table = build_transform_table(doc["table_config"])
    except (KeyError, ValueError) as exc:
        raise PolicyLoadError(f"{source}: bad table config ({exc})") from exc
    expected = table_hash(table)
    if doc.get("table_hash") != expected:
        raise PolicyLoadError(
            f"{source}: table hash mismatch (file {doc.get('table_hash')!r}, config gives {expected!r})"
        )
    layers = []
    for i, entry in enumerate(doc.get("layers", [])):
        try:
            logits = np.array([float.fromhex(x) for x in entry["logits"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise PolicyLoadError(f"{source}: layer {i} logits unreadable") from exc
        if len(logits) != len(table):
            raise PolicyLoadError(f"{source}: layer {i} has {len(logits)} logits for {len(table)} transforms")
        layers.append(PolicyLayer(logits, bool(entry.get("terminal", False))))
    return PolicyStack(table, layers, doc.get("metadata", {}))


def load_policy(path: str | Path) -> PolicyStack:
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise PolicyLoadError(f"{path}: {exc}") from exc
    return loads_policy(text, str(path))
