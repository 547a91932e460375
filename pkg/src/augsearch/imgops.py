"""Transformation set and image operations.

Images are float64 arrays in channel-planar layout ``(C, H, W)`` with
intensities in ``[0, 1]``. Every operation also accepts a batch
``(N, C, H, W)``; stochastic operations draw independently per image.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ConfigError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


MAGNITUDE_OPS = (
    "shear_x",
    "shear_y",
    "translate_x",
    "translate_y",
    "rotate",
    "solarize",
    "posterize",
    "contrast",
    "color",
    "brightness",
    "sharpness",
)
PLAIN_OPS = ("identity", "equalize", "auto_contrast", "invert", "cutout", "flips", "crop")
ALL_OPS = frozenset(MAGNITUDE_OPS + PLAIN_OPS)
STOCHASTIC_OPS = frozenset({"flips", "crop", "cutout"})

# ITU-R 601-2 luma, as used by PIL's "L" conversion.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Transform:
    op: str
    level: int | None = None
    magnitude: float | None = None

    @property
    def name(self) -> str:
        if self.level is None:
            return self.op
        return f"{self.op}@{self.level}"

    @property
    def stochastic(self) -> bool:
        return self.op in STOCHASTIC_OPS


@dataclass(frozen=True)
class TransformTable:
    """Ordered transform list; the index defines each policy layer's categorical axis."""

    entries: tuple[Transform, ...]
    identity_index: int
    fill: float = 0.5
    cutout_size: int = 16
    cutout_fill: float = 0.5
    crop_pad: int = 4
    levels: int = 12
    config: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Transform:
        return self.entries[i]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.entries]

    def op_indices(self, op: str) -> list[int]:
        return [i for i, t in enumerate(self.entries) if t.op == op]

    def ops(self) -> list[str]:
        seen: list[str] = []
        for t in self.entries:
            if t.op not in seen:
                seen.append(t.op)
        return seen

    def canonical_listing(self) -> str:
        """Stable text form of the table, used for hashing."""
        lines = [
            f"fill={self.fill!r};cutout_size={self.cutout_size};"
            f"cutout_fill={self.cutout_fill!r};crop_pad={self.crop_pad}"
        ]
        for t in self.entries:
            mag = "-" if t.magnitude is None else float(t.magnitude).hex()
            lvl = "-" if t.level is None else str(t.level)
            lines.append(f"{t.op}|{lvl}|{mag}")
        return "\n".join(lines)


def magnitude_levels(lo: float, hi: float, n: int) -> list[float]:
    """``n`` uniformly spaced magnitudes from ``lo`` to ``hi`` inclusive."""
    if not lo < hi:
        raise ConfigError(f"magnitude range must satisfy lo < hi, got [{lo}, {hi}]")
    if n < 2:
        raise ConfigError(f"need at least 2 magnitude levels, got {n}")
    return np.linspace(lo, hi, n).tolist()


# ---------------------------------------------------------------------------
# configuration


def load_table_config(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def standard_config(image_size: int = 32) -> dict:
    """The shipped 18-operation config; cutout/crop sizes scale with ``image_size``."""
    text = resources.files("augsearch").joinpath("standard.toml").read_text("utf-8")
    cfg = tomllib.loads(text)
    if image_size != 32:
        scale = image_size / 32
        for op in cfg["ops"]:
            if op["name"] == "cutout":
                op["size"] = max(1, int(round(op["size"] * scale)))
            elif op["name"] == "crop":
                op["pad"] = max(1, int(round(op["pad"] * scale)))
    return cfg


def build_transform_table(config: Mapping[str, Any]) -> TransformTable:
    """Expand an op config into the ordered transform table.

    ``config`` has the shape of ``standard.toml``: an integer ``levels``,
    optional ``fill`` and an ordered ``ops`` list of ``{"name": ..., ...}``
    entries. Magnitude-carrying ops need a two-element ``range``.
    """
    levels = int(config.get("levels", 12))
    fill = float(config.get("fill", 0.5))
    ops = config.get("ops")
    if not ops:
        raise ConfigError("transform config lists no ops")

    seen: set[str] = set()
    entries: list[Transform] = []
    extras = {"cutout_size": 16, "cutout_fill": 0.5, "crop_pad": 4}
    for spec in ops:
        name = spec.get("name")
        if name not in ALL_OPS:
            raise ConfigError(f"unknown operation {name!r}")
        if name in seen:
            raise ConfigError(f"duplicate operation {name!r}")
        seen.add(name)
        if name in MAGNITUDE_OPS:
            if "range" not in spec:
                raise ConfigError(f"operation {name!r} needs a magnitude range")
            lo, hi = spec["range"]
            for level, m in enumerate(magnitude_levels(float(lo), float(hi), levels)):
                entries.append(Transform(name, level, m))
        else:
            if "range" in spec:
                raise ConfigError(f"operation {name!r} takes no magnitude range")
            if name == "cutout":
                extras["cutout_size"] = int(spec.get("size", 16))
                extras["cutout_fill"] = float(spec.get("fill", fill))
            elif name == "crop":
                extras["crop_pad"] = int(spec.get("pad", 4))
            entries.append(Transform(name))

    if "identity" not in seen:
        raise ConfigError("transform config must include 'identity'")
    identity_index = next(i for i, t in enumerate(entries) if t.op == "identity")
    return TransformTable(
        entries=tuple(entries),
        identity_index=identity_index,
        fill=fill,
        levels=levels,
        config=dict(config),
        **extras,
    )


def standard_table(image_size: int = 32) -> TransformTable:
    return build_transform_table(standard_config(image_size))


# ---------------------------------------------------------------------------
# primitives


def _as_batch(img: np.ndarray) -> tuple[np.ndarray, bool]:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img[None], True
    if img.ndim != 4:
        raise ConfigError(f"expected (C,H,W) or (N,C,H,W) image, got shape {img.shape}")
    return img, False


def _unbatch(out: np.ndarray, single: bool) -> np.ndarray:
    return out[0] if single else out


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def mirror(img: np.ndarray) -> np.ndarray:
    """Horizontal mirror."""
    return np.ascontiguousarray(np.asarray(img)[..., ::-1])


def cutout_at(img: np.ndarray, size: int, center: tuple[int, int], fill: float = 0.5) -> np.ndarray:
    if size < 0:
        raise ConfigError("cutout size must be >= 0")
    out = np.array(img, dtype=np.float64, copy=True)
    if size == 0:
        return out
    h, w = out.shape[-2:]
    r0 = center[0] - size // 2
    c0 = center[1] - size // 2
    r0c, r1c = max(r0, 0), min(r0 + size, h)
    c0c, c1c = max(c0, 0), min(c0 + size, w)
    if r0c < r1c and c0c < c1c:
        out[..., r0c:r1c, c0c:c1c] = fill
    return out


def pad_crop_at(img: np.ndarray, pad: int, offset: tuple[int, int]) -> np.ndarray:
    oy, ox = offset
    if not (0 <= oy <= 2 * pad and 0 <= ox <= 2 * pad):
        raise ConfigError(f"crop offset {offset} outside [0, {2 * pad}]")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    widths = [(0, 0)] * (img.ndim - 2) + [(pad, pad), (pad, pad)]
    padded = np.pad(img, widths)
    return np.ascontiguousarray(padded[..., oy : oy + h, ox : ox + w])


@functools.lru_cache(maxsize=512)
def _warp_plan(op: str, magnitude: float, h: int, w: int):
    """Bilinear gather plan for an inverse coordinate map on an ``h x w`` grid.

    Returned indices address the image padded by one fill-valued pixel on
    each side, so neighbours outside the frame read the fill value.
    """
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if op == "shear_x":
        sx, sy = xx + magnitude * yy, yy
    elif op == "shear_y":
        sx, sy = xx, yy + magnitude * xx
    elif op == "translate_x":
        sx, sy = xx + magnitude * w, yy
    elif op == "translate_y":
        sx, sy = xx, yy + magnitude * h
    elif op == "rotate":
        theta = math.radians(magnitude)
        cos, sin = math.cos(theta), math.sin(theta)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        dx, dy = xx - cx, yy - cy
        sx = cos * dx - sin * dy + cx
        sy = sin * dx + cos * dy + cy
    else:  # pragma: no cover
        raise ConfigError(f"{op!r} is not a geometric op")

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    # coordinates beyond one pixel outside the frame only ever touch fill
    x0i = np.clip(x0, -1, w).astype(np.intp) + 1
    x1i = np.clip(x0 + 1, -1, w).astype(np.intp) + 1
    y0i = np.clip(y0, -1, h).astype(np.intp) + 1
    y1i = np.clip(y0 + 1, -1, h).astype(np.intp) + 1
    wp = w + 2
    idx = np.stack([y0i * wp + x0i, y0i * wp + x1i, y1i * wp + x0i, y1i * wp + x1i]).reshape(4, -1)
    wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx]).reshape(4, -1)
    idx.setflags(write=False)
    wts.setflags(write=False)
    return idx, wts


def warp(img: np.ndarray, op: str, magnitude: float, fill: float = 0.5) -> np.ndarray:
    """Geometric op by inverse mapping with bilinear sampling."""
    batch, single = _as_batch(img)
    n, c, h, w = batch.shape
    idx, wts = _warp_plan(op, float(magnitude), h, w)
    padded = np.pad(batch, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=fill).reshape(n, c, -1)
    out = wts[0] * padded[..., idx[0]]
    for k in range(1, 4):
        out += wts[k] * padded[..., idx[k]]
    return _unbatch(np.clip(out, 0.0, 1.0).reshape(n, c, h, w), single)


def _grayscale(batch: np.ndarray) -> np.ndarray:
    """(N,1,H,W) luma; single-channel input is returned as is."""
    if batch.shape[1] == 3:
        return np.tensordot(_LUMA, batch, axes=([0], [1]))[:, None]
    return batch.mean(axis=1, keepdims=True)


def _blend(degenerate: np.ndarray, batch: np.ndarray, m: float) -> np.ndarray:
    return np.clip(degenerate + m * (batch - degenerate), 0.0, 1.0)


def _smooth(batch: np.ndarray) -> np.ndarray:
    """3x3 smoothing with weights 1 around a centre of 5 (sum 13); border pixels kept."""
    out = batch.copy()
    h, w = batch.shape[-2:]
    if h < 3 or w < 3:
        return out
    acc = np.zeros(batch.shape[:-2] + (h - 2, w - 2))
    for dy in range(3):
        for dx in range(3):
            acc += batch[..., dy : dy + h - 2, dx : dx + w - 2]
    acc += 4.0 * batch[..., 1:-1, 1:-1]
    out[..., 1:-1, 1:-1] = acc / 13.0
    return out


def _equalize_channel(v8: np.ndarray) -> np.ndarray:
    # PIL ImageOps.equalize lookup-table construction
    hist = np.bincount(v8.ravel(), minlength=256)
    nonzero = hist[hist > 0]
    if nonzero.size <= 1:
        return v8
    step = (int(hist.sum()) - int(nonzero[-1])) // 255
    if step == 0:
        return v8
    lut = (np.concatenate(([0], np.cumsum(hist)[:-1])) + step // 2) // step
    lut = np.clip(lut, 0, 255)
    return lut[v8]


def equalize(img: np.ndarray) -> np.ndarray:
    batch, single = _as_batch(img)
    v8 = np.rint(np.clip(batch, 0, 1) * 255).astype(np.int64)
    out = np.empty(batch.shape)
    for i in range(batch.shape[0]):
        for c in range(batch.shape[1]):
            out[i, c] = _equalize_channel(v8[i, c]) / 255.0
    return _unbatch(out, single)


def auto_contrast(img: np.ndarray) -> np.ndarray:
    batch, single = _as_batch(img)
    lo = batch.min(axis=(2, 3), keepdims=True)
    hi = batch.max(axis=(2, 3), keepdims=True)
    span = hi - lo
    flat = span <= 0
    out = np.where(flat, batch, (batch - lo) / np.where(flat, 1.0, span))
    return _unbatch(np.clip(out, 0.0, 1.0), single)


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    """Invert pixels whose 8-bit value is at or above ``threshold`` (0..256)."""
    batch, single = _as_batch(img)
    mask = np.rint(batch * 255.0) >= threshold
    return _unbatch(np.where(mask, 1.0 - batch, batch), single)


def posterize(img: np.ndarray, bits: float) -> np.ndarray:
    batch, single = _as_batch(img)
    b = int(min(8, max(1, round(bits))))
    mask = (0xFF << (8 - b)) & 0xFF
    v8 = np.rint(np.clip(batch, 0, 1) * 255).astype(np.uint8)
    return _unbatch((v8 & mask) / 255.0, single)


def color(img: np.ndarray, m: float) -> np.ndarray:
    batch, single = _as_batch(img)
    return _unbatch(_blend(_grayscale(batch), batch, m), single)


def contrast(img: np.ndarray, m: float) -> np.ndarray:
    batch, single = _as_batch(img)
    mean = _grayscale(batch).mean(axis=(1, 2, 3), keepdims=True)
    return _unbatch(_blend(mean, batch, m), single)


def brightness(img: np.ndarray, m: float) -> np.ndarray:
    batch, single = _as_batch(img)
    return _unbatch(np.clip(m * batch, 0.0, 1.0), single)


def sharpness(img: np.ndarray, m: float) -> np.ndarray:
    batch, single = _as_batch(img)
    return _unbatch(_blend(_smooth(batch), batch, m), single)


def invert(img: np.ndarray) -> np.ndarray:
    return 1.0 - np.asarray(img, dtype=np.float64)


_MAGNITUDE_FNS = {
    "solarize": solarize,
    "posterize": posterize,
    "contrast": contrast,
    "color": color,
    "brightness": brightness,
    "sharpness": sharpness,
}
GEOMETRIC_OPS = frozenset({"shear_x", "shear_y", "translate_x", "translate_y", "rotate"})


def apply_op(img: np.ndarray, op: str, magnitude: float | None = None, *,
             rng: np.random.Generator | None = None, fill: float = 0.5,
             cutout_size: int = 16, cutout_fill: float = 0.5, crop_pad: int = 4) -> np.ndarray:
    """Apply one operation at an arbitrary magnitude (not restricted to the table grid).

    For a batch, stochastic ops draw one sample per image from ``rng`` in
    batch order.
    """
    batch, single = _as_batch(img)
    n, _, h, w = batch.shape
    if op == "identity":
        out = batch.copy()
    elif op in GEOMETRIC_OPS:
        out = warp(batch, op, magnitude, fill)
    elif op in _MAGNITUDE_FNS:
        out = _MAGNITUDE_FNS[op](batch, magnitude)
    elif op == "equalize":
        out = equalize(batch)
    elif op == "auto_contrast":
        out = auto_contrast(batch)
    elif op == "invert":
        out = invert(batch)
    elif op == "flips":
        flip = rng.random(n) < 0.5
        out = batch.copy()
        out[flip] = batch[flip][..., ::-1]
    elif op == "crop":
        offsets = rng.integers(0, 2 * crop_pad + 1, size=(n, 2))
        padded = np.pad(batch, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)))
        out = np.empty_like(batch)
        for i, (oy, ox) in enumerate(offsets):
            out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    elif op == "cutout":
        centers = np.stack([rng.integers(0, h, size=n), rng.integers(0, w, size=n)], axis=1)
        out = batch.copy()
        for i, (cy, cx) in enumerate(centers):
            out[i] = cutout_at(batch[i], cutout_size, (int(cy), int(cx)), cutout_fill)
    else:
        raise ConfigError(f"unknown operation {op!r}")
    return _unbatch(out, single)


def apply_transform(img: np.ndarray, t: Transform, table: TransformTable | None = None,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply a table transform to an image or a batch of images."""
    if t.stochastic and rng is None:
        raise ConfigError(f"{t.op!r} is stochastic and needs an rng")
    params = {}
    if table is not None:
        params = dict(fill=table.fill, cutout_size=table.cutout_size,
                      cutout_fill=table.cutout_fill, crop_pad=table.crop_pad)
    return apply_op(img, t.op, t.magnitude, rng=rng, **params)


def apply_chain(imgs: np.ndarray, chains: np.ndarray, table: TransformTable,
                rng: np.random.Generator) -> np.ndarray:
    """Apply per-image transform chains.

    ``imgs`` is ``(N, C, H, W)`` and ``chains`` an ``(N, depth)`` index
    array; column ``j`` is applied before column ``j + 1``. Images sharing
    a transform at a given depth are processed together, in ascending
    transform-index order.
    """
    out = np.array(imgs, dtype=np.float64, copy=True)
    chains = np.asarray(chains, dtype=np.intp).reshape(out.shape[0], -1)
    for depth in range(chains.shape[1]):
        col = chains[:, depth]
        for t_idx in np.unique(col):
            sel = np.flatnonzero(col == t_idx)
            out[sel] = apply_transform(out[sel], table[int(t_idx)], table, rng)
    return out


def describe(table: TransformTable, index: int) -> str:
    t = table[index]
    if t.magnitude is None:
        return t.op
    return f"{t.op}({t.magnitude:.4g})"


def table_summary(table: TransformTable) -> list[dict]:
    return [
        {"index": i, "op": t.op, "level": t.level, "magnitude": t.magnitude}
        for i, t in enumerate(table.entries)
    ]


def validate_image(img: np.ndarray, channels: Sequence[int] = (1, 3)) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in channels:
        raise ConfigError(f"image must be (C,H,W) with C in {tuple(channels)}, got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ConfigError("image intensities must lie in [0, 1]")
