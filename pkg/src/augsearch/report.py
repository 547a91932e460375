"""CSV tables and PNG figures describing a search run.

CSV schemas (header row first, comma separated, ``.17g`` floats):

``trace.csv``
    iteration, layer, cosine_similarity, g_norm, entropy, top1, p1, top2, p2,
    top3, p3, elapsed_ms. One row per Adam step.
``op_distribution.csv``
    layer, op, probability. Probability of each operation summed over its
    magnitude levels.
``magnitude_distribution.csv``
    layer, op, level, magnitude, probability, within_op. ``within_op`` is the
    probability renormalised inside the operation's own levels.
``improvement.csv``
    depth, mean, std. Gradient-similarity improvement over un-augmented
    gradients; depth 0 is the baseline.
``loss_curve.csv``
    epoch, loss, accuracy, batch_loss.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fileio import atomic_write_bytes, atomic_write_text
from .policy import PolicyStack
from .search import IterationRecord, SearchTrace, operation_distribution

TRACE_FIELDS = ["iteration", "layer", "cosine_similarity", "g_norm", "entropy",
                "top1", "p1", "top2", "p2", "top3", "p3", "elapsed_ms"]


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def trace_rows(records: Sequence[IterationRecord]) -> list[list]:
    rows = []
    for r in records:
        top = list(r.top3) + [("", float("nan"))] * (3 - len(r.top3))
        flat = [item for pair in top[:3] for item in pair]
        rows.append([r.iteration, r.layer, r.cosine_similarity, r.g_norm, r.entropy, *flat, r.elapsed_ms])
    return rows


def trace_csv(records: Sequence[IterationRecord]) -> str:
    return _csv_text(TRACE_FIELDS, trace_rows(records))


def op_distribution_csv(stack: PolicyStack) -> str:
    rows = []
    for k, dist in enumerate(operation_distribution(stack), start=1):
        rows.extend([k, op, p] for op, p in dist.items())
    return _csv_text(["layer", "op", "probability"], rows)


def magnitude_rows(stack: PolicyStack) -> list[list]:
    table = stack.table
    rows = []
    for k, layer in enumerate(stack.layers, start=1):
        p = layer.probs
        for op in table.ops():
            idx = table.op_indices(op)
            if table[idx[0]].level is None:
                continue
            total = p[idx].sum()
            for i in idx:
                t = table[i]
                rows.append([k, op, t.level, float(t.magnitude), p[i], p[i] / total if total > 0 else 0.0])
    return rows


def magnitude_distribution_csv(stack: PolicyStack) -> str:
    return _csv_text(["layer", "op", "level", "magnitude", "probability", "within_op"], magnitude_rows(stack))


def improvement_csv(stats: Sequence[tuple[float, float]]) -> str:
    return _csv_text(["depth", "mean", "std"], [[d, m, s] for d, (m, s) in enumerate(stats)])


def loss_curve_csv(curve: Sequence[dict]) -> str:
    rows = [[c["epoch"], c["loss"], c["accuracy"], c.get("batch_loss", float("nan"))] for c in curve]
    return _csv_text(["epoch", "loss", "accuracy", "batch_loss"], rows)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def read_trace_csv(path: str | Path) -> list[IterationRecord]:
    records = []
    for row in read_csv(path):
        top = [(row[f"top{i}"], float(row[f"p{i}"])) for i in (1, 2, 3) if row[f"top{i}"]]
        records.append(IterationRecord(
            iteration=int(row["iteration"]),
            layer=int(row["layer"]),
            cosine_similarity=float(row["cosine_similarity"]),
            g_norm=float(row["g_norm"]),
            entropy=float(row["entropy"]),
            top3=top,
            elapsed_ms=float(row["elapsed_ms"]),
        ))
    return records


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: str | Path) -> None:
    buf = io.BytesIO()
    # fixed metadata keeps the bytes reproducible
    fig.savefig(buf, format="png", dpi=110, metadata={"Software": None})
    atomic_write_bytes(path, buf.getvalue())


def plot_op_distribution(stack: PolicyStack, path: str | Path) -> None:
    """Stacked bars: one bar per layer, one segment per operation."""
    plt = _pyplot()
    dists = operation_distribution(stack)
    ops = stack.table.ops()
    layers = np.arange(1, len(dists) + 1)
    cmap = plt.get_cmap("tab20")
    fig, ax = plt.subplots(figsize=(7, 4))
    bottom = np.zeros(len(dists))
    for j, op in enumerate(ops):
        h = np.array([d[op] for d in dists])
        ax.bar(layers, h, bottom=bottom, color=cmap(j % 20), label=op, width=0.7)
        bottom += h
    ax.set_xlabel("layer")
    ax.set_ylabel("probability")
    ax.set_xticks(layers)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=6, ncol=2, bbox_to_anchor=(1.01, 1), loc="upper left")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_magnitudes(stack: PolicyStack, path: str | Path) -> None:
    """Per-op heatmap of probability over magnitude levels, one panel per layer."""
    plt = _pyplot()
    table = stack.table
    ops = [op for op in table.ops() if table[table.op_indices(op)[0]].level is not None]
    n = max(len(stack), 1)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.6), squeeze=False)
    for k, layer in enumerate(stack.layers):
        p = layer.probs
        grid = np.array([p[table.op_indices(op)] for op in ops])
        ax = axes[0, k]
        im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0)
        ax.set_title(f"layer {k + 1}", fontsize=8)
        ax.set_yticks(range(len(ops)))
        ax.set_yticklabels(ops if k == 0 else [], fontsize=6)
        ax.set_xlabel("level", fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.05)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_improvement(stats: Sequence[tuple[float, float]], path: str | Path) -> None:
    plt = _pyplot()
    arr = np.asarray(stats, dtype=float)
    depth = np.arange(len(arr))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
    a1.plot(depth, arr[:, 0], "o-")
    a1.set_xlabel("depth")
    a1.set_ylabel("mean improvement")
    a2.plot(depth, arr[:, 1], "s-", color="tab:red")
    a2.set_xlabel("depth")
    a2.set_ylabel("std of improvement")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_trace(records: Sequence[IterationRecord], path: str | Path) -> None:
    plt = _pyplot()
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(7, 4.5), sharex=True)
    step = np.arange(len(records))
    layers = np.array([r.layer for r in records])
    a1.plot(step, [r.cosine_similarity for r in records], lw=0.8)
    a1.set_ylabel("cosine")
    a2.plot(step, [r.entropy for r in records], lw=0.8, color="tab:green")
    a2.set_ylabel("entropy")
    a2.set_xlabel("iteration (all layers)")
    for b in np.flatnonzero(np.diff(layers)) + 0.5:
        a1.axvline(b, color="grey", lw=0.5)
        a2.axvline(b, color="grey", lw=0.5)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def write_report(out_dir: str | Path, stack: PolicyStack, trace: SearchTrace | None = None,
                 improvement: Sequence[tuple[float, float]] | None = None,
                 figures: bool = True) -> list[Path]:
    """Write every table (and figure) that the inputs support; returns the paths."""
    out = Path(out_dir)
    written: list[Path] = []

    def text(name, body):
        atomic_write_text(out / name, body)
        written.append(out / name)

    text("op_distribution.csv", op_distribution_csv(stack))
    text("magnitude_distribution.csv", magnitude_distribution_csv(stack))
    if trace is not None:
        text("trace.csv", trace_csv(trace.records))
    if improvement is not None:
        text("improvement.csv", improvement_csv(improvement))
    if figures and len(stack):
        plot_op_distribution(stack, out / "op_distribution.png")
        plot_magnitudes(stack, out / "magnitude_distribution.png")
        written += [out / "op_distribution.png", out / "magnitude_distribution.png"]
        if trace is not None and trace.records:
            plot_trace(trace.records, out / "trace.png")
            written.append(out / "trace.png")
        if improvement is not None:
            plot_improvement(improvement, out / "improvement.png")
            written.append(out / "improvement.png")
    return written
