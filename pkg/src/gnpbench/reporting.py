"""CSV metrics log, text tables, and figure rendering for the CLI.

All file writes are atomic (temp file + rename). The metrics CSV schema is
fixed; reports aggregate it into mean +/- std tables and accompanying PNG
figures rendered with the Agg backend.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

CSV_COLUMNS = [
    "run_id",
    "build_id",
    "task",
    "structure",
    "agg",
    "readout",
    "mode",
    "seed",
    "best_epoch",
    "val_loss",
    "test_mape",
    "test_mae",
    "wall_seconds",
]


def atomic_write_text(path, text: str) -> None:
    path = str(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_row(row: dict) -> dict:
    out = {}
    for col in CSV_COLUMNS:
        v = row.get(col, "")
        if isinstance(v, float):
            v = repr(v)
        out[col] = v
    return out


def append_csv_rows(path, rows: list[dict]) -> None:
    """Append rows to the metrics CSV, writing the whole file atomically."""
    path = str(path)
    existing = []
    if os.path.exists(path):
        with open(path, newline="") as fh:
            existing = list(csv.DictReader(fh))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in existing + [format_row(r) for r in rows]:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def mean_std(values) -> tuple[float, float]:
    n = len(values)
    m = sum(values) / n
    if n < 2:
        return m, 0.0
    var = sum((v - m) ** 2 for v in values) / (n - 1)
    return m, var**0.5


def render_table(headers, rows, title="") -> str:
    """Plain-text table with right-aligned columns."""
    all_rows = [headers] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in all_rows) for i in range(len(headers))]
    lines = []
    if title:
        lines.append(title)
    sep = "-+-".join("-" * w for w in widths)
    lines.append(" | ".join(h.rjust(w) for h, w in zip(headers, widths)))
    lines.append(sep)
    for row in all_rows[1:]:
        lines.append(" | ".join(c.rjust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def fmt_pm(mean, std, digits=2) -> str:
    return f"{mean:.{digits}f}+-{std:.{digits}f}"


# -- figures -------------------------------------------------------------------


def save_trajectory_figure(series: dict, path, title="") -> None:
    """One panel per exponent; one line per pooling instance.

    ``series`` maps instance name -> list of per-epoch
    {p_plus, p_minus, q_plus, q_minus} dicts.
    """
    keys = ["p_plus", "p_minus", "q_plus", "q_minus"]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    for ax, key in zip(axes.ravel(), keys):
        for name in sorted(series):
            values = [pt[key] for pt in series[name]]
            ax.plot(range(len(values)), values, label=name)
        ax.set_title(key.replace("_", " "))
        ax.set_xlabel("epoch")
        ax.grid(True, alpha=0.3)
    axes[0, 0].legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_bars(groups: dict, path, title="", ylabel="test MAPE") -> None:
    """Bar chart of mean +/- std per labelled group."""
    labels = list(groups)
    means = [groups[k][0] for k in labels]
    stds = [groups[k][1] for k in labels]
    fig, ax = plt.subplots(figsize=(max(6, 0.55 * len(labels) + 2), 4))
    ax.bar(range(len(labels)), means, yerr=stds, capsize=3)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if means and max(means) > 0 and (max(means) > 50 * (min(means) + 1e-9)):
        ax.set_yscale("log")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_matrix_heatmap(aggs, readouts, values, path, title="") -> None:
    """Readout x aggregation heatmap of test MAPE means."""
    fig, ax = plt.subplots(figsize=(1.1 * len(aggs) + 2.5, 1.0 * len(readouts) + 2))
    im = ax.imshow(values, cmap="viridis")
    ax.set_xticks(range(len(aggs)))
    ax.set_xticklabels(aggs)
    ax.set_yticks(range(len(readouts)))
    ax.set_yticklabels(readouts)
    ax.set_xlabel("aggregation")
    ax.set_ylabel("readout")
    for i in range(len(readouts)):
        for j in range(len(aggs)):
            ax.text(j, i, f"{values[i][j]:.1f}", ha="center", va="center",
                    color="white", fontsize=8)
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="test MAPE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
