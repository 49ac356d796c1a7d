"""Bar charts of metrics across runs, loss curves, and a plain-text summary table."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": None}


def _run_name(path: Path) -> str:
    return f"{path.parent.name}/{path.stem}" if path.parent.name else path.stem


def _load(paths):
    reports, histories = [], []
    for p in paths:
        obj = json.loads(p.read_text())
        if isinstance(obj, list):
            histories.append((_run_name(p), obj))
        elif isinstance(obj, dict) and "metrics" in obj:
            reports.append((_run_name(p), obj.get("task", ""), obj["metrics"]))
        else:
            raise ValueError(f"{p}: neither a metrics report nor a training history")
    return reports, histories


def summary_table(reports) -> str:
    lines = []
    for task in sorted({t for _, t, _ in reports}):
        rows = [(name, m) for name, t, m in reports if t == task]
        keys = sorted({k for _, m in rows for k in m})
        width = max(len("run"), *(len(n) for n, _ in rows))
        lines.append(f"[{task}]")
        lines.append("run".ljust(width) + "".join(f"  {k:>14}" for k in keys))
        for name, m in rows:
            cells = "".join(f"  {m[k]:>14.6g}" if k in m else f"  {'-':>14}" for k in keys)
            lines.append(name.ljust(width) + cells)
        lines.append("")
    return "\n".join(lines)


def _bar_chart(task, rows, out: Path) -> Path:
    keys = sorted({k for _, m in rows for k in m})
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3.2), squeeze=False)
    names = [n for n, _ in rows]
    for ax, k in zip(axes[0], keys):
        ax.bar(range(len(rows)), [m.get(k, 0.0) for _, m in rows], color="tab:blue")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        ax.set_title(k)
    fig.suptitle(task)
    fig.tight_layout()
    path = out / f"{task}_metrics.png"
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def _line_chart(histories, out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, rows in histories:
        ax.plot([r["epoch"] for r in rows], [r["loss"] for r in rows], marker="o", ms=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out / "loss_curves.png"
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def render_report(paths, out: Path) -> str:
    """Write one bar chart per task, one loss-curve chart, and report.txt; return the table."""
    reports, histories = _load(paths)
    for task in sorted({t for _, t, _ in reports}):
        _bar_chart(task, [(n, m) for n, t, m in reports if t == task], out)
    if histories:
        _line_chart(histories, out)
    table = summary_table(reports)
    (out / "report.txt").write_text(table)
    return table
