"""Benchmark report rendering: delimited text, JSON summary, figures.

Outputs for a report path ``out.json``:

* ``out.json`` - machine-readable summary. Keys: ``n_images``;
  ``metrics.<name>.{mean,std,n}`` for total/shadow/nonshadow accuracy
  (a metric with no defined per-image values is omitted);
  ``mean_cnn_invocations``; ``per_image`` (list of
  ``{image, total_accuracy, shadow_accuracy, nonshadow_accuracy,
  cnn_invocations}``). Deterministic for identical inputs.
* ``out.lines.txt`` - one ``key=value`` record line per image plus
  aggregate lines; same fields as the summary. Deterministic.
* ``out.timing.json`` - wall-clock sidecar ({seconds_per_image,
  stage_means, per_image seconds}); inherently run-dependent and kept
  out of the deterministic files.
* ``out_accuracy.png``, ``out_timing.png`` - rendered figures.
"""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

import numpy as np

_METRICS = ("total_accuracy", "shadow_accuracy", "nonshadow_accuracy")


def _fmt(value):
    return "absent" if value is None else f"{value:.6f}"


def format_lines(report) -> list:
    lines = []
    for m in report.per_image:
        name = Path(m.image).name if m.image else "-"
        parts = [f"image={name}"]
        parts.append(f"total={_fmt(m.total_accuracy)}")
        parts.append(f"shadow={_fmt(m.shadow_accuracy)}")
        parts.append(f"nonshadow={_fmt(m.nonshadow_accuracy)}")
        if m.cnn_invocations is not None:
            parts.append(f"invocations={m.cnn_invocations}")
        lines.append(" ".join(parts))
    for name in _METRICS:
        if name in report.aggregates:
            a = report.aggregates[name]
            lines.append(
                f"aggregate metric={name} mean={a['mean']:.6f} "
                f"std={a['std']:.6f} n={a['n']}"
            )
    if report.mean_cnn_invocations is not None:
        lines.append(f"aggregate mean_cnn_invocations={report.mean_cnn_invocations:.2f}")
    return lines


def format_timing_lines(report) -> list:
    lines = []
    if report.seconds_mean is not None:
        lines.append(
            f"timing seconds_per_image mean={report.seconds_mean:.3f} "
            f"std={report.seconds_std:.3f}"
        )
    return lines


def summary_dict(report) -> dict:
    per_image = []
    for m in report.per_image:
        per_image.append(
            {
                "image": Path(m.image).name if m.image else None,
                "total_accuracy": m.total_accuracy,
                "shadow_accuracy": m.shadow_accuracy,
                "nonshadow_accuracy": m.nonshadow_accuracy,
                "cnn_invocations": m.cnn_invocations,
            }
        )
    out = {
        "n_images": len(report.per_image),
        "metrics": report.aggregates,
        "per_image": per_image,
    }
    if report.mean_cnn_invocations is not None:
        out["mean_cnn_invocations"] = report.mean_cnn_invocations
    return out


def timing_dict(report) -> dict:
    stages = {}
    for m in report.per_image:
        if m.stage_seconds:
            for k, v in m.stage_seconds.items():
                stages.setdefault(k, []).append(v)
    return {
        "seconds_per_image": {"mean": report.seconds_mean, "std": report.seconds_std},
        "stage_means": {k: float(np.mean(v)) for k, v in sorted(stages.items())},
        "per_image": [
            {"image": Path(m.image).name if m.image else None, "seconds": m.seconds}
            for m in report.per_image
        ],
    }


def _render_accuracy_figure(report, path):
    defined = [n for n in _METRICS if n in report.aggregates]
    if not defined:
        return
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    x = np.arange(len(report.per_image))
    styles = {"total_accuracy": "o-", "shadow_accuracy": "s--", "nonshadow_accuracy": "^:"}
    for name in defined:
        values = [getattr(m, name) for m in report.per_image]
        xs = [i for i, v in zip(x, values) if v is not None]
        ys = [v for v in values if v is not None]
        ax.plot(xs, ys, styles[name], label=name.replace("_", " "), alpha=0.8, markersize=4)
        ax.axhline(report.aggregates[name]["mean"], color="gray", lw=0.6, alpha=0.5)
    ax.set_xlabel("image index")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _render_timing_figure(report, path):
    stages = timing_dict(report)["stage_means"]
    stages.pop("total", None)
    if not stages:
        return
    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    names = list(stages.keys())
    ax.barh(names, [stages[n] for n in names], color="#4878a8")
    ax.set_xlabel("mean seconds per image")
    ax.grid(True, axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(report, path, figures: bool = True) -> list:
    """Write summary, line-delimited text, timing sidecar, and figures.

    Returns the list of paths written. The summary and lines files are
    bitwise-deterministic for identical detection outputs; timing and
    figures are not part of that guarantee.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = []

    path.write_text(json.dumps(summary_dict(report), indent=2, sort_keys=True) + "\n")
    written.append(path)

    lines_path = path.with_suffix(".lines.txt")
    lines_path.write_text("\n".join(format_lines(report)) + "\n")
    written.append(lines_path)

    timing_path = path.with_suffix(".timing.json")
    timing_path.write_text(json.dumps(timing_dict(report), indent=2, sort_keys=True) + "\n")
    written.append(timing_path)

    if figures:
        acc_path = path.with_name(path.stem + "_accuracy.png")
        _render_accuracy_figure(report, acc_path)
        if acc_path.exists():
            written.append(acc_path)
        t_path = path.with_name(path.stem + "_timing.png")
        _render_timing_figure(report, t_path)
        if t_path.exists():
            written.append(t_path)
    return written
