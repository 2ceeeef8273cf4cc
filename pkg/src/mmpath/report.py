"""Static run reports: a markdown summary plus loss-curve images."""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .train import LOSS_COLUMNS, METRIC_COLUMNS, read_loss_log, read_metrics  # noqa: E402

REQUIRED = ("loss_log.csv", "metrics.csv")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def plot_losses(loss_log: list[dict], out: Path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    epochs = [r["epoch"] for r in loss_log]
    for k in LOSS_COLUMNS:
        ax.plot(epochs, [r[k] for r in loss_log], label=k, linewidth=2.0 if k == "total" else 1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # no timestamp/version metadata so reruns are byte-identical
    fig.savefig(out, format="png", metadata={"Software": None})
    plt.close(fig)


def write_report(run_dir) -> list[Path]:
    """Render ``report.md`` and loss-curve PNGs; returns the written paths."""
    run = Path(run_dir)
    for name in REQUIRED:
        if not (run / name).is_file():
            raise FileNotFoundError(f"missing {run / name}")
    metrics = read_metrics(run / "metrics.csv")
    curves = [("loss_log.csv", "loss_curve.png", "pretraining losses")]
    extra = sorted((run / "loss_logs").glob("*.csv")) if (run / "loss_logs").is_dir() else []
    curves += [(f"loss_logs/{p.name}", f"loss_curve_{p.stem}.png", f"pretraining losses ({p.stem})") for p in extra]

    written = []
    lines = [f"# Run report: {run.name}", ""]
    cfg_path = run / "config.resolved.json"
    if cfg_path.is_file():
        resolved = json.loads(cfg_path.read_text())
        lines += ["## Configuration", ""]
        for section in sorted(resolved):
            lines.append(f"### {section}")
            lines.append("")
            lines.append("| key | value |")
            lines.append("|---|---|")
            body = resolved[section]
            flat = body.get("config", body) if isinstance(body, dict) else {"value": body}
            for k in sorted(flat):
                lines.append(f"| {k} | {json.dumps(flat[k], sort_keys=True)} |")
            lines.append("")

    lines += ["## Metrics", ""]
    if not metrics:
        lines += ["No results: metrics.csv has no rows.", ""]
    else:
        lines.append("| " + " | ".join(METRIC_COLUMNS) + " |")
        lines.append("|" + "---|" * len(METRIC_COLUMNS))
        for row in metrics:
            lines.append("| " + " | ".join(_fmt(row[k]) for k in METRIC_COLUMNS) + " |")
        lines.append("")

    lines += ["## Loss curves", ""]
    for src, png, title in curves:
        log = read_loss_log(run / src)
        if not log:
            lines += [f"{src}: empty loss log.", ""]
            continue
        plot_losses(log, run / png, title)
        written.append(run / png)
        first, last = log[0]["total"], log[-1]["total"]
        lines += [f"![{title}]({png})", "",
                  f"{src}: {len(log)} epochs, total loss {first:.4f} -> {last:.4f}.", ""]

    (run / "report.md").write_text("\n".join(lines))
    written.insert(0, run / "report.md")
    return written
