"""Figures and a tab-separated summary from a training metric log."""

from __future__ import annotations

import csv
import io
import json
from os import PathLike
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLUMNS = (
    "step",
    "lr",
    "loss",
    "ce",
    "reg",
    "grad_norm",
    "max_attention_logit",
    "mean_query_norm",
    "output_logit_mean",
    "rms_grad_mlp1",
    "block_output_rms",
    "events",
)

MONITORS = (
    ("max_attention_logits", "max attention logit"),
    ("mean_query_norm", "mean query norm"),
    ("rms_grad_mlp1", "RMS grad of MLP W1"),
    ("block_output_rms", "block output RMS"),
)

# saved figures carry no version or date stamps so reruns are byte-identical
_PNG_META = {"Software": None}


def read_metric_log(path: str | PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def summary_rows(records: list[dict]) -> list[dict]:
    """One row per step; per-layer monitors are reduced to their max across layers."""
    rows = []
    for r in records:
        rows.append(
            {
                "step": r["step"],
                "lr": r["lr"],
                "loss": r["loss"]["total"],
                "ce": r["loss"]["ce"],
                "reg": r["loss"]["reg"],
                "grad_norm": r["grad_norm"],
                "max_attention_logit": max(r["max_attention_logits"]),
                "mean_query_norm": max(r["mean_query_norm"]),
                "output_logit_mean": r["output_logit_mean"],
                "rms_grad_mlp1": max(r["rms_grad_mlp1"]),
                "block_output_rms": max(r["block_output_rms"]),
                "events": ";".join(r.get("events", [])),
            }
        )
    return rows


def format_tsv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, delimiter="\t", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss(records: list[dict], path: Path) -> Path:
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(steps, [r["loss"]["total"] for r in records], label="total")
    ax.plot(steps, [r["loss"]["ce"] for r in records], label="cross-entropy", ls="--")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_lr(records: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot([r["step"] for r in records], [r["lr"] for r in records], color="k")
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    ax.ticklabel_format(axis="y", style="sci", scilimits=(-3, 3))
    fig.tight_layout()
    return _save(fig, path)


def plot_monitors(records: list[dict], path: Path) -> Path:
    steps = [r["step"] for r in records]
    fig, axes = plt.subplots(3, 2, figsize=(9, 8), sharex=True)
    flat = axes.ravel()
    for ax, (key, title) in zip(flat, MONITORS):
        n_layers = len(records[0][key])
        for layer in range(n_layers):
            ax.plot(steps, [r[key][layer] for r in records], lw=1, label=f"layer {layer}")
        ax.set_title(title, fontsize=10)
    flat[0].legend(frameon=False, fontsize=8)
    flat[4].plot(steps, [r["output_logit_mean"] for r in records], lw=1, color="C3")
    flat[4].set_title("output logit mean", fontsize=10)
    flat[5].plot(steps, [r["grad_norm"] for r in records], lw=1, color="C4")
    flat[5].set_title("global grad norm (pre-clip)", fontsize=10)
    for ax in axes[-1]:
        ax.set_xlabel("step")
    fig.tight_layout()
    return _save(fig, path)


def render_report(log_path: str | PathLike, out_dir: str | PathLike) -> dict[str, Path]:
    """Write loss.png, lr.png, monitors.png and summary.tsv; returns their paths."""
    records = read_metric_log(log_path)
    if not records:
        raise ValueError(f"{log_path}: metric log is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "loss": plot_loss(records, out / "loss.png"),
        "lr": plot_lr(records, out / "lr.png"),
        "monitors": plot_monitors(records, out / "monitors.png"),
    }
    tsv = out / "summary.tsv"
    tsv.write_text(format_tsv(summary_rows(records)), encoding="utf-8")
    paths["summary"] = tsv
    return paths
