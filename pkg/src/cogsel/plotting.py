"""PNG figures rendered from the pipeline CSVs.

Figures are drawn only from the CSV files, never from in-memory results, so
the CSVs stay the canonical output and any figure can be regenerated.
"""

from __future__ import annotations

import io
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SELECTOR_STYLE = {
    "oracle": dict(color="k", marker="o", ls="-"),
    "cnn": dict(color="tab:blue", marker="s", ls="-"),
    "svm": dict(color="tab:orange", marker="^", ls="--"),
    "ras": dict(color="tab:green", marker="v", ls=":"),
    "full": dict(color="tab:gray", marker="d", ls="-."),
}


def _png(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def plot_accuracy(rows):
    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    snr = [float(r["snr_test"]) for r in rows]
    ax.plot(snr, [float(r["cnn_acc"]) for r in rows], label="CNN", **SELECTOR_STYLE["cnn"])
    if rows and rows[0].get("svm_acc"):
        ax.plot(snr, [float(r["svm_acc"]) for r in rows], label="SVM", **SELECTOR_STYLE["svm"])
    ax.set_xlabel("SNR$_{test}$ (dB)")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    return fig


def plot_rmse(rows):
    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    series = defaultdict(list)
    for r in rows:
        series[r["selector"]].append((float(r["snr_db"]), float(r["rmse_deg"])))
    for name, pts in series.items():
        pts.sort()
        ax.semilogy([p[0] for p in pts], [max(p[1], 1e-6) for p in pts], label=name, **SELECTOR_STYLE.get(name, {}))
    ax.set_xlabel("SNR$_{test}$ (dB)")
    ax.set_ylabel("RMSE (deg)")
    ax.grid(alpha=0.3, which="both")
    ax.legend()
    return fig


def plot_histogram(rows):
    fig, ax = plt.subplots(figsize=(6, 3), constrained_layout=True)
    m = [int(r["antenna"]) for r in rows]
    width = 0.27
    for k, (col, name) in enumerate((("label_pct", "label"), ("cnn_pct", "cnn"), ("svm_pct", "svm"))):
        if not rows or not rows[0].get(col):
            continue
        ax.bar([i + (k - 1) * width for i in m], [float(r[col]) for r in rows], width, label=name)
    ax.set_xlabel("antenna index")
    ax.set_ylabel("selected (%)")
    ax.set_xticks(m)
    ax.legend()
    return fig


def plot_training(rows):
    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    ep = [int(r["epoch"]) for r in rows]
    ax.plot(ep, [float(r["train_loss"]) for r in rows], color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(ep, [float(r["val_acc"]) for r in rows], color="tab:red")
    ax2.set_ylabel("validation accuracy (%)", color="tab:red")
    return fig


def plot_scan(rows, window: int = 50):
    fig, ax = plt.subplots(figsize=(7, 3.5), constrained_layout=True)
    series = defaultdict(list)
    for r in rows:
        series[r["selector"]].append((int(r["block"]), float(r["error_deg"])))
    for name, pts in series.items():
        pts.sort()
        blocks = [p[0] for p in pts]
        err = [p[1] ** 2 for p in pts]
        # running RMSE over a trailing window keeps the trace readable
        acc, smooth = 0.0, []
        for i, e in enumerate(err):
            acc += e - (err[i - window] if i >= window else 0.0)
            smooth.append((acc / min(i + 1, window)) ** 0.5)
        ax.semilogy(blocks, [max(s, 1e-6) for s in smooth], label=name, color=SELECTOR_STYLE.get(name, {}).get("color"))
    ax.set_xlabel("block")
    ax.set_ylabel(f"RMSE over {window} blocks (deg)")
    ax.grid(alpha=0.3, which="both")
    ax.legend()
    return fig


FIGURES = {
    "accuracy.csv": ("accuracy.png", plot_accuracy),
    "rmse.csv": ("rmse.png", plot_rmse),
    "selection_histogram.csv": ("selection_histogram.png", plot_histogram),
    "train_log.csv": ("training.png", plot_training),
    "scan.csv": ("scan.png", plot_scan),
}


def render_all(ws) -> list:
    """Render a PNG next to every known CSV present in the workspace."""
    from .pipeline import read_csv

    written = []
    for src, (dst, fn) in FIGURES.items():
        path = ws.path(src)
        if not path.exists():
            continue
        rows = read_csv(path)
        if not rows:
            continue
        written.append(ws.write_bytes(dst, _png(fn(rows))))
    return written
