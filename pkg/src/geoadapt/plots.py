"""Static plots for a run directory. Every PNG is written next to a TSV holding its data."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import pipeline  # noqa: E402
from .io import load_container  # noqa: E402
from .losses import TERMS  # noqa: E402

ABLATIONS = {"ablate-losses/ablation_losses.tsv": "ablation_losses",
             "ablate-ntarget/ablation_ntarget.tsv": "ablation_ntarget",
             "ablate-k/ablation_k.tsv": "ablation_k"}


def _write_tsv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def plot_loss_trace(trace_path, png_path) -> Path:
    tr = pipeline.read_loss_trace(trace_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in (*TERMS, "total"):
        y = tr.get(name)
        if y is None or not np.isfinite(y).any() or not np.any(y):
            continue
        ax.plot(tr["step"], y, lw=0.8, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("unweighted term")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return Path(png_path)


def plot_ablation(table_path, png_path, metric: str = "fid") -> Path:
    table = pipeline.AblationTable.read(table_path)
    labels = table.labels()
    med = [table.median(lab, metric) for lab in labels]
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, lab in enumerate(labels):
        vals = table.values(lab, metric)
        ax.scatter([i] * len(vals), vals, color="0.6", s=12, zorder=2)
    ax.plot(range(len(labels)), med, "o-", color="C0", zorder=3, label="median over seeds")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_xlabel(table.parameter)
    ax.set_ylabel(f"desk-{metric.upper()}" if metric == "fid" else metric)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    _write_tsv(Path(png_path).with_suffix(".tsv"), [table.parameter, f"median_{metric}"],
               [[lab, repr(v)] for lab, v in zip(labels, med)])
    return Path(png_path)


def plot_latents_2d(sets: dict, png_path) -> Path:
    coords = pipeline.project_latents_2d(sets)
    fig, ax = plt.subplots(figsize=(5, 5))
    rows = []
    for i, (label, xy) in enumerate(coords.items()):
        ax.scatter(xy[:, 0], xy[:, 1], s=6, alpha=0.6, color=f"C{i}", label=label)
        rows += [[label, repr(float(a)), repr(float(b))] for a, b in xy]
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=8, markerscale=2)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    _write_tsv(Path(png_path).with_suffix(".tsv"), ["set", "pc1", "pc2"], rows)
    return Path(png_path)


def plot_run(out, what: str = "all") -> list[Path]:
    """Plot whatever artifacts exist in ``out``; returns the PNG paths written."""
    out = Path(out)
    written = []
    trace = out / pipeline.FILES["loss_trace"]
    if what in ("all", "loss") and trace.exists():
        written.append(plot_loss_trace(trace, out / "loss_trace.png"))
    if what in ("all", "ablations"):
        for rel, stem in ABLATIONS.items():
            if (out / rel).exists():
                written.append(plot_ablation(out / rel, out / f"{stem}.png"))
    inv, smp = out / pipeline.FILES["inverted"], out / pipeline.FILES["samples"]
    if what in ("all", "latents") and inv.exists():
        sets = {"inverted targets": load_container(inv)[0]["latents"]}
        if smp.exists():
            sets["sampled"] = load_container(smp)[0]["latents"]
        written.append(plot_latents_2d(sets, out / "latents_2d.png"))
    return written
