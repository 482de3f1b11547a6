"""PNG figures written next to the CSV reports (Agg backend, stable bytes)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no software/version stamp, so reruns give identical files
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    return path


def loss_curve(report, path, title: str = "sequence model") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(report.epochs, report.train_loss, marker="o", ms=3, label="train")
    val = [(e, v) for e, v in zip(report.epochs, report.val_loss) if v is not None]
    if val:
        ax.plot([e for e, _ in val], [v for _, v in val], marker="s", ms=3, label="selection")
        ax.axvline(report.best_epoch, color="grey", ls=":", lw=1, label=f"best epoch {report.best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("binary cross-entropy")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def metric_bars(reports, ks, path, title: str = "validation users") -> Path:
    names = [r.system for r in reports]
    columns = [f"MAP@{k}" for k in ks] + ["NDCG"]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(names), 1)
    for n, rep in enumerate(reports):
        values = [rep.map_at[k] for k in ks] + [rep.ndcg]
        ax.bar([c + n * width for c in range(len(columns))], values, width, label=rep.system)
    ax.set_xticks([c + width * (len(names) - 1) / 2 for c in range(len(columns))])
    ax.set_xticklabels(columns)
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def per_item_precision(rows, path, systems) -> Path:
    """``rows``: dicts with item_id and ``<system>`` precision columns (NaN if never top-1)."""
    items = [r["item_id"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.3 * len(items)), 4))
    width = 0.8 / max(len(systems), 1)
    for n, system in enumerate(systems):
        ax.bar([c + n * width for c in range(len(items))], [r[system] for r in rows], width, label=system)
    ax.set_xticks(range(len(items)))
    ax.set_xticklabels(items, rotation=90, fontsize=6)
    ax.set_ylabel("precision of top-1 pick")
    ax.legend()
    return _save(fig, path)
