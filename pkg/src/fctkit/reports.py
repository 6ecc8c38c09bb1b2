"""Delimited and JSON reports plus matplotlib figures.

All outputs are deterministic for identical inputs: JSON keys are sorted,
numbers use fixed formatting and PNG metadata carries no timestamps.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .retrieval import RetrievalReport  # noqa: E402
from .updates import COST_COLUMNS, DeploymentModel, UpdateCostReport  # noqa: E402

PNG_METADATA = {"Software": None}


def _fmt(value) -> str:
    return "" if value is None else f"{value:.4f}"


def report_columns(ks: Sequence[int]) -> List[str]:
    return ["case"] + [f"cmc_top{k}" for k in ks] + ["map", "cka"]


def reports_csv(rows: Sequence[RetrievalReport], ks: Sequence[int] = (1, 5)) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report_columns(ks))
    for r in rows:
        w.writerow([r.case] + [_fmt(r.cmc.get(k)) for k in ks] + [_fmt(r.map_at_1), _fmt(r.cka)])
    return buf.getvalue()


def group_csv(rows: Sequence[RetrievalReport], ks: Sequence[int] = (1, 5)) -> str:
    """One row per (pairing, class group)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "group"] + [f"cmc_top{k}" for k in ks])
    for r in rows:
        for name, curve in r.per_group_cmc.items():
            w.writerow([r.case, name] + [_fmt(curve.get(k)) for k in ks])
    return buf.getvalue()


def reports_json(rows: Sequence[RetrievalReport], extra: Dict = None) -> str:
    doc = {"reports": [r.to_dict() for r in rows]}
    doc.update(extra or {})
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def emit_report(rows: Sequence[RetrievalReport], path, fmt: str = "csv", ks: Sequence[int] = (1, 5)):
    if fmt == "csv":
        text = reports_csv(rows, ks)
    elif fmt == "json":
        text = reports_json(rows)
    else:
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    Path(path).write_text(text)


def _save(fig, path: Path):
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def plot_retrieval(rows: Sequence[RetrievalReport], ks: Sequence[int], path: Path):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / len(ks)
    xs = range(len(rows))
    for j, k in enumerate(ks):
        ax.bar([x + j * width for x in xs], [100 * r.cmc.get(k, 0.0) for r in rows], width,
               label=f"top-{k}")
    ax.set_xticks([x + width * (len(ks) - 1) / 2 for x in xs])
    ax.set_xticklabels([r.case for r in rows], rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("CMC (%)")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_histories(histories: Dict[str, List[float]], path: Path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, loss in sorted(histories.items()):
        if loss:
            ax.plot(range(1, len(loss) + 1), loss, label=name, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    if histories:
        ax.legend(frameon=False, fontsize=6, ncol=2)
    fig.tight_layout()
    _save(fig, path)


def emit_run_reports(rows: Sequence[RetrievalReport], cfg, histories: Dict[str, List[float]], dst: Path):
    ks = tuple(cfg.eval.ks)
    dst = Path(dst)
    (dst / "report.csv").write_text(reports_csv(rows, ks))
    (dst / "report_groups.csv").write_text(group_csv(rows, ks))
    (dst / "report.json").write_text(reports_json(rows, {"config": cfg.to_dict(), "training": histories}))
    plot_retrieval(rows, ks, dst / "fig_retrieval.png")
    plot_histories(histories, dst / "fig_training.png")


def costs_csv(rows: Sequence[UpdateCostReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COST_COLUMNS)
    for r in rows:
        w.writerow([getattr(r, c) for c in COST_COLUMNS])
    return buf.getvalue()


def costs_text(rows: Sequence[UpdateCostReport], dep: DeploymentModel) -> str:
    lines = [f"devices={dep.device_count} records_per_device={dep.records_per_device} "
             f"image_bytes={dep.image_bytes}"]
    for r in rows:
        lines.append(f"{r.strategy:<22} server_macs={r.server_macs:.3e} device_macs={r.device_macs:.3e} "
                     f"transfer={r.bytes_transferred_server_to_device:.3e}B "
                     f"stored/record={r.bytes_stored_per_record}B")
    return "\n".join(lines) + "\n"


def plot_costs(rows: Sequence[UpdateCostReport], path: Path):
    shown = [r for r in rows if r.strategy != "NoUpdate"]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    names = [r.strategy for r in shown]
    macs = [max(r.server_macs + r.device_macs, 1) for r in shown]
    moved = [max(r.bytes_transferred_server_to_device, 1) for r in shown]
    for ax, vals, label in ((axes[0], macs, "total MACs"), (axes[1], moved, "bytes to devices")):
        ax.bar(range(len(shown)), vals, color="0.4")
        ax.set_yscale("log")
        ax.set_xticks(range(len(shown)))
        ax.set_xticklabels(names, rotation=15, ha="right", fontsize=7)
        ax.set_ylabel(label)
    fig.tight_layout()
    _save(fig, path)


def emit_cost_reports(rows: Sequence[UpdateCostReport], dep: DeploymentModel, dst: Path, h_macs: int = None):
    dst = Path(dst)
    (dst / "costs.csv").write_text(costs_csv(rows))
    doc = {"deployment": {"device_count": dep.device_count, "records_per_device": dep.records_per_device,
                          "image_bytes": dep.image_bytes, "d_emb": dep.d_emb,
                          "backbone_macs": dep.new_model_macs, "transform_macs_per_record": h_macs},
           "strategies": [r.to_dict() for r in rows]}
    (dst / "costs.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (dst / "costs.txt").write_text(costs_text(rows, dep))
    plot_costs(rows, dst / "fig_costs.png")
