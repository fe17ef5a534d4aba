"""Report rendering: a tab-separated table, a JSON sidecar and PNG figures."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import BenchReport

COLUMNS = ("method", "C", "L", "P", "memory_tokens", "compression_ratio", "accuracy", "score", "n_eval", "T")


def render_table(report: BenchReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["# seed", report.seed, "config", report.config_digest])
    w.writerow(["# score column is a placeholder: 5 x exact-match rate"])
    w.writerow(COLUMNS)
    for r in report.rows:
        w.writerow([r.method, r.C, r.L, r.P, r.memory_tokens, r.ratio_text, f"{r.accuracy:.1f}",
                    f"{r.mean_score:.2f}", r.n_eval, r.n_frames])
    for name, ok, detail in report.gates:
        w.writerow(["# gate", name, "PASS" if ok else "FAIL", detail])
    return buf.getvalue()


def digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def plot_accuracy_vs_C(report: BenchReport, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    families: dict[str, list] = {}
    for r in report.rows:
        families.setdefault(r.method.split("-")[0], []).append((r.C, r.accuracy))
    for name, pts in sorted(families.items()):
        pts.sort()
        ax.plot([c for c, _ in pts], [a for _, a in pts], marker="o", label=name)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("context tokens per frame (C)")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_accuracy_vs_T(sweep: Sequence[tuple[str, int, float]], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    series: dict[str, list] = {}
    for method, T, acc in sweep:
        series.setdefault(method, []).append((T, acc))
    for name, pts in sorted(series.items()):
        pts.sort()
        ax.plot([t for t, _ in pts], [a for _, a in pts], marker="o", label=name)
    ax.set_xlabel("frames per stream (T)")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def write_report(report: BenchReport, out_dir: str | Path, sweep: Sequence[tuple[str, int, float]] = (),
                 plots: bool = True) -> str:
    """Writes report.tsv, report.json and figures; returns the table digest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(report)
    (out / "report.tsv").write_text(table)
    body = report.as_dict()
    body["t_sweep"] = [{"method": m, "T": t, "accuracy": a} for m, t, a in sweep]
    body["digest"] = digest(table)
    (out / "report.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    if plots:
        plot_accuracy_vs_C(report, out / "accuracy_vs_C.png")
        if sweep:
            plot_accuracy_vs_T(sweep, out / "accuracy_vs_T.png")
    return body["digest"]
