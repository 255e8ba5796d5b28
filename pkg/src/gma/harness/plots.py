"""CSV data behind heatmap, histogram and table figures.

No plotting library is involved: every artifact is a plain CSV that any tool
can render.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from gma.errors import ContractError

HIST_BINS = 10
TABLE_COLUMNS = ("R@1", "R@5", "R@10", "MRR", "Mean", "NDCG")


def _rows_csv(rows, header=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header is not None:
        w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def heatmap_csv(grid) -> str:
    """One CSV row per grid row."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ContractError(f"heatmap needs a 2-D grid, got dims {list(g.shape)}")
    return _rows_csv(g.tolist())


def _unit(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)


def joint_histogram(a, b, bins: int = HIST_BINS) -> np.ndarray:
    """Normalised 2-D histogram of paired cell values; each map is min-max scaled first."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or a.size == 0:
        raise ContractError("joint histogram needs two non-empty maps of equal size")
    h, _, _ = np.histogram2d(_unit(a), _unit(b), bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    return h / h.sum()


def metrics_table_csv(metrics: dict[str, dict]) -> str:
    rows = [[name, *(metrics[name][c] for c in TABLE_COLUMNS)] for name in sorted(metrics)]
    return _rows_csv(rows, header=["variant", *TABLE_COLUMNS])


def emit_plot_data(report: dict, out_dir: str | Path) -> list[Path]:
    """Write heatmaps per round, the joint histogram, the metric table and the loss curve.

    ``report`` is the dict form of a run report.
    """
    out = Path(out_dir)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def put(rel: str, text: str) -> None:
        path = out / rel
        path.write_text(text)
        written.append(path)

    examples = report.get("examples", {})
    for key in ("attention", "saliency"):
        for r, grid in enumerate(examples.get(key, [])):
            put(f"heatmaps/{key}_round_{r:02d}.csv", heatmap_csv(grid))
    if "attention" in examples and "saliency" in examples:
        hist = joint_histogram(examples["attention"], examples["saliency"])
        put("joint_histogram.csv", heatmap_csv(hist))
    put("metrics.csv", metrics_table_csv(report["metrics"]))
    put("loss_curve.csv", _rows_csv(enumerate(report["losses"]), header=["epoch", "loss"]))
    return written
