"""Result tables and green/red comparison overlays."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from ..checkpoint import atomic_write_bytes
from ..metrics import MetricsReport

GREEN = np.array([0.0, 255.0, 0.0])
RED = np.array([255.0, 0.0, 0.0])
TINT_ALPHA = 0.5

PER_IMAGE_COLUMNS = ("image", "organ", "aji", "hausdorff", "f1", "tp", "fp", "fn")
SUMMARY_COLUMNS = ("method", "organ", "n_images", "aji", "hausdorff", "f1")
SUMMARY_HEADER = (
    "# per-organ rows are means over that organ's images; "
    "the overall row is the mean over all images, not over organs\n"
)


def render_overlay(gt: np.ndarray, pred: np.ndarray, img: np.ndarray) -> np.ndarray:
    """Green where both maps are foreground, red where exactly one is."""
    gt_fg, pred_fg = np.asarray(gt) > 0, np.asarray(pred) > 0
    if gt_fg.shape != pred_fg.shape or gt_fg.shape != np.asarray(img).shape[:2]:
        raise ValueError("overlay inputs must share spatial dimensions")
    out = np.asarray(img, dtype=np.float64).copy()
    both = gt_fg & pred_fg
    one = gt_fg ^ pred_fg
    out[both] = (1 - TINT_ALPHA) * out[both] + TINT_ALPHA * GREEN
    out[one] = (1 - TINT_ALPHA) * out[one] + TINT_ALPHA * RED
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def per_image_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PER_IMAGE_COLUMNS)
    for r in report.per_image:
        w.writerow([_fmt(getattr(r, c)) for c in PER_IMAGE_COLUMNS])
    return buf.getvalue()


def write_evaluation(report: MetricsReport, out: str | Path) -> tuple[Path, Path]:
    """Per-image CSV at ``out`` (suffix forced to .csv) plus a JSON twin."""
    out = Path(out)
    csv_p, json_p = out.with_suffix(".csv"), out.with_suffix(".json")
    atomic_write_bytes(csv_p, per_image_csv(report).encode("utf-8"))
    atomic_write_bytes(json_p, (json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n").encode("utf-8"))
    return csv_p, json_p


def summary_rows(reports: list[MetricsReport]) -> list[dict]:
    rows = []
    for rep in reports:
        agg = rep.aggregate()
        for organ in [o for o in agg if o != "overall"] + ["overall"]:
            rows.append({"method": rep.method, "organ": organ, **agg[organ]})
    return rows


def build_report(reports: list[MetricsReport], out: str | Path) -> tuple[Path, Path]:
    """Table of per-organ and overall means for each method, as CSV and JSON.

    ``out`` is a path stem; ``<stem>.csv`` and ``<stem>.json`` are written.
    """
    if not reports:
        raise ValueError("build_report needs at least one report")
    out = Path(out)
    rows = summary_rows(reports)
    buf = io.StringIO()
    buf.write(SUMMARY_HEADER)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    csv_p, json_p = out.with_suffix(".csv"), out.with_suffix(".json")
    atomic_write_bytes(csv_p, buf.getvalue().encode("utf-8"))
    doc = {"aggregation": SUMMARY_HEADER[2:].strip(), "rows": rows}
    atomic_write_bytes(json_p, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8"))
    return csv_p, json_p


def read_summary_csv(path: str | Path) -> list[dict]:
    """Parse a table written by :func:`build_report` back into typed rows."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    rows = []
    for row in csv.DictReader(lines):
        rows.append({
            "method": row["method"],
            "organ": row["organ"],
            "n_images": int(row["n_images"]),
            "aji": float(row["aji"]),
            "hausdorff": float(row["hausdorff"]),
            "f1": float(row["f1"]),
        })
    return rows
