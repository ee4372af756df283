"""Instance-level segmentation metrics: AJI, Hausdorff distance and F1."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


class EmptyPointSetError(ValueError):
    pass


def _check_same_shape(gt: np.ndarray, pred: np.ndarray) -> None:
    if gt.shape != pred.shape:
        raise ValueError(f"instance maps differ in shape: {gt.shape} vs {pred.shape}")


def canonicalize(labels: np.ndarray) -> np.ndarray:
    """Relabel to 1..K in raster order of each label's first pixel."""
    labels = np.asarray(labels)
    flat = labels.ravel()
    fg = np.flatnonzero(flat)
    out = np.zeros(labels.shape, np.int32)
    if fg.size == 0:
        return out
    vals = flat[fg]
    uniq, first = np.unique(vals, return_index=True)
    order = np.argsort(first, kind="stable")
    lut = {int(uniq[i]): k + 1 for k, i in enumerate(order)}
    mapper = np.vectorize(lut.__getitem__, otypes=[np.int32])
    out.ravel()[fg] = mapper(vals)
    return out


def connected_components(mask: np.ndarray, connectivity: int = 8) -> np.ndarray:
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    structure = np.ones((3, 3), bool) if connectivity == 8 else ndimage.generate_binary_structure(2, 1)
    labels, _ = ndimage.label(np.asarray(mask).astype(bool), structure=structure)
    return canonicalize(labels)


def remove_small(labels: np.ndarray, min_area: int) -> np.ndarray:
    counts = np.bincount(labels.ravel())
    small = counts < min_area
    small[0] = False
    out = labels.copy()
    out[small[labels]] = 0
    return canonicalize(out)


def _overlaps(gt: np.ndarray, pred: np.ndarray):
    """Label ids, areas and the dense intersection table of two maps."""
    g_ids = np.unique(gt[gt > 0])
    p_ids = np.unique(pred[pred > 0])
    g_idx = np.zeros(int(gt.max(initial=0)) + 1, np.int64)
    p_idx = np.zeros(int(pred.max(initial=0)) + 1, np.int64)
    g_idx[g_ids] = np.arange(1, len(g_ids) + 1)
    p_idx[p_ids] = np.arange(1, len(p_ids) + 1)
    gi, pi = g_idx[gt.ravel()], p_idx[pred.ravel()]
    table = np.zeros((len(g_ids) + 1, len(p_ids) + 1), np.int64)
    np.add.at(table, (gi, pi), 1)
    g_area = table.sum(axis=1)[1:]
    p_area = table.sum(axis=0)[1:]
    inter = table[1:, 1:]
    return g_ids, p_ids, g_area, p_area, inter


def aji(gt: np.ndarray, pred: np.ndarray) -> float:
    """Aggregated Jaccard Index.

    Ground-truth instances are visited in ascending label order and each
    takes the still-unused prediction with the highest Jaccard index (lowest
    label on ties). A ground-truth instance overlapping no unused prediction
    contributes only its own area. Predictions left unused are ghosts and
    their areas join the denominator.
    """
    gt, pred = np.asarray(gt), np.asarray(pred)
    _check_same_shape(gt, pred)
    g_ids, p_ids, g_area, p_area, inter = _overlaps(gt, pred)
    if len(g_ids) == 0 and len(p_ids) == 0:
        return 1.0
    union = g_area[:, None] + p_area[None, :] - inter
    jac = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    used = np.zeros(len(p_ids), bool)
    num = 0
    den = 0
    for i in range(len(g_ids)):
        cand = np.where(used, -1.0, jac[i])
        j = int(np.argmax(cand)) if len(p_ids) else -1
        if j < 0 or cand[j] <= 0:
            den += int(g_area[i])
            continue
        used[j] = True
        num += int(inter[i, j])
        den += int(union[i, j])
    den += int(p_area[~used].sum())
    return num / den if den > 0 else 1.0


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two (N, 2) point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise EmptyPointSetError("hausdorff distance needs two non-empty point sets")
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba))


def _greedy_jaccard_matches(jac: np.ndarray, min_jaccard: float = 0.0) -> list[tuple[int, int]]:
    """Greedy one-to-one matching by descending Jaccard (ties by gt, pred index)."""
    gi, pi = np.nonzero(jac > min_jaccard)
    order = np.lexsort((pi, gi, -jac[gi, pi]))
    g_used, p_used = set(), set()
    matches = []
    for k in order:
        g, p = int(gi[k]), int(pi[k])
        if g in g_used or p in p_used:
            continue
        g_used.add(g)
        p_used.add(p)
        matches.append((g, p))
    return matches


def _jaccard_table(gt: np.ndarray, pred: np.ndarray):
    g_ids, p_ids, g_area, p_area, inter = _overlaps(gt, pred)
    union = g_area[:, None] + p_area[None, :] - inter
    jac = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return g_ids, p_ids, jac


def bbox_diagonal(coords: np.ndarray) -> float:
    h = coords[:, 0].max() - coords[:, 0].min() + 1
    w = coords[:, 1].max() - coords[:, 1].min() + 1
    return math.hypot(h, w)


def image_hausdorff(gt: np.ndarray, pred: np.ndarray) -> float:
    """Mean per-instance Hausdorff distance over one image.

    Matched pairs contribute their Hausdorff distance; every unmatched
    instance on either side contributes its bounding-box diagonal.
    """
    gt, pred = np.asarray(gt), np.asarray(pred)
    _check_same_shape(gt, pred)
    g_ids, p_ids, jac = _jaccard_table(gt, pred)
    if len(g_ids) == 0 and len(p_ids) == 0:
        return 0.0
    g_pts = _point_sets(gt, g_ids)
    p_pts = _point_sets(pred, p_ids)
    matches = _greedy_jaccard_matches(jac)
    values = [hausdorff(g_pts[g], p_pts[p]) for g, p in matches]
    mg = {g for g, _ in matches}
    mp = {p for _, p in matches}
    values += [bbox_diagonal(g_pts[i]) for i in range(len(g_ids)) if i not in mg]
    values += [bbox_diagonal(p_pts[j]) for j in range(len(p_ids)) if j not in mp]
    return float(np.mean(values))


def _point_sets(labels: np.ndarray, ids: np.ndarray) -> list[np.ndarray]:
    objs = ndimage.find_objects(labels)
    out = []
    for lab in ids:
        sl = objs[lab - 1]
        ys, xs = np.nonzero(labels[sl] == lab)
        out.append(np.stack([ys + sl[0].start, xs + sl[1].start], axis=1))
    return out


def f1_score(gt: np.ndarray, pred: np.ndarray, iou_threshold: float = 0.5) -> tuple[float, int, int, int]:
    gt, pred = np.asarray(gt), np.asarray(pred)
    _check_same_shape(gt, pred)
    g_ids, p_ids, jac = _jaccard_table(gt, pred)
    tp = len(_greedy_jaccard_matches(jac, iou_threshold))
    fp = len(p_ids) - tp
    fn = len(g_ids) - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0, tp, fp, fn
    return 2 * precision * recall / (precision + recall), tp, fp, fn


@dataclass
class ImageMetrics:
    image: str
    organ: str
    aji: float
    hausdorff: float
    f1: float
    tp: int
    fp: int
    fn: int


@dataclass
class MetricsReport:
    per_image: list[ImageMetrics] = field(default_factory=list)
    method: str = "proposed"

    def add(self, image: str, organ: str, gt: np.ndarray, pred: np.ndarray) -> ImageMetrics:
        rec = evaluate_pair(image, organ, gt, pred)
        self.per_image.append(rec)
        return rec

    def aggregate(self) -> dict:
        """Per-organ means plus an overall mean taken over images."""
        out: dict[str, dict] = {}
        organs = sorted({r.organ for r in self.per_image})
        for organ in organs:
            out[organ] = _mean_record([r for r in self.per_image if r.organ == organ])
        out["overall"] = _mean_record(self.per_image)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls([ImageMetrics(**r) for r in d["per_image"]], d.get("method", "proposed"))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "per_image": [asdict(r) for r in self.per_image],
            "aggregate": self.aggregate(),
        }


def _mean_record(records: list[ImageMetrics]) -> dict:
    if not records:
        return {"n_images": 0, "aji": float("nan"), "hausdorff": float("nan"), "f1": float("nan")}
    return {
        "n_images": len(records),
        "aji": float(np.mean([r.aji for r in records])),
        "hausdorff": float(np.mean([r.hausdorff for r in records])),
        "f1": float(np.mean([r.f1 for r in records])),
    }


def evaluate_pair(image: str, organ: str, gt: np.ndarray, pred: np.ndarray) -> ImageMetrics:
    f1, tp, fp, fn = f1_score(gt, pred)
    return ImageMetrics(image, organ, aji(gt, pred), image_hausdorff(gt, pred), f1, tp, fp, fn)
