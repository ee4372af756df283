"""Tile ingestion, patch extraction, organ/patient splits and polygon rasterization.

Tile directory layout::

    tiles/images/<id>.png     8-bit RGB (or .tif)
    tiles/labels/<id>.png     16-bit instance map, same size
    tiles/meta.csv            columns id, organ, patient (optional)
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from skimage.draw import polygon as draw_polygon

from ..imaging import list_images, read_labels, read_rgb, write_labels, write_rgb
from ..manifest import DatasetManifest, ManifestError, ManifestRecord
from ..metrics import canonicalize

logger = logging.getLogger(__name__)

PAPER_TRAIN_ORGANS = ("breast", "liver", "kidney", "prostate")
PAPER_TEST_ORGANS = ("breast", "liver", "kidney", "prostate", "bladder", "colon", "stomach", "esophagus", "ovary")


@dataclass
class ExtractionResult:
    manifest: DatasetManifest
    errors: list[dict] = field(default_factory=list)


def read_meta(path: str | Path) -> dict[str, dict[str, str]]:
    """``id -> {"organ": ..., "patient": ...}`` from a CSV with an ``id`` column."""
    path = Path(path)
    if not path.is_file():
        return {}
    with path.open(newline="", encoding="utf-8") as fh:
        return {row["id"]: {k: v for k, v in row.items() if k != "id"} for row in csv.DictReader(fh)}


def patch_origins(length: int, patch: int, stride: int) -> list[int]:
    if length < patch:
        return []
    return list(range(0, length - patch + 1, stride))


def extract_patches(
    tiles: str | Path,
    out: str | Path,
    patch: int = 256,
    stride: int = 248,
    created_at: str | None = None,
) -> ExtractionResult:
    """Cut every tile into ``patch``-sized windows on a ``stride`` grid.

    Instance maps are relabeled 1..k within each patch. A tile whose image
    and instance map differ in size is reported in ``errors`` and skipped.
    """
    tiles, out = Path(tiles), Path(out)
    meta = read_meta(tiles / "meta.csv")
    label_dir = tiles / "labels"
    records, errors = [], []
    for img_path in list_images(tiles / "images"):
        tid = img_path.stem
        lab_path = next((p for p in list_images(label_dir) if p.stem == tid), None) if label_dir.is_dir() else None
        if lab_path is None:
            errors.append({"tile": tid, "error": "missing instance map"})
            logger.error("tile %s: missing instance map", tid)
            continue
        img, lab = read_rgb(img_path), read_labels(lab_path)
        if img.shape[:2] != lab.shape:
            errors.append({"tile": tid, "error": f"size mismatch {img.shape[:2]} vs {lab.shape}"})
            logger.error("tile %s: image %s and instance map %s differ", tid, img.shape[:2], lab.shape)
            continue
        info = meta.get(tid, {})
        organ, patient = info.get("organ", "unknown"), info.get("patient", "unknown")
        for y in patch_origins(img.shape[0], patch, stride):
            for x in patch_origins(img.shape[1], patch, stride):
                name = f"{tid}_r{y:04d}_c{x:04d}.png"
                ip, lp = out / "images" / name, out / "labels" / name
                write_rgb(ip, img[y : y + patch, x : x + patch])
                write_labels(lp, canonicalize(lab[y : y + patch, x : x + patch]))
                records.append(ManifestRecord(str(ip), str(lp), organ, patient, "unassigned", "real"))
    kwargs = {"created_at": created_at} if created_at else {}
    manifest = DatasetManifest(records, "", **kwargs)
    manifest.save(out / "manifest.json")
    return ExtractionResult(manifest, errors)


def make_splits(manifest: DatasetManifest, train_organs, test_organs) -> DatasetManifest:
    """Assign real records to train/test by organ, splitting shared organs by patient.

    Organs only in ``train_organs`` go to train, organs only in
    ``test_organs`` go to test. For an organ in both, its patients are sorted
    and the first half (rounded up) trains. Synthetic records always train;
    real records of other organs stay unassigned.
    """
    train_organs, test_organs = set(train_organs), set(test_organs)
    available = sorted({r.organ for r in manifest.records if r.source == "real"})
    absent = sorted((train_organs | test_organs) - set(available))
    if absent:
        raise ManifestError(f"organs {absent} not in manifest; available: {available}")
    patient_split: dict[tuple[str, str], str] = {}
    for organ in sorted(train_organs & test_organs):
        patients = sorted({r.patient for r in manifest.records if r.organ == organ and r.source == "real"})
        n_train = (len(patients) + 1) // 2
        for i, p in enumerate(patients):
            patient_split[(organ, p)] = "train" if i < n_train else "test"
    records = []
    for r in manifest.records:
        if r.source == "synthetic":
            split = "train"
        elif r.organ in train_organs and r.organ in test_organs:
            split = patient_split[(r.organ, r.patient)]
        elif r.organ in train_organs:
            split = "train"
        elif r.organ in test_organs:
            split = "test"
        else:
            split = "unassigned"
        records.append(replace(r, split=split))
    out = DatasetManifest(records, manifest.config_hash, manifest.created_at)
    if not out.split("test"):
        raise ManifestError("split produced an empty test set")
    train_pat = {(r.organ, r.patient) for r in out.split("train") if r.source == "real"}
    test_pat = {(r.organ, r.patient) for r in out.split("test") if r.source == "real"}
    if train_pat & test_pat:
        raise ManifestError(f"patients span splits: {sorted(train_pat & test_pat)}")
    return out


def rasterize_polygons(doc: dict | list, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Instance map from polygon vertex lists.

    ``doc`` is either ``{"height": H, "width": W, "nuclei": [poly, ...]}`` or
    a bare list of polygons (then ``shape`` is required). Each polygon is a
    list of ``[x, y]`` vertices; later polygons overwrite earlier ones.
    """
    if isinstance(doc, dict):
        polys = doc["nuclei"]
        shape = (int(doc["height"]), int(doc["width"]))
    else:
        polys = doc
    if shape is None:
        raise ValueError("image shape required for a bare polygon list")
    out = np.zeros(shape, np.int32)
    for k, poly in enumerate(polys, start=1):
        pts = np.asarray(poly, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
            raise ValueError(f"polygon {k} needs at least 3 [x, y] vertices")
        rr, cc = draw_polygon(pts[:, 1], pts[:, 0], shape=shape)
        out[rr, cc] = k
    return canonicalize(out)


def convert_polygon_file(src: str | Path, dst: str | Path, shape: tuple[int, int] | None = None) -> np.ndarray:
    labels = rasterize_polygons(json.loads(Path(src).read_text(encoding="utf-8")), shape)
    write_labels(dst, labels)
    return labels
