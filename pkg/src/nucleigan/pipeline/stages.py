"""Stage runners shared by the individual CLI verbs and ``run-all``."""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from ..imaging import read_labels, read_rgb, write_gray8, write_labels, write_rgb
from ..manifest import DatasetManifest, ManifestError, ManifestRecord, merge_manifests
from ..mask_synth import SamplerParams, ShapeDictionary, build_shape_dictionary, render_mask_image, sample_mask
from ..metrics import MetricsReport
from ..stain_norm import (
    InsufficientTissueError,
    StainBasis,
    estimate_stain_basis,
    normalize_image,
    to_optical_density,
)
from ..toy import colorize_render
from ..train_seg import SegModel, SegTrainConfig, segment_image, train_segmenter
from ..train_synth import CycleGAN, SynthTrainConfig, config_hash, generate_synthetic_dataset, pair_seeds, train_cyclegan
from .config import RunConfig, StainConfig
from .data import extract_patches, make_splits
from .report import build_report, render_overlay, write_evaluation

logger = logging.getLogger(__name__)


# stain bases on disk


def save_basis(basis: StainBasis, path: str | Path) -> None:
    doc = {"columns": basis.columns.tolist(), "density_percentiles": basis.density_percentiles.tolist()}
    atomic_write_bytes(path, (json.dumps(doc, indent=1) + "\n").encode("utf-8"))


def load_basis(path: str | Path) -> StainBasis:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return StainBasis(np.asarray(doc["columns"], float), np.asarray(doc["density_percentiles"], float))


def fit_target_basis(img: np.ndarray, cfg: StainConfig, seed: int = 0) -> StainBasis:
    basis, _ = estimate_stain_basis(to_optical_density(img), cfg.sparsity, cfg.max_iters, seed)
    return basis


def normalize_or_pass(img: np.ndarray, target: StainBasis, cfg: StainConfig, seed: int, name: str) -> np.ndarray:
    """Normalized image, or the input unchanged when it holds too little tissue."""
    try:
        return normalize_image(img, target, cfg.sparsity, cfg.max_iters, seed)
    except InsufficientTissueError as exc:
        logger.warning("%s: %s; kept original colors", name, exc)
        return np.asarray(img, np.uint8)


def stain_normalize_manifest(
    manifest: DatasetManifest, target: StainBasis, out: str | Path, cfg: StainConfig, seed: int = 0
) -> DatasetManifest:
    """Normalize every real train/test image into ``out/images``; synthetic records are kept as is."""
    out = Path(out)
    records = []
    for r in manifest.records:
        if r.source != "real" or r.split == "unassigned":
            records.append(r)
            continue
        dst = out / "images" / Path(r.image).name
        write_rgb(dst, normalize_or_pass(read_rgb(r.image), target, cfg, seed, Path(r.image).name))
        records.append(replace(r, image=str(dst)))
    return DatasetManifest(records, manifest.config_hash, manifest.created_at)


# dictionaries and synthesis


def build_dictionary(manifest: DatasetManifest, split: str = "train", profile_resolution: int = 16) -> ShapeDictionary:
    recs = [r for r in manifest.records if r.split == split and r.source == "real"]
    if not recs:
        raise ManifestError(f"no real {split} records to build a shape dictionary from")
    return build_shape_dictionary([read_labels(r.instance_map) for r in recs], profile_resolution,
                                  [r.organ for r in recs])


def mask_source(dictionary: ShapeDictionary, params: SamplerParams):
    def source(seed: int) -> np.ndarray:
        return render_mask_image(sample_mask(dictionary, params, seed))
    return source


def train_synth_stage(
    images: list[np.ndarray], dictionary: ShapeDictionary, params: SamplerParams, cfg: SynthTrainConfig,
    out: str | Path | None = None,
) -> tuple[CycleGAN, list[dict]]:
    """Train the mask/image cycle and optionally save the generator checkpoint.

    The checkpoint carries the shape dictionary and sampler so generation
    needs nothing else.
    """
    if not images:
        raise ValueError("synthesis training needs at least one real image")
    shapes = {np.asarray(im).shape[:2] for im in images}
    if shapes != {tuple(params.canvas)}:
        raise ValueError(f"real image sizes {sorted(shapes)} differ from the sampler canvas {params.canvas}")
    model = CycleGAN(cfg)
    history = train_cyclegan(model, images, mask_source(dictionary, params))
    if out is not None:
        extras = {"dictionary": dictionary.to_text(), "sampler": params.to_dict(),
                  "train_config": cfg.to_dict(), "history": history}
        save_checkpoint(out, model.G, model.G_spec, extras)
    return model, history


def load_generator(path: str | Path):
    G, spec, extras = load_checkpoint(path)
    dictionary = ShapeDictionary.from_text(extras["dictionary"]) if "dictionary" in extras else None
    params = SamplerParams(**extras["sampler"]) if "sampler" in extras else None
    return G, dictionary, params


def generate_stage(
    G, dictionary: ShapeDictionary, params: SamplerParams, count: int, seed: int, out: str | Path,
    created_at: str | None = None, overwrite: bool = False,
) -> DatasetManifest:
    colorize = colorize_render if G is None else None
    return generate_synthetic_dataset(G, dictionary, count, seed, out, params, overwrite=overwrite,
                                      created_at=created_at, colorize=colorize)


def synth_masks_stage(dictionary: ShapeDictionary, params: SamplerParams, count: int, seed: int, out: str | Path) -> list[int]:
    """Write sampled instance maps and renders without translating them."""
    out = Path(out)
    seeds = pair_seeds(seed, count)
    for i, s in enumerate(seeds):
        pair = sample_mask(dictionary, params, s)
        name = f"mask_{i:06d}.png"
        write_labels(out / "labels" / name, pair.instances)
        write_gray8(out / "renders" / name, render_mask_image(pair)[..., 0])
    return seeds


# segmentation


def record_render(rec: ManifestRecord) -> np.ndarray:
    if rec.render is not None and Path(rec.render).is_file():
        return read_labels(rec.render).astype(np.uint8)
    return render_mask_image(read_labels(rec.instance_map))


def train_seg_stage(manifest: DatasetManifest, cfg: SegTrainConfig, out: str | Path | None = None) -> tuple[SegModel, list[dict]]:
    recs = manifest.split("train")
    if not recs:
        raise ManifestError("manifest has no train records")
    pairs = [(read_rgb(r.image), record_render(r)) for r in recs]
    model = SegModel(cfg)
    history = train_segmenter(model, pairs)
    if out is not None:
        save_checkpoint(out, model.S, model.S_spec, {"train_config": cfg.to_dict(), "history": history})
    return model, history


def segment_stage(S, images: list[Path], out: str | Path, tile: int = 256, overlap: int = 32,
                  min_area: int = 30, target_basis: StainBasis | None = None) -> list[Path]:
    """Write ``out/labels/<name>`` (16-bit instances) and ``out/prob/<name>`` (8-bit)."""
    out = Path(out)
    written = []
    for p in images:
        prob, inst = segment_image(S, read_rgb(p), tile, overlap, target_basis, min_area)
        name = Path(p).with_suffix(".png").name
        write_labels(out / "labels" / name, inst)
        write_gray8(out / "prob" / name, np.clip(np.round(prob * 255.0), 0, 255).astype(np.uint8))
        written.append(out / "labels" / name)
    return written


def evaluate_stage(records: list[ManifestRecord], pred_dir: str | Path, method: str = "proposed") -> MetricsReport:
    """Score predictions ``pred_dir/<image name>.png`` against each record's instance map."""
    pred_dir = Path(pred_dir)
    report = MetricsReport(method=method)
    for r in records:
        name = Path(r.image).with_suffix(".png").name
        pred_path = pred_dir / name
        if not pred_path.is_file():
            raise FileNotFoundError(f"no prediction for {name} in {pred_dir}")
        report.add(name, r.organ, read_labels(r.instance_map), read_labels(pred_path))
    return report


def write_overlays(records: list[ManifestRecord], pred_dir: str | Path, out: str | Path) -> None:
    pred_dir, out = Path(pred_dir), Path(out)
    for r in records:
        name = Path(r.image).with_suffix(".png").name
        overlay = render_overlay(read_labels(r.instance_map), read_labels(pred_dir / name), read_rgb(r.image))
        write_rgb(out / name, overlay)


# full pipeline


def run_all(cfg: RunConfig) -> dict[str, Path]:
    """Extract, split, normalize, synthesize, train, segment, evaluate and report.

    Everything lands under ``cfg.work_dir``; re-running overwrites it.
    """
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    cfg.save(work / "run_config.yaml")
    chash = config_hash(cfg.to_dict())
    created = cfg.created_at

    ext = extract_patches(cfg.tiles_dir, work / "patches", cfg.data.patch, cfg.data.stride, created)
    for err in ext.errors:
        logger.error("extraction: %s", err)
    real = make_splits(ext.manifest, cfg.data.train_organs, cfg.data.test_organs)
    real.save(work / "patches" / "split_manifest.json")

    if cfg.stain.enabled:
        if cfg.stain.target is not None:
            target_img = read_rgb(cfg.stain.target)
        else:
            target_img = read_rgb(real.split("train")[0].image) if real.split("train") else read_rgb(real.split("test")[0].image)
        target = fit_target_basis(target_img, cfg.stain, cfg.seed)
        save_basis(target, work / "stain" / "target_basis.json")
        real = stain_normalize_manifest(real, target, work / "stain", cfg.stain, cfg.seed)

    dictionary = build_dictionary(real, "train", cfg.synth.profile_resolution)
    dictionary.save(work / "shape_dictionary.jsonl")

    G = None
    if cfg.synth.mode == "gan":
        images = [read_rgb(r.image) for r in real.split("train") if r.source == "real"]
        model, _ = train_synth_stage(images, dictionary, cfg.synth.sampler, cfg.synth.train,
                                     work / "models" / "synth_generator.npz")
        G = model.G
    synth_dir = work / "synthetic"
    if synth_dir.exists():
        shutil.rmtree(synth_dir)
    synth = generate_stage(G, dictionary, cfg.synth.sampler, cfg.synth.count, cfg.seed, synth_dir, created)

    merged = merge_manifests(real, synth, config_hash=chash, created_at=created)
    merged.validate()
    merged.save(work / "manifest.json")

    seg_model, _ = train_seg_stage(merged, cfg.seg, work / "models" / "segmenter.npz")
    test = merged.split("test")
    pred_dir = work / "predictions"
    inf = cfg.inference
    segment_stage(seg_model.S, [Path(r.image) for r in test], pred_dir, inf.tile, inf.overlap, inf.min_area)
    report = evaluate_stage(test, pred_dir / "labels")
    eval_csv, eval_json = write_evaluation(report, work / "evaluation")
    rep_csv, rep_json = build_report([report], work / "report")
    write_overlays(test, pred_dir / "labels", work / "overlays")
    return {"manifest": work / "manifest.json", "evaluation_csv": eval_csv, "evaluation_json": eval_json,
            "report_csv": rep_csv, "report_json": rep_json}
