"""Command-line entry point: ``nucleigan <verb> ...``.

Failures print a JSON object ``{"error", "message", "verb"}`` on stderr and
exit nonzero (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..checkpoint import load_checkpoint
from ..imaging import list_images, read_rgb, write_rgb
from ..manifest import DatasetManifest, ManifestError, merge_manifests
from ..mask_synth import SamplerParams, ShapeDictionary
from ..metrics import MetricsReport
from ..toy import make_toy_tiles
from ..train_seg import SegTrainConfig
from ..train_synth import SynthTrainConfig
from .config import RunConfig, StainConfig
from .data import convert_polygon_file, extract_patches, make_splits
from .report import build_report, write_evaluation
from . import stages

logger = logging.getLogger("nucleigan")


class UsageError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _inputs(path: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        return list_images(p)
    if p.is_file():
        return [p]
    raise FileNotFoundError(f"no such file or directory: {path}")


def _run_config(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _sampler(args, default: SamplerParams) -> SamplerParams:
    d = default.to_dict()
    if getattr(args, "canvas", None):
        d["canvas"] = list(args.canvas)
    if getattr(args, "target_count", None) is not None:
        d["target_count"] = args.target_count
    return SamplerParams(**d)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True, default=str))


# verbs


def cmd_stain_normalize(args) -> None:
    cfg = StainConfig(True, args.target, args.sparsity, args.max_iters)
    if args.target_basis:
        target = stages.load_basis(args.target_basis)
    elif args.target:
        target = stages.fit_target_basis(read_rgb(args.target), cfg, args.seed)
    else:
        raise UsageError("pass --target IMAGE or --target-basis JSON")
    out = Path(args.out)
    stages.save_basis(target, out / "target_basis.json")
    paths = _inputs(args.input)
    for p in paths:
        write_rgb(out / "images" / p.with_suffix(".png").name,
                  stages.normalize_or_pass(read_rgb(p), target, cfg, args.seed, p.name))
    _print({"normalized": len(paths), "out": str(out)})


def cmd_build_dict(args) -> None:
    man = DatasetManifest.load(args.manifest)
    d = stages.build_dictionary(man, args.split, args.profile_resolution)
    d.save(args.out)
    _print({"entries": len(d), "out": args.out})


def cmd_synth_masks(args) -> None:
    d = ShapeDictionary.load(args.dict)
    params = _sampler(args, _run_config(args.config).synth.sampler)
    seeds = stages.synth_masks_stage(d, params, args.count, args.seed, args.out)
    _print({"count": len(seeds), "out": args.out})


def cmd_train_synth(args) -> None:
    rc = _run_config(args.config)
    tcfg = rc.synth.train.to_dict()
    for key in ("epochs", "lr_decay_start_epoch", "gen_width", "n_resblocks", "disc_width", "seed"):
        if getattr(args, key) is not None:
            tcfg[key] = getattr(args, key)
    cfg = SynthTrainConfig(**tcfg)
    d = ShapeDictionary.load(args.dict)
    images = [read_rgb(p) for p in _inputs(args.images)]
    h, w = images[0].shape[:2] if images else (256, 256)
    params = _sampler(args, SamplerParams(**{**rc.synth.sampler.to_dict(), "canvas": [h, w]}))
    _, history = stages.train_synth_stage(images, d, params, cfg, args.out)
    _print({"epochs": len(history), "final": history[-1] if history else {}, "out": args.out})


def cmd_generate_synth(args) -> None:
    rc = _run_config(args.config)
    if args.toy:
        G, d, params = None, None, rc.synth.sampler
    elif args.checkpoint:
        G, d, params = stages.load_generator(args.checkpoint)
    else:
        raise UsageError("pass --checkpoint or --toy")
    if args.dict:
        d = ShapeDictionary.load(args.dict)
    if d is None:
        raise UsageError("no shape dictionary: pass --dict")
    params = _sampler(args, params or rc.synth.sampler)
    man = stages.generate_stage(G, d, params, args.count, args.seed, args.out, args.created_at, args.overwrite)
    _print({"count": len(man), "out": args.out, "config_hash": man.config_hash})


def cmd_train_seg(args) -> None:
    rc = _run_config(args.config)
    scfg = rc.seg.to_dict()
    for key in ("epochs", "lr_decay_start_epoch", "gen_width", "n_levels", "disc_width", "seed"):
        if getattr(args, key) is not None:
            scfg[key] = getattr(args, key)
    if args.l1_only:
        scfg["adversarial"] = False
    mans = [DatasetManifest.load(p) for p in args.manifest]
    man = mans[0] if len(mans) == 1 else merge_manifests(*mans, created_at=mans[0].created_at)
    out = Path(args.out)
    if out.suffix != ".npz":
        out = out / "segmenter.npz"
    _, history = stages.train_seg_stage(man, SegTrainConfig(**scfg), out)
    _print({"epochs": len(history), "final": history[-1] if history else {}, "out": str(out)})


def cmd_segment(args) -> None:
    S, _, _ = load_checkpoint(args.checkpoint)
    basis = stages.load_basis(args.target_basis) if args.target_basis else None
    written = stages.segment_stage(S, _inputs(args.input), args.out, args.tile, args.overlap, args.min_area, basis)
    _print({"segmented": len(written), "out": args.out})


def cmd_evaluate(args) -> None:
    man = DatasetManifest.load(args.manifest)
    records = man.split(args.split)
    if not records:
        raise ManifestError(f"manifest has no {args.split} records")
    report = stages.evaluate_stage(records, args.pred, args.method)
    csv_p, json_p = write_evaluation(report, args.out)
    if args.overlays:
        stages.write_overlays(records, args.pred, args.overlays)
    _print({"csv": str(csv_p), "json": str(json_p), "overall": report.aggregate()["overall"]})


def cmd_report(args) -> None:
    reports = [MetricsReport.from_dict(json.loads(Path(p).read_text(encoding="utf-8"))) for p in args.evaluations]
    csv_p, json_p = build_report(reports, args.out)
    _print({"csv": str(csv_p), "json": str(json_p)})


def cmd_run_all(args) -> None:
    cfg = RunConfig.load(args.config)
    _print({k: str(v) for k, v in stages.run_all(cfg).items()})


def cmd_extract_patches(args) -> None:
    res = extract_patches(args.tiles, args.out, args.patch, args.stride, args.created_at)
    _print({"patches": len(res.manifest), "errors": res.errors})


def cmd_make_splits(args) -> None:
    man = DatasetManifest.load(args.manifest)
    extra = [DatasetManifest.load(p) for p in args.add]
    out = make_splits(merge_manifests(man, *extra, config_hash=man.config_hash, created_at=man.created_at),
                      args.train_organs, args.test_organs)
    out.save(args.out)
    _print({"train": len(out.split("train")), "test": len(out.split("test")), "out": args.out})


def cmd_convert_polygons(args) -> None:
    labels = convert_polygon_file(args.input, args.out, tuple(args.shape) if args.shape else None)
    _print({"instances": int(labels.max()), "out": args.out})


def cmd_make_toy_tiles(args) -> None:
    layout = {}
    for item in args.organs:
        organ, _, n = item.partition(":")
        layout[organ] = [f"p{i}" for i in range(int(n or 1))]
    ids = make_toy_tiles(args.out, layout, args.tiles_per_patient, args.size, args.target_count, args.seed)
    _print({"tiles": len(ids), "out": args.out})


def build_parser() -> argparse.ArgumentParser:
    p = JsonArgumentParser(prog="nucleigan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=JsonArgumentParser)

    def verb(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    def sampler_args(sp):
        sp.add_argument("--canvas", type=int, nargs=2, metavar=("H", "W"))
        sp.add_argument("--target-count", type=int)

    sp = verb("stain-normalize", cmd_stain_normalize, "normalize images to a target stain basis")
    sp.add_argument("--input", required=True, help="image file or directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--target", help="target image")
    sp.add_argument("--target-basis", help="saved target_basis.json")
    sp.add_argument("--sparsity", type=float, default=StainConfig.sparsity)
    sp.add_argument("--max-iters", type=int, default=StainConfig.max_iters)
    sp.add_argument("--seed", type=int, default=0)

    sp = verb("build-dict", cmd_build_dict, "build a nucleus shape dictionary from annotated patches")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--profile-resolution", type=int, default=16)
    sp.add_argument("--out", required=True)

    sp = verb("synth-masks", cmd_synth_masks, "sample synthetic instance maps and renders")
    sp.add_argument("--dict", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sampler_args(sp)

    sp = verb("train-synth", cmd_train_synth, "train the mask-to-image cycle model")
    sp.add_argument("--images", required=True, help="directory of real patches")
    sp.add_argument("--dict", required=True)
    sp.add_argument("--out", required=True, help="generator checkpoint (.npz)")
    sp.add_argument("--config")
    for flag in ("epochs", "lr-decay-start-epoch", "gen-width", "n-resblocks", "disc-width", "seed"):
        sp.add_argument(f"--{flag}", type=int)
    sampler_args(sp)

    sp = verb("generate-synth", cmd_generate_synth, "generate synthetic image/instance-map pairs")
    sp.add_argument("--checkpoint")
    sp.add_argument("--toy", action="store_true", help="colorize renders instead of using a generator")
    sp.add_argument("--dict")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--overwrite", action="store_true")
    sp.add_argument("--created-at")
    sp.add_argument("--config")
    sampler_args(sp)

    sp = verb("train-seg", cmd_train_seg, "train the conditional adversarial segmenter")
    sp.add_argument("--manifest", "--data", nargs="+", required=True, help="one or more manifests")
    sp.add_argument("--out", required=True, help="checkpoint file (.npz) or directory")
    sp.add_argument("--config")
    sp.add_argument("--l1-only", action="store_true")
    for flag in ("epochs", "lr-decay-start-epoch", "gen-width", "n-levels", "disc-width", "seed"):
        sp.add_argument(f"--{flag}", type=int)

    sp = verb("segment", cmd_segment, "segment images with a trained segmenter")
    sp.add_argument("--checkpoint", "--ckpt", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--tile", type=int, default=256)
    sp.add_argument("--overlap", type=int, default=32)
    sp.add_argument("--min-area", type=int, default=30)
    sp.add_argument("--target-basis")

    sp = verb("evaluate", cmd_evaluate, "score predictions against ground truth")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--pred", required=True, help="directory of predicted instance maps")
    sp.add_argument("--split", default="test")
    sp.add_argument("--method", default="proposed")
    sp.add_argument("--out", required=True, help="output stem; writes .csv and .json")
    sp.add_argument("--overlays", help="directory for overlay images")

    sp = verb("report", cmd_report, "summarize evaluation JSON files per organ")
    sp.add_argument("evaluations", nargs="+")
    sp.add_argument("--out", required=True)

    sp = verb("run-all", cmd_run_all, "run every stage from one config file")
    sp.add_argument("--config", required=True)

    sp = verb("extract-patches", cmd_extract_patches, "cut tiles into patches")
    sp.add_argument("--tiles", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--patch", type=int, default=256)
    sp.add_argument("--stride", type=int, default=248)
    sp.add_argument("--created-at")

    sp = verb("make-splits", cmd_make_splits, "assign train/test splits by organ and patient")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--add", nargs="*", default=[], help="extra manifests to merge first")
    sp.add_argument("--train-organs", nargs="+", required=True)
    sp.add_argument("--test-organs", nargs="+", required=True)
    sp.add_argument("--out", required=True)

    sp = verb("convert-polygons", cmd_convert_polygons, "rasterize polygon annotations to a label PNG")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--shape", type=int, nargs=2, metavar=("H", "W"))

    sp = verb("make-toy-tiles", cmd_make_toy_tiles, "write a small synthetic tile set for smoke runs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--organs", nargs="+", required=True, help="organ[:n_patients] items")
    sp.add_argument("--tiles-per-patient", type=int, default=1)
    sp.add_argument("--size", type=int, default=300)
    sp.add_argument("--target-count", type=int, default=60)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _fail(verb: str | None, exc: BaseException, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "verb": verb}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    verb = next((a for a in argv if not a.startswith("-")), None)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(verb, exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        return _fail(args.verb, exc, 2)
    except Exception as exc:  # reported as JSON rather than a traceback
        logger.debug("verb failed", exc_info=True)
        return _fail(args.verb, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
