"""Command-line entry point: ``vdnet <subcommand> --seed N --out DIR ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import dorsal as DN
from . import evaluation as E
from . import network as N
from . import pipeline as P
from . import ventral as V

log = logging.getLogger("vdnet")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a number in [0, 1], got {text}")
    return v


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("need a comma-separated list of positive variances")
    return vals


def _plain(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _echo(args, out: Path, effective: dict) -> None:
    flags = {k: _plain(v) for k, v in vars(args).items() if k != "func"}
    P.write_json(out / f"{args.command}.config.json", {"command": args.command, "flags": flags,
                                                        "effective": effective})


def _manifest(args) -> D.DatasetManifest:
    path = args.data or args.out / "data" / "manifest.json"
    if not Path(path).exists():
        raise FileNotFoundError(f"no dataset manifest at {path}; run gen-data first")
    return D.DatasetManifest.load(path)


def _ventral_config(args, fallback: dict | None = None) -> V.VentralConfig:
    base = V.VentralConfig(**fallback) if fallback else V.VentralConfig()
    return V.VentralConfig(
        aggregation=args.aggregation or base.aggregation,
        gaussian_variance=args.variance if args.variance is not None else base.gaussian_variance,
        kernel_radius=args.kernel_radius if args.kernel_radius is not None else base.kernel_radius,
        rescale=base.rescale if args.rescale is None else args.rescale)


def _load_ventral(path, config: V.VentralConfig) -> V.Ventral:
    model = N.load_checkpoint(path)
    if model.metadata.get("role") != "ventral" and model.metadata.get("role") is not None:
        raise ValueError(f"{path} is a {model.metadata['role']} checkpoint, not a ventral classifier")
    return V.Ventral(model, config)


def _load_detector(path) -> N.Model:
    model = N.load_checkpoint(path)
    if model.metadata.get("role") != "detector":
        raise ValueError(f"{path} is not a detector checkpoint")
    return model


def _load_image(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()[:2]
    if raw == b"P6":
        return D.read_ppm(path).astype(np.float64) / 255.0
    if raw == b"P5":
        return D.read_pgm(path)[None].astype(np.float64) / 255.0
    raise D.NetpbmError(f"{path}: not a binary PPM or PGM file")


def _minmax(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    return np.zeros_like(plane) if hi == lo else (plane - lo) / (hi - lo)


def _split_scenes(manifest, split: str) -> list[D.Scene]:
    scenes = D.load_scenes(manifest, split)
    if not scenes:
        raise ValueError(f"split {split!r} of the dataset is empty")
    return scenes


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    config = D.SceneConfig(size=args.size, channels=args.channels,
                           min_objects=args.min_objects, max_objects=args.max_objects,
                           noise=args.noise)
    manifest = D.make_manifest(args.seed, args.train, args.test, config)
    root = args.out / "data"
    root.mkdir(parents=True, exist_ok=True)
    manifest.save(root / "manifest.json")
    for split in ("train", "test"):
        scenes = D.load_scenes(manifest, split)
        D.write_annotations(root / f"{split}.jsonl", manifest, scenes)
        if args.write_images:
            (root / "images").mkdir(exist_ok=True)
            for s in scenes:
                D.write_ppm(root / "images" / f"{manifest.stem(s.seed)}.ppm", D.to_rgb(s.image))
    _echo(args, args.out, {"scene_config": config.to_json(), "manifest_hash": manifest.digest()})
    print(f"manifest {root / 'manifest.json'} hash {manifest.digest()}")
    return 0


def cmd_train_ventral(args) -> int:
    manifest = _manifest(args)
    recipe = P.ClassifierRecipe(patch_size=args.patch_size, context=args.context,
                                epochs=args.epochs, learning_rate=args.lr,
                                decay_epochs=tuple(e for e in (int(args.epochs * 0.7),) if e > 0))
    _echo(args, args.out, {"recipe": recipe.to_json(), "schedule": recipe.schedule(args.seed).to_json()})
    model, report = P.train_ventral(manifest, args.seed, recipe)
    root = args.out / "ventral"
    root.mkdir(parents=True, exist_ok=True)
    N.save_checkpoint(model, root / "classifier.ckpt")
    P.write_json(root / "report.json", report)
    print(f"classifier {root / 'classifier.ckpt'}: train acc {report['train_accuracy']}, "
          f"held-out acc {report['test_accuracy']} ({report['seconds']:.1f}s)")
    return 0


def cmd_train_dorsal(args) -> int:
    manifest = _manifest(args)
    ventral = None
    if args.ventral:
        ventral = _load_ventral(args.ventral, _ventral_config(args))
    cfg = DN.DetectorConfig(image_size=manifest.config.size, channels=manifest.config.channels,
                            class_names=tuple(manifest.class_names), lam=args.lam,
                            flip_augment=not args.no_flip)
    recipe = P.DetectorRecipe(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                              decay_epochs=tuple(e for e in (int(args.epochs * 0.75),) if e > 0))
    name = args.name or ("plain" if ventral is None else "masked")
    n_cls, n_reg = cfg.normalizers()
    _echo(args, args.out, {"detector": cfg.to_json(), "recipe": recipe.to_json(),
                           "lambda": cfg.lam, "n_cls": n_cls, "n_reg": n_reg,
                           "ventral": ventral.config.to_json() if ventral else None})
    print(f"lambda = {cfg.lam:g}, N_cls = {n_cls:g}, N_reg = {n_reg:g}")
    model, report = P.train_dorsal(manifest, args.seed, ventral, recipe, cfg)
    root = args.out / "dorsal"
    root.mkdir(parents=True, exist_ok=True)
    N.save_checkpoint(model, root / f"{name}.ckpt")
    P.write_json(root / f"{name}.report.json", report)
    print(f"detector {root / (name + '.ckpt')} trained in {report['seconds']:.1f}s")
    return 0


def cmd_saliency(args) -> int:
    config = _ventral_config(args)
    ventral = _load_ventral(args.ventral, config)
    root = args.out / "saliency"
    root.mkdir(parents=True, exist_ok=True)
    _echo(args, args.out, {"ventral": config.to_json()})
    for path in args.image:
        image = _load_image(path)
        art = V.ventral_pipeline(ventral.classifier, image, config)
        stem = f"{Path(path).stem}-{config.aggregation}"
        D.write_pgm(root / f"{stem}.agg.pgm", _minmax(art.aggregated))
        D.write_pgm(root / f"{stem}.smooth.pgm", _minmax(art.smoothed))
        D.write_pgm(root / f"{stem}.mask.pgm", art.mask)
        D.write_ppm(root / f"{stem}.masked.ppm", D.to_rgb(art.masked_image))
        print(f"{stem}: mask coverage {art.coverage:.4f}")
    return 0


def _overlays(root: Path, scenes, images, manifest, dets) -> None:
    root.mkdir(parents=True, exist_ok=True)
    by_image: dict[str, list] = {}
    for d in dets:
        by_image.setdefault(d.image, []).append(d.box)
    for s, img in zip(scenes, images):
        stem = manifest.stem(s.seed)
        D.write_ppm(root / f"{stem}.det.ppm", D.draw_boxes(img, by_image.get(stem, [])))


def cmd_eval(args) -> int:
    if not (args.detector or (args.plain and args.masked)):
        raise UsageError("give --detector, or both --plain and --masked")
    if args.plain and args.masked and not args.ventral:
        raise UsageError("comparing arms needs --ventral")
    manifest = _manifest(args)
    scenes = _split_scenes(manifest, args.split)
    recipe = P.DetectorRecipe(score_thresh=args.score_thresh, nms_thresh=args.nms_thresh)
    root = args.out / "eval"
    root.mkdir(parents=True, exist_ok=True)
    if args.plain and args.masked:
        masked = _load_detector(args.masked)
        ventral = _load_ventral(args.ventral, _ventral_config(args, masked.metadata.get("ventral")))
        _echo(args, args.out, {"ventral": ventral.config.to_json(), "recipe": recipe.to_json(),
                               "iou_threshold": args.iou})
        report, dets_p, dets_m = P.compare_arms(_load_detector(args.plain), masked, ventral, manifest,
                                                scenes, recipe, args.iou)
        P.write_json(root / "comparison.json", report.to_json())
        (root / "comparison.txt").write_text(report.table() + "\n")
        E.write_detections(root / "plain.detections.jsonl", dets_p, manifest.class_names)
        E.write_detections(root / "masked.detections.jsonl", dets_m, manifest.class_names)
        if args.overlays:
            images = np.stack([s.image for s in scenes])
            _overlays(root / "overlays" / "plain", scenes, images, manifest, dets_p)
            _overlays(root / "overlays" / "masked", scenes, ventral.mask_batch(images)[0], manifest, dets_m)
        print(report.table())
        return 0
    model = _load_detector(args.detector)
    ventral = None
    if args.ventral:
        ventral = _load_ventral(args.ventral, _ventral_config(args, model.metadata.get("ventral")))
    _echo(args, args.out, {"ventral": ventral.config.to_json() if ventral else None,
                           "recipe": recipe.to_json(), "iou_threshold": args.iou})
    dets, masks = P.run_detector(model, manifest, scenes, ventral, recipe)
    report = E.evaluate(dets, P.ground_truth(manifest, scenes), manifest.class_names, args.iou)
    name = Path(args.detector).stem
    P.write_json(root / f"{name}.report.json", report.to_json())
    E.write_detections(root / f"{name}.detections.jsonl", dets, manifest.class_names)
    if args.overlays:
        images = np.stack([s.image for s in scenes])
        if ventral is not None:
            images = ventral.mask_batch(images)[0]
        _overlays(root / "overlays" / name, scenes, images, manifest, dets)
    print(f"mAP@{args.iou:g} = {report.mean_ap:.4f}  " +
          "  ".join(f"{k} {v:.3f}" for k, v in report.per_class_ap.items()))
    return 0


def cmd_ablate_sigma(args) -> int:
    manifest = _manifest(args)
    base = _ventral_config(args)
    classifier = _load_ventral(args.ventral, base).classifier
    detector = _load_detector(args.detector)
    recipe = P.DetectorRecipe(epochs=args.epochs,
                              decay_epochs=tuple(e for e in (int(args.epochs * 0.75),) if e > 0))
    _echo(args, args.out, {"variances": args.variances, "base_ventral": base.to_json(),
                           "retrain": args.retrain, "recipe": recipe.to_json()})
    result = P.ablate_sigma(classifier, detector, manifest, args.seed, args.variances, base, recipe,
                            retrain=args.retrain, scenes=_split_scenes(manifest, "test"))
    root = args.out / "eval"
    P.write_json(root / "ablation.json", result.to_json())
    (root / "ablation.txt").write_text(result.table() + "\n")
    print(result.table())
    return 0


def cmd_run(args) -> int:
    _echo(args, args.out, {"classifier": P.ClassifierRecipe().to_json(),
                           "detector": P.DetectorRecipe().to_json(),
                           "ventral": V.VentralConfig().to_json()})
    res = P.run_experiment(args.out, args.seed, args.train, args.test,
                           sweep=None if args.no_sweep else P.DEFAULT_SWEEP)
    print(res.comparison.table())
    print(json.dumps({k: v for k, v in res.summary.items() if k != "ablation"}, indent=1))
    return 0


# ---------------------------------------------------------------- parser


def _add_ventral_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variance", type=_positive_float, default=None,
                   help="Gaussian variance in px^2 of a 224x224 image (default 30)")
    p.add_argument("--aggregation", choices=("mean", "max"), default=None,
                   help="channel aggregation (default mean)")
    p.add_argument("--kernel-radius", type=_positive_int, default=None,
                   help="blur radius (default ceil(3 sigma))")
    p.add_argument("--rescale", dest="rescale", action="store_true", default=None,
                   help="scale the variance by image area / 224^2 (default)")
    p.add_argument("--no-rescale", dest="rescale", action="store_false",
                   help="use the variance as raw pixels^2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=_nonneg_int, default=7)
        p.add_argument("--out", type=Path, default=Path("vdnet-out"), help="output root")
        p.set_defaults(func=func)
        return p

    p = command("gen-data", cmd_gen_data, "generate the synthetic shapes dataset")
    p.add_argument("--train", type=_positive_int, default=200)
    p.add_argument("--test", type=_nonneg_int, default=50)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    p.add_argument("--min-objects", type=_nonneg_int, default=1)
    p.add_argument("--max-objects", type=_nonneg_int, default=3)
    p.add_argument("--noise", type=_nonneg_int, default=16)
    p.add_argument("--write-images", action="store_true", help="also write every scene as PPM")

    p = command("train-ventral", cmd_train_ventral, "train the patch classifier")
    p.add_argument("--data", type=Path, help="manifest (default OUT/data/manifest.json)")
    p.add_argument("--epochs", type=_nonneg_int, default=40)
    p.add_argument("--lr", type=_positive_float, default=0.05)
    p.add_argument("--patch-size", type=_positive_int, default=16)
    p.add_argument("--context", type=_unit_float, default=0.96,
                   help="extra crop area around each object, as a fraction of the box area")

    p = command("train-dorsal", cmd_train_dorsal, "train the detector, optionally on masked images")
    p.add_argument("--data", type=Path)
    p.add_argument("--ventral", type=Path, help="classifier checkpoint; enables masked training")
    p.add_argument("--name", help="checkpoint name (default plain or masked)")
    p.add_argument("--epochs", type=_nonneg_int, default=200)
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--lr", type=_positive_float, default=0.01)
    p.add_argument("--lam", type=float, default=10.0, help="regression weight lambda (default 10)")
    p.add_argument("--no-flip", action="store_true", help="disable flip augmentation")
    _add_ventral_flags(p)

    p = command("saliency", cmd_saliency, "write sensitivity, mask and masked-image files")
    p.add_argument("--ventral", type=Path, required=True)
    p.add_argument("--image", type=Path, nargs="+", required=True, help="PPM or PGM input(s)")
    _add_ventral_flags(p)

    p = command("eval", cmd_eval, "evaluate one detector or compare the two arms")
    p.add_argument("--data", type=Path)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--detector", type=Path, help="single detector checkpoint")
    p.add_argument("--plain", type=Path, help="plain-arm checkpoint (comparison mode)")
    p.add_argument("--masked", type=Path, help="masked-arm checkpoint (comparison mode)")
    p.add_argument("--ventral", type=Path)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--score-thresh", type=float, default=0.05)
    p.add_argument("--nms-thresh", type=float, default=0.45)
    p.add_argument("--overlays", action="store_true", help="write <stem>.det.ppm box overlays")
    _add_ventral_flags(p)

    p = command("ablate-sigma", cmd_ablate_sigma, "sweep the Gaussian variance")
    p.add_argument("--data", type=Path)
    p.add_argument("--ventral", type=Path, required=True)
    p.add_argument("--detector", type=Path, required=True, help="masked-arm detector")
    p.add_argument("--variances", type=_float_list, default=list(P.DEFAULT_SWEEP))
    p.add_argument("--retrain", action="store_true", help="train a detector per variance")
    p.add_argument("--epochs", type=_nonneg_int, default=200, help="epochs when retraining")
    _add_ventral_flags(p)

    p = command("run", cmd_run, "the whole experiment in one go")
    p.add_argument("--train", type=_positive_int, default=200)
    p.add_argument("--test", type=_positive_int, default=50)
    p.add_argument("--no-sweep", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"vdnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
