"""End-to-end workflow: dataset, ventral classifier, both detector arms, comparison, ablation.

Every random choice is derived from one integer seed, so a rerun with the
same seed reproduces checkpoints byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from . import dorsal as DN
from . import evaluation as E
from . import network as N
from . import ventral as V
from .network import Model, Schedule

logger = logging.getLogger(__name__)

TUNED_BAND = (25.0, 35.0)
DEFAULT_SWEEP = (5.0, 30.0, 120.0)


def derive_seed(seed: int, purpose: str) -> int:
    """A 32-bit sub-seed for one named use of the run seed."""
    h = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- recipes


@dataclass(frozen=True)
class ClassifierRecipe:
    patch_size: int = 16
    context: float = 0.96
    backgrounds_per_scene: int = 1
    widths: tuple[int, int] = (16, 32)
    hidden: int = 32
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 0.05
    decay_epochs: tuple[int, ...] = (28,)

    def schedule(self, seed: int) -> Schedule:
        return Schedule(self.epochs, self.batch_size, self.learning_rate, 0.9,
                        self.decay_epochs, 0.1, derive_seed(seed, "classifier-shuffle"))

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"], d["decay_epochs"] = list(self.widths), list(self.decay_epochs)
        return d


@dataclass(frozen=True)
class DetectorRecipe:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 0.01
    decay_epochs: tuple[int, ...] = (150,)
    score_thresh: float = 0.05
    nms_thresh: float = 0.45

    def schedule(self, seed: int) -> Schedule:
        # both arms see the same batches and flips; only the input images differ
        return Schedule(self.epochs, self.batch_size, self.learning_rate, 0.9,
                        self.decay_epochs, 0.1, derive_seed(seed, "detector-shuffle"))

    def to_json(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


def classifier_layers(num_labels: int, recipe: ClassifierRecipe = ClassifierRecipe()) -> list:
    a, b = recipe.widths
    return [N.conv(a, 3, padding=1), N.relu(), N.conv(b, 3, padding=1), N.relu(),
            N.maxpool(2), N.gap(), N.dense(recipe.hidden), N.relu(), N.dense(num_labels)]


# ---------------------------------------------------------------- ventral


def patch_sets(manifest: D.DatasetManifest, seed: int, recipe: ClassifierRecipe,
               train: Sequence[D.Scene] | None = None,
               test: Sequence[D.Scene] | None = None) -> tuple[D.PatchSet, D.PatchSet]:
    train = D.load_scenes(manifest, "train") if train is None else train
    test = D.load_scenes(manifest, "test") if test is None else test
    kw = dict(patch_size=recipe.patch_size, context=recipe.context,
              backgrounds_per_scene=recipe.backgrounds_per_scene)
    return (D.classification_patches(train, manifest.class_names, seed=derive_seed(seed, "patches-train"), **kw),
            D.classification_patches(test, manifest.class_names, seed=derive_seed(seed, "patches-test"), **kw))


def train_ventral(manifest: D.DatasetManifest, seed: int,
                  recipe: ClassifierRecipe = ClassifierRecipe(),
                  train: Sequence[D.Scene] | None = None,
                  test: Sequence[D.Scene] | None = None) -> tuple[Model, dict]:
    """Train the patch classifier; the report holds train and held-out accuracy."""
    ptr, pte = patch_sets(manifest, seed, recipe, train, test)
    c = manifest.config.channels
    model = Model.build((c, recipe.patch_size, recipe.patch_size),
                        classifier_layers(len(ptr.class_names), recipe), ptr.class_names,
                        seed=derive_seed(seed, "classifier-init"),
                        metadata={"role": "ventral", "recipe": recipe.to_json()})
    t0 = time.perf_counter()
    rep = N.train_classifier(model, ptr.images, ptr.labels, recipe.schedule(seed))
    elapsed = time.perf_counter() - t0
    report = {
        "training": rep.to_json(),
        "train_patches": len(ptr), "test_patches": len(pte),
        "train_accuracy": N.accuracy(model, ptr.images, ptr.labels) if len(ptr) else None,
        "test_accuracy": N.accuracy(model, pte.images, pte.labels) if len(pte) else None,
        "seconds": elapsed,
    }
    return model, report


def object_coverage(masks: np.ndarray, scenes: Sequence[D.Scene]) -> list[float]:
    """Fraction of each ground-truth box's pixels that the mask keeps."""
    out = []
    for m, s in zip(masks, scenes):
        for _, (x0, y0, x1, y1) in s.annotations:
            out.append(float(m[int(y0):int(y1), int(x0):int(x1)].mean()))
    return out


# ---------------------------------------------------------------- dorsal


def train_dorsal(manifest: D.DatasetManifest, seed: int, ventral: V.Ventral | None,
                 recipe: DetectorRecipe = DetectorRecipe(),
                 config: DN.DetectorConfig | None = None,
                 train: Sequence[D.Scene] | None = None) -> tuple[Model, dict]:
    arm = "plain" if ventral is None else "masked"
    train = D.load_scenes(manifest, "train") if train is None else train
    cfg = config or DN.DetectorConfig(image_size=manifest.config.size,
                                      channels=manifest.config.channels,
                                      class_names=tuple(manifest.class_names))
    model = DN.build_detector(cfg, seed=derive_seed(seed, "detector-init"))
    model.metadata["arm"] = arm
    if ventral is not None:
        model.metadata["ventral"] = ventral.config.to_json()
    t0 = time.perf_counter()
    rep = DN.train_detector(model, train, ventral, recipe.schedule(seed))
    elapsed = time.perf_counter() - t0
    n_cls, n_reg = cfg.normalizers()
    return model, {"arm": arm, "training": rep.to_json(), "seconds": elapsed,
                   "lambda": cfg.lam, "n_cls": n_cls, "n_reg": n_reg,
                   "detector": cfg.to_json(), "recipe": recipe.to_json()}


def run_detector(model: Model, manifest: D.DatasetManifest, scenes: Sequence[D.Scene],
                 ventral: V.Ventral | None, recipe: DetectorRecipe = DetectorRecipe()):
    """Detections on ``scenes`` plus the masks used (``None`` for the plain arm)."""
    images = np.stack([s.image for s in scenes])
    masks = None
    if ventral is not None:
        images, masks = ventral.mask_batch(images)
    stems = [manifest.stem(s.seed) for s in scenes]
    dets = DN.detect_batch(model, images, stems, recipe.score_thresh, recipe.nms_thresh)
    return dets, masks


def ground_truth(manifest: D.DatasetManifest, scenes: Sequence[D.Scene]) -> list[E.GroundTruthBox]:
    return [E.GroundTruthBox(manifest.stem(s.seed), c, b) for s in scenes for c, b in s.annotations]


def compare_arms(plain: Model, masked: Model, ventral: V.Ventral, manifest: D.DatasetManifest,
                 scenes: Sequence[D.Scene], recipe: DetectorRecipe = DetectorRecipe(),
                 iou_thresh: float = 0.5):
    """Comparison report plus the raw detections of both arms."""
    stems = [manifest.stem(s.seed) for s in scenes]
    dets_p, _ = run_detector(plain, manifest, scenes, None, recipe)
    dets_m, masks = run_detector(masked, manifest, scenes, ventral, recipe)
    cov = {st: float(m.mean()) for st, m in zip(stems, masks)}
    obj = {}
    for st, m, s in zip(stems, masks, scenes):
        vals = object_coverage(m[None], [s])
        if vals:
            obj[st] = float(np.mean(vals))
    report = E.compare_reports(dets_p, dets_m, ground_truth(manifest, scenes), manifest.class_names,
                               stems, stems, iou_thresh, cov, obj)
    return report, dets_p, dets_m


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    variance: float
    effective_variance: float
    mean_ap: float
    mask_coverage: float
    object_coverage: float

    @property
    def in_tuned_band(self) -> bool:
        return TUNED_BAND[0] <= self.variance <= TUNED_BAND[1]


@dataclass
class AblationResult:
    rows: list[AblationRow] = field(default_factory=list)
    retrained: bool = False

    def to_json(self) -> dict:
        return {"retrained": self.retrained, "tuned_band": list(TUNED_BAND),
                "rows": [{**asdict(r), "in_tuned_band": r.in_tuned_band} for r in self.rows]}

    def table(self) -> str:
        lines = ["  sigma^2 | eff. px^2 |  mAP  | mask cov | obj cov",
                 "----------+-----------+-------+----------+--------"]
        for r in self.rows:
            mark = " *" if r.in_tuned_band else ""
            lines.append(f"{r.variance:9.1f} | {r.effective_variance:9.3f} | {r.mean_ap:.3f} |"
                         f" {r.mask_coverage:8.3f} | {r.object_coverage:.3f}{mark}")
        lines.append(f"* variance inside the tuned band [{TUNED_BAND[0]:g}, {TUNED_BAND[1]:g}]")
        return "\n".join(lines)


def ablate_sigma(classifier: Model, detector: Model, manifest: D.DatasetManifest, seed: int,
                 variances: Sequence[float] = DEFAULT_SWEEP, base: V.VentralConfig = V.VentralConfig(),
                 recipe: DetectorRecipe = DetectorRecipe(), retrain: bool = False,
                 scenes: Sequence[D.Scene] | None = None) -> AblationResult:
    """Re-mask the test split at each variance and re-evaluate.

    By default the given masked-arm detector is reused; ``retrain`` trains a
    fresh detector on masks made with each variance instead.
    """
    scenes = D.load_scenes(manifest, "test") if scenes is None else scenes
    gts = ground_truth(manifest, scenes)
    n = manifest.config.size
    result = AblationResult(retrained=retrain)
    for var in variances:
        cfg = V.VentralConfig(base.aggregation, float(var), base.kernel_radius,
                              base.threshold_rule, base.rescale)
        ven = V.Ventral(classifier, cfg)
        model = train_dorsal(manifest, seed, ven, recipe)[0] if retrain else detector
        dets, masks = run_detector(model, manifest, scenes, ven, recipe)
        rep = E.evaluate(dets, gts, manifest.class_names)
        cov = object_coverage(masks, scenes)
        result.rows.append(AblationRow(float(var), cfg.effective_variance(n, n), rep.mean_ap,
                                       float(masks.mean()), float(np.mean(cov)) if cov else float("nan")))
        logger.info("variance %g: mAP %.4f", var, rep.mean_ap)
    return result


# ---------------------------------------------------------------- full run


@dataclass
class ExperimentResult:
    summary: dict
    comparison: E.ComparisonReport
    classifier: Model
    plain: Model
    masked: Model


def run_experiment(out: Path, seed: int = 7, n_train: int = 200, n_test: int = 50,
                   scene_config: D.SceneConfig = D.SceneConfig(),
                   classifier_recipe: ClassifierRecipe = ClassifierRecipe(),
                   detector_recipe: DetectorRecipe = DetectorRecipe(),
                   ventral_config: V.VentralConfig = V.VentralConfig(),
                   sweep: Sequence[float] | None = DEFAULT_SWEEP) -> ExperimentResult:
    """Dataset, classifier, both detector arms, comparison and (optionally) the ablation.

    Writes checkpoints and JSON reports under ``out`` in the same layout the
    command-line tools use.
    """
    out = Path(out)
    for sub in ("data", "ventral", "dorsal", "eval"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    manifest = D.make_manifest(seed, n_train, n_test, scene_config)
    manifest.save(out / "data" / "manifest.json")
    train, test = D.load_scenes(manifest, "train"), D.load_scenes(manifest, "test")
    D.write_annotations(out / "data" / "train.jsonl", manifest, train)
    D.write_annotations(out / "data" / "test.jsonl", manifest, test)

    clf, clf_rep = train_ventral(manifest, seed, classifier_recipe, train, test)
    N.save_checkpoint(clf, out / "ventral" / "classifier.ckpt")
    write_json(out / "ventral" / "report.json", clf_rep)
    ven = V.Ventral(clf, ventral_config)

    arms = {}
    for arm, v in (("plain", None), ("masked", ven)):
        model, rep = train_dorsal(manifest, seed, v, detector_recipe, train=train)
        N.save_checkpoint(model, out / "dorsal" / f"{arm}.ckpt")
        write_json(out / "dorsal" / f"{arm}.report.json", rep)
        arms[arm] = (model, rep)

    comparison, dets_p, dets_m = compare_arms(arms["plain"][0], arms["masked"][0], ven, manifest,
                                              test, detector_recipe)
    write_json(out / "eval" / "comparison.json", comparison.to_json())
    (out / "eval" / "comparison.txt").write_text(comparison.table() + "\n")
    E.write_detections(out / "eval" / "plain.detections.jsonl", dets_p, manifest.class_names)
    E.write_detections(out / "eval" / "masked.detections.jsonl", dets_m, manifest.class_names)

    summary = {
        "seed": seed,
        "manifest_hash": manifest.digest(),
        "classifier_test_accuracy": clf_rep["test_accuracy"],
        "classifier_seconds": clf_rep["seconds"],
        "plain_seconds": arms["plain"][1]["seconds"],
        "masked_seconds": arms["masked"][1]["seconds"],
        "mAP_plain": comparison.plain.mean_ap,
        "mAP_masked": comparison.masked.mean_ap,
        "mAP_delta": comparison.delta,
        "checkpoints": {name: sha256_file(out / sub / name)
                        for sub, name in (("ventral", "classifier.ckpt"), ("dorsal", "plain.ckpt"),
                                          ("dorsal", "masked.ckpt"))},
    }
    if sweep:
        abl = ablate_sigma(clf, arms["masked"][0], manifest, seed, sweep, ventral_config,
                           detector_recipe, scenes=test)
        write_json(out / "eval" / "ablation.json", abl.to_json())
        (out / "eval" / "ablation.txt").write_text(abl.table() + "\n")
        summary["ablation"] = abl.to_json()
    write_json(out / "summary.json", summary)
    return ExperimentResult(summary, comparison, clf, arms["plain"][0], arms["masked"][0])
