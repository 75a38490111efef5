"""Pipeline stages behind the command-line front end.

Each stage reads the artifacts of earlier stages from the work directory, so
every stage can be rerun on its own. Files are written as ``<name>.partial``
and renamed on success; a failed stage leaves its ``.partial`` files behind.
"""

from __future__ import annotations

import contextlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dermhybrid import imageio, segmask
from dermhybrid.config import PipelineConfig, parse_blocks
from dermhybrid.dataset import (
    ClassLabel,
    SampleRecord,
    SplitManifest,
    load_manifest,
    read_manifest,
    stratified_split,
    write_manifest,
    write_split_counts,
)
from dermhybrid.features import (
    CATALOG_VERSION,
    Standardizer,
    extract_features,
    fit_standardizer_array,
    read_feature_table,
    write_feature_table,
)
from dermhybrid.fusion import SvmModel, svm_fit, svm_predict_batch
from dermhybrid.hybridnet import (
    HybridModel,
    HybridModelConfig,
    TrainConfig,
    embed_batch,
    init_model,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
    train,
    write_history,
)
from dermhybrid.imgproc import augment, resize_bilinear, shades_of_gray
from dermhybrid.metrics import evaluate, roc_curve, write_confusion, write_report, write_roc_points

log = logging.getLogger(__name__)

CLASS_NAMES = [c.name for c in ClassLabel]
SVM_GRID = (0.01, 0.1, 1.0, 10.0)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


@dataclass(frozen=True)
class Paths:
    root: Path

    manifest = property(lambda s: s.root / "manifest.csv")
    split_counts = property(lambda s: s.root / "split_counts.csv")
    prep_dir = property(lambda s: s.root / "prep")
    features = property(lambda s: s.root / "features.csv")
    standardizer = property(lambda s: s.root / "standardizer.csv")
    model_a = property(lambda s: s.root / "model_a.hybn")
    model_b = property(lambda s: s.root / "model_b.hybn")
    history_a = property(lambda s: s.root / "history_a.csv")
    history_b = property(lambda s: s.root / "history_b.csv")
    embed_standardizer = property(lambda s: s.root / "embed_standardizer.csv")
    svm = property(lambda s: s.root / "svm_model.csv")
    run_log = property(lambda s: s.root / "run_log.txt")

    def metrics(self, split: str, tag: str = "") -> Path:
        return self.root / f"metrics_{split}{tag}.csv"

    def confusion(self, split: str) -> Path:
        return self.root / f"confusion_{split}.csv"


@contextlib.contextmanager
def staged(path: Path):
    """Yield a ``.partial`` path; rename it onto ``path`` only on success."""
    partial = path.with_name(path.name + ".partial")
    yield partial
    os.replace(partial, path)


class RunLog:
    def __init__(self, path: Path):
        self.path = path

    def write(self, stage: str, message: str) -> None:
        log.info("%s: %s", stage, message)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"[{stage}] {message}\n")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(stage, f"missing artifact {path}")
    return path


def _records(cfg: PipelineConfig, stage: str) -> list[SampleRecord]:
    if not cfg.labels_file.is_file():
        raise StageError(stage, f"labels file not found: {cfg.labels_file}")
    if not cfg.data_root.is_dir():
        raise StageError(stage, f"data root not found: {cfg.data_root}")
    for d in cfg.probmap_dirs:
        if not d.is_dir():
            raise StageError(stage, f"probability-map directory not found: {d}")
    try:
        return load_manifest(cfg.data_root, cfg.labels_file, cfg.probmap_dirs)
    except (ValueError, FileNotFoundError) as exc:
        raise StageError(stage, str(exc)) from exc


def _manifest(cfg: PipelineConfig, stage: str) -> SplitManifest:
    paths = Paths(cfg.work_dir)
    return read_manifest(_require(paths.manifest, stage), _records(cfg, stage))


# -- split --------------------------------------------------------------------


def run_split(cfg: PipelineConfig) -> SplitManifest:
    paths = Paths(cfg.work_dir)
    cfg.work_dir.mkdir(parents=True, exist_ok=True)
    records = _records(cfg, "split")
    try:
        manifest = stratified_split(records, cfg.ratios, cfg.split_seed)
    except ValueError as exc:
        raise StageError("split", str(exc)) from exc
    with staged(paths.manifest) as p:
        write_manifest(manifest, p)
    with staged(paths.split_counts) as p:
        write_split_counts(manifest, p)
    RunLog(paths.run_log).write(
        "split", f"{len(manifest.train)} train / {len(manifest.val)} val / {len(manifest.test)} test (seed {cfg.split_seed})"
    )
    return manifest


# -- preprocessing ------------------------------------------------------------


def lesion_mask(rec: SampleRecord, cfg: PipelineConfig) -> np.ndarray:
    """Mask at original resolution from probability maps or the ground-truth mask."""
    use_probmaps = cfg.mask_source == "probmaps" or (cfg.mask_source == "auto" and rec.probmap_paths)
    if use_probmaps:
        if not rec.probmap_paths:
            raise ValueError(f"sample {rec.sample_id} has no probability maps")
        maps = [imageio.read_probmap(p) for p in rec.probmap_paths]
        return segmask.mask_from_probmaps(maps, cfg.mask_threshold)
    if rec.mask_path is None:
        raise ValueError(f"sample {rec.sample_id} has neither probability maps nor a mask")
    return segmask.postprocess_mask(imageio.read_mask(rec.mask_path))


def preprocess_pair(img: np.ndarray, mask: np.ndarray, cfg: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    if img.shape[:2] != mask.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {mask.shape} sizes differ")
    s = cfg.input_size
    img = resize_bilinear(shades_of_gray(img, cfg.sog_p), s, s)
    small = resize_bilinear(mask.astype(np.float64), s, s) >= 0.5
    return np.clip(img, 0.0, 1.0), segmask.postprocess_mask(small)


def run_prep(cfg: PipelineConfig) -> None:
    paths = Paths(cfg.work_dir)
    manifest = _manifest(cfg, "prep")
    paths.prep_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for rec in manifest.train + manifest.val + manifest.test:
        try:
            img, mask = preprocess_pair(imageio.read_rgb(rec.image_path), lesion_mask(rec, cfg), cfg)
        except ValueError as exc:
            raise StageError("prep", str(exc)) from exc
        with staged(paths.prep_dir / f"{rec.sample_id}.png") as p:
            imageio.write_rgb(p, img)
        with staged(paths.prep_dir / f"{rec.sample_id}_mask.png") as p:
            imageio.write_mask(p, mask)
        n += 1
    RunLog(paths.run_log).write("prep", f"shades of gray p={cfg.sog_p:g}, resized {n} images to {cfg.input_size}x{cfg.input_size}")


def _prepped(paths: Paths, rec: SampleRecord, stage: str) -> tuple[np.ndarray, np.ndarray]:
    img = imageio.read_rgb(_require(paths.prep_dir / f"{rec.sample_id}.png", stage))
    mask = imageio.read_mask(_require(paths.prep_dir / f"{rec.sample_id}_mask.png", stage))
    return img, mask


# -- features -----------------------------------------------------------------


def run_features(cfg: PipelineConfig) -> None:
    paths = Paths(cfg.work_dir)
    manifest = _manifest(cfg, "features")
    ordered = manifest.train + manifest.val + manifest.test
    rows = []
    for rec in ordered:
        img, mask = _prepped(paths, rec, "features")
        try:
            rows.append(extract_features(img, mask).values)
        except (ValueError, FloatingPointError) as exc:
            raise StageError("features", f"{rec.sample_id}: {exc}") from exc
    table = np.stack(rows)
    with staged(paths.features) as p:
        write_feature_table(p, [r.sample_id for r in ordered], table)
    train_rows = table[: len(manifest.train)]
    std = fit_standardizer_array(train_rows)
    with staged(paths.standardizer) as p:
        std.save(p)
    RunLog(paths.run_log).write(
        "features", f"{len(ordered)} vectors ({CATALOG_VERSION}); standardizer fitted on train split only (n={len(train_rows)})"
    )


# -- training -----------------------------------------------------------------


@dataclass
class SplitData:
    ids: list[str]
    images: np.ndarray
    hands: np.ndarray  # standardized handcrafted vectors
    labels: np.ndarray


def load_split(cfg: PipelineConfig, records: list[SampleRecord], stage: str) -> SplitData:
    paths = Paths(cfg.work_dir)
    ids, table, version = read_feature_table(_require(paths.features, stage))
    std = Standardizer.load(_require(paths.standardizer, stage))
    if std.catalog_version != version:
        raise StageError(stage, f"feature table {version} and standardizer {std.catalog_version} disagree")
    index = {sid: i for i, sid in enumerate(ids)}
    missing = [r.sample_id for r in records if r.sample_id not in index]
    if missing:
        raise StageError(stage, f"feature table lacks samples {missing[:5]}")
    images = np.stack([_prepped(paths, r, stage)[0] for r in records]) if records else np.zeros((0, 1, 1, 3))
    hands = std.transform(table[[index[r.sample_id] for r in records]]) if records else np.zeros((0, table.shape[1]))
    labels = np.array([int(r.label) for r in records], dtype=np.intp)
    return SplitData([r.sample_id for r in records], images, hands, labels)


def model_configs(cfg: PipelineConfig) -> tuple[HybridModelConfig, HybridModelConfig]:
    size = (cfg.input_size, cfg.input_size)
    a = HybridModelConfig(size, parse_blocks(cfg.model_a_blocks), cfg.model_a_fc, seed=cfg.model_a_seed)
    b = HybridModelConfig(size, parse_blocks(cfg.model_b_blocks), cfg.model_b_fc, seed=cfg.model_b_seed)
    return a, b


def _augmenter(cfg: PipelineConfig):
    if not cfg.augment:
        return None

    def fn(img, epoch, index):
        seq = np.random.SeedSequence([cfg.aug_seed, epoch, index])
        return augment(img, cfg.augment_params(int(seq.generate_state(1, np.uint64)[0])))

    return fn


def model_features(m: HybridModel, images: np.ndarray, hands: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    h = hands if m.use_injection else None
    if cfg.svm_input == "logits":
        return predict_logits(m, images, h)
    return embed_batch(m, images, h)


def fusion_inputs(models, images, hands, cfg: PipelineConfig) -> np.ndarray:
    parts = [model_features(m, images, hands, cfg) for m in models]
    if cfg.svm_include_handcrafted:
        parts.append(hands)
    return np.concatenate(parts, axis=1)


def run_train(cfg: PipelineConfig) -> None:
    paths = Paths(cfg.work_dir)
    runlog = RunLog(paths.run_log)
    manifest = _manifest(cfg, "train")
    train_data = load_split(cfg, manifest.train, "train")
    val_data = load_split(cfg, manifest.val, "train") if manifest.val else None
    if len(train_data.labels) == 0:
        raise StageError("train", "training split is empty")
    tc = TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.momentum, cfg.train_seed, cfg.use_injection)
    aug = _augmenter(cfg)
    models = []
    for tag, mcfg, ckpt, hist_path, offset in (
        ("a", model_configs(cfg)[0], paths.model_a, paths.history_a, 0),
        ("b", model_configs(cfg)[1], paths.model_b, paths.history_b, 1),
    ):
        tcm = TrainConfig(tc.learning_rate, tc.epochs, tc.batch_size, tc.momentum, tc.seed + offset, tc.use_injection)
        val = None
        if val_data is not None:
            val = (val_data.images, val_data.hands if tc.use_injection else None, val_data.labels)
        model, history = train(
            init_model(mcfg), train_data.images, train_data.hands if tc.use_injection else None,
            train_data.labels, tcm, val=val, augment_fn=aug,
        )
        with staged(ckpt) as p:
            save_checkpoint(model, p)
        with staged(hist_path) as p:
            write_history(p, history)
        runlog.write("train", f"model {tag}: {tcm.epochs} epochs, injection={'on' if tc.use_injection else 'off'}, "
                              f"final train loss {history[-1]['train_loss']:.6f}")
        models.append(model)

    fused = fusion_inputs(models, train_data.images, train_data.hands, cfg)
    estd = fit_standardizer_array(fused, catalog_version="embedding")
    with staged(paths.embed_standardizer) as p:
        estd.save(p)
    reg_c = cfg.svm_reg_c
    if cfg.svm_grid and val_data is not None:
        vfused = estd.transform(fusion_inputs(models, val_data.images, val_data.hands, cfg))
        best = None
        for c in SVM_GRID:
            cand = svm_fit(estd.transform(fused), train_data.labels, c, cfg.svm_seed)
            pred, _ = svm_predict_batch(cand, vfused)
            score = evaluate(pred, val_data.labels)[0].bacc
            if best is None or score > best[0]:
                best = (score, c)
        reg_c = best[1]
        runlog.write("train", f"svm reg_c={reg_c:g} selected on the validation carve (BACC {best[0]:.4f})")
    svm = svm_fit(estd.transform(fused), train_data.labels, reg_c, cfg.svm_seed)
    with staged(paths.svm) as p:
        svm.save(p)
    runlog.write("train", f"svm fitted on train split only (n={len(train_data.labels)}, D={svm.dim}, reg_c={reg_c:g})")


def run_pipeline(cfg: PipelineConfig) -> None:
    run_split(cfg)
    run_prep(cfg)
    run_features(cfg)
    run_train(cfg)


# -- evaluation ---------------------------------------------------------------


def load_trained(cfg: PipelineConfig, stage: str):
    paths = Paths(cfg.work_dir)
    for p in (paths.model_a, paths.model_b, paths.embed_standardizer, paths.svm):
        _require(p, stage)
    models = [load_checkpoint(paths.model_a), load_checkpoint(paths.model_b)]
    return models, Standardizer.load(paths.embed_standardizer), SvmModel.load(paths.svm)


def fused_scores(models, estd: Standardizer, svm: SvmModel, images, hands, cfg: PipelineConfig) -> np.ndarray:
    scores = svm.decision_function(estd.transform(fusion_inputs(models, images, hands, cfg)))
    if cfg.tta_rounds > 0:
        total = scores.copy()
        for r in range(cfg.tta_rounds):
            aug = np.stack([
                augment(img, cfg.augment_params(int(np.random.SeedSequence([cfg.aug_seed, 10_000 + r, i]).generate_state(1, np.uint64)[0])))
                for i, img in enumerate(images)
            ])
            total += svm.decision_function(estd.transform(fusion_inputs(models, aug, hands, cfg)))
        scores = total / (cfg.tta_rounds + 1)
    return scores


def run_eval(cfg: PipelineConfig, split: str = "test") -> dict[str, "object"]:
    """Score the fusion head and both individual models; returns the reports by tag."""
    if split not in ("val", "test"):
        raise StageError("eval", f"split must be val or test, got {split!r}")
    paths = Paths(cfg.work_dir)
    manifest = _manifest(cfg, "eval")
    records = getattr(manifest, split)
    if not records:
        raise StageError("eval", f"the {split} split is empty")
    models, estd, svm = load_trained(cfg, "eval")
    data = load_split(cfg, records, "eval")
    scores = fused_scores(models, estd, svm, data.images, data.hands, cfg)
    pred = np.argmax(scores, axis=1)
    report, cm = evaluate(pred, data.labels, scores, average=cfg.metrics_average)
    with staged(paths.metrics(split)) as p:
        write_report(p, report, CLASS_NAMES)
    with staged(paths.confusion(split)) as p:
        write_confusion(p, cm, CLASS_NAMES)
    with staged(paths.root / f"predictions_{split}.csv") as p:
        with open(p, "w", encoding="utf-8") as fh:
            fh.write("sample_id,label,predicted," + ",".join(f"score_{n}" for n in CLASS_NAMES) + "\n")
            for sid, t, y, s in zip(data.ids, data.labels, pred, scores):
                fh.write(f"{sid},{CLASS_NAMES[t]},{CLASS_NAMES[y]}," + ",".join(repr(float(v)) for v in s) + "\n")
    reports = {"fusion": report}
    cms = {"fusion": cm}
    for tag, m in (("model_a", models[0]), ("model_b", models[1])):
        logits = predict_logits(m, data.images, data.hands if m.use_injection else None)
        rep, mcm = evaluate(np.argmax(logits, axis=1), data.labels, logits, average=cfg.metrics_average)
        with staged(paths.metrics(split, f"_{tag}")) as p:
            write_report(p, rep, CLASS_NAMES)
        reports[tag] = rep
        cms[tag] = mcm
    with staged(paths.root / f"summary_{split}.csv") as p:
        with open(p, "w", encoding="utf-8") as fh:
            fh.write("model,BACC,SPEC,SENS,Accuracy,AUC\n")
            for tag, rep in reports.items():
                fh.write(tag + "," + ",".join(repr(float(v)) for _, v in rep.as_rows()) + "\n")
    if cfg.roc_points:
        for c in sorted(report.per_class):
            fpr, tpr = roc_curve(scores[:, c], (data.labels == c).astype(int))
            with staged(paths.root / f"roc_{split}_{CLASS_NAMES[c]}.csv") as p:
                write_roc_points(p, fpr, tpr)
    if cfg.figures:
        from dermhybrid import report as figures

        figures.render_eval_figures(paths.root, split, cms, CLASS_NAMES, [paths.history_a, paths.history_b])
    RunLog(paths.run_log).write("eval", f"{split}: BACC {report.bacc:.4f} over {len(records)} samples")
    return reports


def predict_image(cfg: PipelineConfig, image_path: Path, mask_path: Path | None = None,
                  probmap_paths: tuple[Path, ...] = ()) -> tuple[str, np.ndarray]:
    models, estd, svm = load_trained(cfg, "predict")
    std = Standardizer.load(_require(Paths(cfg.work_dir).standardizer, "predict"))
    img = imageio.read_rgb(image_path)
    if probmap_paths:
        mask = segmask.mask_from_probmaps([imageio.read_probmap(p) for p in probmap_paths], cfg.mask_threshold)
    elif mask_path is not None:
        mask = segmask.postprocess_mask(imageio.read_mask(mask_path))
    else:
        raise StageError("predict", "a mask or probability maps are required")
    img, mask = preprocess_pair(img, mask, cfg)
    img = np.rint(img * 255.0) / 255.0  # match the 8-bit prep images used in training
    hand = std.transform(extract_features(img, mask).values)[None]
    scores = fused_scores(models, estd, svm, img[None], hand, cfg)[0]
    return CLASS_NAMES[int(np.argmax(scores))], scores
