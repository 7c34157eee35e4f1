"""Quantitative evaluation: occlusion-masked flow warping error and
semantic-preservation scores against toy ground truth.

The warping error is the mean, over consecutive frame pairs and over
analytically occlusion-free pixels, of the per-pixel Euclidean color
difference between a frame and its flow-warped predecessor, with frames
in [0, 1] and the norm divided by sqrt(3) so values are per-channel
comparable.  Semantic preservation classifies every output pixel to the
nearest class color of the target palette and scores the result against
the ground-truth semantic maps (per-class IoU, mIoU, frequency-weighted
IoU, pixel accuracy).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import core, toygen
from .errors import DataError
from .flow import FlowSource, warp
from .nets import recurrent_generate
from .train import config_from_dict, load_checkpoint


@dataclass
class EvalReport:
    warping_error: float
    per_class_iou: list
    miou: float
    fw_iou: float
    pixel_acc: float
    clips_evaluated: int
    checkpoint_id: str
    direction: str
    config: dict

    def __post_init__(self) -> None:
        for v in (self.miou, self.fw_iou, self.pixel_acc):
            if not 0.0 <= v <= 1.0:
                raise ValueError("IoU/accuracy values must lie in [0, 1]")
        if self.warping_error < 0:
            raise ValueError("warping error must be >= 0")
        # standard inequality on a shared confusion matrix
        if self.pixel_acc < self.fw_iou - 1e-9:
            raise ValueError("pixel accuracy below frequency-weighted IoU")

    def to_dict(self) -> dict:
        return {
            "warping_error": self.warping_error,
            "semantic": {
                "per_class_iou": self.per_class_iou,
                "miou": self.miou,
                "fw_iou": self.fw_iou,
                "pixel_acc": self.pixel_acc,
            },
            "clips_evaluated": self.clips_evaluated,
            "checkpoint_id": self.checkpoint_id,
            "direction": self.direction,
            "config": self.config,
        }


def warping_error(translated: core.VideoClip, gt_flows: list[core.FlowField],
                  occlusion_free_masks: list[np.ndarray]) -> float:
    """Occlusion-masked temporal color error; lower is smoother."""
    length = len(translated)
    if length < 2:
        raise ValueError("warping error needs at least 2 frames")
    if len(gt_flows) != length - 1 or len(occlusion_free_masks) != length - 1:
        raise DataError("need one flow field and mask per consecutive pair")
    pair_means = []
    for t in range(1, length):
        mask = occlusion_free_masks[t - 1].astype(bool)
        if not mask.any():
            continue
        warped = warp(translated.frames[t - 1], gt_flows[t - 1])
        cur01 = (translated.frames[t].data.astype(np.float64) + 1.0) * 0.5
        prev01 = (warped.data.astype(np.float64) + 1.0) * 0.5
        dist = np.linalg.norm(cur01 - prev01, axis=2) / np.sqrt(3.0)
        pair_means.append(dist[mask].mean())
    if not pair_means:
        raise DataError("no occlusion-free pixels in any frame pair")
    return float(np.mean(pair_means))


def classify_by_palette(frame: core.Frame, palette: toygen.StylePalette) -> np.ndarray:
    """Nearest class base color (L2 in color space) per pixel."""
    diffs = frame.data[..., None, :].astype(np.float64) - palette.base_colors[None, None]
    return np.argmin((diffs ** 2).sum(axis=-1), axis=-1)


def confusion_matrix(translated: core.VideoClip, gt_semantics: list[np.ndarray],
                     palette: toygen.StylePalette,
                     num_classes: int = toygen.NUM_CLASSES) -> np.ndarray:
    if len(gt_semantics) != len(translated):
        raise DataError("need one semantic map per frame")
    if gt_semantics and gt_semantics[0].size:
        max_id = max(int(s.max()) for s in gt_semantics)
        if max_id >= num_classes:
            raise DataError(f"semantic id {max_id} outside palette's {num_classes} classes")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for frame, sem in zip(translated.frames, gt_semantics):
        pred = classify_by_palette(frame, palette)
        idx = sem.reshape(-1) * num_classes + pred.reshape(-1)
        conf += np.bincount(idx, minlength=num_classes * num_classes).reshape(
            num_classes, num_classes
        )
    return conf


def metrics_from_confusion(conf: np.ndarray) -> dict:
    total = conf.sum()
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1).astype(np.float64)
    pred_count = conf.sum(axis=0).astype(np.float64)
    union = gt_count + pred_count - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = ~np.isnan(iou)
    miou = float(iou[present].mean()) if present.any() else 0.0
    fw_iou = float(np.nansum((gt_count / total) * np.nan_to_num(iou)))
    pixel_acc = float(tp.sum() / total)
    return {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "miou": miou,
        "fw_iou": fw_iou,
        "pixel_acc": pixel_acc,
    }


def semantic_preservation(translated: core.VideoClip, gt_semantics: list[np.ndarray],
                          target_palette: toygen.StylePalette) -> dict:
    return metrics_from_confusion(confusion_matrix(translated, gt_semantics, target_palette))


def _export_clip(out_dir: Path, name: str, translated: core.VideoClip, masks,
                 classified: list[np.ndarray], palette: toygen.StylePalette) -> None:
    clip_dir = out_dir / name
    clip_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(translated.frames):
        Image.fromarray(core.from_normalized(frame), "RGB").save(clip_dir / f"frame_{t:04d}.png")
    for t, mask in enumerate(masks, start=1):
        arr = np.round(mask.data[..., 0] * 255).astype(np.uint8)
        Image.fromarray(arr, "L").save(clip_dir / f"mask_{t:04d}.png")
    colors = np.round((palette.base_colors + 1.0) * 127.5).astype(np.uint8)
    for t, cls in enumerate(classified):
        Image.fromarray(colors[cls], "RGB").save(clip_dir / f"class_{t:04d}.png")


def run_eval(checkpoint_path: str | Path, corpus_dir: str | Path,
             direction: str = "s2t", export_dir: str | Path | None = None) -> EvalReport:
    """Translate every paired eval clip and score both metrics."""
    if direction not in ("s2t", "t2s"):
        raise ValueError(f"direction must be s2t or t2s, got {direction!r}")
    state = load_checkpoint(checkpoint_path)
    state.bundle.eval()
    corpus = toygen.Corpus(corpus_dir)
    manifest = corpus.manifest
    if not manifest.eval_paired:
        raise DataError("corpus has no paired eval split")
    cfg = state.config
    in_key, in_tag = ("source", "S") if direction == "s2t" else ("target", "T")
    palette = manifest.palette_t if direction == "s2t" else manifest.palette_s
    flow_source = FlowSource(cfg.flow_mode)

    pair_errors = []
    conf = np.zeros((toygen.NUM_CLASSES, toygen.NUM_CLASSES), dtype=np.int64)
    for entry in manifest.eval_paired:
        rel = entry[in_key]
        clip = corpus.clip(rel, in_tag)
        scene = corpus.scene(rel)
        translated, masks, _ = recurrent_generate(
            state.bundle, direction, clip, flow_source,
            fusion_mode=cfg.fusion_mode, occ_alpha=cfg.weights.alpha_occ,
            occ_norm=cfg.occlusion_norm, dtype=cfg.torch_dtype,
        )
        object_maps = [toygen.render_object_map(scene, t) for t in range(len(clip))]
        occ_masks = [toygen.occlusion_free_mask(scene, t, object_maps)
                     for t in range(1, len(clip))]
        pair_errors.append(warping_error(translated, clip.flows, occ_masks))
        conf += confusion_matrix(translated, clip.semantics, palette)
        if export_dir is not None:
            classified = [classify_by_palette(f, palette) for f in translated.frames]
            _export_clip(Path(export_dir), Path(rel).name, translated, masks,
                         classified, palette)

    metrics = metrics_from_confusion(conf)
    return EvalReport(
        warping_error=float(np.mean(pair_errors)),
        per_class_iou=metrics["per_class_iou"],
        miou=metrics["miou"],
        fw_iou=metrics["fw_iou"],
        pixel_acc=metrics["pixel_acc"],
        clips_evaluated=len(manifest.eval_paired),
        checkpoint_id=Path(checkpoint_path).name,
        direction=direction,
        config=config_from_dict(state.config.__dict__ | {
            "weights": state.config.weights, "ablate": state.config.ablate,
        }) and _config_snapshot(state.config),
    )


def _config_snapshot(cfg) -> dict:
    from .train import config_to_dict

    return config_to_dict(cfg)


def save_report(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=1)
