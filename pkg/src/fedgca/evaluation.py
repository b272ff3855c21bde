"""Out-of-domain accuracy, ablation sweeps and CAM image export."""

from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from fedgca import classifier as clf
from fedgca.config import AblationSpec, ConfigError, ExperimentConfig, ABLATION_GRID
from fedgca.dataset_store import LabeledDataset
from fedgca.federation import RoundMetrics, run_federation

__all__ = [
    "AblationSpec", "RoundMetrics", "ABLATION_GRID", "evaluate", "make_evaluator", "run_ablation",
    "export_cams", "colormap", "cam_panels", "write_results_csv", "write_summary_csv",
]

log = logging.getLogger(__name__)

EVAL_BATCH = 512


def evaluate(
    spec: clf.ClassifierSpec, params: torch.Tensor, targets: Sequence[LabeledDataset], batch_size: int = EVAL_BATCH
) -> dict[str, float]:
    """Top-1 accuracy per target domain on the unaugmented images."""
    out = {}
    with torch.no_grad():
        for ds in targets:
            if ds.class_count != spec.class_count:
                raise ValueError(
                    f"{ds.domain_tag}: {ds.class_count} classes but the classifier has {spec.class_count}"
                )
            if len(ds) == 0:
                raise ValueError(f"{ds.domain_tag}: empty target set")
            correct = 0
            for start in range(0, len(ds), batch_size):
                logits, _ = clf.forward(spec, params, ds.images[start : start + batch_size])
                pred = logits.argmax(dim=1).numpy()
                correct += int((pred == ds.labels[start : start + batch_size]).sum())
            out[ds.domain_tag] = correct / len(ds)
    return out


def make_evaluator(spec: clf.ClassifierSpec, targets: Sequence[LabeledDataset]) -> Callable[[torch.Tensor], dict]:
    return lambda params: evaluate(spec, params, targets)


@dataclass
class AblationRow:
    spec: AblationSpec
    accuracy: dict[str, float]
    history: list[RoundMetrics]

    @property
    def average(self) -> float:
        return float(np.mean(list(self.accuracy.values())))


def run_ablation(
    config: ExperimentConfig,
    grid: Sequence[AblationSpec],
    source: LabeledDataset,
    targets: Sequence[LabeledDataset],
) -> list[AblationRow]:
    """One federated run per ablation spec, all sharing the master seed.

    Partitions, initial weights, shuffles and augmentation streams are keyed
    only by the master seed and round/client/epoch/batch coordinates, so the
    rows differ only in the toggled loss ingredients. The all-off row also
    drops augmentation and the consistency weight (the FedDyn baseline).
    """
    rows = []
    for spec in grid:
        if not isinstance(spec, AblationSpec):
            raise ConfigError(f"not an AblationSpec: {spec!r}")
        cfg = config.with_ablation(spec)
        log.info("ablation %s", spec.label)
        params, history = run_federation(cfg, source, evaluator=make_evaluator(cfg.classifier_spec, targets))
        acc = history[-1].per_domain_accuracy if history else evaluate(cfg.classifier_spec, params, targets)
        rows.append(AblationRow(spec, acc, history))
    return rows


# ------------------------------------------------------------------ colormap


def colormap() -> np.ndarray:
    """256x3 uint8 "jet" lookup table built from the piecewise-linear formula.

    Entry ``i`` maps value ``v = i / 255``; each channel is
    ``clip(1.5 - |4v - k|, 0, 1)`` with ``k = 3, 2, 1`` for red, green, blue.
    """
    v = np.arange(256) / 255.0
    chans = [np.clip(1.5 - np.abs(4 * v - k), 0.0, 1.0) for k in (3, 2, 1)]
    return np.rint(np.stack(chans, axis=1) * 255).astype(np.uint8)


_LUT = colormap()


def _lut_index(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values * 255.0), 0, 255).astype(np.int64)


def cam_panels(image: np.ndarray, cam: torch.Tensor) -> np.ndarray:
    """``(H, 3W, 3)`` uint8 strip: input | heatmap | 50/50 overlay.

    The heatmap applies the lookup table directly to the normalized CAM
    probabilities after bilinear upsampling to the image size.
    """
    c, h, w = image.shape
    up = F.interpolate(cam.double()[None, None], size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
    heat = _LUT[_lut_index(up)]
    rgb = np.repeat(image, 3, axis=0) if c == 1 else image[:3]
    base = np.clip(np.rint(rgb.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    blend = ((base.astype(np.uint16) + heat.astype(np.uint16)) // 2).astype(np.uint8)
    return np.concatenate([base, heat, blend], axis=1)


def export_cams(spec: clf.ClassifierSpec, params: torch.Tensor, samples: np.ndarray, out_dir) -> list[Path]:
    """Write ``cam_<index>_<predclass>.png`` for each sample (predicted-class CAM)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        logits, _ = clf.forward(spec, params, samples)
        pred = logits.argmax(dim=1)
        cams = clf.compute_cam(spec, params, samples, pred)
    paths = []
    for i, (img, cam, p) in enumerate(zip(samples, cams, pred.tolist())):
        path = out_dir / f"cam_{i}_{p}.png"
        Image.fromarray(cam_panels(np.asarray(img), cam.normalized)).save(path)
        paths.append(path)
    return paths


# ------------------------------------------------------------------ reports


def write_results_csv(path, run_id: str, history: Sequence[RoundMetrics]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "round", "domain", "accuracy"])
        for rec in history:
            for domain, acc in rec.per_domain_accuracy.items():
                writer.writerow([run_id, rec.round, domain, f"{acc:.6f}"])
    return path


def write_summary_csv(path, rows: Sequence[tuple[str, dict[str, float]]], domains: Sequence[str]) -> Path:
    """Method/ablation rows x target domains x Avg, accuracies in percent."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", *domains, "Avg"])
        for name, acc in rows:
            vals = [100.0 * acc[d] for d in domains]
            writer.writerow([name, *(f"{v:.2f}" for v in vals), f"{statistics.fmean(vals):.2f}"])
    return path
