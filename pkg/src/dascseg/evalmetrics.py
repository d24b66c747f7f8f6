"""Segmentation evaluation: overlap ratios, boundary distance, and report
generation against held-out truth.

Empty-mask conventions (documented in every report): if prediction and truth
are both empty the overlap scores are 1 and the boundary distance 0; if
exactly one is empty the overlap scores are 0 and the boundary distance is the
image diagonal (the largest achievable pixel-center distance).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from scipy.spatial.distance import directed_hausdorff

from . import networks
from .adaptation import TrainingConfig
from .datapipe import BinaryMask, DomainSample
from .errors import DataError
from .selfcorrect import make_predictor

CONVENTIONS = {
    "both_empty": "dice = ja = sen = spc = 1, hd = 0",
    "one_empty": "dice = ja = 0, hd = image diagonal hypot(H-1, W-1)",
    "zero_denominator": "ratio with an empty denominator reports 1 (vacuous)",
    "hd": "exact symmetric maximum of directed Euclidean distances, per slice",
}


def confusion(pred: BinaryMask, truth: BinaryMask) -> tuple[int, int, int, int]:
    """Pixelwise (TP, FP, TN, FN)."""
    if pred.pixels.shape != truth.pixels.shape:
        raise DataError(
            f"mask shapes differ: {pred.pixels.shape} vs {truth.pixels.shape}")
    p = pred.pixels.astype(bool)
    t = truth.pixels.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    tn = int(np.count_nonzero(~p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, tn, fn


def dice(counts: tuple[int, int, int, int]) -> float:
    tp, fp, _, fn = counts
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 1.0


def sen(counts: tuple[int, int, int, int]) -> float:
    tp, _, _, fn = counts
    denom = tp + fn
    return tp / denom if denom else 1.0


def spc(counts: tuple[int, int, int, int]) -> float:
    _, fp, tn, _ = counts
    denom = tn + fp
    return tn / denom if denom else 1.0


def jaccard(counts: tuple[int, int, int, int]) -> float:
    tp, fp, _, fn = counts
    denom = tp + fp + fn
    return tp / denom if denom else 1.0


def hausdorff(pred: BinaryMask, truth: BinaryMask) -> float:
    """Exact symmetric Hausdorff distance between foreground pixel-center sets."""
    if pred.pixels.shape != truth.pixels.shape:
        raise DataError(
            f"mask shapes differ: {pred.pixels.shape} vs {truth.pixels.shape}")
    a = np.argwhere(pred.pixels).astype(np.float64)
    b = np.argwhere(truth.pixels).astype(np.float64)
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        h, w = pred.pixels.shape
        return math.hypot(h - 1, w - 1)
    return max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])


@dataclass
class SampleMetrics:
    sample_id: str
    dice: float
    sen: float
    spc: float
    ja: float
    hd: float

    def as_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "dice": self.dice, "sen": self.sen, "spc": self.spc,
            "ja": self.ja, "hd": self.hd,
        }


@dataclass
class MetricsReport:
    per_sample: list[SampleMetrics]
    model_id: str = ""
    config_hash: str = ""
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    @property
    def n_samples(self) -> int:
        return len(self.per_sample)

    def aggregate(self) -> dict[str, float]:
        agg = {}
        for key in ("dice", "sen", "spc", "ja", "hd"):
            agg[key] = float(np.mean([getattr(s, key) for s in self.per_sample]))
        return agg

    def as_dict(self) -> dict:
        agg = self.aggregate()
        return {
            "model_id": self.model_id,
            "config_hash": self.config_hash,
            "n_samples": self.n_samples,
            "aggregate": agg,
            "aggregate_percent": {
                k: (v * 100.0 if k != "hd" else v) for k, v in agg.items()
            },
            "conventions": self.conventions,
            "per_sample": [s.as_dict() for s in self.per_sample],
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=1, sort_keys=True)


def score_masks(pred: BinaryMask, truth: BinaryMask, sample_id: str = "") -> SampleMetrics:
    counts = confusion(pred, truth)
    return SampleMetrics(
        sample_id=sample_id,
        dice=dice(counts), sen=sen(counts), spc=spc(counts),
        ja=jaccard(counts), hd=hausdorff(pred, truth),
    )


def predict_masks(vectors: dict[str, networks.ParameterVector],
                  samples: list[DomainSample], train_config: TrainingConfig,
                  batch_size: int = 8) -> dict[str, BinaryMask]:
    """Inference (argmax over the two channels) for a list of samples.

    Predicts with the attention-modulated main head; models trained without it
    (base-adaptation ablations) are scored through their auxiliary-head mean.
    """
    arch = train_config.arch()
    gen = networks.build_generator(arch, train_config.seed)
    extractor = None
    if "cam_extractor" in vectors and train_config.cam_enabled:
        extractor = networks.build_cam_extractor(arch, train_config.seed)
    networks.load_generator_vectors(gen, extractor, vectors)
    cam_on = train_config.cam_enabled and train_config.cam_attention_on_target
    predictor = make_predictor(gen, extractor, cam_on,
                               use_major=train_config.cam_enabled)
    preds = {}
    for i in range(0, len(samples), batch_size):
        batch = samples[i:i + batch_size]
        images = torch.from_numpy(
            np.stack([s.image.pixels.astype(np.float32) for s in batch])
        ).unsqueeze(1)
        prob = predictor(images)
        hard = (prob > 0.5).to(torch.uint8).numpy()
        for s, mask in zip(batch, hard):
            preds[s.sample_id] = BinaryMask(mask)
    return preds


def report_from_masks(preds: dict[str, BinaryMask], truths: dict[str, BinaryMask],
                      sample_ids: list[str], model_id: str = "",
                      config_hash: str = "") -> MetricsReport:
    """Score an already-predicted mask set against truth, in the given order."""
    missing = [sid for sid in sample_ids if sid not in truths]
    if missing:
        raise DataError(f"missing ground truth for samples: {missing[:5]}")
    per_sample = [score_masks(preds[sid], truths[sid], sid) for sid in sample_ids]
    return MetricsReport(per_sample=per_sample, model_id=model_id,
                         config_hash=config_hash)


def evaluate(vectors: dict[str, networks.ParameterVector], samples: list[DomainSample],
             truths: dict[str, BinaryMask], train_config: TrainingConfig,
             model_id: str = "", config_hash: str = "",
             overlays_dir=None) -> MetricsReport:
    """Run inference and score every sample against its held-out truth."""
    preds = predict_masks(vectors, samples, train_config)
    report = report_from_masks(preds, truths, [s.sample_id for s in samples],
                               model_id=model_id, config_hash=config_hash)
    if overlays_dir is not None:
        from pathlib import Path

        overlays_dir = Path(overlays_dir)
        overlays_dir.mkdir(parents=True, exist_ok=True)
        for s in samples:
            img = render_overlay(s, preds[s.sample_id], truths[s.sample_id])
            Image.fromarray(img).save(overlays_dir / f"{s.sample_id}.png")
    return report


def render_overlay(sample: DomainSample, pred: BinaryMask, truth: BinaryMask) -> np.ndarray:
    """RGB overlay: correct foreground in green, false predictions in red."""
    gray = (sample.image.pixels * 255).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    p = pred.pixels.astype(bool)
    t = truth.pixels.astype(bool)
    correct = p & t
    wrong = p ^ t  # false positive or false negative
    rgb[correct] = [0, 200, 0]
    rgb[wrong] = [220, 0, 0]
    return rgb


def write_report(report: MetricsReport, json_path, csv_path=None) -> None:
    from pathlib import Path

    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(report.to_json())
    if csv_path is not None:
        import csv as csvmod

        with open(csv_path, "w", newline="") as f:
            writer = csvmod.DictWriter(
                f, fieldnames=["sample_id", "dice", "sen", "spc", "ja", "hd"])
            writer.writeheader()
            writer.writerows([s.as_dict() for s in report.per_sample])
