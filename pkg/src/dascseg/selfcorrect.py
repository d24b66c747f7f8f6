"""Cycle-wise self-correction: retrain the segmenter on source truth plus
pseudo-labeled target slices, then pull both the weights and the pseudo labels
back toward their initial versions by an exact convex combination each cycle.
Pseudo labels come from flip-averaged test-time inference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import datapipe, losses, networks
from .adaptation import TrainingConfig, _set_lr, filter_training_samples, poly_lr, samples_to_tensors
from .datapipe import AugmentParams, BinaryMask, DomainSample, Slice, make_batches
from .errors import ConfigError, DataError, NumericalAbortError
from .networks import ParameterVector

VALID_FLIPS = ("horizontal", "vertical")


@dataclass(frozen=True)
class SelfCorrectionConfig:
    cycles: int = 9
    epochs_per_cycle: int = 2
    tta_flips: tuple[str, ...] = ("horizontal", "vertical")
    pseudo_threshold: float = 0.5
    soft_targets: bool = False
    # one poly decay spanning all cycles; per-cycle restarts let high-rate
    # excursions leave the initial basin and break the weight averaging
    lr_spanning: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.cycles < 1:
            raise ConfigError(f"cycle count must be >= 1, got {self.cycles}")
        if self.epochs_per_cycle < 0:
            raise ConfigError(f"epochs per cycle must be >= 0, got {self.epochs_per_cycle}")
        for flip in self.tta_flips:
            if flip not in VALID_FLIPS:
                raise ConfigError(f"unknown flip {flip!r}; valid: {VALID_FLIPS}")
        if not 0.0 <= self.pseudo_threshold <= 1.0:
            raise ConfigError("pseudo threshold must lie in [0, 1]")


@dataclass
class PseudoLabelSet:
    """Per-target-sample soft foreground maps in [0, 1] with provenance."""

    maps: dict[str, np.ndarray]
    cycle: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for sid, arr in self.maps.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2:
                raise DataError(f"pseudo map for {sid} must be 2-D")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise DataError(f"pseudo map for {sid} outside [0, 1]")
            self.maps[sid] = arr

    def sample_ids(self) -> tuple[str, ...]:
        return tuple(self.maps.keys())


def make_predictor(gen: networks.Generator, extractor: networks.CamExtractor | None,
                   cam_on: bool = True, use_major: bool = True):
    """Frozen-snapshot callable: images (N,1,H,W) -> positive-class probability (N,H,W).

    Models trained without the attention branch have no trained main head, so
    `use_major=False` predicts with the mean of the auxiliary heads instead.
    """
    gen.eval()
    if extractor is not None:
        extractor.eval()

    def predict(images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            if use_major:
                cam = None
                if cam_on and extractor is not None:
                    _, cam = networks.compute_cam(extractor, images)
                p0 = gen.forward_major(images, cam)
                return F.softmax(p0, dim=1)[:, 1]
            size = images.shape[-2:]
            pyramid = gen.encoder(images)
            prob1 = F.softmax(gen.aux1(pyramid, size), dim=1)
            prob2 = F.softmax(gen.aux2(pyramid, size), dim=1)
            return 0.5 * (prob1 + prob2)[:, 1]

    return predict


def _flip_dims(flip: str) -> int:
    return -1 if flip == "horizontal" else -2


def generate_pseudo_labels(predictor, target: list[DomainSample],
                           tta_flips: tuple[str, ...] = ("horizontal", "vertical"),
                           cycle: int = 0, batch_size: int = 8,
                           provenance: dict | None = None) -> PseudoLabelSet:
    """Average the predictor over the identity view and each un-flipped flip view."""
    maps: dict[str, np.ndarray] = {}
    for i in range(0, len(target), batch_size):
        batch = target[i:i + batch_size]
        images = torch.from_numpy(
            np.stack([s.image.pixels.astype(np.float32) for s in batch])
        ).unsqueeze(1)
        acc = predictor(images).double()
        for flip in tta_flips:
            dim = _flip_dims(flip)
            flipped = predictor(torch.flip(images, dims=(dim,)))
            acc = acc + torch.flip(flipped, dims=(dim,)).double()
        acc = acc / (1 + len(tta_flips))
        for s, prob in zip(batch, acc):
            maps[s.sample_id] = prob.clamp(0.0, 1.0).numpy()
    return PseudoLabelSet(maps=maps, cycle=cycle, provenance=provenance or {})


def aggregate_weights(w_prev: ParameterVector, w0: ParameterVector, c: int) -> ParameterVector:
    """Convex combination c/(c+1) * w_prev + 1/(c+1) * w0, exact at the fixed point.

    Written as w_prev + (w0 - w_prev)/(c+1) so that identical inputs reproduce
    themselves bitwise and every entry stays inside the interval hull.
    """
    if c < 1:
        raise ValueError(f"cycle index must be >= 1, got {c}")
    w_prev.check_layout(w0)
    inv = 1.0 / (c + 1.0)
    out = {name: arr + (w0.entries[name] - arr) * inv
           for name, arr in w_prev.entries.items()}
    return ParameterVector(out, w_prev.role)


def aggregate_labels(y_prev: PseudoLabelSet, y0: PseudoLabelSet, c: int) -> PseudoLabelSet:
    """Per-pixel convex combination of soft maps, same form as aggregate_weights."""
    if c < 1:
        raise ValueError(f"cycle index must be >= 1, got {c}")
    if y_prev.sample_ids() != y0.sample_ids():
        raise DataError("pseudo label sets cover different samples")
    inv = 1.0 / (c + 1.0)
    maps = {}
    for sid, prev in y_prev.maps.items():
        init = y0.maps[sid]
        if prev.shape != init.shape:
            raise DataError(f"pseudo map shapes differ for {sid}")
        maps[sid] = prev + (init - prev) * inv
    return PseudoLabelSet(maps=maps, cycle=c, provenance=dict(y_prev.provenance))


def build_mixed_dataset(source: list[DomainSample], target: list[DomainSample],
                        pseudo: PseudoLabelSet, threshold: float = 0.5) -> list[DomainSample]:
    """Source samples with ground truth plus target samples with binarized pseudo labels.

    Thresholding is >=, so a pixel exactly at the threshold counts as foreground.
    """
    mixed = list(source)
    for s in target:
        soft = pseudo.maps.get(s.sample_id)
        if soft is None:
            raise DataError(f"no pseudo label for target sample {s.sample_id}")
        hard = (soft >= threshold).astype(np.uint8)
        mixed.append(DomainSample(
            image=s.image, label=BinaryMask(hard), domain=s.domain,
            sample_id=s.sample_id, class_tag=s.class_tag,
        ))
    return mixed


def _soft_seg_ce(logits: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Mean two-class cross-entropy against a soft positive-class target map."""
    logp = F.log_softmax(logits, dim=1)
    return -(q * logp[:, 1] + (1.0 - q) * logp[:, 0]).mean()


def _augmented_batch(batch, soft_maps, aug_rng):
    """Apply one augmentation draw per sample to image, hard label, and soft map."""
    if aug_rng is None:
        soft = [soft_maps.get(s.sample_id) if soft_maps else None for s in batch]
        return batch, soft
    out, soft = [], []
    for s in batch:
        params = AugmentParams.random(aug_rng)
        out.append(datapipe.augment(s, params))
        sm = soft_maps.get(s.sample_id) if soft_maps else None
        if sm is not None:
            carrier = DomainSample(
                image=Slice(sm.astype(np.float32)), label=None,
                domain=s.domain, sample_id=s.sample_id)
            sm = datapipe.augment(carrier, params).image.pixels.astype(np.float64)
        soft.append(sm)
    return out, soft


def _train_cycle(gen, extractor, mixed, soft_maps, config: SelfCorrectionConfig,
                 train_config: TrainingConfig, cycle: int) -> list[float]:
    """Train the segmentation heads for one cycle; returns per-step losses."""
    w = train_config.weights
    optimizer = torch.optim.Adam(gen.parameters(), lr=train_config.lr_generator,
                                 betas=train_config.adam_betas)
    iters_per_epoch = math.ceil(len(mixed) / train_config.batch_size)
    if config.lr_spanning:
        total_iters = config.cycles * config.epochs_per_cycle * iters_per_epoch
        step = (cycle - 1) * config.epochs_per_cycle * iters_per_epoch
    else:
        total_iters = config.epochs_per_cycle * iters_per_epoch
        step = 0
    step_losses: list[float] = []
    gen.train()
    for e in range(config.epochs_per_cycle):
        epoch_key = (cycle - 1) * max(config.epochs_per_cycle, 1) + e
        aug_rng = (np.random.default_rng([config.seed % 2**32, 13, epoch_key])
                   if train_config.augment else None)
        for batch in make_batches(mixed, train_config.batch_size, config.seed, epoch_key):
            _set_lr(optimizer, poly_lr(train_config.lr_generator, step, total_iters,
                                       train_config.lr_power))
            batch, soft = _augmented_batch(
                batch, soft_maps if config.soft_targets else None, aug_rng)
            images, labels, _ = samples_to_tensors(batch, with_labels=True)
            cam = None
            if train_config.cam_enabled and extractor is not None:
                with torch.no_grad():
                    _, cam = networks.compute_cam(extractor, images)
            p0, p1, p2, _ = gen(images, cam)
            heads = (p0, p1, p2) if cam is not None else (None, p1, p2)
            if config.soft_targets and any(sm is not None for sm in soft):
                q = torch.from_numpy(np.stack([
                    sm if sm is not None else b.label.pixels.astype(np.float64)
                    for sm, b in zip(soft, batch)
                ])).float()
                loss = _soft_seg_ce(p1, q) + _soft_seg_ce(p2, q)
                if heads[0] is not None:
                    loss = loss + w.lambda_seg * _soft_seg_ce(p0, q)
            else:
                loss = losses.seg_loss(heads[0], p1, p2, labels, w.lambda_seg)
            if not torch.isfinite(loss):
                raise NumericalAbortError(
                    f"self-correction loss became non-finite in cycle {cycle} step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step_losses.append(loss.detach().item())
            step += 1
    gen.eval()
    return step_losses


def save_pseudo_archive(directory, pseudo: PseudoLabelSet) -> None:
    """8-bit PNG per map (round-to-nearest of p*255) plus a lossless npz and metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sid, arr in pseudo.maps.items():
        png = np.rint(arr * 255).astype(np.uint8)
        Image.fromarray(png).save(directory / f"{sid}.png")
    np.savez(directory / "pseudo_exact.npz", **pseudo.maps)
    meta = {
        "cycle": pseudo.cycle,
        "provenance": pseudo.provenance,
        "quantization": "png = round(p * 255); exact float64 maps in pseudo_exact.npz",
        "n_samples": len(pseudo.maps),
    }
    (directory / "pseudo_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_pseudo_archive(directory) -> PseudoLabelSet:
    directory = Path(directory)
    meta = json.loads((directory / "pseudo_meta.json").read_text())
    with np.load(directory / "pseudo_exact.npz") as data:
        maps = {k: data[k].copy() for k in data.files}
    return PseudoLabelSet(maps=maps, cycle=meta["cycle"], provenance=meta["provenance"])


def run_self_correction(w0: dict[str, ParameterVector], source: list[DomainSample],
                        target: list[DomainSample], config: SelfCorrectionConfig,
                        train_config: TrainingConfig, out_dir=None):
    """Full correction loop; returns (final vectors, final pseudo labels, history).

    Target ground truth must not be present: samples carrying labels are
    rejected so truth can only enter through the evaluation module.
    """
    for s in target:
        if s.label is not None:
            raise DataError(
                f"target sample {s.sample_id} carries a label; held-out truth must "
                "stay outside self-correction")
    source_train = filter_training_samples(source, train_config.positives_only,
                                           require_labels=True)

    arch = train_config.arch()
    gen = networks.build_generator(arch, train_config.seed)
    extractor = None
    if "cam_extractor" in w0:
        extractor = networks.build_cam_extractor(arch, train_config.seed)
    networks.load_generator_vectors(gen, extractor, w0)
    if extractor is not None:
        extractor.eval()
        for p in extractor.parameters():
            p.requires_grad_(False)

    w0 = {role: pv.copy() for role, pv in w0.items()}
    cam_on = train_config.cam_enabled and train_config.cam_attention_on_target
    predictor = make_predictor(gen, extractor, cam_on,
                               use_major=train_config.cam_enabled)

    y0 = generate_pseudo_labels(
        predictor, target, config.tta_flips, cycle=0,
        provenance={"model": "initial", "tta_flips": list(config.tta_flips)})
    labels = y0
    if out_dir is not None:
        save_pseudo_archive(Path(out_dir) / "cycle_000" / "pseudo", y0)

    history: list[dict] = []
    vectors = w0
    for c in range(1, config.cycles + 1):
        mixed = build_mixed_dataset(source_train, target, labels, config.pseudo_threshold)
        step_losses = _train_cycle(gen, extractor, mixed, labels.maps, config,
                                   train_config, c)
        trained = networks.generator_vectors(gen, extractor)
        vectors = {role: aggregate_weights(trained[role], w0[role], c)
                   for role in trained}
        networks.load_generator_vectors(gen, extractor, vectors)

        fresh = generate_pseudo_labels(
            predictor, target, config.tta_flips, cycle=c,
            provenance={"model": f"cycle_{c:03d}", "tta_flips": list(config.tta_flips)})
        prev_maps = labels.maps
        labels = aggregate_labels(fresh, y0, c)

        max_change = max(
            (float(np.abs(labels.maps[sid] - prev_maps[sid]).max())
             for sid in labels.maps), default=0.0)
        row = {
            "cycle": c,
            "train_steps": len(step_losses),
            "mean_loss": float(np.mean(step_losses)) if step_losses else 0.0,
            "pseudo_fg_mean": float(np.mean([m.mean() for m in labels.maps.values()])),
            "pseudo_max_change": max_change,
        }
        history.append(row)
        if out_dir is not None:
            from .adaptation import manifest_for

            cycle_dir = Path(out_dir) / f"cycle_{c:03d}"
            networks.save_checkpoint(cycle_dir, vectors,
                                     manifest_for(train_config, cycle=c))
            save_pseudo_archive(cycle_dir / "pseudo", labels)
            _write_cycle_csv(Path(out_dir) / "cycle_metrics.csv", history)
    return vectors, labels, history


def _write_cycle_csv(path, history: list[dict]) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)
