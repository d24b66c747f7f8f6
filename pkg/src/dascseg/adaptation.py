"""Stage-one training: classifier pretraining for attention maps and the
alternating generator/discriminator domain-adaptation loop.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import datapipe, losses, networks
from .datapipe import AugmentParams, ClassTag, DomainSample, make_batches
from .errors import ConfigError, DataError, NumericalAbortError
from .losses import LossParts, LossWeights, Side


@dataclass
class TrainingConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr_generator: float = 2.5e-4
    lr_discriminators: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    epochs_da: int = 100
    epochs_cam: int = 1
    lr_power: float = 0.9
    seed: int = 0
    arch_preset: str = "paper"
    resolution: tuple[int, int] = (320, 320)
    base_da_mode: bool = False
    cam_attention_on_target: bool = True
    use_cam_attention: bool = True
    use_feature_alignment: bool = True
    augment: bool = True
    positives_only: bool = True
    checkpoint_every: int = 0  # epochs between mid-run checkpoints; 0 = end only
    w_max: float = 10.0
    device: str = "cpu"
    encoder_init: str = ""  # optional npz of pretrained encoder weights
    audit_freeze: bool = False  # per-step checksum audit of the G/D parameter split

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr_generator <= 0 or self.lr_discriminators <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs_da < 0 or self.epochs_cam < 0:
            raise ConfigError("epoch counts must be nonnegative")
        h, w = self.resolution
        if h % networks.OUTPUT_STRIDE or w % networks.OUTPUT_STRIDE:
            raise ConfigError(
                f"resolution {self.resolution} must be divisible by {networks.OUTPUT_STRIDE}"
            )
        if self.use_feature_alignment and not self.base_da_mode and min(h, w) < 64:
            raise ConfigError(
                "feature-level alignment needs resolution >= 64 (the discriminator "
                "stack downsamples the stage-1 features five times)"
            )
        networks.ArchConfig.preset(self.arch_preset)

    @staticmethod
    def from_dict(d: dict) -> "TrainingConfig":
        kwargs = dict(d)
        if isinstance(kwargs.get("weights"), dict):
            kwargs["weights"] = LossWeights(**kwargs["weights"])
        for key in ("resolution", "adam_betas"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return TrainingConfig(**kwargs)

    @property
    def cam_enabled(self) -> bool:
        return self.use_cam_attention and not self.base_da_mode

    @property
    def feature_alignment_enabled(self) -> bool:
        return self.use_feature_alignment and not self.base_da_mode

    def arch(self) -> networks.ArchConfig:
        return networks.ArchConfig.preset(self.arch_preset)


@dataclass
class TrainState:
    iteration: int = 0
    epoch: int = 0
    lr_generator: float = 0.0
    lr_discriminators: float = 0.0
    running: dict = field(default_factory=dict)


def poly_lr(base_lr: float, iteration: int, total_iterations: int,
            power: float = 0.9) -> float:
    """Polynomial decay base * (1 - iter/total)^power."""
    if iteration < 0 or iteration > total_iterations:
        raise ValueError(
            f"iteration {iteration} outside [0, {total_iterations}]"
        )
    if total_iterations == 0:
        return base_lr
    return base_lr * (1.0 - iteration / total_iterations) ** power


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _param_checksum(*modules: torch.nn.Module) -> torch.Tensor:
    with torch.no_grad():
        return torch.stack([p.double().abs().sum()
                            for m in modules for p in m.parameters()])


def filter_training_samples(samples: list[DomainSample], positives_only: bool,
                            require_labels: bool) -> list[DomainSample]:
    out = []
    for s in samples:
        if require_labels and s.label is None:
            raise DataError(f"sample {s.sample_id} lacks the label required for training")
        if positives_only and s.class_tag is ClassTag.NEGATIVE:
            continue
        out.append(s)
    if not out:
        raise DataError("no training samples left after filtering")
    return out


def _check_resolution(samples: list[DomainSample], config: "TrainingConfig") -> None:
    shape = samples[0].image.pixels.shape
    if shape != tuple(config.resolution):
        raise DataError(
            f"sample resolution {shape} does not match the configured "
            f"{tuple(config.resolution)}; resize the cache or fix [networks].resolution"
        )


def samples_to_tensors(batch: list[DomainSample], with_labels: bool,
                       augment_rng: np.random.Generator | None = None,
                       device: str = "cpu"):
    """Stack a batch into tensors, optionally augmenting each sample first."""
    if augment_rng is not None:
        batch = [datapipe.augment(s, AugmentParams.random(augment_rng)) for s in batch]
    images = torch.from_numpy(
        np.stack([s.image.pixels.astype(np.float32) for s in batch])
    ).unsqueeze(1).to(device)
    labels = None
    if with_labels:
        labels = torch.from_numpy(
            np.stack([s.label.pixels for s in batch]).astype(np.int64)
        ).to(device)
    tags = torch.tensor(
        [1 if s.class_tag is ClassTag.POSITIVE else 0 for s in batch],
        dtype=torch.long, device=device,
    )
    return images, labels, tags


def train_cam_extractor(source: list[DomainSample], config: TrainingConfig,
                        out_dir=None) -> tuple[networks.CamExtractor, networks.ParameterVector]:
    """Pretrain the activation-map classifier on image-level tags (default one epoch)."""
    untagged = [s.sample_id for s in source if s.class_tag is None]
    if untagged:
        raise DataError(f"samples without class tags cannot train the classifier: "
                        f"{untagged[:5]}")
    tags = {s.class_tag for s in source}
    if ClassTag.POSITIVE not in tags or ClassTag.NEGATIVE not in tags:
        raise DataError("classifier pretraining needs both positive and negative samples")
    _check_resolution(source, config)
    extractor = networks.build_cam_extractor(config.arch(), config.seed)
    if config.encoder_init:
        with np.load(config.encoder_init) as data:
            pretrained = networks.ParameterVector(
                {k: data[k].copy() for k in data.files}, "encoder")
        networks.set_params(extractor.encoder, pretrained)
    optimizer = torch.optim.Adam(extractor.parameters(), lr=config.lr_generator,
                                 betas=config.adam_betas)
    iters_per_epoch = math.ceil(len(source) / config.batch_size)
    total_iters = config.epochs_cam * iters_per_epoch
    step = 0
    extractor.train()
    for epoch in range(config.epochs_cam):
        aug_rng = np.random.default_rng([config.seed % 2**32, 7, epoch]) if config.augment else None
        for batch in make_batches(source, config.batch_size, config.seed, epoch):
            _set_lr(optimizer, poly_lr(config.lr_generator, step, total_iters, config.lr_power))
            images, _, tag_t = samples_to_tensors(batch, with_labels=False,
                                                  augment_rng=aug_rng, device=config.device)
            class_logits, _ = extractor(images)
            loss = losses.cam_ce_loss(F.softmax(class_logits, dim=1), tag_t)
            if not torch.isfinite(loss):
                raise NumericalAbortError(f"classifier loss became non-finite at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
    extractor.eval()
    vector = networks.get_params(extractor, "cam_extractor")
    if out_dir is not None:
        networks.save_checkpoint(Path(out_dir), {"cam_extractor": vector},
                                 manifest_for(config, kind="cam_extractor"))
    return extractor, vector


def classifier_accuracy(extractor: networks.CamExtractor,
                        samples: list[DomainSample], batch_size: int = 8) -> float:
    """Fraction of samples whose predicted class matches the tag."""
    extractor.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = samples[i:i + batch_size]
            images, _, tags = samples_to_tensors(batch, with_labels=False)
            class_logits, _ = extractor(images)
            correct += int((class_logits.argmax(dim=1) == tags).sum())
    return correct / len(samples)


def manifest_for(config: TrainingConfig, **extra) -> dict:
    cfg = asdict(config)
    manifest = {
        "arch_preset": config.arch_preset,
        "resolution": list(config.resolution),
        "seed": config.seed,
        "config": cfg,
        "config_hash": config_hash(cfg),
    }
    manifest.update(extra)
    return manifest


def config_hash(config_dict: dict) -> str:
    import hashlib

    blob = json.dumps(config_dict, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class _BatchStream:
    """Deterministic epoch-permuted batch stream, cycled to a fixed epoch length."""

    def __init__(self, samples, batch_size, seed, iters_per_epoch):
        self.samples = samples
        self.batch_size = batch_size
        self.seed = seed
        self.iters_per_epoch = iters_per_epoch

    def epoch_batches(self, epoch: int) -> list[list[DomainSample]]:
        batches = make_batches(self.samples, self.batch_size, self.seed, epoch)
        if len(batches) >= self.iters_per_epoch:
            return batches[: self.iters_per_epoch]
        reps = math.ceil(self.iters_per_epoch / len(batches))
        return (batches * reps)[: self.iters_per_epoch]


def _snapshot_diagnostics(out_dir, gen, cam_extractor, history, step) -> None:
    if out_dir is None:
        return
    snap_dir = Path(out_dir) / "diagnostic_snapshot"
    vectors = networks.generator_vectors(gen, cam_extractor)
    networks.save_checkpoint(snap_dir, vectors, {"failed_step": step})
    (snap_dir / "history_tail.json").write_text(
        json.dumps(history[-20:], indent=1, sort_keys=True))


def train_afd_da(source: list[DomainSample], target: list[DomainSample],
                 cam_params: networks.ParameterVector | None,
                 config: TrainingConfig, out_dir=None,
                 resume_from=None):
    """Alternating adversarial adaptation; returns (role vectors, per-step history).

    Per iteration the generator minimizes the weighted total objective on a
    source batch (supervised heads) and a target batch (fooling terms), then
    each discriminator takes one step on detached source/target inputs. With
    both adversarial weights at zero the loop degenerates to supervised source
    training and never touches the target set.
    """
    src = filter_training_samples(source, config.positives_only, require_labels=True)
    tgt = list(target)
    if not tgt:
        raise DataError("target dataset is empty")
    _check_resolution(src, config)
    _check_resolution(tgt, config)

    arch = config.arch()
    gen = networks.build_generator(arch, config.seed)
    if config.encoder_init:
        with np.load(config.encoder_init) as data:
            pretrained = networks.ParameterVector(
                {k: data[k].copy() for k in data.files}, "encoder")
        networks.set_params(gen.encoder, pretrained)
    d_mask, d_feat = networks.build_discriminators(arch, config.seed + 1)
    extractor = None
    if config.cam_enabled:
        if cam_params is None:
            raise ConfigError("attention is enabled but no classifier parameters were given")
        extractor = networks.build_cam_extractor(arch, config.seed)
        networks.set_params(extractor, cam_params)
        extractor.eval()
        _set_requires_grad(extractor, False)

    w = config.weights
    adversarial = w.lambda_adv_seg > 0 or w.lambda_adv_fea > 0
    feat_on = config.feature_alignment_enabled and w.lambda_adv_fea > 0

    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_generator, betas=config.adam_betas)
    opt_dm = torch.optim.Adam(d_mask.parameters(), lr=config.lr_discriminators,
                              betas=config.adam_betas)
    opt_df = torch.optim.Adam(d_feat.parameters(), lr=config.lr_discriminators,
                              betas=config.adam_betas)

    iters_per_epoch = math.ceil(max(len(src), len(tgt)) / config.batch_size)
    total_iters = config.epochs_da * iters_per_epoch
    src_stream = _BatchStream(src, config.batch_size, config.seed, iters_per_epoch)
    tgt_stream = _BatchStream(tgt, config.batch_size, config.seed + 1, iters_per_epoch)

    history: list[dict] = []
    state = TrainState()
    start_epoch = 0
    if resume_from is not None:
        start_epoch = _load_train_state(resume_from, gen, d_mask, d_feat,
                                        opt_g, opt_dm, opt_df, history)
        state.iteration = start_epoch * iters_per_epoch

    gen.train()
    d_mask.train()
    d_feat.train()
    for epoch in range(start_epoch, config.epochs_da):
        state.epoch = epoch
        src_batches = src_stream.epoch_batches(epoch)
        tgt_batches = tgt_stream.epoch_batches(epoch)
        aug_rng = (np.random.default_rng([config.seed % 2**32, 11, epoch])
                   if config.augment else None)
        for it in range(iters_per_epoch):
            lr_g = poly_lr(config.lr_generator, state.iteration, total_iters, config.lr_power)
            lr_d = poly_lr(config.lr_discriminators, state.iteration, total_iters,
                           config.lr_power)
            _set_lr(opt_g, lr_g)
            _set_lr(opt_dm, lr_d)
            _set_lr(opt_df, lr_d)
            state.lr_generator, state.lr_discriminators = lr_g, lr_d

            images_s, labels_s, _ = samples_to_tensors(
                src_batches[it], with_labels=True, augment_rng=aug_rng, device=config.device)

            # -- generator step (discriminators frozen)
            _set_requires_grad(d_mask, False)
            _set_requires_grad(d_feat, False)
            d_sum_before = _param_checksum(d_mask, d_feat) if config.audit_freeze else None
            opt_g.zero_grad()

            cam_s = None
            if config.cam_enabled:
                with torch.no_grad():
                    _, cam_s = networks.compute_cam(extractor, images_s)
            p0_s, p1_s, p2_s, pyr_s = gen(images_s, cam_s)
            l_seg = losses.seg_loss(p0_s if config.cam_enabled else None,
                                    p1_s, p2_s, labels_s, w.lambda_seg)
            l_weight = losses.weight_discrepancy(gen.aux1, gen.aux2)

            zero = torch.zeros((), device=images_s.device)
            l_adv_seg_g = zero
            l_adv_fea_g = zero if feat_on else None
            prob_sum_t = dis_map = pyr_t = None
            if adversarial:
                images_t, _, _ = samples_to_tensors(
                    tgt_batches[it], with_labels=False, augment_rng=aug_rng,
                    device=config.device)
                size_t = images_t.shape[-2:]
                pyr_t = gen.encoder(images_t)
                p1_t = gen.aux1(pyr_t, size_t)
                p2_t = gen.aux2(pyr_t, size_t)
                prob1_t = F.softmax(p1_t, dim=1)
                prob2_t = F.softmax(p2_t, dim=1)
                prob_sum_t = prob1_t + prob2_t
                dis_map = losses.cosine_discrepancy(prob1_t, prob2_t).detach()
                if w.lambda_adv_seg > 0:
                    l_adv_seg_g = losses.adv_seg_loss(
                        None, d_mask(prob_sum_t), dis_map, w.lambda_dis,
                        Side.GENERATOR, config.w_max)
                if feat_on:
                    l_adv_fea_g = losses.adv_fea_loss(
                        None, d_feat(pyr_t.f1, pyr_t.f2, pyr_t.f3), Side.GENERATOR)

            parts = LossParts(seg=l_seg, weight=l_weight, adv_seg=l_adv_seg_g,
                              adv_fea=l_adv_fea_g)
            l_total = losses.total_da_loss(parts, w, base_mode=not feat_on)
            if not torch.isfinite(l_total):
                _snapshot_diagnostics(out_dir, gen, extractor, history, state.iteration)
                raise NumericalAbortError(
                    f"generator loss became non-finite at step {state.iteration}")
            l_total.backward()
            opt_g.step()
            if config.audit_freeze:
                if not torch.equal(d_sum_before, _param_checksum(d_mask, d_feat)):
                    raise AssertionError("generator step modified discriminator parameters")
                g_sum_before = _param_checksum(gen)

            # -- discriminator step (generator outputs detached)
            l_dm = l_df = zero
            if adversarial:
                _set_requires_grad(d_mask, True)
                _set_requires_grad(d_feat, True)
                if w.lambda_adv_seg > 0:
                    prob_sum_s = (F.softmax(p1_s, dim=1) + F.softmax(p2_s, dim=1)).detach()
                    opt_dm.zero_grad()
                    l_dm = losses.adv_seg_loss(
                        d_mask(prob_sum_s), d_mask(prob_sum_t.detach()), dis_map,
                        w.lambda_dis, Side.DISCRIMINATOR, config.w_max)
                    l_dm.backward()
                    opt_dm.step()
                if feat_on:
                    opt_df.zero_grad()
                    l_df = losses.adv_fea_loss(
                        d_feat(pyr_s.f1.detach(), pyr_s.f2.detach(), pyr_s.f3.detach()),
                        d_feat(pyr_t.f1.detach(), pyr_t.f2.detach(), pyr_t.f3.detach()),
                        Side.DISCRIMINATOR)
                    l_df.backward()
                    opt_df.step()
                if not torch.isfinite(l_dm) or not torch.isfinite(l_df):
                    _snapshot_diagnostics(out_dir, gen, extractor, history, state.iteration)
                    raise NumericalAbortError(
                        f"discriminator loss became non-finite at step {state.iteration}")
            if config.audit_freeze:
                if not torch.equal(g_sum_before, _param_checksum(gen)):
                    raise AssertionError("discriminator step modified generator parameters")

            history.append({
                "step": state.iteration,
                "lr": lr_g,
                "seg": l_seg.detach().item(),
                "weight": l_weight.detach().item(),
                "adv_seg": l_adv_seg_g.detach().item(),
                "adv_fea": l_adv_fea_g.detach().item() if l_adv_fea_g is not None else 0.0,
                "total": l_total.detach().item(),
                "d_mask": l_dm.detach().item(),
                "d_feat": l_df.detach().item(),
            })
            state.iteration += 1

        if (out_dir is not None and config.checkpoint_every
                and (epoch + 1) % config.checkpoint_every == 0
                and epoch + 1 < config.epochs_da):
            _save_train_state(Path(out_dir) / f"resume_epoch{epoch + 1:04d}",
                              config, epoch + 1, gen, extractor, d_mask, d_feat,
                              opt_g, opt_dm, opt_df, history)

    gen.eval()
    vectors = networks.generator_vectors(gen, extractor)
    if out_dir is not None:
        out_dir = Path(out_dir)
        networks.save_checkpoint(out_dir / "afd_da", vectors,
                                 manifest_for(config, kind="afd_da",
                                              iterations=state.iteration))
        write_loss_csv(out_dir / "loss_log.csv", history)
    return vectors, history


def write_loss_csv(path, history: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not history:
        path.write_text("")
        return
    fields = list(history[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(history)


def _save_train_state(directory, config, epoch, gen, extractor, d_mask, d_feat,
                      opt_g, opt_dm, opt_df, history) -> None:
    directory = Path(directory)
    vectors = networks.generator_vectors(gen, extractor)
    vectors["d_mask"] = networks.get_params(d_mask, "d_mask")
    vectors["d_feat"] = networks.get_params(d_feat, "d_feat")
    networks.save_checkpoint(directory, vectors,
                             manifest_for(config, kind="resume", epoch=epoch))
    torch.save({
        "epoch": epoch,
        "opt_g": opt_g.state_dict(),
        "opt_dm": opt_dm.state_dict(),
        "opt_df": opt_df.state_dict(),
        "history": history,
    }, directory / "train_state.pt")


def _load_train_state(directory, gen, d_mask, d_feat, opt_g, opt_dm, opt_df,
                      history) -> int:
    directory = Path(directory)
    vectors, manifest = networks.load_checkpoint(directory)
    networks.load_generator_vectors(gen, None, vectors)
    networks.set_params(d_mask, vectors["d_mask"])
    networks.set_params(d_feat, vectors["d_feat"])
    payload = torch.load(directory / "train_state.pt", weights_only=False)
    opt_g.load_state_dict(payload["opt_g"])
    opt_dm.load_state_dict(payload["opt_dm"])
    opt_df.load_state_dict(payload["opt_df"])
    history.extend(payload["history"])
    return int(payload["epoch"])
