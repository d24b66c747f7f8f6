"""Training objectives: supervised segmentation, decoder-disagreement weighting,
mask- and feature-level adversarial terms, classifier cross-entropy, and the
weighted total. All functions are pure and differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

_PROB_FLOOR = 1e-12


class Side(Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"


@dataclass(frozen=True)
class LossWeights:
    lambda_seg: float = 3.0
    lambda_weight: float = 0.01
    lambda_adv_seg: float = 0.001
    lambda_adv_fea: float = 0.001
    lambda_dis: float = 10.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")


@dataclass
class LossParts:
    """Unweighted loss components of one step, combined by total_da_loss."""

    seg: torch.Tensor
    weight: torch.Tensor
    adv_seg: torch.Tensor
    adv_fea: torch.Tensor | None = None


def seg_loss(p0: torch.Tensor | None, p1: torch.Tensor, p2: torch.Tensor,
             y: torch.Tensor, lambda_seg: float = 3.0) -> torch.Tensor:
    """Mean per-pixel two-class cross-entropy over the heads, weighted (lambda_seg, 1, 1).

    Pass p0=None for the two-head variant without the attention-modulated head.
    """
    if p1.shape != p2.shape or p1.shape[-2:] != y.shape[-2:]:
        raise ValueError(
            f"head/label shapes disagree: {tuple(p1.shape)}, {tuple(p2.shape)}, {tuple(y.shape)}"
        )
    target = y.long()
    total = F.cross_entropy(p1, target) + F.cross_entropy(p2, target)
    if p0 is not None:
        if p0.shape != p1.shape:
            raise ValueError(f"p0 shape {tuple(p0.shape)} differs from p1 {tuple(p1.shape)}")
        total = total + lambda_seg * F.cross_entropy(p0, target)
    return total


def cosine_discrepancy(p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    """Per-pixel 1 - cosine between the two heads' probability vectors, in [0, 2]."""
    dot = (p1 * p2).sum(dim=1)
    denom = p1.norm(dim=1) * p2.norm(dim=1)
    cos = torch.where(denom > 0, dot / denom.clamp_min(_PROB_FLOOR),
                      torch.ones_like(dot))
    return 1.0 - cos


def _pixel_weights(dis_map: torch.Tensor, lambda_dis: float, w_max: float) -> torch.Tensor:
    return (lambda_dis * dis_map.detach()).clamp(0.0, w_max)


def adv_seg_loss(d_src_scores: torch.Tensor | None, d_tgt_scores: torch.Tensor,
                 dis_map: torch.Tensor, lambda_dis: float = 10.0,
                 side: Side = Side.DISCRIMINATOR, w_max: float = 10.0) -> torch.Tensor:
    """Mask-level adversarial objective with disagreement-weighted target pixels.

    Scores are raw (pre-sigmoid) discriminator maps. The discriminator side is
    the negated value function (binary cross-entropy, source -> 1, target -> 0);
    the generator side is the non-saturating fooling loss on target scores.
    Target pixels are weighted by lambda_dis * discrepancy, clamped to w_max.
    """
    weights = _pixel_weights(dis_map, lambda_dis, w_max)
    if weights.shape[-2:] != d_tgt_scores.shape[-2:]:
        raise ValueError(
            f"discrepancy map {tuple(weights.shape[-2:])} does not match "
            f"target scores {tuple(d_tgt_scores.shape[-2:])}"
        )
    tgt = d_tgt_scores.squeeze(1) if d_tgt_scores.ndim == 4 else d_tgt_scores
    if side is Side.GENERATOR:
        return F.binary_cross_entropy_with_logits(
            tgt, torch.ones_like(tgt), weight=weights)
    if d_src_scores is None:
        raise ValueError("discriminator side needs source scores")
    src = d_src_scores.squeeze(1) if d_src_scores.ndim == 4 else d_src_scores
    loss_src = F.binary_cross_entropy_with_logits(src, torch.ones_like(src))
    loss_tgt = F.binary_cross_entropy_with_logits(
        tgt, torch.zeros_like(tgt), weight=weights)
    return loss_src + loss_tgt


def adv_fea_loss(d_src_scores: torch.Tensor | None, d_tgt_scores: torch.Tensor,
                 side: Side = Side.DISCRIMINATOR) -> torch.Tensor:
    """Feature-level adversarial objective, unweighted."""
    if side is Side.GENERATOR:
        return F.binary_cross_entropy_with_logits(
            d_tgt_scores, torch.ones_like(d_tgt_scores))
    if d_src_scores is None:
        raise ValueError("discriminator side needs source scores")
    return (F.binary_cross_entropy_with_logits(d_src_scores, torch.ones_like(d_src_scores))
            + F.binary_cross_entropy_with_logits(d_tgt_scores, torch.zeros_like(d_tgt_scores)))


def _named_float_entries(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, nn.Module):
        return [(n, p) for n, p in params.named_parameters()]
    entries = getattr(params, "entries", params)
    out = []
    for name, value in entries.items():
        tensor = torch.from_numpy(value) if isinstance(value, np.ndarray) else value
        out.append((name, tensor))
    return out


def weight_discrepancy(params1, params2) -> torch.Tensor:
    """Cosine similarity of the two decoders' flattened convolutional kernels.

    Accepts modules, parameter vectors, or name -> tensor mappings; only 4-D
    `.weight` entries participate. Minimizing drives the twins toward
    orthogonal parameterizations.
    """
    def flat_conv(params):
        entries = _named_float_entries(params)
        kernels = [t.reshape(-1) for n, t in entries
                   if n.endswith("weight") and t.ndim == 4]
        if not kernels:
            raise ValueError("no convolutional weights found")
        return torch.cat(kernels)

    w1, w2 = flat_conv(params1), flat_conv(params2)
    if w1.numel() != w2.numel():
        raise ValueError(f"conv weight layouts differ: {w1.numel()} vs {w2.numel()} values")
    n1, n2 = w1.norm(), w2.norm()
    if n1 == 0 or n2 == 0:
        raise ValueError("degenerate (zero-norm) convolutional weights")
    return (w1 @ w2) / (n1 * n2)


def cam_ce_loss(class_probs: torch.Tensor, class_tags: torch.Tensor) -> torch.Tensor:
    """Mean two-class cross-entropy of classifier probabilities against tags."""
    tags = class_tags.long()
    picked = class_probs.gather(1, tags.view(-1, 1)).squeeze(1)
    return -(picked.clamp_min(_PROB_FLOOR).log()).mean()


def total_da_loss(parts: LossParts, weights: LossWeights,
                  base_mode: bool = False) -> torch.Tensor:
    """Weighted sum of the step's components; base mode drops the feature term."""
    total = (parts.seg
             + weights.lambda_weight * parts.weight
             + weights.lambda_adv_seg * parts.adv_seg)
    if not base_mode:
        if parts.adv_fea is None:
            raise ValueError("feature-level adversarial part missing outside base mode")
        total = total + weights.lambda_adv_fea * parts.adv_fea
    return total
