"""Network zoo: dilated residual encoder, attention-modulated main decoder,
twin auxiliary decoders, mask- and feature-level discriminators, and the
classifier used to extract activation maps.

Two presets are shipped: SMALL for desk-scale experiments and tests, PAPER for
the full-size dilated ResNet-34 configuration. All decoders upsample to the
input resolution, so every shape contract holds for any H, W divisible by the
output stride (8).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError

OUTPUT_STRIDE = 8
ROLES = ("encoder", "major_decoder", "aux1", "aux2", "cam_extractor")


@dataclass(frozen=True)
class ArchConfig:
    """Channel/block plan of the encoder and decoder heads."""

    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks: tuple[int, int, int, int] = (2, 2, 2, 2)
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    aspp_channels: int = 64
    skip_channels: int = 24
    head_channels: int = 64
    in_channels: int = 1

    @staticmethod
    def small() -> "ArchConfig":
        return ArchConfig()

    @staticmethod
    def paper() -> "ArchConfig":
        return ArchConfig(
            channels=(64, 128, 256, 512),
            blocks=(3, 4, 6, 3),
            aspp_rates=(12, 24, 36),
            aspp_channels=256,
            skip_channels=48,
            head_channels=256,
        )

    @staticmethod
    def preset(name: str) -> "ArchConfig":
        name = name.lower()
        if name == "small":
            return ArchConfig.small()
        if name == "paper":
            return ArchConfig.paper()
        raise ValueError(f"unknown architecture preset {name!r}")


class FeaturePyramid(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor


def _conv3x3(in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=dilation,
                     dilation=dilation, bias=False)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv1 = _conv3x3(in_ch, out_ch, stride, dilation)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = _conv3x3(out_ch, out_ch, 1, dilation)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class Encoder(nn.Module):
    """Four-stage residual encoder; stages 3-4 trade stride for dilation (2, 4)."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        c1, c2, c3, c4 = cfg.channels
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c1, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.stage1 = self._make_stage(c1, c1, cfg.blocks[0], stride=1, dilation=1)
        self.stage2 = self._make_stage(c1, c2, cfg.blocks[1], stride=2, dilation=1)
        self.stage3 = self._make_stage(c2, c3, cfg.blocks[2], stride=1, dilation=2)
        self.stage4 = self._make_stage(c3, c4, cfg.blocks[3], stride=1, dilation=4)

    @staticmethod
    def _make_stage(in_ch, out_ch, n_blocks, stride, dilation):
        layers = [BasicBlock(in_ch, out_ch, stride=stride, dilation=dilation)]
        layers += [BasicBlock(out_ch, out_ch, dilation=dilation) for _ in range(n_blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if x.ndim != 4:
            raise DataError(f"expected a (N, C, H, W) batch, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise DataError(
                f"input {h}x{w} not divisible by the output stride {OUTPUT_STRIDE}"
            )
        x = self.stem(x)
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return FeaturePyramid(f1, f2, f3, f4)


class Aspp(nn.Module):
    """Multi-rate context head: 1x1 branch, dilated 3x3 branches, image pooling."""

    def __init__(self, in_ch: int, out_ch: int, rates: tuple[int, ...]):
        super().__init__()
        branches = [nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
        )]
        for r in rates:
            branches.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 3, padding=r, dilation=r, bias=False),
                nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
            ))
        self.branches = nn.ModuleList(branches)
        # no norm here: the pooled map is 1x1, so batch statistics are undefined
        self.image_pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_ch, out_ch, 1, bias=True),
            nn.ReLU(inplace=True),
        )
        n = len(branches) + 1
        self.project = nn.Sequential(
            nn.Conv2d(n * out_ch, out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        pooled = self.image_pool(x)
        outs.append(F.interpolate(pooled, size=x.shape[-2:], mode="bilinear",
                                  align_corners=False))
        return self.project(torch.cat(outs, dim=1))


class MajorDecoder(nn.Module):
    """Context head over f4 fused with a low-level skip from f1, two-class output."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        c1, _, _, c4 = cfg.channels
        self.aspp = Aspp(c4, cfg.aspp_channels, cfg.aspp_rates)
        self.skip = nn.Sequential(
            nn.Conv2d(c1, cfg.skip_channels, 1, bias=False),
            nn.BatchNorm2d(cfg.skip_channels), nn.ReLU(inplace=True),
        )
        self.refine = nn.Sequential(
            nn.Conv2d(cfg.aspp_channels + cfg.skip_channels, cfg.head_channels, 3,
                      padding=1, bias=False),
            nn.BatchNorm2d(cfg.head_channels), nn.ReLU(inplace=True),
            nn.Conv2d(cfg.head_channels, cfg.head_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(cfg.head_channels), nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(cfg.head_channels, 2, 1)

    def forward(self, pyramid: FeaturePyramid, out_size: tuple[int, int]) -> torch.Tensor:
        x = self.aspp(pyramid.f4)
        skip = self.skip(pyramid.f1)
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = self.refine(torch.cat([x, skip], dim=1))
        x = self.classifier(x)
        return F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)


class AuxDecoder(nn.Module):
    """Lightweight decoder over f4: two 3x3 convs, a classifier, upsample."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        c4 = cfg.channels[3]
        mid, low = max(c4 // 2, 8), max(c4 // 4, 8)
        self.body = nn.Sequential(
            nn.Conv2d(c4, mid, 3, padding=1, bias=False),
            nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
            nn.Conv2d(mid, low, 3, padding=1, bias=False),
            nn.BatchNorm2d(low), nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(low, 2, 1)

    def forward(self, pyramid: FeaturePyramid, out_size: tuple[int, int]) -> torch.Tensor:
        x = self.classifier(self.body(pyramid.f4))
        return F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)


def apply_cam_attention(plain_logits: torch.Tensor, cam: torch.Tensor) -> torch.Tensor:
    """Modulate decoder output by the attention factor (1 + sigmoid(cam)) in [1, 2]."""
    if cam.shape[-2:] != plain_logits.shape[-2:]:
        raise DataError(
            f"attention map {tuple(cam.shape[-2:])} not aligned with "
            f"logits {tuple(plain_logits.shape[-2:])}"
        )
    return (1.0 + torch.sigmoid(cam)) * plain_logits


def _disc_stack(in_channels: int, widths: tuple[int, int, int, int]) -> nn.Sequential:
    """Shared discriminator trunk: 4x4 convs, stride 2, leaky-ReLU slope 0.2.

    The final scoring conv uses padding 2 so arbitrarily small inputs (down to
    1x1) still produce a score map.
    """
    layers = []
    prev = in_channels
    for wdt in widths:
        layers += [nn.Conv2d(prev, wdt, 4, stride=2, padding=1),
                   nn.LeakyReLU(0.2, inplace=True)]
        prev = wdt
    layers.append(nn.Conv2d(prev, 1, 4, stride=2, padding=2))
    return nn.Sequential(*layers)


class MaskDiscriminator(nn.Module):
    """Per-pixel domain classifier on summed probability maps, upsampled to input size."""

    def __init__(self, in_channels: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.stack = _disc_stack(in_channels, (64, 128, 256, 512))

    def forward(self, prob_map_sum: torch.Tensor) -> torch.Tensor:
        if prob_map_sum.shape[1] != self.in_channels:
            raise DataError(
                f"mask discriminator expects {self.in_channels} channels, "
                f"got {prob_map_sum.shape[1]}"
            )
        scores = self.stack(prob_map_sum)
        return F.interpolate(scores, size=prob_map_sum.shape[-2:], mode="bilinear",
                             align_corners=False)


class FeatureDiscriminator(nn.Module):
    """Domain classifier over the first three encoder stages, no final upsample."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.stack = _disc_stack(in_channels, (256, 128, 64, 64))

    def forward(self, f1: torch.Tensor, f2: torch.Tensor,
                f3: torch.Tensor) -> torch.Tensor:
        size = f1.shape[-2:]
        f2 = F.interpolate(f2, size=size, mode="bilinear", align_corners=False)
        f3 = F.interpolate(f3, size=size, mode="bilinear", align_corners=False)
        x = torch.cat([f1, f2, f3], dim=1)
        if x.shape[1] != self.in_channels:
            raise DataError(
                f"feature discriminator expects {self.in_channels} concatenated "
                f"channels, got {x.shape[1]}"
            )
        return self.stack(x)


class CamExtractor(nn.Module):
    """Binary classifier (encoder + 1x1 conv) whose positive-class response is the CAM."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.encoder = Encoder(cfg)
        self.classifier = nn.Conv2d(cfg.channels[3], 2, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        response = self.classifier(self.encoder(x).f4)
        class_logits = response.mean(dim=(2, 3))
        cam_raw = response[:, 1:2]
        return class_logits, cam_raw


def compute_cam(extractor: CamExtractor, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Class probabilities and the activation map upsampled to input resolution."""
    class_logits, cam_raw = extractor(images)
    probs = F.softmax(class_logits, dim=1)
    cam = F.interpolate(cam_raw, size=images.shape[-2:], mode="bilinear",
                        align_corners=False)
    return probs, cam


class Generator(nn.Module):
    """Shared encoder with the main decoder and the two auxiliary decoders."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.major_decoder = MajorDecoder(cfg)
        self.aux1 = AuxDecoder(cfg)
        self.aux2 = AuxDecoder(cfg)

    def forward(self, x: torch.Tensor, cam: torch.Tensor | None = None):
        """Returns (p0, p1, p2, pyramid); p0 is attention-modulated when cam is given."""
        size = x.shape[-2:]
        pyramid = self.encoder(x)
        p0 = self.major_decoder(pyramid, size)
        if cam is not None:
            p0 = apply_cam_attention(p0, cam)
        p1 = self.aux1(pyramid, size)
        p2 = self.aux2(pyramid, size)
        return p0, p1, p2, pyramid

    def forward_major(self, x: torch.Tensor, cam: torch.Tensor | None = None) -> torch.Tensor:
        """Main-head logits only (inference path); skips the auxiliary decoders."""
        pyramid = self.encoder(x)
        p0 = self.major_decoder(pyramid, x.shape[-2:])
        if cam is not None:
            p0 = apply_cam_attention(p0, cam)
        return p0


def _init_backbone(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _init_discriminator(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_generator(cfg: ArchConfig, seed: int) -> Generator:
    torch.manual_seed(seed)
    gen = Generator(cfg)
    _init_backbone(gen)
    # re-randomize the decoder twins so their weight vectors start diverse
    for i, aux in enumerate((gen.aux1, gen.aux2)):
        torch.manual_seed(seed + 101 + i)
        _init_backbone(aux)
    return gen


def build_cam_extractor(cfg: ArchConfig, seed: int) -> CamExtractor:
    torch.manual_seed(seed)
    net = CamExtractor(cfg)
    _init_backbone(net)
    return net


def build_discriminators(cfg: ArchConfig, seed: int) -> tuple[MaskDiscriminator, FeatureDiscriminator]:
    torch.manual_seed(seed)
    mask_d = MaskDiscriminator(2)
    feat_d = FeatureDiscriminator(sum(cfg.channels[:3]))
    _init_discriminator(mask_d)
    _init_discriminator(feat_d)
    return mask_d, feat_d


# ---------------------------------------------------------------------------
# Parameter vectors: named, ordered arrays supporting linear combination.


@dataclass
class ParameterVector:
    """Ordered name -> array mapping of one network role's float state."""

    entries: dict[str, np.ndarray]
    role: str = ""

    def names(self) -> tuple[str, ...]:
        return tuple(self.entries.keys())

    def check_layout(self, other: "ParameterVector") -> None:
        if self.names() != other.names():
            raise ValueError(
                f"parameter layouts differ: {len(self.entries)} vs {len(other.entries)} "
                "entries or mismatched names"
            )
        for name, arr in self.entries.items():
            if arr.shape != other.entries[name].shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {other.entries[name].shape}"
                )

    def copy(self) -> "ParameterVector":
        return ParameterVector({k: v.copy() for k, v in self.entries.items()}, self.role)


def lerp_parameters(a: ParameterVector, b: ParameterVector, alpha: float) -> ParameterVector:
    """alpha * a + (1 - alpha) * b entrywise; endpoints are exact."""
    a.check_layout(b)
    out = {name: alpha * arr + (1.0 - alpha) * b.entries[name]
           for name, arr in a.entries.items()}
    return ParameterVector(out, a.role)


def get_params(module: nn.Module, role: str = "") -> ParameterVector:
    """Snapshot all float parameters and buffers in state-dict order."""
    entries = {}
    for name, tensor in module.state_dict().items():
        if tensor.is_floating_point():
            entries[name] = tensor.detach().cpu().numpy().copy()
    return ParameterVector(entries, role)


def set_params(module: nn.Module, pv: ParameterVector) -> None:
    """Load a parameter vector back into a module; names and shapes must match."""
    current = get_params(module, pv.role)
    current.check_layout(pv)
    state = module.state_dict()
    with torch.no_grad():
        for name, arr in pv.entries.items():
            state[name].copy_(torch.from_numpy(np.ascontiguousarray(arr)))


# ---------------------------------------------------------------------------
# Checkpoints: one npz per role plus a JSON manifest.


def save_checkpoint(directory, vectors: dict[str, ParameterVector], manifest: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for role, pv in vectors.items():
        np.savez(directory / f"{role}.npz", **pv.entries)
    payload = dict(manifest)
    payload["roles"] = sorted(vectors.keys())
    (directory / "manifest.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[dict[str, ParameterVector], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no checkpoint manifest under {directory}")
    manifest = json.loads(manifest_path.read_text())
    vectors = {}
    for role in manifest.get("roles", []):
        path = directory / f"{role}.npz"
        if not path.exists():
            raise DataError(f"checkpoint {directory} is missing role file {role}.npz")
        with np.load(path) as data:
            vectors[role] = ParameterVector({k: data[k].copy() for k in data.files}, role)
    return vectors, manifest


def generator_vectors(gen: Generator, cam_extractor: CamExtractor | None) -> dict[str, ParameterVector]:
    """Role-keyed snapshot of the generator (and extractor when present)."""
    vectors = {
        "encoder": get_params(gen.encoder, "encoder"),
        "major_decoder": get_params(gen.major_decoder, "major_decoder"),
        "aux1": get_params(gen.aux1, "aux1"),
        "aux2": get_params(gen.aux2, "aux2"),
    }
    if cam_extractor is not None:
        vectors["cam_extractor"] = get_params(cam_extractor, "cam_extractor")
    return vectors


def load_generator_vectors(gen: Generator, cam_extractor: CamExtractor | None,
                           vectors: dict[str, ParameterVector]) -> None:
    set_params(gen.encoder, vectors["encoder"])
    set_params(gen.major_decoder, vectors["major_decoder"])
    set_params(gen.aux1, vectors["aux1"])
    set_params(gen.aux2, vectors["aux2"])
    if cam_extractor is not None and "cam_extractor" in vectors:
        set_params(cam_extractor, vectors["cam_extractor"])
