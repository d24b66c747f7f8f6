"""Loading, preprocessing, augmentation, and batching of 2-D CT-style slices.

Preprocessing follows the usual CT recipe: HU windowing to [0, 1], cropping to
the lung bounding box, and downsampling to the training resolution. Images are
interpolated bilinearly, masks with nearest neighbor so they stay binary.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError

HU_WINDOW = (-1250.0, 250.0)
DEFAULT_RESOLUTION = (320, 320)

TRANSLATE_RANGE = (-0.01, 0.01)
SCALE_RANGE = (0.8, 1.2)
SHEAR_RANGE = (-10.0, 10.0)
ROTATE_RANGE = (-90.0, 90.0)


class Domain(Enum):
    SOURCE = "source"
    TARGET = "target"


class ClassTag(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class Slice:
    """A 2-D grayscale image with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise DataError(f"slice must be a nonempty 2-D array, got shape {px.shape}")
        if not np.issubdtype(px.dtype, np.floating):
            px = px.astype(np.float32)
        if not np.all(np.isfinite(px)):
            raise DataError("slice contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise DataError(f"slice values outside [0, 1]: [{px.min()}, {px.max()}]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """A 2-D mask with values exactly in {0, 1}, paired with a same-shape Slice."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise DataError(f"mask must be a nonempty 2-D array, got shape {px.shape}")
        vals = np.unique(px)
        if not np.all(np.isin(vals, (0, 1))):
            raise DataError(f"mask values must be exactly 0 or 1, got {vals[:8]}")
        object.__setattr__(self, "pixels", px.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def is_empty(self) -> bool:
        return not bool(self.pixels.any())


@dataclass
class DomainSample:
    """One slice with optional label, domain tag, and classifier tag."""

    image: Slice
    label: BinaryMask | None
    domain: Domain
    sample_id: str
    class_tag: ClassTag | None = None

    def __post_init__(self):
        if self.label is not None and self.label.pixels.shape != self.image.pixels.shape:
            raise DataError(
                f"{self.sample_id}: label shape {self.label.pixels.shape} "
                f"!= image shape {self.image.pixels.shape}"
            )


@dataclass(frozen=True)
class AugmentParams:
    """Parameters of one spatial augmentation; all values inside the fixed ranges."""

    flip_h: bool = False
    flip_v: bool = False
    translate: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    shear: float = 0.0
    rotate: float = 0.0

    def __post_init__(self):
        for t in self.translate:
            if not TRANSLATE_RANGE[0] <= t <= TRANSLATE_RANGE[1]:
                raise ValueError(f"translate {self.translate} outside {TRANSLATE_RANGE}")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValueError(f"scale {self.scale} outside {SCALE_RANGE}")
        if not SHEAR_RANGE[0] <= self.shear <= SHEAR_RANGE[1]:
            raise ValueError(f"shear {self.shear} outside {SHEAR_RANGE}")
        if not ROTATE_RANGE[0] <= self.rotate <= ROTATE_RANGE[1]:
            raise ValueError(f"rotate {self.rotate} outside {ROTATE_RANGE}")

    def is_identity(self) -> bool:
        return (
            not self.flip_h
            and not self.flip_v
            and self.translate == (0.0, 0.0)
            and self.scale == 1.0
            and self.shear == 0.0
            and self.rotate == 0.0
        )

    @staticmethod
    def random(rng: np.random.Generator) -> "AugmentParams":
        """Draw one parameter set uniformly from the allowed ranges."""
        return AugmentParams(
            flip_h=bool(rng.random() < 0.5),
            flip_v=bool(rng.random() < 0.5),
            translate=(
                float(rng.uniform(*TRANSLATE_RANGE)),
                float(rng.uniform(*TRANSLATE_RANGE)),
            ),
            scale=float(rng.uniform(*SCALE_RANGE)),
            shear=float(rng.uniform(*SHEAR_RANGE)),
            rotate=float(rng.uniform(*ROTATE_RANGE)),
        )


def window_normalize(volume_hu, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1],
                     sample_id: str = "") -> np.ndarray:
    """Clip HU values to [lo, hi] and rescale linearly to [0, 1]."""
    if not hi > lo:
        raise ValueError(f"window upper bound must exceed lower bound, got [{lo}, {hi}]")
    arr = np.asarray(volume_hu, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"non-finite HU values in input {sample_id or '<unnamed>'}")
    out = (np.clip(arr, lo, hi) - lo) / (hi - lo)
    return out.astype(np.float32)


def lung_bounding_box(lung_mask: BinaryMask, margin: int = 0) -> tuple[int, int, int, int]:
    """Tight half-open (r0, r1, c0, c1) bounding box of the mask foreground, margin-expanded."""
    rows = np.any(lung_mask.pixels, axis=1)
    cols = np.any(lung_mask.pixels, axis=0)
    if not rows.any():
        raise DataError("empty lung mask has no bounding box")
    r0, r1 = np.where(rows)[0][[0, -1]]
    c0, c1 = np.where(cols)[0][[0, -1]]
    h, w = lung_mask.pixels.shape
    return (
        max(int(r0) - margin, 0),
        min(int(r1) + 1 + margin, h),
        max(int(c0) - margin, 0),
        min(int(c1) + 1 + margin, w),
    )


def crop_to_lung(slc: Slice, lung_mask: BinaryMask, margin: int = 0,
                 sample_id: str = "") -> Slice:
    """Crop the slice to the bounding box of the lung mask foreground."""
    if lung_mask.pixels.shape != slc.pixels.shape:
        raise DataError(f"{sample_id or '<unnamed>'}: lung mask shape does not match slice")
    if lung_mask.is_empty():
        raise DataError(f"empty lung mask for slice {sample_id or '<unnamed>'}")
    r0, r1, c0, c1 = lung_bounding_box(lung_mask, margin)
    return Slice(slc.pixels[r0:r1, c0:c1].copy())


def resize(slice_or_mask, target: tuple[int, int] = DEFAULT_RESOLUTION):
    """Resize to (H, W): bilinear for slices, nearest neighbor for masks."""
    th, tw = target
    if th <= 0 or tw <= 0:
        raise ValueError(f"target dimensions must be positive, got {target}")
    if isinstance(slice_or_mask, Slice):
        px = slice_or_mask.pixels
        if px.shape == (th, tw):
            return Slice(px.copy())
        out = cv2.resize(px, (tw, th), interpolation=cv2.INTER_LINEAR)
        return Slice(np.clip(out, 0.0, 1.0))
    if isinstance(slice_or_mask, BinaryMask):
        px = slice_or_mask.pixels
        if px.shape == (th, tw):
            return BinaryMask(px.copy())
        out = cv2.resize(px, (tw, th), interpolation=cv2.INTER_NEAREST)
        return BinaryMask(out)
    raise TypeError(f"expected Slice or BinaryMask, got {type(slice_or_mask)}")


def pad_to_square(slc_px: np.ndarray, value: float = 0.0) -> np.ndarray:
    """Zero-pad a 2-D array symmetrically to square shape."""
    h, w = slc_px.shape
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    out = np.full((side, side), value, dtype=slc_px.dtype)
    out[top:top + h, left:left + w] = slc_px
    return out


def _affine_matrix(params: AugmentParams, height: int, width: int) -> np.ndarray:
    """Forward 2x3 pixel-coordinate map for translate/scale/shear/rotate about the center."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    angle = math.radians(params.rotate)
    shear = math.radians(params.shear)
    s = params.scale
    rot = np.array([[math.cos(angle), -math.sin(angle)],
                    [math.sin(angle), math.cos(angle)]])
    sh = np.array([[1.0, math.tan(shear)], [0.0, 1.0]])
    lin = rot @ sh * s
    tx = params.translate[0] * width
    ty = params.translate[1] * height
    m = np.zeros((2, 3), dtype=np.float64)
    m[:, :2] = lin
    m[:, 2] = [cx + tx - lin[0, 0] * cx - lin[0, 1] * cy,
               cy + ty - lin[1, 0] * cx - lin[1, 1] * cy]
    return m


def augment(sample: DomainSample, params: AugmentParams) -> DomainSample:
    """Apply one spatial augmentation identically to image and label.

    Flips are exact array reversals; the affine part warps the image bilinearly
    and the label with nearest neighbor using the same matrix, so a pixel's
    label travels with it. Identity parameters return the sample unchanged.
    """
    img = sample.image.pixels
    lbl = sample.label.pixels if sample.label is not None else None
    if params.flip_h:
        img = img[:, ::-1]
        lbl = lbl[:, ::-1] if lbl is not None else None
    if params.flip_v:
        img = img[::-1, :]
        lbl = lbl[::-1, :] if lbl is not None else None
    affine_identity = (
        params.translate == (0.0, 0.0)
        and params.scale == 1.0
        and params.shear == 0.0
        and params.rotate == 0.0
    )
    if not affine_identity:
        h, w = img.shape
        m = _affine_matrix(params, h, w)
        img = cv2.warpAffine(
            np.ascontiguousarray(img), m, (w, h),
            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0.0,
        )
        img = np.clip(img, 0.0, 1.0)
        if lbl is not None:
            lbl = cv2.warpAffine(
                np.ascontiguousarray(lbl), m, (w, h),
                flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
            )
    return replace(
        sample,
        image=Slice(np.ascontiguousarray(img)),
        label=BinaryMask(np.ascontiguousarray(lbl)) if lbl is not None else None,
    )


def make_batches(dataset: list, batch_size: int = 4, shuffle_seed: int = 0,
                 epoch: int = 0) -> list[list]:
    """Split the dataset into shuffled batches; order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(dataset) == 0:
        raise DataError("cannot batch an empty dataset")
    rng = np.random.default_rng([abs(int(shuffle_seed)) % 2**32, int(epoch)])
    order = rng.permutation(len(dataset))
    return [
        [dataset[j] for j in order[i:i + batch_size]]
        for i in range(0, len(order), batch_size)
    ]


def lung_mask_fallback(volume_hu: np.ndarray, threshold_hu: float = -320.0,
                       keep_components: int = 2) -> np.ndarray:
    """Approximate lung mask by HU thresholding and largest-component selection.

    Documented approximation for when no segmented lung mask is supplied:
    threshold below `threshold_hu`, drop air connected to the volume border,
    keep the largest `keep_components` components, and fill holes. Works on a
    2-D slice or a 3-D volume (componentwise in full dimensionality).
    """
    arr = np.asarray(volume_hu, dtype=np.float64)
    binary = arr < threshold_hu
    labels, n = ndimage.label(binary)
    if n == 0:
        return np.zeros(arr.shape, dtype=np.uint8)
    border = np.zeros(arr.shape, dtype=bool)
    for axis in (arr.ndim - 2, arr.ndim - 1):  # in-plane borders only: lungs may
        sl_lo = [slice(None)] * arr.ndim       # span the first/last axial slice
        sl_hi = [slice(None)] * arr.ndim
        sl_lo[axis] = 0
        sl_hi[axis] = -1
        border[tuple(sl_lo)] = True
        border[tuple(sl_hi)] = True
    border_labels = np.unique(labels[border & binary])
    keep = np.ones(n + 1, dtype=bool)
    keep[0] = False
    keep[border_labels] = False
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[~keep] = 0
    if not sizes.any():
        return np.zeros(arr.shape, dtype=np.uint8)
    top = np.argsort(sizes)[::-1][:keep_components]
    mask = np.isin(labels, top[sizes[top] > 0])
    mask = ndimage.binary_fill_holes(mask)
    return mask.astype(np.uint8)


# ---------------------------------------------------------------------------
# Minimal NIfTI-1 volume I/O (no external NIfTI dependency available).

_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64,
    256: np.int8, 512: np.uint16, 768: np.uint32,
}
_NIFTI_CODES = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}


def read_nifti(path) -> np.ndarray:
    """Read a scalar .nii/.nii.gz volume; returns float64 (Z, H, W) or (H, W).

    Supports the NIfTI-1 single-file layout with the common scalar dtypes and
    scl_slope/scl_inter scaling. Axes are reordered so axis 0 is the slice
    (z) axis and each slice is (rows, cols).
    """
    path = Path(path)
    opener = gzip.open if path.name.endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DataError(f"cannot read volume {path}: {exc}") from exc
    if len(raw) < 352:
        raise DataError(f"{path}: too short to be a NIfTI-1 file")
    byte_order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        byte_order = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise DataError(f"{path}: not a NIfTI-1 file (bad header size)")
    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise DataError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from(f"{byte_order}8h", raw, 40)
    datatype, bitpix = struct.unpack_from(f"{byte_order}2h", raw, 70)
    (vox_offset,) = struct.unpack_from(f"{byte_order}f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(f"{byte_order}2f", raw, 112)
    ndim = dim[0]
    if ndim not in (2, 3):
        raise DataError(f"{path}: unsupported dimensionality {ndim}")
    shape = tuple(dim[1:1 + ndim])
    if datatype not in _NIFTI_DTYPES:
        raise DataError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(byte_order)
    count = int(np.prod(shape))
    offset = int(vox_offset) if vox_offset else 352
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    vol = data.reshape(shape, order="F").astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        vol = vol * slope + scl_inter
    if ndim == 2:
        return vol.T  # (x, y) -> (rows, cols)
    return np.transpose(vol, (2, 1, 0))  # (x, y, z) -> (z, rows, cols)


def write_nifti(path, volume: np.ndarray, dtype=np.float32) -> None:
    """Write a (Z, H, W) or (H, W) array as a single-file NIfTI-1 volume."""
    arr = np.asarray(volume)
    if arr.ndim == 2:
        data = arr.T.astype(dtype)
    elif arr.ndim == 3:
        data = np.transpose(arr, (2, 1, 0)).astype(dtype)
    else:
        raise ValueError(f"expected 2-D or 3-D volume, got shape {arr.shape}")
    code = _NIFTI_CODES.get(np.dtype(dtype))
    if code is None:
        raise ValueError(f"unsupported dtype {dtype} for NIfTI output")
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<2h", header, 70, code, np.dtype(dtype).itemsize * 8)
    pixdim = [1.0] * 8
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    header[344:348] = b"n+1\x00"
    path = Path(path)
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00" * 4)  # extension flag
        f.write(np.asfortranarray(data).tobytes(order="F"))


# ---------------------------------------------------------------------------
# Slice cache: one 16-bit grayscale PNG per slice plus a JSON sidecar.

CACHE_LEVELS = 65535  # 16-bit quantization grid


def quantize_unit(pixels: np.ndarray) -> np.ndarray:
    """Snap [0, 1] floats onto the 16-bit cache grid (round trip is then exact)."""
    q = np.rint(np.asarray(pixels, dtype=np.float64) * CACHE_LEVELS)
    return (q / CACHE_LEVELS).astype(np.float32)


def save_slice_cache(samples: list[DomainSample], cache_dir, extra_meta: dict | None = None) -> int:
    """Write samples to a cache directory; returns the number of new files written.

    Existing cache entries with identical content are left untouched so repeated
    runs on unchanged inputs are no-ops.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for s in samples:
        img_u16 = np.rint(s.image.pixels.astype(np.float64) * CACHE_LEVELS).astype(np.uint16)
        meta = {
            "sample_id": s.sample_id,
            "domain": s.domain.value,
            "class_tag": s.class_tag.value if s.class_tag is not None else None,
            "hu_window": list(HU_WINDOW),
            "has_label": s.label is not None,
            "content_sha256": hashlib.sha256(img_u16.tobytes()).hexdigest(),
        }
        if extra_meta:
            meta.update(extra_meta)
        sidecar = cache_dir / f"{s.sample_id}.json"
        if sidecar.exists():
            try:
                old = json.loads(sidecar.read_text())
            except json.JSONDecodeError:
                old = None
            if old == meta:
                continue
        Image.fromarray(img_u16).save(cache_dir / f"{s.sample_id}.png")
        if s.label is not None:
            Image.fromarray(s.label.pixels * 255).save(
                cache_dir / f"{s.sample_id}_mask.png"
            )
        sidecar.write_text(json.dumps(meta, indent=1, sort_keys=True))
        written += 1
    return written


def load_slice_cache(cache_dir) -> list[DomainSample]:
    """Load every cached sample under a directory, ordered by sample id."""
    cache_dir = Path(cache_dir)
    sidecars = sorted(p for p in cache_dir.glob("*.json"))
    if not sidecars:
        raise DataError(f"no cached slices under {cache_dir}")
    samples = []
    for sidecar in sidecars:
        meta = json.loads(sidecar.read_text())
        sid = meta["sample_id"]
        img_path = cache_dir / f"{sid}.png"
        if not img_path.exists():
            raise DataError(f"cache entry {sid} is missing its image file")
        img_u16 = np.asarray(Image.open(img_path), dtype=np.float64)
        image = Slice((img_u16 / CACHE_LEVELS).astype(np.float32))
        label = None
        if meta.get("has_label"):
            mask_arr = np.asarray(Image.open(cache_dir / f"{sid}_mask.png"))
            label = BinaryMask((mask_arr > 127).astype(np.uint8))
        tag = meta.get("class_tag")
        samples.append(DomainSample(
            image=image,
            label=label,
            domain=Domain(meta["domain"]),
            sample_id=sid,
            class_tag=ClassTag(tag) if tag else None,
        ))
    return samples


def volume_to_samples(volume_hu: np.ndarray, domain: Domain, scan_id: str,
                      infection_volume: np.ndarray | None = None,
                      lung_volume: np.ndarray | None = None,
                      allow_lung_fallback: bool = False,
                      resolution: tuple[int, int] = DEFAULT_RESOLUTION,
                      window: tuple[float, float] = HU_WINDOW,
                      margin: int = 0,
                      preserve_aspect: bool = False) -> list[DomainSample]:
    """Run the full slice pipeline over an axial volume.

    Slices whose lung mask is empty are skipped. Without a lung volume the
    thresholding fallback is used only when `allow_lung_fallback` is set;
    otherwise the scan is rejected.
    """
    vol = np.asarray(volume_hu, dtype=np.float64)
    if vol.ndim == 2:
        vol = vol[None]
        if infection_volume is not None:
            infection_volume = np.asarray(infection_volume)[None]
        if lung_volume is not None:
            lung_volume = np.asarray(lung_volume)[None]
    if lung_volume is None:
        if not allow_lung_fallback:
            raise DataError(f"scan {scan_id}: no lung mask supplied and fallback disabled")
        lung_volume = lung_mask_fallback(vol)
    lung_volume = np.asarray(lung_volume)
    if lung_volume.shape != vol.shape:
        raise DataError(f"scan {scan_id}: lung mask shape {lung_volume.shape} != volume {vol.shape}")
    if infection_volume is not None and np.asarray(infection_volume).shape != vol.shape:
        raise DataError(f"scan {scan_id}: infection mask shape mismatch")

    normalized = window_normalize(vol, *window, sample_id=scan_id)
    samples = []
    for z in range(vol.shape[0]):
        lung = (lung_volume[z] > 0).astype(np.uint8)
        if not lung.any():
            continue
        r0, r1, c0, c1 = lung_bounding_box(BinaryMask(lung), margin)
        img = normalized[z, r0:r1, c0:c1]
        if preserve_aspect:
            img = pad_to_square(img)
        image = resize(Slice(img), resolution)
        label = None
        tag = ClassTag.NEGATIVE
        if infection_volume is not None:
            inf = (np.asarray(infection_volume[z]) > 0).astype(np.uint8)[r0:r1, c0:c1]
            if preserve_aspect:
                inf = pad_to_square(inf)
            label = resize(BinaryMask(inf), resolution)
            tag = ClassTag.POSITIVE if label.pixels.any() else ClassTag.NEGATIVE
        samples.append(DomainSample(
            image=image,
            label=label,
            domain=domain,
            sample_id=f"{scan_id}_z{z:04d}",
            class_tag=tag,
        ))
    return samples
