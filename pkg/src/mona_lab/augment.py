"""Weak/strong augmentation chains and invertible spatial transforms.

A `TransformRecord` separates the spatial component (rotation, flip,
crop-with-resize, folded into one affine pull-back matrix) from input-side
ops (contrast, brightness, diffeomorphic warp, CutMix). Only the spatial
component acts on prediction maps via `apply_spatial`; photometric and
morphological ops change the input image only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.ndimage import gaussian_filter, map_coordinates

from .data import Sample2D


@dataclass
class AugmentParams:
    """Parameter ranges for both chains; conservative defaults, all
    overridable through the training config."""
    rot_degrees: float = 15.0
    crop_scale_min: float = 0.8
    flip_prob: float = 0.5
    contrast_range: tuple = (0.7, 1.3)
    brightness_delta: float = 0.2
    cutmix_prob: float = 0.5
    cutmix_area: tuple = (0.05, 0.25)
    warp_sigma: float = 6.0
    warp_alpha: float = 2.5


@dataclass
class TransformRecord:
    """Full description of one augmentation draw.

    `affine` is the composed 3x3 homogeneous pull-back matrix: output pixel
    coordinates (row, col, 1) map through it to input coordinates.
    """
    affine: np.ndarray
    angle: float = 0.0
    flip: bool = False
    crop: Optional[tuple] = None          # (r0, c0, h, w) in source coords
    intensity_ops: list = field(default_factory=list)
    cutmix_box: Optional[tuple] = None    # (r0, c0, h, w)
    cutmix_donor: Optional[tuple] = None  # (patient_id, slice_index)
    warp: Optional[dict] = None           # {"sigma":, "alpha":, "seed":}

    def is_invertible(self) -> bool:
        return abs(np.linalg.det(self.affine[:2, :2])) > 1e-12


def _rotflip_pullback(angle_deg: float, flip: bool, h: int, w: int) -> np.ndarray:
    """Pull-back matrix of rotate-about-center followed by horizontal flip."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(angle_deg)
    # forward rotation by +t; pull-back uses the inverse rotation
    rot = np.array([[np.cos(t), np.sin(t), 0.0],
                    [-np.sin(t), np.cos(t), 0.0],
                    [0.0, 0.0, 1.0]])
    to_ctr = np.array([[1, 0, -cy], [0, 1, -cx], [0, 0, 1.0]])
    from_ctr = np.array([[1, 0, cy], [0, 1, cx], [0, 0, 1.0]])
    a_rot = from_ctr @ rot @ to_ctr
    if flip:
        a_flip = np.array([[1, 0, 0], [0, -1, w - 1.0], [0, 0, 1.0]])
        # forward = flip(rotate(x)); pull-back composes in application order
        return a_rot @ a_flip
    return a_rot


def _crop_pullback(crop: tuple, h: int, w: int) -> np.ndarray:
    """Pull-back of crop (r0,c0,ch,cw) resized back to h x w."""
    r0, c0, ch, cw = crop
    sr, sc = ch / h, cw / w
    return np.array([[sr, 0, r0 + 0.5 * sr - 0.5],
                     [0, sc, c0 + 0.5 * sc - 0.5],
                     [0, 0, 1.0]])


def identity_record(h: int, w: int) -> TransformRecord:
    return TransformRecord(affine=np.eye(3))


def make_record(h: int, w: int, angle: float = 0.0, flip: bool = False,
                crop: Optional[tuple] = None) -> TransformRecord:
    aff = _rotflip_pullback(angle, flip, h, w)
    if crop is not None:
        aff = aff @ _crop_pullback(crop, h, w)
    return TransformRecord(affine=aff, angle=angle, flip=flip, crop=crop)


def inverse(record: TransformRecord) -> TransformRecord:
    if not record.is_invertible():
        raise ValueError("transform record is not spatially invertible")
    return TransformRecord(affine=np.linalg.inv(record.affine))


def compose(outer: TransformRecord, inner: TransformRecord) -> TransformRecord:
    """Record of applying `inner` first, then `outer`."""
    return TransformRecord(affine=inner.affine @ outer.affine)


def _pullback_coords(record: TransformRecord, h: int, w: int):
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    a = record.affine
    src_r = a[0, 0] * rr + a[0, 1] * cc + a[0, 2]
    src_c = a[1, 0] * rr + a[1, 1] * cc + a[1, 2]
    return src_r, src_c


def apply_spatial(record: TransformRecord, m):
    """Apply the spatial component of `record` to a map.

    Integer 2D numpy arrays are treated as label maps (nearest-neighbor);
    float numpy arrays (H,W) or (H,W,C) and torch tensors (...,H,W) are
    resampled bilinearly. Coordinates are clamped at the border. The torch
    path is differentiable in the map values.
    """
    if not record.is_invertible():
        raise ValueError("transform record is not spatially invertible")
    if isinstance(m, torch.Tensor):
        h, w = m.shape[-2], m.shape[-1]
        src_r, src_c = _pullback_coords(record, h, w)
        r0 = np.clip(np.floor(src_r), 0, h - 1)
        c0 = np.clip(np.floor(src_c), 0, w - 1)
        fr = np.clip(src_r, 0, h - 1) - r0
        fc = np.clip(src_c, 0, w - 1) - c0
        r0 = r0.astype(np.int64)
        c0 = c0.astype(np.int64)
        r1 = np.minimum(r0 + 1, h - 1)
        c1 = np.minimum(c0 + 1, w - 1)
        fr_t = torch.as_tensor(fr, dtype=m.dtype)
        fc_t = torch.as_tensor(fc, dtype=m.dtype)
        g00 = m[..., r0, c0]
        g01 = m[..., r0, c1]
        g10 = m[..., r1, c0]
        g11 = m[..., r1, c1]
        return ((1 - fr_t) * (1 - fc_t) * g00 + (1 - fr_t) * fc_t * g01
                + fr_t * (1 - fc_t) * g10 + fr_t * fc_t * g11)
    m = np.asarray(m)
    h, w = m.shape[0], m.shape[1]
    src_r, src_c = _pullback_coords(record, h, w)
    if m.ndim == 2 and np.issubdtype(m.dtype, np.integer):
        ri = np.clip(np.rint(src_r), 0, h - 1).astype(np.int64)
        ci = np.clip(np.rint(src_c), 0, w - 1).astype(np.int64)
        return m[ri, ci]
    coords = np.stack([np.clip(src_r, 0, h - 1), np.clip(src_c, 0, w - 1)])
    if m.ndim == 2:
        return map_coordinates(m, coords, order=1, mode="nearest")
    out = np.empty_like(m)
    for ch in range(m.shape[2]):
        out[:, :, ch] = map_coordinates(m[:, :, ch], coords, order=1, mode="nearest")
    return out


def _draw_spatial(h, w, rng, params: AugmentParams) -> TransformRecord:
    angle = rng.uniform(-params.rot_degrees, params.rot_degrees)
    flip = bool(rng.random() < params.flip_prob)
    scale = rng.uniform(params.crop_scale_min, 1.0)
    ch, cw = max(2, int(round(scale * h))), max(2, int(round(scale * w)))
    r0 = int(rng.integers(0, h - ch + 1))
    c0 = int(rng.integers(0, w - cw + 1))
    return make_record(h, w, angle=angle, flip=flip, crop=(r0, c0, ch, cw))


def weak_chain(sample: Sample2D, rng, params: AugmentParams = AugmentParams()):
    """Spatial-only augmentation: rotation, crop-resize, horizontal flip."""
    h, w = sample.image.shape
    record = _draw_spatial(h, w, rng, params)
    out = sample.copy()
    out.image = np.clip(apply_spatial(record, sample.image), 0.0, 1.0)
    if sample.label is not None:
        out.label = apply_spatial(record, sample.label.astype(np.int64))
    return out, record


def _elastic_warp(img: np.ndarray, sigma: float, alpha: float, seed: int,
                  order: int = 1) -> np.ndarray:
    h, w = img.shape
    wrng = np.random.default_rng(seed)
    dr = gaussian_filter(wrng.uniform(-1, 1, size=(h, w)), sigma) * alpha
    dc = gaussian_filter(wrng.uniform(-1, 1, size=(h, w)), sigma) * alpha
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return map_coordinates(img, [rr + dr, cc + dc], order=order, mode="nearest")


def apply_warp(record: TransformRecord, arr: np.ndarray, order: int = 1) -> np.ndarray:
    """Re-apply a record's elastic warp to another spatially aligned map
    (e.g. a pseudo-label or confidence map); no-op without a recorded warp.
    Use order=0 for label-like maps."""
    arr = np.asarray(arr, dtype=np.float64)
    if record.warp is None:
        return arr
    return _elastic_warp(arr, record.warp["sigma"], record.warp["alpha"],
                         record.warp["seed"], order=order)


def strong_chain(sample: Sample2D, donor: Optional[Sample2D], rng,
                 params: AugmentParams = AugmentParams(),
                 base_record: Optional[TransformRecord] = None):
    """Weak spatial ops plus contrast, brightness, elastic warp, and CutMix.

    When `base_record` is given, its spatial transform is reused instead of
    drawing a fresh one; a training loop can then keep student and teacher
    inputs pixel-aligned.
    """
    h, w = sample.image.shape
    if base_record is not None:
        record = TransformRecord(affine=base_record.affine.copy(),
                                 angle=base_record.angle, flip=base_record.flip,
                                 crop=base_record.crop)
    else:
        record = _draw_spatial(h, w, rng, params)
    img = apply_spatial(record, sample.image)
    lab = apply_spatial(record, sample.label.astype(np.int64)) if sample.label is not None else None

    f = rng.uniform(*params.contrast_range)
    img = 0.5 + (img - 0.5) * f
    record.intensity_ops.append(("contrast", {"factor": float(f)}))
    b = rng.uniform(-params.brightness_delta, params.brightness_delta)
    img = img + b
    record.intensity_ops.append(("brightness", {"delta": float(b)}))

    warp_seed = int(rng.integers(0, 2**31 - 1))
    img = _elastic_warp(img, params.warp_sigma, params.warp_alpha, warp_seed)
    record.warp = {"sigma": params.warp_sigma, "alpha": params.warp_alpha, "seed": warp_seed}
    if lab is not None:
        # keep the label pixel-aligned with the warped image
        lab = _elastic_warp(lab.astype(np.float64), params.warp_sigma,
                            params.warp_alpha, warp_seed, order=0).astype(np.int64)

    if rng.random() < params.cutmix_prob:
        if donor is None:
            raise ValueError("CutMix drawn but no donor sample provided")
        area = rng.uniform(*params.cutmix_area)
        bh = max(1, int(round(np.sqrt(area) * h)))
        bw = max(1, int(round(np.sqrt(area) * w)))
        r0 = int(rng.integers(0, h - bh + 1))
        c0 = int(rng.integers(0, w - bw + 1))
        img[r0:r0 + bh, c0:c0 + bw] = donor.image[r0:r0 + bh, c0:c0 + bw]
        if lab is not None and donor.label is not None:
            lab[r0:r0 + bh, c0:c0 + bw] = donor.label[r0:r0 + bh, c0:c0 + bw]
        record.cutmix_box = (r0, c0, bh, bw)
        record.cutmix_donor = (donor.patient_id, donor.slice_index)

    out = sample.copy()
    out.image = np.clip(img, 0.0, 1.0)
    out.label = lab
    return out, record
