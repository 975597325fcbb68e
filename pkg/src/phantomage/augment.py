"""Stochastic training-time augmentation for volumes.

Four transforms, each applied independently with its own probability
(default 0.5), in a fixed order: integer translation, rotation about a
random axis, additive Gaussian noise, and random crop resized back to the
original dimensions. Out-of-bounds voxels after translation/rotation are
zero-filled; the crop never shrinks an axis below the configured fraction.
The fixed order and zero boundary fill are implementation choices made for
reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .phantom import Volume
from .tensor import resample_trilinear_array


@dataclass
class AugmentConfig:
    p_translate: float = 0.5
    p_rotate: float = 0.5
    p_noise: float = 0.5
    p_crop: float = 0.5
    max_translation: int | None = None   # voxels; None -> ceil(0.05 * min dim)
    rotation_min: float = 0.1            # radians
    rotation_max: float = 0.5
    noise_mean: float = 0.0
    noise_std: float = 0.025
    min_crop_fraction: float = 0.70

    def validate(self) -> None:
        for p in (self.p_translate, self.p_rotate, self.p_noise, self.p_crop):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if not self.rotation_min <= self.rotation_max:
            raise ValueError("rotation range must be ordered")
        if not 0.0 < self.min_crop_fraction <= 1.0:
            raise ValueError("min_crop_fraction must be in (0, 1]")
        if self.max_translation is not None and self.max_translation < 0:
            raise ValueError("max_translation must be >= 0")

    def translation_limit(self, dims) -> int:
        if self.max_translation is not None:
            return int(self.max_translation)
        return int(np.ceil(0.05 * min(dims)))


def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cross = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)


def translate(vox: np.ndarray, shift) -> np.ndarray:
    """Integer-voxel shift with zero fill."""
    out = np.zeros_like(vox)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for ax, s in enumerate(shift):
        n = vox.shape[ax]
        s = int(s)
        if abs(s) >= n:
            return out
        if s >= 0:
            dst[ax], src[ax] = slice(s, n), slice(0, n - s)
        else:
            dst[ax], src[ax] = slice(0, n + s), slice(-s, n)
    out[tuple(dst)] = vox[tuple(src)]
    return out


def rotate(vox: np.ndarray, axis, angle: float) -> np.ndarray:
    """Rotate about the volume center with trilinear interpolation, zero fill."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    rot = _rotation_matrix(axis, angle)
    center = (np.array(vox.shape, dtype=np.float64) - 1) / 2.0
    # affine_transform maps output coords to input coords: inverse rotation
    inv = rot.T
    offset = center - inv @ center
    out = ndimage.affine_transform(vox.astype(np.float64), inv, offset=offset,
                                   order=1, mode="constant", cval=0.0,
                                   prefilter=False)
    return out.astype(vox.dtype)


def crop_resize(vox: np.ndarray, lo, size) -> np.ndarray:
    """Crop the box [lo, lo+size) and trilinearly resize back to full dims."""
    sl = tuple(slice(int(l), int(l) + int(s)) for l, s in zip(lo, size))
    return resample_trilinear_array(vox[sl].astype(np.float64),
                                    vox.shape).astype(vox.dtype)


def augment(volume: Volume, config: AugmentConfig, rng: np.random.Generator) -> Volume:
    """Apply the augmentation pipeline; deterministic given the rng stream."""
    config.validate()
    dims = volume.dims
    if min(dims) < 8:
        raise ValueError(f"volume dims {dims} too small to augment")
    vox = volume.voxels

    # decision draws happen in a fixed order so streams stay aligned
    apply_t = rng.random() < config.p_translate
    apply_r = rng.random() < config.p_rotate
    apply_n = rng.random() < config.p_noise
    apply_c = rng.random() < config.p_crop

    if apply_t:
        limit = config.translation_limit(dims)
        shift = rng.integers(-limit, limit + 1, size=3)
        vox = translate(vox, shift)
    if apply_r:
        axis = rng.normal(size=3)
        while np.linalg.norm(axis) < 1e-12:
            axis = rng.normal(size=3)
        angle = rng.uniform(config.rotation_min, config.rotation_max)
        vox = rotate(vox, axis, angle)
    if apply_n:
        vox = (vox + rng.normal(config.noise_mean, config.noise_std,
                                size=dims)).astype(np.float32)
    if apply_c:
        size = [int(rng.integers(int(np.ceil(config.min_crop_fraction * n)), n + 1))
                for n in dims]
        lo = [int(rng.integers(0, n - s + 1)) for n, s in zip(dims, size)]
        vox = crop_resize(vox, lo, size)

    return Volume(vox.astype(np.float32), volume.spacing)


def sample_rng(seed: int, epoch: int, sample_index: int) -> np.random.Generator:
    """Per-(seed, epoch, sample) stream; keeps augmentation order-independent
    and lets interrupted runs resume bit-exactly."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), int(epoch), int(sample_index), 131]))
