"""Gradient-weighted regression activation mapping.

Per-subject saliency: channel weights are the spatial means of the
prediction gradient at a chosen encoder layer, the weighted activation sum
is rectified, upsampled to input resolution, and min-max normalized to
[0, 1]. Group averages and per-parcel means build on the per-subject maps.

Two rectification modes exist because the weighting and the ReLU can be
composed in either order; the chosen mode is recorded on every map.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .phantom import ParcellationAtlas, Volume, write_volume, read_volume
from .tensor import resample_trilinear_array

RELU_MODES = ("weighted-sum", "positive-gradients")

DEFAULT_AGE_BINS = ((20.0, 40.0), (40.0, 60.0), (60.0, 80.0), (80.0, float("inf")))


@dataclass
class GradramConfig:
    relu_mode: str = "weighted-sum"
    relevance_threshold: float = 0.80
    target_layer: str | None = None   # None -> encoder config default

    def validate(self) -> None:
        if self.relu_mode not in RELU_MODES:
            raise ValueError(f"unknown relu mode {self.relu_mode!r}; have {RELU_MODES}")
        if not 0.0 <= self.relevance_threshold <= 1.0:
            raise ValueError("relevance_threshold must be in [0, 1]")


@dataclass
class SaliencyMap:
    volume: np.ndarray        # input dims, float32 in [0, 1]
    tag: str                  # subject id or group name
    model_id: str
    layer: str
    relu_mode: str
    raw_min: float            # pre-normalization extremes
    raw_max: float

    def __post_init__(self):
        self.volume = np.asarray(self.volume, dtype=np.float32)
        if self.volume.ndim != 3:
            raise ValueError(f"saliency volume must be 3-D, got {self.volume.shape}")
        lo, hi = float(self.volume.min()), float(self.volume.max())
        if lo < 0.0 or hi > 1.0 + 1e-6:
            raise ValueError(f"saliency values outside [0, 1]: [{lo}, {hi}]")


@dataclass
class ParcelScore:
    label: int
    name: str
    mean: float
    relevant: bool


def normalize_map(raw: np.ndarray):
    """Min-max normalize to [0, 1]; constant maps become all zeros.

    Returns (normalized, raw_min, raw_max)."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 0.0:
        return np.zeros_like(raw), lo, hi
    return (raw - lo) / (hi - lo), lo, hi


def gradram(encoder: "enc.Encoder", head: "enc.RegressionHead", volume: Volume,
            target_layer: str | None = None, relu_mode: str = "weighted-sum",
            model_id: str = "model", tag: str = "subject") -> SaliencyMap:
    """Saliency volume for one subject at the model's input resolution."""
    if relu_mode not in RELU_MODES:
        raise ValueError(f"unknown relu mode {relu_mode!r}; have {RELU_MODES}")
    layer = target_layer or encoder.config.target_layer
    _, acts, grads = enc.forward_with_activations(encoder, head, volume, layer)

    # acts/grads: (C, d, h, w); weights are per-channel spatial means
    if relu_mode == "weighted-sum":
        alpha = grads.mean(axis=(1, 2, 3))
        raw = np.maximum(np.tensordot(alpha, acts, axes=1), 0.0)
    else:
        alpha = np.maximum(grads, 0.0).mean(axis=(1, 2, 3))
        raw = np.maximum(np.tensordot(alpha, acts, axes=1), 0.0)

    up = resample_trilinear_array(raw.astype(np.float64), volume.dims)
    norm, lo, hi = normalize_map(up)
    return SaliencyMap(norm.astype(np.float32), tag=tag, model_id=model_id,
                       layer=layer, relu_mode=relu_mode, raw_min=lo, raw_max=hi)


def estimate_center_offset(volume: Volume, background_threshold: float = 0.1) -> np.ndarray:
    """Rigid offset of the subject from the canonical centered frame.

    The intensity center of mass of the above-background voxels is an
    unbiased estimate of the phantom's center shift because the anatomy is
    (statistically) symmetric about its own center. Returned in voxels,
    one component per axis."""
    v = np.asarray(volume.voxels, dtype=np.float64)
    w = np.clip(v - background_threshold, 0.0, None)
    total = float(w.sum())
    if total <= 0.0:
        return np.zeros(len(v.shape))
    grids = np.meshgrid(*[np.arange(n) - (n - 1) / 2.0 for n in v.shape],
                        indexing="ij")
    return np.array([float((g * w).sum() / total) for g in grids])


def recenter_map(smap: SaliencyMap, offset) -> SaliencyMap:
    """Shift a saliency map into the canonical frame by undoing `offset`.

    The shift is rounded to whole voxels; slabs wrapped in by the roll are
    zeroed so no mass leaks across the volume boundary."""
    vol = np.array(smap.volume, dtype=smap.volume.dtype, copy=True)
    for axis, c in enumerate(np.asarray(offset, dtype=np.float64)):
        s = int(np.rint(-c))
        if s == 0:
            continue
        vol = np.roll(vol, s, axis=axis)
        idx = [slice(None)] * vol.ndim
        idx[axis] = slice(0, s) if s > 0 else slice(vol.shape[axis] + s, None)
        vol[tuple(idx)] = 0.0
    return SaliencyMap(vol, tag=smap.tag, model_id=smap.model_id,
                       layer=smap.layer, relu_mode=smap.relu_mode,
                       raw_min=smap.raw_min, raw_max=smap.raw_max)


def age_bin_name(age: float, bins=DEFAULT_AGE_BINS) -> str:
    for lo, hi in bins:
        if lo <= age < hi:
            return f"{int(lo)}+" if np.isinf(hi) else f"{int(lo)}-{int(hi)}"
    raise ValueError(f"age {age} outside all bins")


def group_average(maps: list[SaliencyMap], groups: list[str]) -> dict:
    """Voxelwise mean of subject maps per group.

    Returns {group name: (SaliencyMap, size)}. Averages of normalized maps
    stay in [0, 1] but need not reach 1 anywhere."""
    if len(maps) != len(groups):
        raise ValueError("one group per map required")
    if not maps:
        raise ValueError("no maps to average")
    dims = maps[0].volume.shape
    out = {}
    for g in dict.fromkeys(groups):   # preserve first-seen order
        members = [m for m, gg in zip(maps, groups) if gg == g]
        for m in members:
            if m.volume.shape != dims:
                raise ValueError(f"map dims {m.volume.shape} != {dims}")
        acc = np.zeros(dims, dtype=np.float64)
        for m in members:             # ordered summation, deterministic
            acc += m.volume
        acc /= len(members)
        ref = members[0]
        out[g] = (SaliencyMap(acc.astype(np.float32), tag=str(g),
                              model_id=ref.model_id, layer=ref.layer,
                              relu_mode=ref.relu_mode, raw_min=0.0, raw_max=1.0),
                  len(members))
    return out


def parcel_scores(smap: SaliencyMap, atlas: ParcellationAtlas,
                  threshold: float = 0.80) -> list[ParcelScore]:
    """Mean saliency per nonzero atlas label, sorted by decreasing mean."""
    if atlas.labels.shape != smap.volume.shape:
        raise ValueError(
            f"atlas dims {atlas.labels.shape} != map dims {smap.volume.shape}")
    labels = np.unique(atlas.labels)
    labels = labels[labels != 0]
    if labels.size == 0:
        raise ValueError("atlas has no nonzero labels")
    vol = smap.volume.astype(np.float64)
    rows = []
    for lbl in labels:
        mean = float(vol[atlas.labels == lbl].mean())
        rows.append(ParcelScore(int(lbl), atlas.label_names.get(int(lbl), str(lbl)),
                                mean, mean > threshold))
    rows.sort(key=lambda r: (-r.mean, r.label))
    return rows


def informative_mass_fraction(smap: SaliencyMap, atlas: ParcellationAtlas) -> float:
    """Fraction of total saliency mass inside the age-informative parcels."""
    total = float(smap.volume.sum(dtype=np.float64))
    if total <= 0.0:
        return 0.0
    mask = np.isin(atlas.labels, atlas.age_informative)
    return float(smap.volume[mask].sum(dtype=np.float64)) / total


# ---------------------------------------------------------------------------
# serialization


def save_map(path: str, smap: SaliencyMap, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write the map volume plus a JSON sidecar with its provenance."""
    write_volume(path, Volume(smap.volume, spacing))
    sidecar = {
        "tag": smap.tag,
        "model_id": smap.model_id,
        "layer": smap.layer,
        "relu_mode": smap.relu_mode,
        "raw_min": smap.raw_min,
        "raw_max": smap.raw_max,
    }
    tmp = path + ".json.tmp"
    with open(tmp, "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path + ".json")


def load_map(path: str) -> SaliencyMap:
    vol = read_volume(path)
    with open(path + ".json") as f:
        meta = json.load(f)
    return SaliencyMap(vol.voxels, tag=meta["tag"], model_id=meta["model_id"],
                       layer=meta["layer"], relu_mode=meta["relu_mode"],
                       raw_min=meta["raw_min"], raw_max=meta["raw_max"])


def write_parcel_csv(path: str, rows: list[ParcelScore]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "name", "mean", "relevant"])
        for r in rows:
            w.writerow([r.label, r.name, repr(r.mean), int(r.relevant)])
    os.replace(tmp, path)
