"""Synthetic 3D aging-phantom generation, dataset manifests, and volume IO.

A phantom is a cube containing a spherical cortical shell that thins with
age, a central ventricle ellipsoid that grows with age (slightly
superlinearly), two subcortical blobs whose intensity fades linearly with
age, and a handful of age-independent distractor blobs. Generation is fully
deterministic given (age, seed, config); per-sample randomness only moves
distractors and the additive noise field.

Volume file format ("RVOL"): magic b"RVOL", u32 version=1, 3x u32 dims,
3x f32 spacing, then dims-product f32 voxels, little-endian, x-fastest.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

MAGIC = b"RVOL"
VERSION = 1

SHELL_LABEL = 1
VENTRICLE_LABEL = 2
BLOB_LABELS = (3, 4)
FIRST_DISTRACTOR_LABEL = 5
AGE_INFORMATIVE_LABELS = (1, 2, 3, 4)

SPLITS = ("train", "val", "test")


class VolumeFormatError(Exception):
    pass


@dataclass
class Volume:
    voxels: np.ndarray                  # (dx, dy, dz) float32
    spacing: tuple = (1.0, 1.0, 1.0)    # mm

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.voxels.shape}")
        if not np.isfinite(self.voxels).all():
            raise ValueError("volume contains non-finite voxels")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"bad spacing {self.spacing}")

    @property
    def dims(self):
        return self.voxels.shape


@dataclass
class PhantomConfig:
    dims: tuple = (32, 32, 32)
    age_min: float = 20.0
    age_max: float = 100.0
    shell_outer_radius: float = 13.0
    shell_thickness_min: float = 1.5
    shell_thickness_max: float = 3.0
    ventricle_radius_min: float = 2.5
    ventricle_radius_max: float = 6.5
    ventricle_axes: tuple = (1.0, 0.85, 0.7)   # relative ellipsoid semi-axis scales
    ventricle_exponent: float = 1.2
    blob_radius: float = 2.5
    blob_intensity_young: float = 0.95
    blob_intensity_old: float = 0.55
    distractor_count: int = 0
    distractor_radius: float = 1.6
    distractor_intensity_range: tuple = (0.55, 0.95)
    tissue_intensity: float = 0.5
    tissue_jitter: float = 0.05
    shell_intensity: float = 0.9
    # CSF-analog gray level, T2-weighted convention: CSF hyperintense, well
    # above tissue and far from the zero background. A bright ventricle means
    # "age up" features key on brightness, which the empty exterior cannot
    # supply; a dark ventricle would make darkness age-predictive and drag
    # saliency onto the background
    ventricle_intensity: float = 0.95
    # Per-sample uniform jitter of each class gray level (scanner-contrast
    # analog): masks global-energy shortcuts while leaving geometry intact.
    shell_jitter: float = 0.1
    ventricle_jitter: float = 0.05
    blob_jitter: float = 0.08
    gain_range: tuple = (0.85, 1.15)   # per-sample multiplicative intensity gain
    center_offset_max: float = 2.0     # per-sample rigid offset (registration-error analog)
    # Smooth per-sample intensity texture over the plain tissue, an analog of
    # age-independent biological heterogeneity: a low-resolution random field
    # upsampled to the volume. Amplitude is the field's standard deviation.
    texture_amp: float = 0.18
    texture_grid: int = 5
    noise_std: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise ValueError(f"dims must be three extents >= 8, got {self.dims}")
        if not self.age_min < self.age_max:
            raise ValueError("age range must be ordered")
        if not self.shell_thickness_min < self.shell_thickness_max:
            raise ValueError("shell thickness bounds must be ordered")
        if not self.ventricle_radius_min < self.ventricle_radius_max:
            raise ValueError("ventricle radius bounds must be ordered")
        half = min(self.dims) / 2.0
        if self.center_offset_max < 0:
            raise ValueError("center_offset_max must be >= 0")
        if self.shell_outer_radius + self.center_offset_max > half:
            raise ValueError("shell plus center offset exceeds volume dims")
        if self.ventricle_radius_max >= self.shell_outer_radius - self.shell_thickness_max:
            raise ValueError("ventricle would reach the shell")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.texture_amp < 0:
            raise ValueError("texture_amp must be >= 0")
        if min(self.shell_jitter, self.ventricle_jitter, self.blob_jitter,
               self.tissue_jitter) < 0:
            raise ValueError("intensity jitters must be >= 0")
        if self.texture_amp > 0 and int(self.texture_grid) < 2:
            raise ValueError("texture_grid must be >= 2")
        if self.distractor_count > 0:
            lo, hi = self._distractor_annulus()
            if lo >= hi:
                raise ValueError(
                    "no age-independent room for distractors between the maximal "
                    "ventricle and the minimal shell interior")

    def _distractor_annulus(self):
        """Radial band where distractors fit at every age."""
        lo = self.ventricle_radius_max * max(self.ventricle_axes) \
            + self.distractor_radius + 0.5
        hi = self.shell_outer_radius - self.shell_thickness_max \
            - self.distractor_radius - 0.5
        return lo, hi


@dataclass
class ParcellationAtlas:
    labels: np.ndarray                  # (dx, dy, dz) int32, 0 = background
    label_names: dict                   # id -> name
    age_informative: tuple = AGE_INFORMATIVE_LABELS

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)


@dataclass
class LabeledSample:
    id: str
    path: str
    age: float
    group: str
    sex: int
    split: str
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# geometry


def _age_fraction(age: float, config: PhantomConfig) -> float:
    return (age - config.age_min) / (config.age_max - config.age_min)


def ventricle_radius(age: float, config: PhantomConfig) -> float:
    u = _age_fraction(age, config)
    return config.ventricle_radius_min + \
        (config.ventricle_radius_max - config.ventricle_radius_min) * u ** config.ventricle_exponent


def shell_thickness(age: float, config: PhantomConfig) -> float:
    u = _age_fraction(age, config)
    return config.shell_thickness_max - \
        (config.shell_thickness_max - config.shell_thickness_min) * u


def blob_intensity(age: float, config: PhantomConfig) -> float:
    u = _age_fraction(age, config)
    return config.blob_intensity_young + \
        (config.blob_intensity_old - config.blob_intensity_young) * u


def _grid(dims):
    axes = [np.arange(n, dtype=np.float64) - (n - 1) / 2.0 for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def _sphere_mask(grid, center, radius):
    x, y, z = grid
    return (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2 <= radius ** 2


def _distractor_centers(config: PhantomConfig, seed: int, sex: int) -> np.ndarray:
    """Distractor placement: seed-dependent, age-independent; the sex tag
    mirrors placement along x."""
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), int(seed), 71]))
    lo, hi = config._distractor_annulus()
    centers = []
    for _ in range(config.distractor_count):
        # rejection-free: uniform direction, radius in the safe annulus
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        centers.append(direction * rng.uniform(lo, hi))
    centers = np.array(centers) if centers else np.zeros((0, 3))
    if sex == 1 and len(centers):
        centers[:, 0] *= -1.0
    return centers


def _texture_field(config: PhantomConfig, seed: int) -> np.ndarray:
    """Smooth per-sample random intensity field: a coarse grid of normal
    deviates, trilinearly upsampled to the volume dims and scaled by the
    texture amplitude. Age-independent by construction."""
    g = int(config.texture_grid)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), int(seed), 83]))
    coarse = rng.normal(0.0, 1.0, size=(g, g, g))
    coords = np.meshgrid(*[np.linspace(0.0, g - 1.0, n) for n in config.dims],
                         indexing="ij")
    field = ndimage.map_coordinates(coarse, np.stack([c.ravel() for c in coords]),
                                    order=1, mode="nearest")
    return config.texture_amp * field.reshape(config.dims)


def generate_phantom(age: float, seed: int, config: PhantomConfig,
                     sex: int = 0, noise: bool = True):
    """Deterministic phantom for a given age. Returns (Volume, ParcellationAtlas)."""
    config.validate()
    if not config.age_min <= age <= config.age_max:
        raise ValueError(f"age {age} outside [{config.age_min}, {config.age_max}]")

    # per-sample, age-independent rigid offset of the whole geometry
    # (imperfect-registration analog; the parcellation moves with it)
    off_rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), int(seed), 59]))
    offset = off_rng.uniform(-config.center_offset_max, config.center_offset_max, size=3)

    grid = tuple(g - o for g, o in zip(_grid(config.dims), offset))
    x, y, z = grid
    r2 = x ** 2 + y ** 2 + z ** 2

    th = shell_thickness(age, config)
    shell = (r2 <= config.shell_outer_radius ** 2) & \
            (r2 > (config.shell_outer_radius - th) ** 2)
    interior = r2 <= (config.shell_outer_radius - th) ** 2

    rv = ventricle_radius(age, config)
    ax = config.ventricle_axes
    ventricle = (x / (ax[0] * rv)) ** 2 + (y / (ax[1] * rv)) ** 2 + \
                (z / (ax[2] * rv)) ** 2 <= 1.0

    blob_offset = config.shell_outer_radius * 0.55
    blob_centers = [(blob_offset * 0.8, blob_offset * 0.45, 0.0),
                    (-blob_offset * 0.8, blob_offset * 0.45, 0.0)]
    blobs = [_sphere_mask(grid, c, config.blob_radius) & interior & ~ventricle
             for c in blob_centers]

    # distractor spheres fit inside the minimal interior and outside the
    # maximal ventricle at every age, so no age-dependent clipping is needed
    distractors = [_sphere_mask(grid, c, config.distractor_radius)
                   for c in _distractor_centers(config, seed, sex)]

    vox = np.zeros(config.dims, dtype=np.float64)
    labels = np.zeros(config.dims, dtype=np.int32)
    names = {0: "background", SHELL_LABEL: "shell", VENTRICLE_LABEL: "ventricle",
             BLOB_LABELS[0]: "blob_left", BLOB_LABELS[1]: "blob_right"}

    # per-sample, age-independent appearance nuisances (scanner-gain analog)
    app_rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), int(seed), 53]))
    tissue = config.tissue_intensity + app_rng.uniform(-config.tissue_jitter,
                                                      config.tissue_jitter)
    distractor_ints = app_rng.uniform(*config.distractor_intensity_range,
                                      size=max(1, config.distractor_count))
    gain = app_rng.uniform(*config.gain_range)
    shell_int = config.shell_intensity + \
        app_rng.uniform(-config.shell_jitter, config.shell_jitter)
    ventricle_int = config.ventricle_intensity + \
        app_rng.uniform(-config.ventricle_jitter, config.ventricle_jitter)
    blob_jit = app_rng.uniform(-config.blob_jitter, config.blob_jitter)

    vox[interior] = tissue
    vox[shell] = shell_int
    labels[shell] = SHELL_LABEL
    b_int = blob_intensity(age, config) + blob_jit
    for lbl, mask in zip(BLOB_LABELS, blobs):
        vox[mask] = b_int
        labels[mask] = lbl
    for k, mask in enumerate(distractors):
        lbl = FIRST_DISTRACTOR_LABEL + k
        vox[mask] = distractor_ints[k]
        labels[mask] = lbl
        names[lbl] = f"distractor_{k}"
    vox[ventricle] = ventricle_int
    labels[ventricle] = VENTRICLE_LABEL

    if config.texture_amp > 0:
        plain_tissue = labels == 0
        plain_tissue &= interior & ~ventricle
        vox[plain_tissue] += _texture_field(config, seed)[plain_tissue]

    vox *= gain
    if noise and config.noise_std > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), int(seed), 97]))
        vox = vox + rng.normal(0.0, config.noise_std, size=config.dims)
    vox = np.clip(vox, 0.0, 1.0)

    return Volume(vox.astype(np.float32)), ParcellationAtlas(labels, names)


def reference_atlas(config: PhantomConfig, margin: float = 0.0) -> ParcellationAtlas:
    """Age-independent atlas covering the union of informative regions over
    the whole age range (no distractors); used for group-level saliency
    scoring where subjects have different ages. The atlas lives in the
    canonical (centered) frame; score maps against it after rigid alignment,
    or pass a positive `margin` to dilate every region instead."""
    config.validate()
    if margin < 0:
        raise ValueError("margin must be >= 0")
    grid = _grid(config.dims)
    x, y, z = grid
    r2 = x ** 2 + y ** 2 + z ** 2

    m = margin
    shell = (r2 <= (config.shell_outer_radius + m) ** 2) & \
            (r2 > max(config.shell_outer_radius - config.shell_thickness_max - m, 0.0) ** 2)
    rv = config.ventricle_radius_max
    ax = config.ventricle_axes
    ventricle = (x / (ax[0] * rv + m)) ** 2 + (y / (ax[1] * rv + m)) ** 2 + \
                (z / (ax[2] * rv + m)) ** 2 <= 1.0

    blob_offset = config.shell_outer_radius * 0.55
    blob_centers = [(blob_offset * 0.8, blob_offset * 0.45, 0.0),
                    (-blob_offset * 0.8, blob_offset * 0.45, 0.0)]

    labels = np.zeros(config.dims, dtype=np.int32)
    labels[shell] = SHELL_LABEL
    for lbl, c in zip(BLOB_LABELS, blob_centers):
        labels[_sphere_mask(grid, c, config.blob_radius + m) & ~ventricle & ~shell] = lbl
    labels[ventricle] = VENTRICLE_LABEL
    names = {0: "background", SHELL_LABEL: "shell", VENTRICLE_LABEL: "ventricle",
             BLOB_LABELS[0]: "blob_left", BLOB_LABELS[1]: "blob_right"}
    return ParcellationAtlas(labels, names)


# ---------------------------------------------------------------------------
# dataset generation


def split_counts(n: int, ratios) -> list[int]:
    """Largest-remainder apportionment of n over the split ratios."""
    ratios = [float(r) for r in ratios]
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {ratios}")
    raw = [n * r for r in ratios]
    counts = [int(np.floor(v)) for v in raw]
    rem = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[:rem]:
        counts[i] += 1
    return counts


def stratified_ages(n: int, config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Ages covering the range, stratified uniformly by decade bin."""
    n_bins = max(1, int(np.ceil((config.age_max - config.age_min) / 10.0)))
    edges = np.linspace(config.age_min, config.age_max, n_bins + 1)
    base, extra = divmod(n, n_bins)
    counts = [base + (1 if i < extra else 0) for i in range(n_bins)]
    ages = []
    for i, c in enumerate(counts):
        ages.extend(rng.uniform(edges[i], edges[i + 1], size=c))
    return np.array(ages)


def generate_dataset(n: int, config: PhantomConfig, out_dir: str,
                     ratios=(0.8, 0.1, 0.1), seed: int = 0,
                     group: str = "NC", age_offset: float = 0.0,
                     manifest_name: str = "manifest.json") -> list[LabeledSample]:
    """Generate n phantoms, write volumes + manifest under out_dir.

    `age_offset` shifts the geometry age while the label stays the drawn
    age (used to build accelerated-aging cohorts); offset geometry ages are
    clamped to the configured range.
    """
    config.validate()
    if n < 10:
        raise ValueError(f"dataset size must be >= 10, got {n}")
    counts = split_counts(n, ratios)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    ages = stratified_ages(n, config, rng)
    order = rng.permutation(n)
    sexes = rng.integers(0, 2, size=n)

    split_of = np.empty(n, dtype=object)
    start = 0
    for name, c in zip(SPLITS, counts):
        split_of[order[start:start + c]] = name
        start += c

    os.makedirs(out_dir, exist_ok=True)
    samples = []
    for i in range(n):
        sample_seed = int(seed) * 1000003 + i
        geom_age = float(np.clip(ages[i] + age_offset, config.age_min, config.age_max))
        vol, _ = generate_phantom(geom_age, sample_seed, config, sex=int(sexes[i]))
        rel = f"{group.lower()}_{i:05d}.rvol"
        write_volume(os.path.join(out_dir, rel), vol)
        samples.append(LabeledSample(
            id=f"{group}-{i:05d}", path=rel, age=float(ages[i]), group=group,
            sex=int(sexes[i]), split=str(split_of[i]), seed=sample_seed))

    manifest_path = os.path.join(out_dir, manifest_name)
    write_manifest(manifest_path, samples)
    return samples


def write_manifest(path: str, samples: list[LabeledSample]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump([s.to_dict() for s in samples], f, indent=1)
        f.write("\n")
    os.replace(tmp, path)


def read_manifest(path: str) -> list[LabeledSample]:
    with open(path) as f:
        entries = json.load(f)
    return [LabeledSample(**e) for e in entries]


# ---------------------------------------------------------------------------
# RVOL IO


def write_volume(path: str, volume: Volume) -> None:
    dims = volume.dims
    header = MAGIC + struct.pack("<I", VERSION) + struct.pack("<3I", *dims) \
        + struct.pack("<3f", *volume.spacing)
    payload = np.asfortranarray(volume.voxels.astype("<f4")).tobytes(order="F")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)


def read_volume(path: str) -> Volume:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 4 + 4 + 12 + 12:
        raise VolumeFormatError(f"{path}: truncated header ({len(data)} bytes)")
    version, = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from("<3I", data, 8)
    if any(d == 0 or d > 4096 for d in dims):
        raise VolumeFormatError(f"{path}: unreasonable dims {dims}")
    spacing = struct.unpack_from("<3f", data, 20)
    expected = 32 + 4 * dims[0] * dims[1] * dims[2]
    if len(data) != expected:
        raise VolumeFormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {len(data)}")
    vox = np.frombuffer(data, dtype="<f4", offset=32).reshape(dims, order="F")
    return Volume(np.ascontiguousarray(vox), spacing)
