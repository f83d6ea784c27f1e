"""Volume I/O, manifest ingestion, and seeded synthetic cohort generators.

On-disk formats are bit-exact by contract: VOL3 volumes are little-endian
f32 with a fixed 24-byte header; manifests are LF-terminated CSV with the
exact header ``id,volume_path,label,site`` and no quoting.  The generators
build desk-scale stand-ins for the two tasks: an age-regression cohort whose
central sphere grows and dims with age, and a binary-outcome cohort whose
lesion blob grows with a latent severity, with an optional affine intensity
shift separating the two acquisition sites.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

VOL3_MAGIC = b"VOL3"
VOL3_VERSION = 1
MANIFEST_HEADER = "id,volume_path,label,site"
SITES = ("SITE_A", "SITE_B", "NONE")
TASKS = ("age", "outcome")

AGE_MAX = 97.0
NOISE_SIGMA = 0.05
FIELD_SMOOTH_SIGMA = 2.0
FIELD_AMPLITUDE = 0.08
SPHERE_EDGE_VOXELS = 0.75
AGE_GAIN_RANGE = (0.75, 1.35)
AGE_OFFSET_RANGE = (-0.10, 0.15)

HIE_SPHERE_RADIUS_FRACTION = 0.45
HIE_SPHERE_INTENSITY = 0.75
HIE_SIZE_JITTER = 0.25
HIE_INTENSITY_JITTER = 0.10
HIE_LESION_CONTRAST = 0.35
HIE_LESION_VF_BASE = 0.05
HIE_LESION_VF_SLOPE = 0.50

# RNG stream tags so independent draws never alias across generators
AGE_STREAM = 101
HIE_STREAM = 102


class DataError(ValueError):
    """Malformed file, manifest row, or generator argument."""


@dataclass
class Sample:
    id: str
    volume: np.ndarray  # (2, D, H, W) f32
    label: float
    site: str = "NONE"


@dataclass
class Dataset:
    task: str
    samples: list = field(default_factory=list)
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}; expected one of {TASKS}")
        self.validate()

    def validate(self) -> None:
        seen = set()
        shape = None
        for s in self.samples:
            if s.id in seen:
                raise DataError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.volume.ndim != 4 or s.volume.shape[0] != 2:
                raise DataError(
                    f"sample {s.id}: volume must be (2, D, H, W), got {s.volume.shape}"
                )
            if shape is None:
                shape = s.volume.shape
            elif s.volume.shape != shape:
                raise DataError(
                    f"sample {s.id}: shape {s.volume.shape} differs from {shape}"
                )
            if s.site not in SITES:
                raise DataError(f"sample {s.id}: unknown site {s.site!r}")
            if self.task == "age":
                if not np.isfinite(s.label) or not 0.0 <= s.label <= AGE_MAX:
                    raise DataError(
                        f"sample {s.id}: age label {s.label} outside [0, {AGE_MAX}]"
                    )
            else:
                if s.label not in (0, 1):
                    raise DataError(f"sample {s.id}: outcome label must be 0 or 1")

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> list:
        return [s.id for s in self.samples]

    def labels(self) -> np.ndarray:
        if self.task == "age":
            return np.array([s.label for s in self.samples], dtype=np.float64)
        return np.array([int(s.label) for s in self.samples], dtype=np.int64)

    def sites(self) -> list:
        return [s.site for s in self.samples]

    def volumes(self) -> np.ndarray:
        """Stacked (N, 2, D, H, W) f32 array."""
        return np.stack([s.volume for s in self.samples]).astype(np.float32, copy=False)

    def subset(self, indices) -> "Dataset":
        picked = [self.samples[i] for i in indices]
        return Dataset(self.task, picked, self.provenance)

    def by_site(self, site: str) -> "Dataset":
        idx = [i for i, s in enumerate(self.samples) if s.site == site]
        if not idx:
            raise DataError(f"no samples tagged {site!r} in dataset")
        return self.subset(idx)


# ---------------------------------------------------------------------------
# VOL3 volumes
# ---------------------------------------------------------------------------

def save_volume(path, volume: np.ndarray) -> None:
    """Write a rank-4 f32 volume: "VOL3" | version u32 | C,D,H,W u32 | payload."""
    vol = np.asarray(volume)
    if vol.ndim != 4:
        raise DataError(f"save_volume needs a rank-4 array, got shape {vol.shape}")
    if vol.dtype != np.float32:
        raise DataError(f"save_volume needs f32 data, got {vol.dtype}")
    header = VOL3_MAGIC + struct.pack("<5I", VOL3_VERSION, *vol.shape)
    payload = np.ascontiguousarray(vol, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_volume(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise DataError(f"{path}: file too short for a VOL3 header ({len(raw)} bytes)")
    if raw[:4] != VOL3_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {VOL3_MAGIC!r}")
    version, c, d, h, w = struct.unpack("<5I", raw[4:24])
    if version != VOL3_VERSION:
        raise DataError(f"{path}: unsupported VOL3 version {version}")
    expected = 24 + c * d * h * w * 4
    if len(raw) != expected:
        raise DataError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=24)
    return flat.reshape(c, d, h, w).astype(np.float32, copy=True)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def _format_label(task: str, label) -> str:
    if task == "age":
        return repr(float(label))
    return str(int(label))


def write_dataset(dataset: Dataset, outdir) -> Path:
    """Write one VOL3 file per sample plus manifest.csv; returns the manifest path."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for s in dataset.samples:
        fname = f"{s.id}.vol3"
        save_volume(out / fname, s.volume)
        lines.append(f"{s.id},{fname},{_format_label(dataset.task, s.label)},{s.site}")
    manifest = out / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", newline="\n")
    return manifest


def load_manifest(path, task: str) -> Dataset:
    """Read a manifest and its volumes; paths resolve relative to the manifest."""
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}; expected one of {TASKS}")
    path = Path(path)
    text = path.read_text()
    lines = text.split("\n")
    if not lines or lines[0] != MANIFEST_HEADER:
        raise DataError(
            f"{path}: line 1: header must be exactly {MANIFEST_HEADER!r}"
        )
    samples = []
    seen = set()
    for lineno, row in enumerate(lines[1:], start=2):
        if row == "":
            continue  # trailing newline
        parts = row.split(",")
        if len(parts) != 4:
            raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
        sid, volume_path, label_text, site = parts
        if not sid:
            raise DataError(f"{path}: line {lineno}: empty id")
        if sid in seen:
            raise DataError(f"{path}: line {lineno}: duplicate id {sid!r}")
        seen.add(sid)
        if site not in SITES:
            raise DataError(f"{path}: line {lineno}: unknown site {site!r}")
        if task == "age":
            try:
                label = float(label_text)
            except ValueError:
                raise DataError(
                    f"{path}: line {lineno}: age label {label_text!r} is not a number"
                ) from None
            if not np.isfinite(label) or not 0.0 <= label <= AGE_MAX:
                raise DataError(
                    f"{path}: line {lineno}: age label {label} outside [0, {AGE_MAX}]"
                )
        else:
            if label_text not in ("0", "1"):
                raise DataError(
                    f"{path}: line {lineno}: outcome label must be 0 or 1, "
                    f"got {label_text!r}"
                )
            label = int(label_text)
        vpath = path.parent / volume_path
        if not vpath.exists():
            raise DataError(f"{path}: line {lineno}: volume file not found: {vpath}")
        samples.append(Sample(sid, load_volume(vpath), label, site))
    return Dataset(task, samples, provenance="real")


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def _check_dims(dims) -> tuple:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 8 for d in dims):
        raise DataError(f"dims must be three extents each >= 8, got {dims}")
    return dims


def _soft_sphere(dims: tuple, center, radius: float) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, d) for d in dims)]
    r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    r = np.sqrt(r2.astype(np.float64))
    return 1.0 / (1.0 + np.exp((r - radius) / SPHERE_EDGE_VOXELS))


def _smooth_field(rng: np.random.Generator, dims: tuple) -> np.ndarray:
    noise = rng.standard_normal(dims)
    fieldv = gaussian_filter(noise, sigma=FIELD_SMOOTH_SIGMA, mode="nearest")
    std = fieldv.std()
    if std > 0:
        fieldv *= FIELD_AMPLITUDE / std
    return fieldv


def _mid_age_reference(dims: tuple) -> np.ndarray:
    """Noise-free volume at the age range's midpoint: the standardization
    target for the age cohort's channel 1."""
    center = tuple((d - 1) / 2.0 for d in dims)
    half_min = min(dims) / 2.0
    radius = (0.15 + 0.25 * 0.5) * half_min
    intensity = 1.0 - 0.5 * 0.5
    return intensity * _soft_sphere(dims, center, radius)


def synth_age_dataset(n: int, dims, seed: int) -> Dataset:
    """Cohort for age regression: central sphere grows and dims with age.

    Channel 0 is the sphere plus a smooth random field plus voxel noise,
    acquired through a per-sample gain and offset drawn from
    AGE_GAIN_RANGE / AGE_OFFSET_RANGE — the cohort spans a range of
    intensity calibrations, so features fit on it cannot lean on absolute
    brightness and stay usable on differently calibrated volumes.  What
    matters downstream is the RATIO the gain range spans (1.35/0.75 =
    1.8): a model trained on one calibration and evaluated on another sees
    a relative rescale, and that relative swing has to sit well inside the
    spread the features were fit across — in both directions.
    Channel 1 is the local 3x3x3 variance map of the acquired channel 0
    (the offset drops out of the variance; the gain enters squared).
    """
    if n < 1:
        raise DataError(f"need at least one sample, got n={n}")
    dims = _check_dims(dims)
    rng = np.random.default_rng([int(seed), AGE_STREAM])
    center = tuple((d - 1) / 2.0 for d in dims)
    half_min = min(dims) / 2.0
    samples = []
    for i in range(n):
        age = rng.uniform(0.0, AGE_MAX)
        fieldv = _smooth_field(rng, dims)
        noise = rng.normal(0.0, NOISE_SIGMA, size=dims)
        gain = rng.uniform(*AGE_GAIN_RANGE)
        offset = rng.uniform(*AGE_OFFSET_RANGE)
        radius = (0.15 + 0.25 * (age / AGE_MAX)) * half_min
        intensity = 1.0 - 0.5 * (age / AGE_MAX)
        raw = intensity * _soft_sphere(dims, center, radius) + fieldv + noise
        ch0 = gain * raw + offset
        ch1 = local_variance(ch0)
        volume = np.stack([ch0, ch1]).astype(np.float32)
        samples.append(Sample(f"age{i:05d}", volume, float(age), "NONE"))
    return Dataset("age", samples, provenance="synthetic")


def _healthy_reference(dims: tuple) -> np.ndarray:
    """Noise-free canonical brain: the standardization target for channel 1."""
    center = tuple((d - 1) / 2.0 for d in dims)
    radius = HIE_SPHERE_RADIUS_FRACTION * (min(dims) / 2.0)
    return HIE_SPHERE_INTENSITY * _soft_sphere(dims, center, radius)


def synth_hie_dataset(n: int, dims, seed: int, site_mix: float = 1.0,
                      site_shift=(1.0, 0.0)) -> Dataset:
    """Binary-outcome cohort: a dark lesion whose volume grows with severity.

    Labels alternate 0/1 so both classes count exactly n/2 and interleave
    across the site boundary.  Channel 0 is the jittered sphere, the lesion,
    a smooth field, and voxel noise; channel 1 is channel 0's signed
    deviation from the canonical healthy volume in noise-sigma units.  The
    first ceil(site_mix*n) samples are SITE_A; SITE_B volumes get
    x -> gain*x + offset after generation.  Sigma units make the deviation
    channel's dynamic range large against any plausible additive shift, so
    a site offset barely perturbs it — a gain rescales it and that is the
    robustness that actually gets exercised cross-site.

    The label lives in the lesion-to-carrier volume RATIO (threshold at
    vf=0.30): carrier size varies widely (±25% radius, roughly a 4.6x
    absolute-volume span), so raw lesion volume alone separates the classes
    poorly and a reliable classifier has to normalize lesion extent against
    the carrier it sits in.  Carrier brightness varies only mildly (±10%),
    so a cross-site intensity shift such as gain 1.2 lands outside the
    within-site spread and breaks any rule keyed to absolute brightness.
    """
    if n < 2 or n % 2:
        raise DataError(f"need an even sample count of at least 2, got n={n}")
    if not 0.0 <= site_mix <= 1.0:
        raise DataError(f"site_mix must lie in [0, 1], got {site_mix}")
    gain, offset = (float(site_shift[0]), float(site_shift[1]))
    dims = _check_dims(dims)
    rng = np.random.default_rng([int(seed), HIE_STREAM])
    center = np.array([(d - 1) / 2.0 for d in dims])
    half_min = min(dims) / 2.0
    reference = _healthy_reference(dims)
    n_site_a = int(np.ceil(site_mix * n))
    samples = []
    for i in range(n):
        label = i % 2
        severity = rng.uniform(0.5, 1.0) if label else rng.uniform(0.0, 0.5)
        shape_jitter = rng.uniform(-1.0, 1.0, size=2)
        fieldv = _smooth_field(rng, dims)
        lesion_jitter = rng.uniform(-1.0, 1.0, size=3)
        noise = rng.normal(0.0, NOISE_SIGMA, size=dims)

        radius = HIE_SPHERE_RADIUS_FRACTION * half_min * (
            1.0 + HIE_SIZE_JITTER * shape_jitter[0])
        intensity = HIE_SPHERE_INTENSITY * (
            1.0 + HIE_INTENSITY_JITTER * shape_jitter[1])
        ch0 = intensity * _soft_sphere(dims, tuple(center), radius)

        vf = HIE_LESION_VF_BASE + HIE_LESION_VF_SLOPE * severity
        lesion_radius = radius * vf ** (1.0 / 3.0)
        lesion_center = tuple(center + lesion_jitter * 0.3 * radius)
        ch0 = ch0 - HIE_LESION_CONTRAST * _soft_sphere(dims, lesion_center,
                                                       lesion_radius)
        ch0 = ch0 + fieldv + noise
        ch1 = (ch0 - reference) / NOISE_SIGMA
        volume = np.stack([ch0, ch1])
        site = "SITE_A" if i < n_site_a else "SITE_B"
        if site == "SITE_B":
            volume = gain * volume + offset
        samples.append(Sample(f"hie{i:05d}", volume.astype(np.float32),
                              int(label), site))
    return Dataset("outcome", samples, provenance="synthetic")
