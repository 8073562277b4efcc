"""Synthetic scanner-shift data: a desk-scale stand-in for paired
high-quality (within-distribution) and lower-quality (out-of-distribution)
structural scans.

Each sample is a smooth random background plus a bright ellipsoidal tissue
structure containing a dark cavity; the disease class enlarges the cavity.
OOD samples additionally get blurred, rescaled in intensity, and hit with
stronger additive noise (lower signal-to-noise ratio) before the per-sample
z-normalization that both domains receive.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DegenerateInputError, FormatError

DATASET_MAGIC = b"SGDATA1\x00"
DATASET_VERSION = 1
DOMAINS = ("WD", "OOD")

DEFAULT_EXTENTS = {2: (30, 36), 3: (33, 46, 48)}

# generator texture constants (not worth configuring)
_BG_SMOOTH = 2.5
_BG_AMP = 0.25
_STRUCTURE_AMP = 1.2
_STRUCTURE_RADIUS_FRAC = 0.30
_EDGE_SOFTNESS = 1.2
_CAVITY_SOFTNESS = 0.8
_CONTROL_CAVITY_RATIO = 0.5
_CENTER_JITTER = 1.5


@dataclass
class VolumeSample:
    voxels: np.ndarray
    label: int              # 0 control, 1 disease
    domain: str             # "WD" or "OOD"
    subject_id: int


class Dataset:
    def __init__(self, samples: list[VolumeSample], extents: tuple[int, ...]):
        self.samples = list(samples)
        self.extents = tuple(extents)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> VolumeSample:
        return self.samples[i]

    @property
    def rank(self) -> int:
        return len(self.extents)

    def stacked_voxels(self) -> np.ndarray:
        """(n, 1, *extents) float32 batch for the model."""
        return np.stack([s.voxels for s in self.samples])[:, None, ...]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subject_ids(self) -> np.ndarray:
        return np.array([s.subject_id for s in self.samples], dtype=np.int64)

    def by_domain(self, domain: str) -> "Dataset":
        return Dataset([s for s in self.samples if s.domain == domain], self.extents)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.extents)

    def merged_with(self, other: "Dataset") -> "Dataset":
        if other.extents != self.extents:
            raise ConfigError(f"cannot merge datasets with extents {self.extents} vs {other.extents}")
        return Dataset(self.samples + other.samples, self.extents)

    def prevalence(self) -> float:
        return float(self.labels().mean()) if self.samples else 0.0


@dataclass
class SyntheticConfig:
    spatial_rank: int = 2
    extents: tuple[int, ...] | None = None
    n_wd: int = 200
    n_ood: int = 200
    prevalence_wd: float = 0.35
    prevalence_ood: float = 0.55
    atrophy_radius_mean: float = 5.5
    atrophy_radius_std: float = 0.9
    lesion_contrast: float = 1.0
    wd_noise_sigma: float = 0.06
    ood_noise_sigma: float = 0.30
    ood_gain: float = 0.85
    ood_blur_sigma: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.extents is None:
            self.extents = DEFAULT_EXTENTS.get(self.spatial_rank)
        if self.extents is not None:
            self.extents = tuple(int(e) for e in self.extents)
        self.validate()

    def validate(self) -> None:
        if self.spatial_rank not in (2, 3):
            raise ConfigError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.extents is None or len(self.extents) != self.spatial_rank:
            raise ConfigError(f"extents {self.extents} do not match rank {self.spatial_rank}")
        if self.n_wd < 1 or self.n_ood < 0:
            raise ConfigError("need at least one WD subject and a nonnegative OOD count")
        for p in (self.prevalence_wd, self.prevalence_ood):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"prevalence {p} outside [0, 1]")
        if self.ood_noise_sigma < self.wd_noise_sigma:
            raise ConfigError("ood_noise_sigma must be >= wd_noise_sigma (OOD has lower SNR)")
        if self.atrophy_radius_mean <= 0 or self.atrophy_radius_std < 0:
            raise ConfigError("atrophy radius parameters must be positive")

    def to_dict(self) -> dict:
        return {
            "spatial_rank": self.spatial_rank, "extents": list(self.extents),
            "n_wd": self.n_wd, "n_ood": self.n_ood,
            "prevalence_wd": self.prevalence_wd, "prevalence_ood": self.prevalence_ood,
            "atrophy_radius_mean": self.atrophy_radius_mean,
            "atrophy_radius_std": self.atrophy_radius_std,
            "lesion_contrast": self.lesion_contrast,
            "wd_noise_sigma": self.wd_noise_sigma, "ood_noise_sigma": self.ood_noise_sigma,
            "ood_gain": self.ood_gain, "ood_blur_sigma": self.ood_blur_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "extents" in d and d["extents"] is not None:
            d["extents"] = tuple(d["extents"])
        return cls(**d)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _soft_ellipsoid(grids: list[np.ndarray], center: np.ndarray, radii: np.ndarray,
                    softness: float) -> np.ndarray:
    """Smooth [0, 1] mask of an axis-aligned ellipsoid."""
    d2 = np.zeros_like(grids[0])
    for g, c, r in zip(grids, center, radii):
        d2 = d2 + ((g - c) / r) ** 2
    d = np.sqrt(d2)
    mean_r = float(np.mean(radii))
    return 1.0 / (1.0 + np.exp((d - 1.0) * mean_r / softness))


def _clean_sample(rng: np.random.Generator, extents: tuple[int, ...], label: int,
                  cfg: SyntheticConfig) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(e, dtype=np.float64) for e in extents], indexing="ij")
    background = gaussian_filter(rng.standard_normal(extents), _BG_SMOOTH) * _BG_AMP
    img = 1.0 + background

    center = np.array([e / 2.0 for e in extents])
    center = center + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER, size=len(extents))
    radii = np.array([e * _STRUCTURE_RADIUS_FRAC for e in extents])
    radii = radii * rng.uniform(0.92, 1.08, size=len(extents))
    img += _STRUCTURE_AMP * _soft_ellipsoid(grids, center, radii, _EDGE_SOFTNESS)

    mean_r = cfg.atrophy_radius_mean * (1.0 if label == 1 else _CONTROL_CAVITY_RATIO)
    cavity_r = max(rng.normal(mean_r, cfg.atrophy_radius_std), 0.8)
    cavity_center = center + rng.uniform(-1.0, 1.0, size=len(extents))
    img -= cfg.lesion_contrast * _soft_ellipsoid(
        grids, cavity_center, np.full(len(extents), cavity_r), _CAVITY_SOFTNESS)
    return img


def _degrade_ood(img: np.ndarray, rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    out = gaussian_filter(img, cfg.ood_blur_sigma) if cfg.ood_blur_sigma > 0 else img
    out = out * cfg.ood_gain
    return out + rng.normal(0.0, cfg.ood_noise_sigma, size=img.shape)


def _assign_labels(rng: np.random.Generator, n: int, prevalence: float) -> np.ndarray:
    n_pos = int(round(n * prevalence))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_pos] = 1
    return labels[rng.permutation(n)]


def generate(cfg: SyntheticConfig) -> Dataset:
    """Deterministic synthetic dataset; per-sample generators are derived from
    (seed, subject_id), so samples are order-independent."""
    cfg.validate()
    extents = cfg.extents
    label_rng_wd = np.random.default_rng((cfg.seed, 0xD0))
    label_rng_ood = np.random.default_rng((cfg.seed, 0xD1))
    labels_wd = _assign_labels(label_rng_wd, cfg.n_wd, cfg.prevalence_wd)
    labels_ood = _assign_labels(label_rng_ood, cfg.n_ood, cfg.prevalence_ood)

    samples: list[VolumeSample] = []
    for domain, labels, offset in (("WD", labels_wd, 0), ("OOD", labels_ood, cfg.n_wd)):
        for i, label in enumerate(labels):
            subject = offset + i
            rng = np.random.default_rng((cfg.seed, subject))
            img = _clean_sample(rng, extents, int(label), cfg)
            if domain == "OOD":
                img = _degrade_ood(img, rng, cfg)
            else:
                img = img + rng.normal(0.0, cfg.wd_noise_sigma, size=img.shape)
            samples.append(VolumeSample(
                voxels=normalize_array(img).astype(np.float32),
                label=int(label), domain=domain, subject_id=subject))
    return Dataset(samples, extents)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize_array(v: np.ndarray) -> np.ndarray:
    """(v - mean) / std, computed in float64."""
    v64 = np.asarray(v, dtype=np.float64)
    std = v64.std()
    if std == 0.0 or not np.isfinite(std):
        raise DegenerateInputError("cannot z-normalize a constant (or non-finite) volume")
    return (v64 - v64.mean()) / std


def normalize(sample: VolumeSample) -> VolumeSample:
    return VolumeSample(voxels=normalize_array(sample.voxels).astype(sample.voxels.dtype),
                        label=sample.label, domain=sample.domain,
                        subject_id=sample.subject_id)


def crop_center(voxels: np.ndarray, extents: tuple[int, ...]) -> np.ndarray:
    """Extract a centered sub-volume (for ingesting larger external arrays)."""
    if voxels.ndim != len(extents):
        raise ConfigError(f"crop rank {len(extents)} does not match volume rank {voxels.ndim}")
    slices = []
    for have, want in zip(voxels.shape, extents):
        if want > have:
            raise ConfigError(f"crop extent {want} exceeds volume extent {have}")
        start = (have - want) // 2
        slices.append(slice(start, start + want))
    return voxels[tuple(slices)].copy()


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    """magic, version u32, length-prefixed JSON header, then per sample:
    u32 subject_id, u8 label, u8 domain, little-endian f32 voxels."""
    header = json.dumps({
        "rank": ds.rank,
        "extents": list(ds.extents),
        "count": len(ds),
        "domains": {d: sum(1 for s in ds.samples if s.domain == d) for d in DOMAINS},
        "prevalence": {d: (float(np.mean([s.label for s in ds.samples if s.domain == d]))
                           if any(s.domain == d for s in ds.samples) else None)
                       for d in DOMAINS},
    }, sort_keys=True).encode("utf-8")
    buf = bytearray()
    buf += DATASET_MAGIC
    buf += struct.pack("<I", DATASET_VERSION)
    buf += struct.pack("<I", len(header))
    buf += header
    for s in ds.samples:
        if s.voxels.shape != ds.extents:
            raise ConfigError(f"sample {s.subject_id} has extents {s.voxels.shape}, "
                              f"dataset dictates {ds.extents}")
        buf += struct.pack("<IBB", s.subject_id, s.label, DOMAINS.index(s.domain))
        buf += np.ascontiguousarray(s.voxels, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("dataset file truncated")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    version = struct.unpack("<I", take(4))[0]
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    try:
        header = json.loads(take(struct.unpack("<I", take(4))[0]).decode("utf-8"))
        extents = tuple(int(e) for e in header["extents"])
        count = int(header["count"])
    except (KeyError, ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"bad dataset header: {e}") from e
    if len(extents) != int(header.get("rank", len(extents))):
        raise FormatError("header rank does not match extents")
    voxel_bytes = 4 * int(np.prod(extents))
    samples = []
    for _ in range(count):
        subject, label, dom = struct.unpack("<IBB", take(6))
        if dom >= len(DOMAINS) or label not in (0, 1):
            raise FormatError(f"corrupt sample record (label={label}, domain={dom})")
        vox = np.frombuffer(take(voxel_bytes), dtype="<f4").reshape(extents)
        samples.append(VolumeSample(voxels=vox.astype(np.float32), label=int(label),
                                    domain=DOMAINS[dom], subject_id=int(subject)))
    if pos != len(blob):
        raise FormatError("trailing bytes after final sample record")
    return Dataset(samples, extents)


# ---------------------------------------------------------------------------
# stratified splitting
# ---------------------------------------------------------------------------

def stratified_split(ds: Dataset, fractions, seed: int) -> list[Dataset]:
    """Label-stratified, subject-level partitions.

    Per label group, quotas follow the largest-remainder rule, which keeps
    every partition within one sample of exact stratification.
    """
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f <= 0 for f in fractions):
        raise ConfigError(f"fractions must be positive and sum to 1, got {fractions}")
    k = len(fractions)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in range(k)]
    for label in (0, 1):
        idx = [i for i, s in enumerate(ds.samples) if s.label == label]
        if not idx:
            continue
        idx = list(np.array(idx)[rng.permutation(len(idx))])
        quotas = [f * len(idx) for f in fractions]
        base = [int(np.floor(q)) for q in quotas]
        remainder = len(idx) - sum(base)
        order = sorted(range(k), key=lambda p: (-(quotas[p] - base[p]), p))
        for p in order[:remainder]:
            base[p] += 1
        at = 0
        for p in range(k):
            parts[p].extend(idx[at:at + base[p]])
            at += base[p]
    out = []
    for p, chosen in enumerate(parts):
        if not chosen:
            raise ConfigError(f"partition {p} (fraction {fractions[p]}) would be empty")
        out.append(ds.subset(sorted(chosen)))
    return out
