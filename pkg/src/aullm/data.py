"""Clip/label types, manifest I/O, the synthetic clip generator and LOSO splits.

Clips are stored one per file as little-endian float32 in T, C, H, W row-major
order under ``clips/<clip_id>.f32``; ``manifest.json`` next to them records the
shape, labels and subject/domain metadata of every sample.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ClipNotFoundError,
    ConfigError,
    CorruptionError,
    InputError,
    ManifestVersionError,
    ShapeError,
)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
CLIP_DTYPE = np.dtype("<f4")

DEFAULT_AU_NAMES = ("AU1", "AU2", "AU4", "AU7", "AU12", "AU14", "AU15", "AU17")

# Rough facial layout on a 32x32 crop: brows on top, mouth corners at the bottom.
DEFAULT_REGION_CENTERS = {
    "AU1": (6, 10),
    "AU2": (6, 22),
    "AU4": (12, 16),
    "AU7": (13, 6),
    "AU12": (21, 8),
    "AU14": (20, 25),
    "AU15": (29, 14),
    "AU17": (29, 23),
}


@dataclass
class MicroClip:
    clip_id: str
    subject_id: str
    domain_id: str
    frames: np.ndarray  # T x C x H x W, float32 in [0, 1]

    def __post_init__(self):
        self.validate()

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.frames.shape)

    def validate(self):
        if self.frames.ndim != 4:
            raise ShapeError(f"clip {self.clip_id}: expected T x C x H x W, got shape {self.frames.shape}")
        t, c, h, w = self.frames.shape
        if t < 2 or h < 8 or w < 8 or c not in (1, 3):
            raise ShapeError(f"clip {self.clip_id}: invalid shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise InputError(f"clip {self.clip_id}: non-finite entries")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise InputError(f"clip {self.clip_id}: entries outside [0, 1]")


@dataclass
class AULabelVector:
    values: np.ndarray
    au_names: Tuple[str, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        self.au_names = tuple(self.au_names)
        if len(set(self.au_names)) != len(self.au_names):
            raise ValueError("au_names must be unique")
        if self.values.shape != (len(self.au_names),):
            raise ShapeError(f"label length {self.values.shape} does not match {len(self.au_names)} AU names")
        if not np.isin(self.values, (0, 1)).all():
            raise ValueError("label entries must be 0 or 1")

    @property
    def active(self) -> List[str]:
        return [name for name, v in zip(self.au_names, self.values) if v]


@dataclass
class SampleRecord:
    clip_id: str
    subject_id: str
    domain_id: str
    labels: Tuple[int, ...]
    path: str
    shape: Tuple[int, int, int, int]

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "subject_id": self.subject_id,
            "domain_id": self.domain_id,
            "labels": list(self.labels),
            "path": self.path,
            "shape": list(self.shape),
        }


@dataclass
class DatasetManifest:
    version: int
    au_names: Tuple[str, ...]
    samples: List[SampleRecord]
    metadata: dict = field(default_factory=dict)
    root: Optional[Path] = None

    def __post_init__(self):
        self.au_names = tuple(self.au_names)
        if len(set(self.au_names)) != len(self.au_names):
            raise ValueError("au_names must be unique")
        seen = set()
        for s in self.samples:
            if not s.subject_id:
                raise ValueError(f"sample {s.clip_id} has an empty subject_id")
            if len(s.labels) != len(self.au_names):
                raise ShapeError(f"sample {s.clip_id} has {len(s.labels)} labels for {len(self.au_names)} AUs")
            if s.clip_id in seen:
                raise ValueError(f"duplicate clip_id {s.clip_id}")
            seen.add(s.clip_id)
        self._index = {s.clip_id: i for i, s in enumerate(self.samples)}

    @property
    def M(self) -> int:
        return len(self.samples)

    @property
    def clip_ids(self) -> List[str]:
        return [s.clip_id for s in self.samples]

    def record(self, clip_id: str) -> SampleRecord:
        try:
            return self.samples[self._index[clip_id]]
        except KeyError:
            raise ClipNotFoundError(f"unknown clip_id {clip_id!r}") from None

    def index_of(self, clip_id: str) -> int:
        self.record(clip_id)
        return self._index[clip_id]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "au_names": list(self.au_names),
            "num_samples": self.M,
            "metadata": self.metadata,
            "samples": [s.to_json() for s in self.samples],
        }

    def labels_matrix(self) -> np.ndarray:
        return np.array([s.labels for s in self.samples], dtype=np.int64).reshape(self.M, len(self.au_names))


@dataclass
class SyntheticConfig:
    seed: int = 7
    num_subjects: int = 6
    clips_per_subject: int = 40
    au_names: Tuple[str, ...] = DEFAULT_AU_NAMES
    T: int = 16
    C: int = 1
    H: int = 32
    W: int = 32
    au_region_centers: Dict[str, Tuple[int, int]] = field(default_factory=lambda: dict(DEFAULT_REGION_CENTERS))
    bump_amplitude: float = 0.08
    bump_sigma: float = 2.0
    base_rate: float = 0.35
    coupling_gain: float = 3.0
    gibbs_sweeps: int = 50
    co_occurrence_rules: List[Tuple[str, str, float]] = field(default_factory=list)
    background: float = 0.5
    identity_offset_scale: float = 0.1
    domain_styles: Dict[str, Tuple[float, float]] = field(default_factory=lambda: {"A": (0.0, 0.01)})

    @property
    def N(self) -> int:
        return len(self.au_names)

    @property
    def bump_radius(self) -> float:
        return 2.0 * self.bump_sigma

    def validate(self):
        if self.num_subjects < 1:
            raise ConfigError("num_subjects must be at least 1")
        if self.clips_per_subject < 1:
            raise ConfigError("clips_per_subject must be at least 1")
        if self.bump_amplitude <= 0:
            raise ConfigError("bump_amplitude must be positive")
        if not 0.0 < self.base_rate < 1.0:
            raise ConfigError("base_rate must lie in (0, 1)")
        if self.T < 2 or self.H < 8 or self.W < 8 or self.C not in (1, 3):
            raise ConfigError(f"invalid clip shape {(self.T, self.C, self.H, self.W)}")
        if not self.domain_styles:
            raise ConfigError("at least one domain style is required")
        for dom, (_, sigma) in self.domain_styles.items():
            if sigma < 0:
                raise ConfigError(f"domain {dom}: noise sigma must be >= 0")
        for name in self.au_names:
            if name not in self.au_region_centers:
                raise ConfigError(f"no region center for {name}")
            r, c = self.au_region_centers[name]
            if not (0 <= r < self.H and 0 <= c < self.W):
                raise ConfigError(f"region center of {name} lies outside the {self.H}x{self.W} frame")
        names = list(self.au_names)
        min_gap = 2.0 * self.bump_radius
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                ra, ca = self.au_region_centers[a]
                rb, cb = self.au_region_centers[b]
                if math.hypot(ra - rb, ca - cb) < min_gap:
                    raise ConfigError(
                        f"region centers of {a} and {b} are closer than 2x bump radius ({min_gap:g} px)"
                    )
        for a, b, s in self.co_occurrence_rules:
            if a not in names or b not in names:
                raise ConfigError(f"rule ({a}, {b}) references an unknown AU")
            if a == b:
                raise ConfigError(f"self rule on {a}")
            if not -1.0 <= s <= 1.0:
                raise ConfigError(f"rule strength {s} outside [-1, 1]")


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    clips: Dict[str, np.ndarray]
    clamped: int


def coupling_matrix(config: SyntheticConfig) -> np.ndarray:
    index = {name: i for i, name in enumerate(config.au_names)}
    J = np.zeros((config.N, config.N))
    for a, b, s in config.co_occurrence_rules:
        J[index[a], index[b]] = J[index[b], index[a]] = s
    return J


def sample_labels(config: SyntheticConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` label vectors from the pairwise-potential Gibbs sampler.

    Every vector is its own chain: random start from the base rate, then
    ``gibbs_sweeps`` full sweeps; the final state is kept. All chains run
    vectorized.
    """
    J = coupling_matrix(config) * config.coupling_gain
    bias = math.log(config.base_rate / (1.0 - config.base_rate))
    y = (rng.random((n, config.N)) < config.base_rate).astype(np.float64)
    for _ in range(config.gibbs_sweeps):
        for k in range(config.N):
            field_k = bias + y @ J[:, k]
            p = 1.0 / (1.0 + np.exp(-field_k))
            y[:, k] = rng.random(n) < p
    return y.astype(np.int64)


def temporal_window(T: int) -> np.ndarray:
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * (np.arange(T) + 1) / (T + 1)))
    return w / w.max()


def bump_template(config: SyntheticConfig, au: str) -> np.ndarray:
    """Unit-amplitude T x H x W space-time bump of one AU."""
    r0, c0 = config.au_region_centers[au]
    rr, cc = np.meshgrid(np.arange(config.H), np.arange(config.W), indexing="ij")
    spatial = np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2.0 * config.bump_sigma ** 2))
    return temporal_window(config.T)[:, None, None] * spatial[None]


def _identity_offset(config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(config.H) / config.H, np.arange(config.W) / config.W, indexing="ij")
    field_ = np.zeros((config.H, config.W))
    for _ in range(3):
        fr, fc = rng.uniform(0.25, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * (fr * rr + fc * cc) + phase)
    return config.identity_offset_scale * field_ / 3.0


def generate_synthetic(config: SyntheticConfig) -> SyntheticDataset:
    """Render a planted-rule synthetic micro-expression dataset in memory."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    M = config.num_subjects * config.clips_per_subject
    labels = sample_labels(config, M, rng)
    templates = np.stack([bump_template(config, au) for au in config.au_names])
    domains = sorted(config.domain_styles)

    samples, clips, clamped = [], {}, 0
    m = 0
    for s in range(config.num_subjects):
        subject = f"s{s + 1:02d}"
        domain = domains[s % len(domains)]
        brightness, sigma = config.domain_styles[domain]
        identity = _identity_offset(config, rng)
        for j in range(config.clips_per_subject):
            clip_id = f"{subject}_c{j:03d}"
            y = labels[m]
            signal = config.bump_amplitude * np.tensordot(y.astype(np.float64), templates, axes=1)
            base = config.background + brightness + identity[None] + signal
            frames = np.repeat(base[:, None], config.C, axis=1)
            if sigma > 0:
                frames = frames + rng.normal(0.0, sigma, size=frames.shape)
            clamped += int(np.count_nonzero((frames < 0.0) | (frames > 1.0)))
            frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
            clips[clip_id] = frames
            samples.append(
                SampleRecord(
                    clip_id=clip_id,
                    subject_id=subject,
                    domain_id=domain,
                    labels=tuple(int(v) for v in y),
                    path=f"clips/{clip_id}.f32",
                    shape=frames.shape,
                )
            )
            m += 1

    metadata = {
        "generator": "synthetic",
        "seed": config.seed,
        "clamped_entries": clamped,
        "bump_amplitude": config.bump_amplitude,
    }
    manifest = DatasetManifest(MANIFEST_VERSION, config.au_names, samples, metadata)
    return SyntheticDataset(manifest, clips, clamped)


def save_dataset(dataset: SyntheticDataset, root) -> Path:
    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    for record in dataset.manifest.samples:
        dataset.clips[record.clip_id].astype(CLIP_DTYPE).tofile(root / record.path)
    path = root / MANIFEST_NAME
    save_manifest(dataset.manifest, path)
    dataset.manifest.root = root
    return path


def save_manifest(manifest: DatasetManifest, path) -> None:
    text = json.dumps(manifest.to_json(), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    raw = json.loads(path.read_text(encoding="utf-8"))
    version = raw.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestVersionError(f"manifest version {version!r} is not supported (expected {MANIFEST_VERSION})")
    try:
        samples = [
            SampleRecord(
                clip_id=s["clip_id"],
                subject_id=s["subject_id"],
                domain_id=s["domain_id"],
                labels=tuple(int(v) for v in s["labels"]),
                path=s["path"],
                shape=tuple(int(v) for v in s["shape"]),
            )
            for s in raw["samples"]
        ]
        manifest = DatasetManifest(version, tuple(raw["au_names"]), samples, raw.get("metadata", {}), path.parent)
    except KeyError as exc:
        raise CorruptionError(f"manifest is missing field {exc}") from None
    declared = raw.get("num_samples", manifest.M)
    if declared != manifest.M:
        raise CorruptionError(f"manifest declares {declared} samples but lists {manifest.M}")
    return manifest


def read_clip_array(manifest: DatasetManifest, clip_id: str) -> np.ndarray:
    record = manifest.record(clip_id)
    if manifest.root is None:
        raise ValueError("manifest has no root directory to read clips from")
    path = Path(manifest.root) / record.path
    raw = path.read_bytes()
    expected = int(np.prod(record.shape)) * CLIP_DTYPE.itemsize
    if len(raw) != expected:
        raise CorruptionError(
            f"clip {clip_id}: {len(raw)} bytes on disk, shape {record.shape} requires {expected}"
        )
    return np.frombuffer(raw, dtype=CLIP_DTYPE).reshape(record.shape).astype(np.float32)


def load_clip(manifest: DatasetManifest, clip_id: str) -> Tuple[MicroClip, AULabelVector]:
    record = manifest.record(clip_id)
    frames = read_clip_array(manifest, clip_id)
    clip = MicroClip(record.clip_id, record.subject_id, record.domain_id, frames)
    return clip, AULabelVector(np.array(record.labels), manifest.au_names)


def export_labels_csv(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "subject_id", "domain_id", *manifest.au_names])
        for s in manifest.samples:
            writer.writerow([s.clip_id, s.subject_id, s.domain_id, *s.labels])


def loso_folds(manifest: DatasetManifest) -> List[Tuple[List[str], List[str]]]:
    """One (train_ids, test_ids) fold per subject, in first-appearance order."""
    subjects: List[str] = []
    for s in manifest.samples:
        if s.subject_id not in subjects:
            subjects.append(s.subject_id)
    if len(subjects) < 2:
        raise ValueError("LOSO needs at least two distinct subjects")
    folds = []
    for subject in subjects:
        test = [s.clip_id for s in manifest.samples if s.subject_id == subject]
        train = [s.clip_id for s in manifest.samples if s.subject_id != subject]
        folds.append((train, test))
    return folds


class ClipDataset:
    """All clips of a manifest held in memory as one M x T x C x H x W array."""

    def __init__(self, manifest: DatasetManifest, frames: np.ndarray):
        self.manifest = manifest
        self.frames = frames
        self.labels = manifest.labels_matrix().astype(np.float32)
        self.au_names = manifest.au_names

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "ClipDataset":
        frames = np.stack([read_clip_array(manifest, cid) for cid in manifest.clip_ids])
        return cls(manifest, frames)

    @classmethod
    def from_synthetic(cls, dataset: SyntheticDataset) -> "ClipDataset":
        frames = np.stack([dataset.clips[cid] for cid in dataset.manifest.clip_ids])
        return cls(dataset.manifest, frames)

    def __len__(self) -> int:
        return self.manifest.M

    def indices(self, clip_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.manifest.index_of(cid) for cid in clip_ids], dtype=np.int64)

    def clip_frames(self, idx: np.ndarray) -> np.ndarray:
        return self.frames[idx]

    def clip_labels(self, idx: np.ndarray) -> np.ndarray:
        return self.labels[idx]

    def subset(self, domain_ids: Sequence[str]) -> "ClipDataset":
        """Clips whose domain is in ``domain_ids``, manifest order preserved."""
        keep = [i for i, s in enumerate(self.manifest.samples) if s.domain_id in set(domain_ids)]
        if not keep:
            raise ValueError(f"no samples in domains {list(domain_ids)}")
        m = self.manifest
        sub = DatasetManifest(m.version, m.au_names, [m.samples[i] for i in keep], dict(m.metadata), m.root)
        return ClipDataset(sub, self.frames[keep])


def template_match_labels(config: SyntheticConfig, frames: np.ndarray) -> np.ndarray:
    """Recover planted labels by matched filtering against each AU's bump.

    Subtracting the temporal mean cancels every static component (background,
    identity offset, brightness), so only the planted transients and noise
    remain. Threshold sits halfway between the absent and present responses.
    """
    frames = np.asarray(frames, dtype=np.float64).mean(axis=2)  # M x T x H x W
    centered = frames - frames.mean(axis=1, keepdims=True)
    scores = []
    for au in config.au_names:
        tmpl = bump_template(config, au)
        tmpl = tmpl - tmpl.mean(axis=0, keepdims=True)
        energy = float((tmpl ** 2).sum())
        scores.append(np.tensordot(centered, tmpl, axes=3) / (config.bump_amplitude * energy))
    return (np.stack(scores, axis=1) >= 0.5).astype(np.int64)
