"""Synthetic three-sequence lesion volumes with rule-table scores.

Each sample holds a T2W, ADC and DWI volume sharing one lesion. The lesion's
diameter and contrast determine a 1..5 score through a fixed rule table, and a
templated caption describes the lesion in the same terms as the guideline
registry used by the instruction templates.

On disk a dataset is::

    <root>/manifest.json
    <root>/{train,val,test}/<id>_<KIND>.vol   raw little-endian float32
    <root>/{train,val,test}/<id>_<KIND>.meta  JSON header for that volume
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, LoadError, ShapeError

RULE_TABLE_VERSION = "rt-1"
SPLITS = ("train", "val", "test")
TOY_SHAPE = (4, 32, 32)
FULL_SHAPE = (14, 224, 224)
MAX_DIAMETER = 24.0
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class SequenceKind(str, enum.Enum):
    T2W = "T2W"
    ADC = "ADC"
    DWI = "DWI"


KIND_ORDER = (SequenceKind.T2W, SequenceKind.ADC, SequenceKind.DWI)


def stage1_group(kind: SequenceKind) -> str:
    """Anatomical vs diffusion grouping used as the stage-1 answer."""
    return "T2W" if SequenceKind(kind) is SequenceKind.T2W else "ADC&DWI"


@dataclass(frozen=True)
class LesionAttributes:
    diameter_voxels: float
    contrast: float
    shape_irregularity: float
    center: tuple[int, int, int]

    def extents(self, shape: Sequence[int]) -> tuple[float, float, float]:
        """Per-axis radius. Slices are thick, so depth extent scales by D/H."""
        r = self.diameter_voxels / 2.0
        return (r * shape[0] / shape[1], r, r)

    def validate(self, shape: Sequence[int]) -> None:
        if not self.diameter_voxels >= 0:
            raise ConfigError(f"diameter must be non-negative, got {self.diameter_voxels}")
        if not (0.0 <= self.contrast <= 1.0 and 0.0 <= self.shape_irregularity <= 1.0):
            raise ConfigError("contrast and shape_irregularity must lie in [0, 1]")
        for c, r, n in zip(self.center, self.extents(shape), shape):
            # voxel-edge bounds: [-0.5, n - 0.5]
            if c - r < -0.5 - 1e-9 or c + r > n - 0.5 + 1e-9:
                raise ConfigError(f"lesion at {self.center} with diameter {self.diameter_voxels} leaves {tuple(shape)}")


@dataclass
class Volume:
    data: np.ndarray
    kind: SequenceKind
    attrs: LesionAttributes


@dataclass
class Sample:
    id: str
    volumes: dict[SequenceKind, Volume]
    score: int
    caption: str
    clean_score: int | None = None

    def stacked(self) -> np.ndarray:
        """Volumes as a (3, D, H, W) array in T2W, ADC, DWI order."""
        return np.stack([self.volumes[k].data for k in KIND_ORDER])

    @property
    def attrs(self) -> LesionAttributes:
        return self.volumes[SequenceKind.T2W].attrs


@dataclass
class DatasetManifest:
    seed: int
    n_train: int
    n_val: int
    n_test: int
    rule_table_version: str
    class_distribution: list[float]
    volume_shape: list[int] = field(default_factory=lambda: list(TOY_SHAPE))
    label_noise: float = 0.0
    ids: dict[str, list[str]] = field(default_factory=dict)

    def count(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


# ---------------------------------------------------------------- rule table

def score_from_attributes(attrs: LesionAttributes) -> int:
    d = attrs.diameter_voxels
    if d == 0:
        return 1
    if d < 5:
        return 2
    if d < 10:
        return 3
    if d < 15 or attrs.contrast < 0.3:
        return 4
    return 5


CRITERIA = {
    "none": "no focal lesion",
    "small": "lesion smaller than five voxels",
    "medium": "lesion from five to ten voxels",
    "large": "lesion from ten to fifteen voxels",
    "xlarge": "lesion of fifteen voxels or more",
    "faint": "with faint contrast",
    "clear": "with clear contrast",
}


def criterion_keys(score: int, attrs: LesionAttributes) -> tuple[str, ...]:
    """Rule-table criteria that justify ``score`` for ``attrs``."""
    if score == 1:
        return ("none",)
    if score == 2:
        return ("small",)
    if score == 3:
        return ("medium",)
    if score == 4:
        return ("large",) if attrs.diameter_voxels < 15 else ("xlarge", "faint")
    if score == 5:
        return ("xlarge", "clear")
    raise ValueError(f"score must be in 1..5, got {score}")


def criterion_phrase(score: int, attrs: LesionAttributes) -> str:
    return " ".join(CRITERIA[k] for k in criterion_keys(score, attrs))


def render_caption(score: int, attrs: LesionAttributes) -> str:
    """Guideline-style description of a lesion; pure function of its inputs."""
    if not 1 <= int(score) <= 5:
        raise ValueError(f"score must be in 1..5, got {score}")
    phrase = criterion_phrase(score, attrs)
    if score == 1:
        return f"{phrase} . the gland signal is homogeneous ."
    return (
        f"{phrase} . dark on t2w and adc , bright on dwi . "
        f"diameter {attrs.diameter_voxels:.1f} voxels , contrast {attrs.contrast:.2f} , "
        f"irregularity {attrs.shape_irregularity:.2f} ."
    )


# Every word a caption can contain. Numbers are tokenized digit by digit.
CAPTION_WORDS = sorted(
    {w for phrase in CRITERIA.values() for w in phrase.split()}
    | set("the gland signal is homogeneous dark on t2w and adc bright dwi diameter voxels contrast irregularity".split())
)


# ---------------------------------------------------------------- generation

def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _split_offset(seed: int, split: str) -> float:
    digest = hashlib.sha256(f"{seed}:{split}:offset".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2.0**64


def assigned_score(seed: int, split: str, index: int, class_distribution: Sequence[float]) -> int:
    """Score for the ``index``-th sample of a split.

    A golden-ratio sequence through the inverse CDF keeps class frequencies
    within a few samples of the requested distribution for any prefix.
    """
    u = (_split_offset(seed, split) + index * _GOLDEN) % 1.0
    cdf = np.cumsum(class_distribution)
    return int(min(np.searchsorted(cdf, u, side="right"), 4)) + 1


def _uniform_rounded(rng: np.random.Generator, lo: float, hi: float, step: float) -> float:
    """Uniform draw on the grid {lo, lo+step, ...} strictly below ``hi``."""
    n = int(round((hi - lo) / step))
    return round(lo + step * int(rng.integers(0, n)), 6)


def _center_range(r: float, n: int) -> tuple[int, int]:
    """Integer centers keeping a half-extent ``r`` inside voxel edges [-0.5, n - 0.5]."""
    return math.ceil(r - 0.5 - 1e-9), math.floor(n - 0.5 - r + 1e-9)


def max_diameter(shape: Sequence[int]) -> float:
    """Largest diameter on the 0.1 grid that fits the volume with an integer center."""
    d = round(min(MAX_DIAMETER, float(shape[1] - 1), float(shape[2] - 1)), 1)
    while d > 0:
        probe = LesionAttributes(d, 0.5, 0.0, (0, 0, 0))
        if all(lo <= hi for lo, hi in (_center_range(r, n) for r, n in zip(probe.extents(shape), shape))):
            return d
        d = round(d - 0.1, 1)
    return 0.0


def check_shape(shape: Sequence[int]) -> None:
    if len(shape) != 3 or any(int(s) < 1 for s in shape):
        raise ConfigError(f"volume_shape must be three positive ints, got {tuple(shape)}")
    if max_diameter(shape) < 15.0:
        raise ConfigError(f"volume {tuple(shape)} cannot hold a diameter-15 lesion, so scores 4 and 5 are impossible")


def sample_attributes(score: int, rng: np.random.Generator, shape: Sequence[int]) -> LesionAttributes:
    """Draw lesion attributes whose rule-table score is ``score``."""
    check_shape(shape)
    d_max = max_diameter(shape)
    if score == 1:
        return LesionAttributes(0.0, 0.0, 0.0, tuple(int(s) // 2 for s in shape))
    if score == 2:
        d, c = _uniform_rounded(rng, 2.0, 5.0, 0.1), _uniform_rounded(rng, 0.15, 1.0, 0.01)
    elif score == 3:
        d, c = _uniform_rounded(rng, 5.0, 10.0, 0.1), _uniform_rounded(rng, 0.15, 1.0, 0.01)
    elif score == 4:
        if rng.random() < 0.5:
            d, c = _uniform_rounded(rng, 10.0, 15.0, 0.1), _uniform_rounded(rng, 0.15, 1.0, 0.01)
        else:
            d, c = _uniform_rounded(rng, 15.0, d_max + 0.1, 0.1), _uniform_rounded(rng, 0.15, 0.30, 0.01)
    else:
        d, c = _uniform_rounded(rng, 15.0, d_max + 0.1, 0.1), _uniform_rounded(rng, 0.30, 1.01, 0.01)
    irr = _uniform_rounded(rng, 0.0, 1.01, 0.01)
    probe = LesionAttributes(d, c, irr, (0, 0, 0))
    center = []
    for r, n in zip(probe.extents(shape), shape):
        lo, hi = _center_range(r, n)
        center.append(int(rng.integers(lo, hi + 1)))
    attrs = LesionAttributes(d, c, irr, tuple(center))
    attrs.validate(shape)
    assert score_from_attributes(attrs) == score
    return attrs


# (base intensity, texture frequency range in cycles per volume, texture amplitude,
#  white-noise sigma, lesion intensity change per unit contrast)
_KIND_STYLE = {
    SequenceKind.T2W: (0.62, (1.0, 2.0), 0.08, 0.02, -0.45),
    SequenceKind.ADC: (0.38, (4.0, 6.0), 0.06, 0.04, -0.30),
    SequenceKind.DWI: (0.22, (10.0, 14.0), 0.04, 0.06, +0.60),
}


def lesion_mask(attrs: LesionAttributes, shape: Sequence[int], phase: float = 0.0) -> np.ndarray:
    """Soft ellipsoid mask with a three-lobed boundary wobble set by irregularity."""
    if attrs.diameter_voxels == 0:
        return np.zeros(shape, dtype=np.float32)
    z, y, x = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    rz, ry, rx = attrs.extents(shape)
    cz, cy, cx = attrs.center
    theta = np.arctan2(y - cy, x - cx)
    wobble = 1.0 + 0.3 * attrs.shape_irregularity * np.sin(3.0 * theta + phase)
    rho = np.sqrt(((z - cz) / max(rz, 0.5)) ** 2 + ((y - cy) / (ry * wobble)) ** 2 + ((x - cx) / (rx * wobble)) ** 2)
    return (1.0 / (1.0 + np.exp((rho - 1.0) / 0.08))).astype(np.float32)


def render_volume(kind: SequenceKind, attrs: LesionAttributes, shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    base, (f_lo, f_hi), amp, sigma, lesion_gain = _KIND_STYLE[kind]
    coords = np.meshgrid(*(np.arange(n, dtype=np.float64) / n for n in shape), indexing="ij")
    vol = np.full(shape, base, dtype=np.float64)
    for _ in range(3):
        direction = rng.normal(size=3)
        direction[0] *= 0.2
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(f_lo, f_hi)
        proj = sum(d * c for d, c in zip(direction, coords))
        vol += amp * np.sin(2.0 * np.pi * freq * proj + rng.uniform(0, 2 * np.pi))
    vol += rng.normal(0.0, sigma, size=shape)
    vol += lesion_gain * attrs.contrast * lesion_mask(attrs, shape, phase=rng.uniform(0, 2 * np.pi))
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def generate_sample(
    seed: int,
    split: str,
    index: int,
    class_distribution: Sequence[float],
    shape: Sequence[int] = TOY_SHAPE,
    label_noise: float = 0.0,
) -> Sample:
    """Regenerate one sample; depends only on (seed, split, index)."""
    sample_id = f"{split}-{index:05d}"
    rng = sample_rng(seed, sample_id)
    score = assigned_score(seed, split, index, class_distribution)
    attrs = sample_attributes(score, rng, shape)
    volumes = {k: Volume(render_volume(k, attrs, shape, rng), k, attrs) for k in KIND_ORDER}
    label = score
    if label_noise > 0 and rng.random() < label_noise:
        step = 1 if score == 1 else -1 if score == 5 else int(rng.choice([-1, 1]))
        label = score + step
    return Sample(sample_id, volumes, label, render_caption(score, attrs), clean_score=score)


def _check_distribution(class_distribution: Sequence[float] | None) -> list[float]:
    if class_distribution is None:
        return [0.2] * 5
    dist = [float(p) for p in class_distribution]
    if len(dist) != 5 or any(p < 0 or not math.isfinite(p) for p in dist) or abs(sum(dist) - 1.0) > 1e-9:
        raise ConfigError(f"class_distribution must be 5 non-negative probabilities summing to 1, got {dist}")
    return dist


def _meta_text(sample: Sample, kind: SequenceKind, payload: bytes) -> str:
    vol = sample.volumes[kind]
    meta = {
        "id": sample.id,
        "kind": kind.value,
        "shape": list(vol.data.shape),
        "dtype": "<f4",
        "attrs": {**asdict(vol.attrs), "center": list(vol.attrs.center)},
        "score": sample.score,
        "clean_score": sample.clean_score,
        "caption": sample.caption,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    return json.dumps(meta, indent=1, sort_keys=True) + "\n"


def write_sample(sample: Sample, split_dir: Path) -> None:
    for kind in KIND_ORDER:
        payload = np.ascontiguousarray(sample.volumes[kind].data, dtype="<f4").tobytes()
        (split_dir / f"{sample.id}_{kind.value}.vol").write_bytes(payload)
        (split_dir / f"{sample.id}_{kind.value}.meta").write_text(_meta_text(sample, kind, payload))


def generate_dataset(
    out_dir: str | Path,
    seed: int = 7,
    n_train: int = 683,
    n_val: int = 79,
    n_test: int = 293,
    class_distribution: Sequence[float] | None = None,
    volume_shape: Sequence[int] = TOY_SHAPE,
    label_noise: float = 0.0,
) -> DatasetManifest:
    """Write a dataset under ``out_dir`` and return its manifest.

    The default test size matches the 293-lesion external cohort.
    """
    dist = _check_distribution(class_distribution)
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if any(int(n) < 0 for n in counts.values()):
        raise ConfigError(f"split sizes must be non-negative, got {counts}")
    if not 0.0 <= label_noise <= 1.0:
        raise ConfigError(f"label_noise must lie in [0, 1], got {label_noise}")
    check_shape(volume_shape)
    shape = tuple(int(s) for s in volume_shape)

    root = Path(out_dir)
    manifest = DatasetManifest(
        seed=int(seed), n_train=int(n_train), n_val=int(n_val), n_test=int(n_test),
        rule_table_version=RULE_TABLE_VERSION, class_distribution=dist,
        volume_shape=list(shape), label_noise=float(label_noise),
    )
    try:
        root.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            split_dir = root / split
            split_dir.mkdir(exist_ok=True)
            ids = []
            for i in range(counts[split]):
                sample = generate_sample(seed, split, i, dist, shape, label_noise)
                write_sample(sample, split_dir)
                ids.append(sample.id)
            manifest.ids[split] = ids
        (root / "manifest.json").write_text(manifest.to_json())
    except OSError as exc:
        raise OSError(f"cannot write dataset under {root}: {exc}") from exc
    return manifest


# ---------------------------------------------------------------- loading

def read_manifest(path: str | Path) -> DatasetManifest:
    root = Path(path)
    try:
        manifest = DatasetManifest.from_json((root / "manifest.json").read_text())
    except (OSError, ValueError, TypeError) as exc:
        raise LoadError("manifest.json", str(exc)) from exc
    for split in SPLITS:
        ids = manifest.ids.get(split, [])
        if len(ids) != manifest.count(split):
            raise LoadError("manifest.json", f"{split} lists {len(ids)} ids but declares {manifest.count(split)}")
        split_dir = root / split
        n_files = len(list(split_dir.glob("*.vol"))) if split_dir.exists() else 0
        if n_files != 3 * len(ids):
            raise LoadError("manifest.json", f"{split} has {n_files} volume files, expected {3 * len(ids)}")
    return manifest


def resize_volume(data: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Trilinear resample to ``shape``."""
    import torch
    import torch.nn.functional as F

    if tuple(data.shape) == tuple(shape):
        return data
    t = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=tuple(int(s) for s in shape), mode="trilinear", align_corners=False)
    return out[0, 0].numpy().clip(0.0, 1.0)


def _read_volume(split_dir: Path, sample_id: str, kind: SequenceKind) -> tuple[dict, np.ndarray]:
    meta_path = split_dir / f"{sample_id}_{kind.value}.meta"
    vol_path = split_dir / f"{sample_id}_{kind.value}.vol"
    try:
        meta = json.loads(meta_path.read_text())
        payload = vol_path.read_bytes()
    except (OSError, ValueError) as exc:
        raise LoadError(sample_id, f"{kind.value}: {exc}") from exc
    if hashlib.sha256(payload).hexdigest() != meta.get("sha256"):
        raise LoadError(sample_id, f"{kind.value} volume checksum mismatch")
    shape = tuple(meta["shape"])
    if len(payload) != 4 * int(np.prod(shape)):
        raise LoadError(sample_id, f"{kind.value} volume has {len(payload)} bytes for shape {shape}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise LoadError(sample_id, f"{kind.value} volume has non-finite values")
    return meta, data


def load_dataset(path: str | Path, split: str, canonical_shape: Sequence[int] | None = None) -> list[Sample]:
    """Load one split in manifest order, resampling volumes to ``canonical_shape``."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    root = Path(path)
    manifest = read_manifest(root)
    shape = tuple(canonical_shape or manifest.volume_shape)
    samples = []
    for sample_id in manifest.ids[split]:
        volumes = {}
        meta = None
        for kind in KIND_ORDER:
            meta, data = _read_volume(root / split, sample_id, kind)
            a = meta["attrs"]
            attrs = LesionAttributes(a["diameter_voxels"], a["contrast"], a["shape_irregularity"], tuple(a["center"]))
            volumes[kind] = Volume(resize_volume(data, shape), kind, attrs)
        samples.append(Sample(sample_id, volumes, int(meta["score"]), meta["caption"], meta.get("clean_score")))
    return samples


def volume_from_array(data: np.ndarray, kind: SequenceKind = SequenceKind.T2W) -> Volume:
    """Wrap a bare array as a lesion-free Volume (testing and embedding helpers)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 3:
        raise ShapeError(f"volume must be 3D, got shape {data.shape}")
    return Volume(data, kind, LesionAttributes(0.0, 0.0, 0.0, tuple(s // 2 for s in data.shape)))
