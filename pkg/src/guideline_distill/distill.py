"""Feature distillation from cached teacher features into a scoring network.

The student's final features pass through a single linear alignment head to
the teacher's width; both sides become distributions by temperature softmax
and are compared with KL(teacher || student). The head only exists during
training: predictions never touch it.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data_synth import Sample
from .errors import ConsistencyError, LoadError, ShapeError, StateError
from .guideline_network import GuidelineNetwork, extract_picg_features, volumes_tensor
from .instructions import GuidelineRegistry, Tokenizer, render_stage2
from .scoring import FocalLossParams


TEACHER_NORMS = ("standardize", "none")


@dataclass
class LossConfig:
    alpha: float = 0.4
    temperature: float = 1.0
    focal: FocalLossParams = field(default_factory=FocalLossParams)
    teacher_norm: str = "standardize"  # or "none"

    def __post_init__(self):
        if self.teacher_norm not in TEACHER_NORMS:
            raise ValueError(f"teacher_norm must be one of {TEACHER_NORMS}, got {self.teacher_norm!r}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


class AlignmentHead(nn.Module):
    """Linear map from student feature width to teacher feature width."""

    def __init__(self, student_dim: int, teacher_dim: int):
        super().__init__()
        self.fc = nn.Linear(student_dim, teacher_dim)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.fc(f)


def kl_feature_loss(
    teacher: torch.Tensor, student: torch.Tensor, head: AlignmentHead, temperature: float = 1.0
) -> torch.Tensor:
    """Batch-mean KL(softmax(teacher / T) || softmax(head(student) / T)).

    The teacher side is detached.
    """
    teacher = torch.as_tensor(teacher)
    if teacher.ndim == 1:
        teacher, student = teacher[None], student[None]
    if student.shape[-1] != head.fc.in_features or teacher.shape[-1] != head.fc.out_features:
        raise ShapeError(
            f"teacher {tuple(teacher.shape)} / student {tuple(student.shape)} do not fit head "
            f"{head.fc.in_features} -> {head.fc.out_features}"
        )
    if teacher.shape[0] != student.shape[0]:
        raise ShapeError(f"batch sizes differ: teacher {teacher.shape[0]} vs student {student.shape[0]}")
    log_p = (teacher.detach().to(student.dtype) / temperature).log_softmax(-1)
    log_q = (head(student) / temperature).log_softmax(-1)
    return (log_p.exp() * (log_p - log_q)).sum(-1).mean()


def normalize_teacher(vectors: torch.Tensor, mode: str = "standardize", eps: float = 1e-6) -> torch.Tensor:
    """Per-dimension zero mean / unit variance over the training set, or identity.

    Raw pooled decoder states share a large common component across samples;
    standardizing leaves only the sample-dependent part for the softmax.
    """
    if mode == "none":
        return vectors
    if mode != "standardize":
        raise ValueError(f"unknown teacher_norm {mode!r}")
    mean = vectors.mean(0, keepdim=True)
    std = vectors.std(0, unbiased=False, keepdim=True)
    return (vectors - mean) / (std + eps)


def combined_objective(classification_loss, kl_loss, cfg: LossConfig):
    """classification + alpha * KL."""
    return classification_loss + cfg.alpha * kl_loss


# ---------------------------------------------------------------- feature cache

@dataclass
class FeatureCache:
    ids: list[str]
    vectors: np.ndarray  # (N, feature_dim) float32, rows in ``ids`` order
    source_digest: str = ""
    _index: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.ids):
            vectors = vectors.reshape(len(self.ids), -1)
        self.vectors = vectors
        if len(set(self.ids)) != len(self.ids):
            raise ConsistencyError("feature cache ids must be unique")
        if not np.all(np.isfinite(self.vectors)):
            raise ConsistencyError("feature cache holds non-finite values")
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    @property
    def feature_dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.ids).encode())
        h.update(self.vectors.astype("<f4").tobytes())
        return h.hexdigest()

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._index

    def lookup(self, sample_ids: Sequence[str]) -> torch.Tensor:
        missing = [s for s in sample_ids if s not in self._index]
        if missing:
            raise KeyError(f"feature cache has no entry for sample {missing[0]}")
        return torch.from_numpy(self.vectors[[self._index[s] for s in sample_ids]])

    def save(self, path: str | Path) -> None:
        """Write ``<path>/cache.json`` (manifest) and ``<path>/cache.bin`` (vectors)."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "cache.bin").write_bytes(self.vectors.astype("<f4").tobytes())
        manifest = {"ids": self.ids, "feature_dim": self.feature_dim, "checksum": self.checksum, "source_digest": self.source_digest}
        (path / "cache.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureCache":
        path = Path(path)
        try:
            manifest = json.loads((path / "cache.json").read_text())
            blob = (path / "cache.bin").read_bytes()
        except (OSError, ValueError) as exc:
            raise LoadError(str(path), str(exc)) from exc
        n, dim = len(manifest["ids"]), manifest["feature_dim"]
        if len(blob) != 4 * n * dim:
            raise LoadError(str(path), f"blob has {len(blob)} bytes, expected {4 * n * dim}")
        cache = cls(manifest["ids"], np.frombuffer(blob, dtype="<f4").reshape(n, dim), manifest.get("source_digest", ""))
        if cache.checksum != manifest["checksum"]:
            raise ConsistencyError(f"feature cache {path} checksum mismatch")
        return cache


def build_feature_cache(
    model: GuidelineNetwork,
    samples: Sequence[Sample],
    tokenizer: Tokenizer,
    registry: GuidelineRegistry,
    source_digest: str = "",
    batch_size: int = 16,
    allow_untrained: bool = False,
) -> FeatureCache:
    """Guideline-conditioned features for every sample, from a stage-2 teacher."""
    if model is None:
        raise StateError("no teacher checkpoint to build a feature cache from")
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        vols = torch.stack([volumes_tensor(s.volumes) for s in chunk])
        with torch.no_grad():
            prompts = model.visual_prompt(vols)
        records = [render_stage2(registry, s) for s in chunk]
        rows.append(extract_picg_features(model, records, prompts, tokenizer, allow_untrained=allow_untrained).numpy())
    dim = model.cfg.decoder_dim
    vectors = np.concatenate(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    if vectors.shape[1] != dim:
        raise ConsistencyError(f"teacher features have width {vectors.shape[1]}, model declares {dim}")
    return FeatureCache([s.id for s in samples], vectors, source_digest)
