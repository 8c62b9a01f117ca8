"""Student scoring networks over stacked (T2W, ADC, DWI) volumes, and focal loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .data_synth import Sample
from .errors import ShapeError

N_CLASSES = 5


@dataclass(frozen=True)
class FocalLossParams:
    class_weights: tuple[float, ...] = (2.0, 2.0, 1.0, 1.0, 1.0)  # index i -> score i + 1
    gamma: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if len(self.class_weights) != N_CLASSES or any(w <= 0 for w in self.class_weights):
            raise ValueError(f"need {N_CLASSES} positive class weights, got {self.class_weights}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


def focal_loss(logits: torch.Tensor, labels, params: FocalLossParams = FocalLossParams()) -> torch.Tensor:
    """-w_y (1 - p_y)^gamma log p_y averaged over the batch. Labels are scores 1..5."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim == 1:
        logits, labels = logits[None], labels.reshape(1)
    if bool(((labels < 1) | (labels > N_CLASSES)).any()):
        raise ValueError(f"labels must be scores in 1..{N_CLASSES}, got {labels.tolist()}")
    idx = labels - 1
    log_p = logits.log_softmax(-1).gather(1, idx[:, None])[:, 0]
    w = torch.tensor(params.class_weights, dtype=logits.dtype, device=logits.device)[idx]
    # (1 - p)^0 must be 1 even where p == 1
    focus = (1.0 - log_p.exp()).clamp_min(0.0) ** params.gamma if params.gamma > 0 else torch.ones_like(log_p)
    return (-w * focus * log_p).mean()


def conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv3d(c_in, c_out, 3, padding=1, bias=False), nn.BatchNorm3d(c_out), nn.ReLU(inplace=True))


class ScoringModel(nn.Module):
    """Backbone producing a ``feature_dim`` vector, then a linear 5-way head."""

    feature_dim: int = 0

    def __init__(self):
        super().__init__()
        self.head = nn.Linear(self.feature_dim, N_CLASSES)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 5 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, D, H, W) input, got {tuple(x.shape)}")
        f = self.features(x)
        return f, self.head(f)

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Predicted scores 1..5; ties resolve to the lowest score."""
        was_training = self.training
        self.eval()
        _, logits = self(x)
        self.train(was_training)
        return logits.argmax(-1) + 1


class VGG3D(ScoringModel):
    """Plain stacked 3x3x3 convolutions with in-plane pooling after each stage."""

    feature_dim = 64

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            conv_block(3, w), nn.MaxPool3d((1, 2, 2)),
            conv_block(w, 2 * w), nn.MaxPool3d((1, 2, 2)),
            conv_block(2 * w, self.feature_dim), nn.MaxPool3d((2, 2, 2)),
            conv_block(self.feature_dim, self.feature_dim),
        )

    def features(self, x):
        return self.body(x).mean(dim=(2, 3, 4))


class BasicBlock3D(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride=1):
        super().__init__()
        self.conv1 = nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv3d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm3d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.skip is None else self.skip(x)))


class ResNet3D(ScoringModel):
    """Small residual network with batch norm."""

    feature_dim = 64

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        # strided stem: (4, 32, 32) -> (4, 16, 16)
        self.stem = nn.Sequential(
            nn.Conv3d(3, w, 3, stride=(1, 2, 2), padding=1, bias=False), nn.BatchNorm3d(w), nn.ReLU(inplace=True)
        )
        self.layers = nn.Sequential(
            BasicBlock3D(w, w),
            BasicBlock3D(w, 2 * w, stride=(1, 2, 2)),
            BasicBlock3D(2 * w, self.feature_dim, stride=(2, 2, 2)),
        )

    def features(self, x):
        return self.layers(self.stem(x)).mean(dim=(2, 3, 4))


BACKBONES = {"vgg3d": VGG3D, "resnet3d": ResNet3D}


def build_scoring_model(name: str, seed: int = 0) -> ScoringModel:
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}")
    torch.manual_seed(seed)
    return BACKBONES[name]()


def stack_samples(samples: Sequence[Sample]) -> torch.Tensor:
    import numpy as np

    return torch.from_numpy(np.stack([s.stacked() for s in samples]).astype("float32"))


def score_forward(model: ScoringModel, sample: Sample | Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    """Evaluation-mode (features, logits) for one sample or a list of samples."""
    single = isinstance(sample, Sample)
    x = stack_samples([sample] if single else sample)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        f, logits = model(x)
    model.train(was_training)
    return (f[0], logits[0]) if single else (f, logits)
