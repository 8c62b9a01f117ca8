"""3D patch embedding inflated from a 2D patch embedding.

A 2D kernel of shape (out, in, k, k) becomes a 3D kernel (out, in, D, k, k)
whose depth slices are each ``kernel / D``. A volume made of D identical
slices therefore embeds to exactly the 2D embedding of one slice.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data_synth import Volume
from .errors import ShapeError


@dataclass
class PatchEmbed2DWeights:
    kernel: np.ndarray  # (out, in, k, k)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        self.bias = np.asarray(self.bias)
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3] or self.kernel.shape[2] < 1:
            raise ShapeError(f"2D patch kernel must be (out, in, k, k), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match kernel {self.kernel.shape}")
        if not (np.all(np.isfinite(self.kernel)) and np.all(np.isfinite(self.bias))):
            raise ValueError("patch embedding weights must be finite")

    @property
    def k(self) -> int:
        return self.kernel.shape[2]


@dataclass
class DomainAdapterWeights:
    kernel: np.ndarray  # (out, in, k_d, k, k)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        self.bias = np.asarray(self.bias)
        if self.kernel.ndim != 5:
            raise ShapeError(f"3D patch kernel must be (out, in, k_d, k, k), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match kernel {self.kernel.shape}")

    @property
    def stride(self) -> tuple[int, int, int]:
        return tuple(self.kernel.shape[2:])


def inflate_2d_to_3d(w2d: PatchEmbed2DWeights, depth: int) -> DomainAdapterWeights:
    if int(depth) < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    slices = np.repeat(w2d.kernel[:, :, None], int(depth), axis=2) / depth
    return DomainAdapterWeights(slices.astype(w2d.kernel.dtype), w2d.bias.copy())


def n_tokens(shape: Sequence[int], kernel: Sequence[int]) -> int:
    """Patch count for a (D, H, W) volume and a (k_d, k, k) kernel."""
    _check_divisible(shape, kernel)
    return int(np.prod([s // k for s, k in zip(shape, kernel)]))


def _check_divisible(shape: Sequence[int], kernel: Sequence[int]) -> None:
    if len(shape) != len(kernel) or any(s % k or s < k for s, k in zip(shape, kernel)):
        raise ShapeError(f"volume shape {tuple(shape)} is not divisible by patch kernel {tuple(kernel)}")


def _as_channels(volume, ndim: int) -> np.ndarray:
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    return data[None] if data.ndim == ndim else data


def embed_volume(weights: DomainAdapterWeights, volume) -> np.ndarray:
    """Non-overlapping 3D patch embedding; returns (n_tokens, out_channels).

    Tokens run depth-major, then row-major within a slice.
    """
    data = _as_channels(volume, 3)  # (C, D, H, W)
    out_c, in_c, kd, kh, kw = weights.kernel.shape
    if data.ndim != 4 or data.shape[0] != in_c:
        raise ShapeError(f"volume shape {data.shape} does not match kernel {weights.kernel.shape}")
    _check_divisible(data.shape[1:], (kd, kh, kw))
    c, d, h, w = data.shape
    patches = data.reshape(c, d // kd, kd, h // kh, kh, w // kw, kw).transpose(1, 3, 5, 0, 2, 4, 6)
    patches = patches.reshape(-1, c * kd * kh * kw)
    return patches @ weights.kernel.reshape(out_c, -1).T + weights.bias


def embed_2d(w2d: PatchEmbed2DWeights, image) -> np.ndarray:
    """2D counterpart of :func:`embed_volume` for one (H, W) or (C, H, W) slice."""
    data = _as_channels(image, 2)
    kernel3d = DomainAdapterWeights(w2d.kernel[:, :, None], w2d.bias)
    return embed_volume(kernel3d, data[:, None])


class DomainAdapter(nn.Module):
    """Trainable 3D patch embedding: (B, C, D, H, W) -> (B, n_tokens, out)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: Sequence[int]):
        super().__init__()
        kernel = tuple(int(k) for k in kernel)
        self.proj = nn.Conv3d(in_channels, out_channels, kernel_size=kernel, stride=kernel, padding=0)

    @property
    def kernel_size(self) -> tuple[int, int, int]:
        return self.proj.kernel_size

    @classmethod
    def from_weights(cls, weights: DomainAdapterWeights) -> "DomainAdapter":
        out_c, in_c = weights.kernel.shape[:2]
        layer = cls(in_c, out_c, weights.kernel.shape[2:])
        with torch.no_grad():
            layer.proj.weight.copy_(torch.as_tensor(weights.kernel, dtype=layer.proj.weight.dtype))
            layer.proj.bias.copy_(torch.as_tensor(weights.bias, dtype=layer.proj.bias.dtype))
        return layer

    def weights(self) -> DomainAdapterWeights:
        return DomainAdapterWeights(self.proj.weight.detach().cpu().numpy().copy(), self.proj.bias.detach().cpu().numpy().copy())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or any(s % k for s, k in zip(x.shape[2:], self.kernel_size)):
            raise ShapeError(f"input shape {tuple(x.shape)} is not divisible by patch kernel {self.kernel_size}")
        return self.proj(x).flatten(2).transpose(1, 2)


def pretrain_patch_embed_2d(
    slices: np.ndarray, out_channels: int, k: int, seed: int = 0, in_channels: int = 1
) -> PatchEmbed2DWeights:
    """Fit a 2D patch embedding to a stack of (N, H, W) image slices.

    Stand-in for a pretrained vision-transformer stem: the kernel whitens
    patches along their principal components, then mixes the components with
    a fixed random orthogonal map so all ``out_channels`` carry signal.
    """
    slices = np.asarray(slices, dtype=np.float64)
    n, h, w = slices.shape
    if h % k or w % k:
        raise ShapeError(f"slice shape {(h, w)} is not divisible by patch size {k}")
    patches = slices.reshape(n, h // k, k, w // k, k).transpose(0, 1, 3, 2, 4).reshape(-1, k * k)
    mean = patches.mean(axis=0)
    _, svals, vt = np.linalg.svd(patches - mean, full_matrices=False)
    scale = svals / np.sqrt(max(len(patches) - 1, 1))
    whiten = vt / np.maximum(scale, 1e-6)[:, None]  # (r, k*k)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(out_channels, out_channels)))
    rank = whiten.shape[0]
    reps = int(np.ceil(out_channels / rank))
    basis = np.tile(whiten, (reps, 1))[:out_channels]
    kernel = (q @ basis) / np.sqrt(k * k)
    bias = -kernel @ mean
    kernel = np.repeat(kernel.reshape(out_channels, 1, k, k), in_channels, axis=1) / in_channels
    return PatchEmbed2DWeights(kernel.astype(np.float32), bias.astype(np.float32))
