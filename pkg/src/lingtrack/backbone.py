"""Pluggable visual feature extractor for the search crop.

The contract at the head boundary is a feature map of shape
``(FEATURE_CHANNELS, FEATURE_SIZE, FEATURE_SIZE)``.  A seeded toy backbone
stands in for a frozen pretrained tracker backbone so everything downstream
runs at desk scale; real feature exports can be loaded from file instead.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

FEATURE_CHANNELS = 768  # three concatenated 256-channel levels
FEATURE_SIZE = 31
CROP_SIZE = 255


class ToyBackbone(nn.Module):
    """Four strided conv blocks, 255x255x3 -> channels x 31 x 31.

    Deterministically initialized from a seed and frozen by default; any
    fixed differentiable feature map preserves the head contracts.
    """

    def __init__(
        self,
        out_channels: int = FEATURE_CHANNELS,
        out_size: int = FEATURE_SIZE,
        crop_size: int = CROP_SIZE,
        seed: int = 0,
    ):
        super().__init__()
        self.out_channels = out_channels
        self.out_size = out_size
        self.crop_size = crop_size
        widths = [min(out_channels, 32), min(out_channels, 64), min(out_channels, 128)]
        gen = torch.Generator().manual_seed(seed)
        layers = []
        in_ch = 3
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            in_ch = w
        layers.append(nn.Conv2d(in_ch, out_channels, kernel_size=2, stride=1))
        self.blocks = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(out_size)
        with torch.no_grad():
            for module in self.blocks:
                if not isinstance(module, nn.Conv2d):
                    continue
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                bound = (6.0 / fan_in) ** 0.5  # unit-gain signal propagation
                module.weight.copy_(
                    torch.empty_like(module.weight).uniform_(-bound, bound, generator=gen)
                )
                module.bias.copy_(
                    torch.empty_like(module.bias).uniform_(-0.05, 0.05, generator=gen)
                )
        # mimic the pretrained-and-frozen tracker backbone
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, crop: torch.Tensor) -> torch.Tensor:
        if crop.ndim == 3:
            crop = crop.unsqueeze(0)
        if crop.shape[-3:] != (3, self.crop_size, self.crop_size):
            raise ValueError(
                f"expected crop of shape 3x{self.crop_size}x{self.crop_size}, "
                f"got {tuple(crop.shape[-3:])}"
            )
        return self.pool(self.blocks(crop))

    def extract_features(self, crop: np.ndarray) -> np.ndarray:
        """Single-crop convenience: HxWx3 uint8/float -> CxHxW features."""
        arr = np.asarray(crop, dtype=np.float32)
        if arr.ndim == 3 and arr.shape[-1] == 3:
            arr = arr.transpose(2, 0, 1)
        if arr.max() > 1.5:
            arr = arr / 255.0
        with torch.no_grad():
            out = self.forward(torch.from_numpy(arr))
        return out.squeeze(0).numpy()


class FeatureFileBackbone:
    """Adapter reading precomputed feature exports from an .npz container.

    Arrays are keyed ``"{sequence_id}:{frame_index}"`` and must already have
    the head-boundary shape.
    """

    def __init__(self, path, out_channels: int = FEATURE_CHANNELS,
                 out_size: int = FEATURE_SIZE):
        self._data = np.load(path)
        self.out_channels = out_channels
        self.out_size = out_size

    def features_for(self, sequence_id: str, frame_index: int) -> np.ndarray:
        key = f"{sequence_id}:{frame_index}"
        arr = np.asarray(self._data[key], dtype=np.float32)
        expected = (self.out_channels, self.out_size, self.out_size)
        if arr.shape != expected:
            raise ValueError(f"feature export {key} has shape {arr.shape}, expected {expected}")
        return arr
