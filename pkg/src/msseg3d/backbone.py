"""Residual V-Net-style 3D encoder/decoder producing voxelwise class probabilities.

Design constraints baked into the architecture:
- GroupNorm everywhere (never BatchNorm) so a forward pass depends only on the
  sample itself, keeping teacher predictions independent of batch composition.
- The final 1x1x1 head is zero-initialized, so an untrained network outputs
  the exact uniform distribution over classes.
- All weight randomness is drawn from a caller-supplied numpy Generator, so
  initialization is reproducible independently of torch's global RNG.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class ResidualBlock(nn.Module):
    """Two 3x3x3 convs with GroupNorm and an identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm1 = _group_norm(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = _group_norm(channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(x + h)


class _Down(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.down = nn.Conv3d(in_ch, out_ch, 2, stride=2)
        self.norm = _group_norm(out_ch)
        self.act = nn.ReLU(inplace=True)
        self.block = ResidualBlock(out_ch)

    def forward(self, x):
        return self.block(self.act(self.norm(self.down(x))))


class _Up(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_ch, out_ch, 2, stride=2)
        self.fuse = nn.Conv3d(2 * out_ch, out_ch, 3, padding=1)
        self.norm = _group_norm(out_ch)
        self.act = nn.ReLU(inplace=True)
        self.block = ResidualBlock(out_ch)

    def forward(self, x, skip):
        x = torch.cat([self.up(x), skip], dim=1)
        return self.block(self.act(self.norm(self.fuse(x))))


class VNetLite(nn.Module):
    """Segmentation network: (B, 1, D, H, W) float -> (B, C, D, H, W) probabilities.

    Spatial dims must be divisible by 2**depth. forward returns softmax
    probabilities; pass return_features=True to also get the globally pooled
    bottleneck embedding used by the representation analysis.
    """

    def __init__(self, class_count: int, in_channels: int = 1, base_channels: int = 8, depth: int = 3):
        super().__init__()
        if class_count < 2:
            raise ValueError("class_count must be >= 2")
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.class_count = class_count
        self.depth = depth
        self.feature_dim = base_channels * 2**depth

        self.stem = nn.Sequential(
            nn.Conv3d(in_channels, base_channels, 3, padding=1),
            _group_norm(base_channels),
            nn.ReLU(inplace=True),
            ResidualBlock(base_channels),
        )
        chans = [base_channels * 2**i for i in range(depth + 1)]
        self.encoders = nn.ModuleList(_Down(chans[i], chans[i + 1]) for i in range(depth))
        self.decoders = nn.ModuleList(
            _Up(chans[i + 1], chans[i]) for i in reversed(range(depth))
        )
        # Affine-free normalization in front of the head. Decoder activations
        # are post-ReLU and therefore nonnegative; feeding them to the logit
        # layer directly lets gradient descent drive every head weight negative
        # under heavy background imbalance (the logit gap is then bounded by
        # the bias and no voxel can ever cross the argmax boundary). Centering
        # makes the head input signed, so a separating direction must be
        # learned instead. No parameters, so the head stays the sole zero-init
        # projection and the untrained output is still exactly uniform.
        self.head_norm = nn.GroupNorm(math.gcd(base_channels, 8), base_channels, affine=False)
        self.head = nn.Conv3d(base_channels, class_count, 1)

    def _check_shape(self, x: torch.Tensor) -> None:
        if x.ndim != 5:
            raise ValueError(f"expected (B, C, D, H, W) input, got shape {tuple(x.shape)}")
        step = 2**self.depth
        bad = [d for d in x.shape[2:] if d % step or d < step]
        if bad:
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by 2**depth={step}"
            )

    def forward(self, x: torch.Tensor, return_features: bool = False):
        self._check_shape(x)
        skips = [self.stem(x)]
        for enc in self.encoders:
            skips.append(enc(skips[-1]))
        h = skips.pop()
        bottleneck = h
        for dec in self.decoders:
            h = dec(h, skips.pop())
        probs = torch.softmax(self.head(self.head_norm(h)), dim=1)
        if return_features:
            return probs, bottleneck.mean(dim=(2, 3, 4))
        return probs


def init_network(model: VNetLite, rng: np.random.Generator) -> None:
    """Initialize all parameters from a numpy Generator (Kaiming fan-in for
    convs, unit/zero for norms, exact zeros for the head so the untrained
    output is uniform). Iteration follows registration order, so the same
    seed always yields the same weights.
    """
    head_keys = {f"head.{name}" for name, _ in model.head.named_parameters()}
    # find norm scales by module type, not name: inside nn.Sequential the
    # GroupNorm parameter is called e.g. "stem.1.weight" with no "norm" in it
    norm_scale_keys = {
        f"{mod_name}.weight"
        for mod_name, module in model.named_modules()
        if isinstance(module, nn.GroupNorm)
    }
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name in head_keys:
                param.zero_()
            elif param.ndim >= 2:  # conv / transposed-conv kernels
                fan_in = param.shape[1] * int(np.prod(param.shape[2:]))
                std = math.sqrt(2.0 / fan_in)
                values = rng.normal(0.0, std, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values.astype(np.float32)))
            elif name in norm_scale_keys:
                param.fill_(1.0)
            else:  # biases and norm shifts
                param.zero_()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
