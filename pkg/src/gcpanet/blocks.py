"""Decoder building blocks: FIA, SR, HA and GCF.

Every block is an ``nn.Module`` whose parameters are the block's parameter
set; the ``*_forward`` functions are thin functional entry points that take
the block explicitly. All blocks are pure functions of (input, parameters).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

DECODER_WIDTH = 256
REDUCTION = 16


class ShapeError(ValueError):
    """A tensor does not have the shape a block expects."""


def _check_channels(name: str, x: torch.Tensor, channels: int) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{name}: expected a rank-4 tensor [B, {channels}, H, W], got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ShapeError(
            f"{name}: expected shape [B, {channels}, H, W], got {tuple(x.shape)}"
        )


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize with half-pixel centres (``align_corners=False``)."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class ConvBNReLU(nn.Sequential):
    """kxk convolution (no bias) followed by batch norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3):
        if kernel_size not in (1, 3):
            raise ValueError(f"kernel_size must be 1 or 3, got {kernel_size}")
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )
        self.in_channels = in_ch
        self.out_channels = out_ch


def mask_conv(channels: int) -> nn.Conv2d:
    # mask/bias generators: plain 3x3 conv with bias, no normalization or activation
    return nn.Conv2d(channels, channels, 3, padding=1, bias=True)


def reduced(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


class FIA(nn.Module):
    """Feature interweaved aggregation of low-level, high-level and global features.

    ``f_l`` is compressed to ``d`` channels by ``conv1``. Three multiplicative
    branches are built at ``f_l``'s resolution and fused by ``conv5``:

    * ``f_hl = relu(up(conv2(f_h)) * conv1(f_l))``
    * ``f_lh = relu(conv3(conv1(f_l)) * up(f_h))``
    * ``f_gl = relu(up(conv4(f_g)) * conv1(f_l))``

    With ``use_global=False`` the ``f_gl`` branch (and ``conv4``) is absent and
    ``conv5`` fuses two branches; this is the variant without global context.
    """

    def __init__(self, low_channels: int, d: int = DECODER_WIDTH, use_global: bool = True):
        super().__init__()
        self.d = d
        self.low_channels = low_channels
        self.use_global = use_global
        self.conv1 = ConvBNReLU(low_channels, d, kernel_size=1)
        self.conv2 = mask_conv(d)
        self.conv3 = mask_conv(d)
        self.conv4 = mask_conv(d) if use_global else None
        n_branches = 3 if use_global else 2
        self.conv5 = ConvBNReLU(n_branches * d, d, kernel_size=3)

    def check_inputs(self, f_l, f_h, f_g) -> None:
        _check_channels("f_l", f_l, self.low_channels)
        _check_channels("f_h", f_h, self.d)
        h, w = f_l.shape[-2:]
        expected = (f_l.shape[0], self.d, h // 2, w // 2)
        if h % 2 or w % 2 or tuple(f_h.shape) != expected:
            raise ShapeError(f"f_h: expected shape {list(expected)} (half of f_l), got {list(f_h.shape)}")
        if self.use_global:
            if f_g is None:
                raise ShapeError("f_g: required when use_global=True")
            _check_channels("f_g", f_g, self.d)
            gh, gw = f_g.shape[-2:]
            if f_g.shape[0] != f_l.shape[0] or h % gh or w % gw or h // gh != w // gw:
                raise ShapeError(
                    f"f_g: spatial size must divide f_l's {h}x{w} by a common factor, got {list(f_g.shape)}"
                )

    def forward(self, f_l, f_h, f_g=None, return_branches: bool = False):
        self.check_inputs(f_l, f_h, f_g)
        size = f_l.shape[-2:]
        low = self.conv1(f_l)
        f_hl = F.relu(upsample(self.conv2(f_h), size) * low)
        f_lh = F.relu(self.conv3(low) * upsample(f_h, size))
        branches = [f_hl, f_lh]
        if self.use_global:
            branches.append(F.relu(upsample(self.conv4(f_g), size) * low))
        out = self.conv5(torch.cat(branches, dim=1))
        if return_branches:
            return out, dict(zip(("hl", "lh", "gl"), branches))
        return out


class SR(nn.Module):
    """Self refinement: ``relu(W * f + b)`` with ``f = conv6(f_in)`` and W, b convolved from f."""

    def __init__(self, in_channels: int, d: int = DECODER_WIDTH):
        super().__init__()
        self.in_channels = in_channels
        self.d = d
        self.conv6 = ConvBNReLU(in_channels, d, kernel_size=3)
        self.conv_w = mask_conv(d)
        self.conv_b = mask_conv(d)

    def forward(self, f_in):
        _check_channels("f_in", f_in, self.in_channels)
        f = self.conv6(f_in)
        return F.relu(self.conv_w(f) * f + self.conv_b(f))


class HA(nn.Module):
    """Head attention on the encoder's top layer.

    Spatial stage as in :class:`SR` (separate parameters), then a channel
    weight ``y = sigmoid(fc2(relu(fc1(avgpool(F_compressed)))))`` applied per
    channel. Pooling is taken from the compressed map so that ``y`` has the
    same width as the spatial stage's output.
    """

    def __init__(self, in_channels: int, d: int = DECODER_WIDTH, reduction: int = REDUCTION):
        super().__init__()
        self.in_channels = in_channels
        self.d = d
        self.conv_compress = ConvBNReLU(in_channels, d, kernel_size=3)
        self.conv_w = mask_conv(d)
        self.conv_b = mask_conv(d)
        self.fc1 = nn.Linear(d, reduced(d, reduction))
        self.fc2 = nn.Linear(reduced(d, reduction), d)

    def channel_weights(self, compressed: torch.Tensor) -> torch.Tensor:
        pooled = compressed.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))

    def forward(self, x, return_parts: bool = False):
        _check_channels("F", x, self.in_channels)
        compressed = self.conv_compress(x)
        f1 = F.relu(self.conv_w(compressed) * compressed + self.conv_b(compressed))
        y = self.channel_weights(compressed)
        out = f1 * y[:, :, None, None]
        if return_parts:
            return out, {"F1": f1, "y": y}
        return out


class GCF(nn.Module):
    """Global context for a single decoder stage.

    ``y = sigmoid(fc4(relu(fc3(gap(f_top)))))`` weights the channels of
    ``conv10(f_top)``. ``fc4`` projects to the decoder width ``d`` so the
    weight applies after ``conv10``.
    """

    def __init__(self, top_channels: int, d: int = DECODER_WIDTH, reduction: int = REDUCTION):
        super().__init__()
        self.top_channels = top_channels
        self.d = d
        self.fc3 = nn.Linear(top_channels, reduced(top_channels, reduction))
        self.fc4 = nn.Linear(reduced(top_channels, reduction), d)
        self.conv10 = ConvBNReLU(top_channels, d, kernel_size=3)

    def forward(self, f_top, return_parts: bool = False):
        _check_channels("f_top", f_top, self.top_channels)
        f_gap = f_top.mean(dim=(2, 3))
        y = torch.sigmoid(self.fc4(F.relu(self.fc3(f_gap))))
        f = self.conv10(f_top)
        out = f * y[:, :, None, None]
        if return_parts:
            return out, {"f_gap": f_gap, "y": y, "pre": f}
        return out


class GCFBank(nn.Module):
    """Per-stage GCF parameters for stages 1..3, or one triple shared by all stages."""

    n_stages = 3

    def __init__(self, top_channels: int, d: int = DECODER_WIDTH, reduction: int = REDUCTION,
                 shared: bool = False):
        super().__init__()
        self.shared = shared
        count = 1 if shared else self.n_stages
        self.stages = nn.ModuleList(GCF(top_channels, d, reduction) for _ in range(count))

    def forward(self, f_top, stage: int, return_parts: bool = False):
        if stage not in (1, 2, 3):
            raise ValueError(f"invalid GCF stage {stage!r}; expected 1, 2 or 3")
        block = self.stages[0 if self.shared else stage - 1]
        return block(f_top, return_parts=return_parts)


def fia_forward(f_l, f_h, f_g, p: FIA):
    return p(f_l, f_h, f_g)


def sr_forward(f_in, p: SR):
    return p(f_in)


def ha_forward(x, p: HA):
    return p(x)


def gcf_forward(f_top, stage: int, p: GCFBank):
    return p(f_top, stage)


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled normal for convs, fan-in scaled uniform for linears, zero biases.

    Draws from torch's global generator; seed it for reproducible parameters.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()
        elif isinstance(m, nn.Linear):
            bound = math.sqrt(3.0 / m.in_features)
            nn.init.uniform_(m.weight, -bound, bound)
            nn.init.zeros_(m.bias)
