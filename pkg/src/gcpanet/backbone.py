"""Multi-level encoders: ResNet-50 and a tiny four-stage conv encoder.

Pretrained weights are stored as a safetensors file (named tensors plus a
JSON header). The header's ``__metadata__`` carries a ``manifest`` entry, a
JSON object mapping each tensor name to ``{"shape": [...], "dtype": "..."}``,
and loading validates every tensor against it and against the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import torch
import torch.nn as nn
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file
from torchvision.models import resnet50

STAGE_CHANNELS = {
    "resnet50": [256, 512, 1024, 2048],
    "tiny": [16, 32, 64, 128],
}
# overall stride of the deepest stage, which bounds the input divisibility
DEEPEST_STRIDE = {"resnet50": 32, "tiny": 16}
# overall stride of the shallowest stage
FIRST_STRIDE = {"resnet50": 4, "tiny": 2}


class WeightsError(RuntimeError):
    """Pretrained weight file is missing, corrupt, or does not match the model."""


@dataclass
class BackboneConfig:
    kind: str = "resnet50"
    stage_channels: List[int] = field(default_factory=list)
    pretrained_weights_path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in STAGE_CHANNELS:
            raise ValueError(f"unknown backbone kind {self.kind!r}; expected one of {sorted(STAGE_CHANNELS)}")
        expected = STAGE_CHANNELS[self.kind]
        if not self.stage_channels:
            self.stage_channels = list(expected)
        elif list(self.stage_channels) != expected:
            raise ValueError(f"{self.kind} backbone has stage_channels {expected}, got {self.stage_channels}")


class TinyEncoder(nn.Module):
    """Four (3x3 stride-2 conv, BN, ReLU) stages; CPU-fast stand-in for ResNet-50."""

    def __init__(self, channels=(16, 32, 64, 128)):
        super().__init__()
        layers = []
        in_ch = 3
        for out_ch in channels:
            layers.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ))
            in_ch = out_ch
        self.stages = nn.ModuleList(layers)

    def forward(self, x) -> List[torch.Tensor]:
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


class ResNet50Encoder(nn.Module):
    """torchvision ResNet-50 without the classifier; returns the four post-stem stages."""

    def __init__(self):
        super().__init__()
        net = resnet50(weights=None)
        self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4

    def forward(self, x) -> List[torch.Tensor]:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        s1 = self.layer1(x)
        s2 = self.layer2(s1)
        s3 = self.layer3(s2)
        s4 = self.layer4(s3)
        return [s1, s2, s3, s4]


def build_encoder(cfg: BackboneConfig) -> nn.Module:
    if cfg.kind == "tiny":
        if cfg.pretrained_weights_path:
            raise WeightsError("tiny backbone has no pretrained weights")
        return TinyEncoder(cfg.stage_channels)
    encoder = ResNet50Encoder()
    if cfg.pretrained_weights_path:
        load_pretrained(cfg, encoder)
    return encoder


def encode(images: torch.Tensor, encoder: nn.Module, cfg: BackboneConfig) -> List[torch.Tensor]:
    """Run ``encoder`` on an image batch and return the four stage maps."""
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"images: expected shape [B, 3, H, W], got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    stride = DEEPEST_STRIDE[cfg.kind]
    if h % stride or w % stride:
        raise ValueError(f"input size {h}x{w} is not divisible by {stride} ({cfg.kind} backbone)")
    return encoder(images)


def save_weights(encoder: nn.Module, path) -> None:
    """Write the encoder's state dict in the pretrained-weights format."""
    tensors = {k: v.detach().contiguous().clone() for k, v in encoder.state_dict().items()}
    manifest = {k: {"shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
                for k, v in tensors.items()}
    save_file(tensors, str(path), metadata={"manifest": json.dumps(manifest, sort_keys=True)})


def convert_torchvision_resnet50(state_dict: dict, path) -> None:
    """Convert an ImageNet ResNet-50 state dict from torchvision into the weights format."""
    encoder = ResNet50Encoder()
    keep = {k: v for k, v in state_dict.items() if not k.startswith("fc.")}
    encoder.load_state_dict(keep)
    save_weights(encoder, path)


def load_pretrained(cfg: BackboneConfig, encoder: Optional[nn.Module] = None) -> dict:
    """Load and validate pretrained weights into ``encoder`` (built if not given).

    Returns a report ``{"loaded": n, "missing": [...], "encoder": module}``;
    any missing or mis-shaped tensor raises :class:`WeightsError` naming it.
    """
    if cfg.kind == "tiny":
        raise WeightsError("tiny backbone has no pretrained weights")
    if not cfg.pretrained_weights_path:
        raise WeightsError("no pretrained_weights_path configured")
    path = Path(cfg.pretrained_weights_path)
    if not path.is_file():
        raise WeightsError(f"pretrained weights file not found: {path}")
    try:
        tensors = load_file(str(path))
        with safe_open(str(path), framework="pt") as fh:
            manifest = json.loads((fh.metadata() or {}).get("manifest", "{}"))
    except (SafetensorError, ValueError, OSError) as exc:
        raise WeightsError(f"corrupt weights file {path}: {exc}") from exc

    if encoder is None:
        encoder = ResNet50Encoder()
    expected = encoder.state_dict()
    missing = [k for k in expected if k not in tensors]
    if missing:
        raise WeightsError(f"missing tensor(s) in {path.name}: {', '.join(missing)}")
    for name, ref in expected.items():
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise WeightsError(
                f"shape mismatch for {name!r}: expected {list(ref.shape)}, got {list(tensors[name].shape)}"
            )
    for name in expected:
        entry = manifest.get(name)
        if entry is None or entry["shape"] != list(tensors[name].shape):
            raise WeightsError(f"tensor {name!r} disagrees with the file manifest")
    encoder.load_state_dict({k: tensors[k] for k in expected})
    return {"loaded": len(expected), "missing": [], "encoder": encoder}
