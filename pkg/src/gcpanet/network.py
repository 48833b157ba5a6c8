"""Encoder-decoder assembly and the supervised loss.

Decoder wiring (f_l taps run deepest to shallowest)::

    top   = HA(stage4)                 (or a plain conv when HA is off)
    f_h   = SR(top)
    t=1:  f_h = SR(FIA(stage3, f_h, GCF(stage4, 1)))
    t=2:  f_h = SR(FIA(stage2, f_h, GCF(stage4, 2)))
    t=3:  f_h = SR(FIA(stage1, f_h, GCF(stage4, 3)))
    dominant = up(head(f_h))           aux_t = up(aux_head_t(stage t output))

Ablation flags swap components out: without FIA the fusion is a U-Net style
concat of the upsampled high-level map and the projected low-level map;
without SR the refinement is the identity; without GCF, FIA drops its
global-context branch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, build_encoder, encode
from .blocks import DECODER_WIDTH, FIA, HA, REDUCTION, SR, ConvBNReLU, GCFBank, init_weights, upsample

BLOCK_PREFIXES = ("fia", "sr", "ha", "gcf")


@dataclass
class AblationFlags:
    use_fia: bool = True
    use_sr: bool = True
    use_ha: bool = True
    use_gcf: bool = True
    gcf_shared: bool = False

    def validate(self) -> None:
        if self.gcf_shared and not self.use_gcf:
            raise ValueError("inconsistent flags: gcf_shared requires use_gcf")
        if self.use_gcf and not self.use_fia:
            raise ValueError("inconsistent flags: use_gcf requires use_fia (GCF feeds the FIA modules)")

    def name(self) -> str:
        if not (self.use_fia or self.use_sr or self.use_ha or self.use_gcf):
            return "baseline"
        parts = [n for n, on in (("FIA", self.use_fia), ("SR", self.use_sr), ("HA", self.use_ha),
                                 ("GCF", self.use_gcf)) if on]
        label = "+".join(parts)
        return label + " (shared)" if self.gcf_shared else label


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    width: int = DECODER_WIDTH
    reduction: int = REDUCTION
    flags: AblationFlags = field(default_factory=AblationFlags)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NetworkOutput:
    dominant_logits: torch.Tensor
    aux_logits: List[torch.Tensor]


@dataclass
class LossConfig:
    lambdas: Sequence[float] = (1.0, 1.0, 1.0)
    epsilon: float = 1e-7

    def __post_init__(self):
        if len(self.lambdas) != 3 or any(lam < 0 for lam in self.lambdas):
            raise ValueError(f"lambdas must be three non-negative weights, got {self.lambdas}")
        if not 0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")


class ConcatFusion(nn.Module):
    """Baseline fusion: conv(concat(up(f_h), proj(f_l)))."""

    def __init__(self, low_channels: int, d: int):
        super().__init__()
        self.lateral = ConvBNReLU(low_channels, d, kernel_size=1)
        self.fuse = ConvBNReLU(2 * d, d, kernel_size=3)

    def forward(self, f_l, f_h):
        low = self.lateral(f_l)
        return self.fuse(torch.cat([upsample(f_h, low.shape[-2:]), low], dim=1))


def prediction_head(d: int) -> nn.Conv2d:
    return nn.Conv2d(d, 1, 3, padding=1)


class GCPANet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.flags.validate()
        self.cfg = cfg
        flags, d, r = cfg.flags, cfg.width, cfg.reduction
        c1, c2, c3, c4 = cfg.backbone.stage_channels

        self.encoder = build_encoder(cfg.backbone)
        if flags.use_ha:
            self.ha = HA(c4, d, r)
        else:
            self.top = ConvBNReLU(c4, d, kernel_size=3)
        if flags.use_sr:
            self.sr = nn.ModuleList(SR(d, d) for _ in range(4))
        low = (c3, c2, c1)
        if flags.use_fia:
            self.fia = nn.ModuleList(FIA(ch, d, use_global=flags.use_gcf) for ch in low)
        else:
            self.fuse = nn.ModuleList(ConcatFusion(ch, d) for ch in low)
        if flags.use_gcf:
            self.gcf = GCFBank(c4, d, r, shared=flags.gcf_shared)
        self.head = prediction_head(d)
        self.aux_heads = nn.ModuleList(prediction_head(d) for _ in range(3))

        init_weights(self.decoder_modules())
        if not cfg.backbone.pretrained_weights_path:
            init_weights(self.encoder)

    def decoder_modules(self) -> nn.ModuleList:
        return nn.ModuleList(m for name, m in self.named_children() if name != "encoder")

    def decode(self, stages):
        flags = self.cfg.flags
        s1, s2, s3, s4 = stages
        f_h = self.ha(s4) if flags.use_ha else self.top(s4)
        if flags.use_sr:
            f_h = self.sr[0](f_h)
        outs = []
        for t, f_l in zip((1, 2, 3), (s3, s2, s1)):
            if flags.use_fia:
                f_g = self.gcf(s4, t) if flags.use_gcf else None
                f = self.fia[t - 1](f_l, f_h, f_g)
            else:
                f = self.fuse[t - 1](f_l, f_h)
            f_h = self.sr[t](f) if flags.use_sr else f
            outs.append(f_h)
        return outs

    def forward(self, images) -> NetworkOutput:
        size = images.shape[-2:]
        outs = self.decode(encode(images, self.encoder, self.cfg.backbone))
        dominant = upsample(self.head(outs[-1]), size)
        aux = []
        if self.training:
            aux = [upsample(head(o), size) for head, o in zip(self.aux_heads, outs)]
        return NetworkOutput(dominant, aux)

    def block_parameter_names(self) -> List[str]:
        return [n for n, _ in self.named_parameters() if n.split(".")[0] in BLOCK_PREFIXES]


def forward(model: GCPANet, images, mode: str = "train") -> NetworkOutput:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    model.train(mode == "train")
    return model(images)


@torch.no_grad()
def predict(model: GCPANet, images) -> torch.Tensor:
    """Saliency probabilities in (0, 1) at the input resolution."""
    was_training = model.training
    model.eval()
    try:
        return torch.sigmoid(model(images).dominant_logits)
    finally:
        model.train(was_training)


def _check_pair(s, g):
    if s.shape != g.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(s.shape)} vs mask {tuple(g.shape)}")
    if not torch.all((g == 0) | (g == 1)):
        raise ValueError("ground-truth mask must be binary (values in {0, 1})")


def bce_loss(s: torch.Tensor, g: torch.Tensor, epsilon: float = 1e-7) -> torch.Tensor:
    """Mean binary cross-entropy of probabilities ``s`` (clamped to [eps, 1-eps]) against ``g``."""
    _check_pair(s, g)
    s = s.clamp(epsilon, 1 - epsilon)
    return -(g * torch.log(s) + (1 - g) * torch.log(1 - s)).mean()


def bce_with_logits(logits: torch.Tensor, g: torch.Tensor, epsilon: float = 1e-7) -> torch.Tensor:
    """Numerically stable BCE from logits, clamped to the same range as :func:`bce_loss`."""
    _check_pair(logits, g)
    bound = float(torch.logit(torch.tensor(1 - epsilon, dtype=torch.float64)))
    return F.binary_cross_entropy_with_logits(logits.clamp(-bound, bound), g)


def total_loss(dom, aux, cfg: LossConfig):
    return dom + sum(lam * a for lam, a in zip(cfg.lambdas, aux))


def compute_losses(out: NetworkOutput, masks: torch.Tensor, cfg: LossConfig) -> dict:
    dom = bce_with_logits(out.dominant_logits, masks, cfg.epsilon)
    aux = [bce_with_logits(a, masks, cfg.epsilon) for a in out.aux_logits]
    losses = {"dom": dom}
    for i, a in enumerate(aux, 1):
        losses[f"aux{i}"] = a
    losses["total"] = total_loss(dom, aux, cfg)
    return losses
