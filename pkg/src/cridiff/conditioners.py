"""Boundary/core feature conditioners over a 4-level encoder pyramid.

The boundary grid is triangular (rows of 4,3,2,1 computed nodes, shrinking
with depth); the core grid is inverted-triangular (1,2,3,4). Both operate on
64-channel projections of the encoder sideouts and are fused by a small FPN
into per-level prostate features. Deep supervision uses soft decoupled
labels: boundary nodes against g_b, core nodes against g_c, fused features
against the full mask.
"""

from __future__ import annotations

from typing import Dict, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

LEVELS = (1, 2, 3, 4)
GRID_CH = 64
ENCODER_CHANNELS = (32, 64, 128, 256)

VARIANTS = ("full", "pc", "pb", "p", "pstar")


def up2(x: torch.Tensor) -> torch.Tensor:
    """Rate-2 bilinear upsample used between grid rows."""
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class ConvBnRelu(nn.Module):
    """3x3 Conv - BatchNorm - ReLU; the BConv/Trans building block."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class Encoder(nn.Module):
    """Small CNN pyramid: 4 sideouts at strides 4/8/16/32.

    Stand-in for a pretrained transformer encoder; channel layout
    (32, 64, 128, 256).
    """

    def __init__(self, in_ch: int = 1, channels=ENCODER_CHANNELS):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.channels = tuple(channels)
        self.stage1 = nn.Sequential(
            ConvBnRelu(in_ch, c1, stride=2),
            ConvBnRelu(c1, c1, stride=2),
            ConvBnRelu(c1, c1),
        )
        self.stage2 = nn.Sequential(ConvBnRelu(c1, c2, stride=2), ConvBnRelu(c2, c2))
        self.stage3 = nn.Sequential(ConvBnRelu(c2, c3, stride=2), ConvBnRelu(c3, c3))
        self.stage4 = nn.Sequential(ConvBnRelu(c3, c4, stride=2), ConvBnRelu(c4, c4))

    def forward(self, x) -> Tuple[torch.Tensor, ...]:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {(h, w)} must be divisible by 32")
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return f1, f2, f3, f4


class TransLayers(nn.Module):
    """Per-level 3x3 Conv-BN-ReLU projections to the shared grid width."""

    def __init__(self, channels=ENCODER_CHANNELS, out_ch: int = GRID_CH):
        super().__init__()
        self.proj = nn.ModuleList([ConvBnRelu(c, out_ch) for c in channels])

    def forward(self, feats):
        if len(feats) != 4:
            raise ValueError("expected 4 pyramid levels")
        return [p(f) for p, f in zip(self.proj, feats)]


class BoundaryConditioner(nn.Module):
    """Triangular grid: row i holds computed nodes j=1..5-i.

    Node (i, j):
      i+j <= 4          : BConv(B[i][j-1] cat Up(B[i+1][j]))
      i+j == 5, i == 4  : BConv(B[4][0])            (no partner at the apex)
      i+j == 5, i <  4  : BConv(B[i][j-1] cat Up(B[i+1][j-1]))
    """

    def __init__(self, channels=ENCODER_CHANNELS):
        super().__init__()
        self.trans = TransLayers(channels)
        nodes = {}
        for i in LEVELS:
            for j in range(1, 6 - i):
                in_ch = GRID_CH if (i == 4 and j == 1) else 2 * GRID_CH
                nodes[f"{i}_{j}"] = ConvBnRelu(in_ch, GRID_CH)
        self.nodes = nn.ModuleDict(nodes)

    def forward(self, feats) -> Dict[Tuple[int, int], torch.Tensor]:
        b = {(i, 0): t for i, t in zip(LEVELS, self.trans(feats))}
        for i in reversed(LEVELS):
            for j in range(1, 6 - i):
                if i + j <= 4:
                    x = torch.cat([b[(i, j - 1)], up2(b[(i + 1, j)])], dim=1)
                elif i == 4:
                    x = b[(4, 0)]
                else:
                    x = torch.cat([b[(i, j - 1)], up2(b[(i + 1, j - 1)])], dim=1)
                b[(i, j)] = self.nodes[f"{i}_{j}"](x)
        return b


class CoreConditioner(nn.Module):
    """Inverted-triangular grid: row i holds computed nodes j=1..i.

    Node (i, j):
      i == 4 : BConv(C[4][j-1])                      (plain chain)
      i <  4 : BConv(C[i][j-1] cat Up(C[i+1][j]) [cat Up(C[i+1][j+1]) if i==j])
    """

    def __init__(self, channels=ENCODER_CHANNELS):
        super().__init__()
        self.trans = TransLayers(channels)
        nodes = {}
        for i in LEVELS:
            for j in range(1, i + 1):
                if i == 4:
                    in_ch = GRID_CH
                else:
                    in_ch = 3 * GRID_CH if i == j else 2 * GRID_CH
                nodes[f"{i}_{j}"] = ConvBnRelu(in_ch, GRID_CH)
        self.nodes = nn.ModuleDict(nodes)

    def forward(self, feats) -> Dict[Tuple[int, int], torch.Tensor]:
        c = {(i, 0): t for i, t in zip(LEVELS, self.trans(feats))}
        for i in reversed(LEVELS):
            for j in range(1, i + 1):
                if i == 4:
                    x = c[(4, j - 1)]
                else:
                    parts = [c[(i, j - 1)], up2(c[(i + 1, j)])]
                    if i == j:
                        parts.append(up2(c[(i + 1, j + 1)]))
                    x = torch.cat(parts, dim=1)
                c[(i, j)] = self.nodes[f"{i}_{j}"](x)
        return c


class FusionFPN(nn.Module):
    """Top-down fusion of per-level contributions by element-wise sum.

    P[4] = BConv(sum of level-4 contributions);
    P[i] = BConv(sum of level-i contributions + Up(P[i+1])).
    """

    def __init__(self):
        super().__init__()
        self.nodes = nn.ModuleDict(
            {str(i): ConvBnRelu(GRID_CH, GRID_CH) for i in LEVELS}
        )

    def forward(self, contribs: Dict[int, list]) -> Dict[int, torch.Tensor]:
        p = {}
        for i in reversed(LEVELS):
            parts = list(contribs[i])
            if i < 4:
                parts.append(up2(p[i + 1]))
            x = parts[0]
            for extra in parts[1:]:
                if extra.shape[-2:] != x.shape[-2:]:
                    raise ValueError(
                        f"level {i} resolution mismatch "
                        f"{extra.shape[-2:]} vs {x.shape[-2:]}"
                    )
                x = x + extra
            p[i] = self.nodes[str(i)](x)
        return p


class PredictionHead(nn.Module):
    """1x1 projection + sigmoid + bilinear upsample to label resolution."""

    def __init__(self, in_ch: int = GRID_CH, out_ch: int = 1):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x, size):
        p = torch.sigmoid(self.proj(x))
        if p.shape[-2:] != tuple(size):
            p = F.interpolate(p, size=size, mode="bilinear", align_corners=False)
        return p


SMOOTH = 1.0


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy; targets may be soft in [0,1]."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if (pred <= 0).any() or (pred >= 1).any():
        raise ValueError("bce predictions must lie strictly inside (0,1)")
    return F.binary_cross_entropy(pred, target)


def dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + SMOOTH) / (pred.sum() + target.sum() + SMOOTH)


def iou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    inter = (pred * target).sum()
    union = pred.sum() + target.sum() - inter
    return 1.0 - (inter + SMOOTH) / (union + SMOOTH)


class ConditionerNet(nn.Module):
    """Encoder + conditioner grids + fusion + supervision heads.

    Variants (for ablation parity):
      full  - boundary + core grids, fused P, all supervision terms
      pb    - boundary grid only, P fuses B nodes
      pc    - core grid only, P fuses C nodes
      p     - plain FPN over projections, mask supervision only
      pstar - plain FPN with a 3-channel head (mask/core/boundary)
    """

    def __init__(self, variant: str = "full", in_ch: int = 1, channels=ENCODER_CHANNELS):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        self.variant = variant
        self.encoder = Encoder(in_ch, channels)
        self.fpn = FusionFPN()
        if variant in ("full", "pb"):
            self.bec = BoundaryConditioner(channels)
        if variant in ("full", "pc"):
            self.cec = CoreConditioner(channels)
        if variant in ("p", "pstar"):
            self.trans = TransLayers(channels)
        if variant in ("full", "pb"):
            self.head_b = PredictionHead()
        if variant in ("full", "pc"):
            self.head_c = PredictionHead()
        self.head_p = PredictionHead(out_ch=3 if variant == "pstar" else 1)

    def forward(self, image) -> Dict[str, torch.Tensor]:
        """Return every grid node keyed 'B:i:j' / 'C:i:j' / 'P:i'."""
        feats = self.encoder(image)
        nodes: Dict[str, torch.Tensor] = {}
        contribs: Dict[int, list] = {i: [] for i in LEVELS}
        if hasattr(self, "bec"):
            b = self.bec(feats)
            nodes.update({f"B:{i}:{j}": v for (i, j), v in b.items()})
            for i in LEVELS:
                contribs[i].append(b[(i, 5 - i)])
        if hasattr(self, "cec"):
            c = self.cec(feats)
            nodes.update({f"C:{i}:{j}": v for (i, j), v in c.items()})
            for i in LEVELS:
                contribs[i].append(c[(i, i)])
        if hasattr(self, "trans"):
            for i, t in zip(LEVELS, self.trans(feats)):
                contribs[i].append(t)
        p = self.fpn(contribs)
        nodes.update({f"P:{i}": v for i, v in p.items()})
        return nodes

    def loss(self, nodes: Dict[str, torch.Tensor], g_p, g_b, g_c) -> torch.Tensor:
        """Deep-supervision loss summed over the four levels, unit weights."""
        size = g_p.shape[-2:]
        total = g_p.new_zeros(())
        for i in LEVELS:
            if self.variant == "pstar":
                pred = self.head_p(nodes[f"P:{i}"], size)
                pp, pc, pb = pred[:, 0:1], pred[:, 1:2], pred[:, 2:3]
                total = total + bce_loss(pb, g_b) + bce_loss(pc, g_c)
                total = total + bce_loss(pp, g_p) + iou_loss(pp, g_p) + dice_loss(pp, g_p)
                continue
            if hasattr(self, "bec"):
                total = total + bce_loss(self.head_b(nodes[f"B:{i}:{5 - i}"], size), g_b)
            if hasattr(self, "cec"):
                total = total + bce_loss(self.head_c(nodes[f"C:{i}:{i}"], size), g_c)
            pp = self.head_p(nodes[f"P:{i}"], size)
            total = total + bce_loss(pp, g_p) + iou_loss(pp, g_p) + dice_loss(pp, g_p)
        return total
