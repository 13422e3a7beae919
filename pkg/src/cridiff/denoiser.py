"""ResUNet noise predictor with cross-attention conditioner injection.

Encoder stages E1..E4 sit at strides 4/8/16/32 (matching the conditioner
pyramid levels); decoder stages D1..D4 mirror them with D1 coarsest and D4
finest. Conditioner nodes are injected after selected stages via residual
single-head cross-attention whose output projection starts at zero, so a
freshly built (or generatively pretrained) model is unaffected by injection
until training moves those weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioners import GRID_CH

STAGES = ("E1", "E2", "E3", "E4", "D1", "D2", "D3", "D4")
STRATEGIES = ("crisscross", "sbs")
RATIOS = ("2:2", "1:3", "3:1")


@dataclass(frozen=True)
class InjectionPlan:
    """Routing table: backbone stage -> conditioner node key."""

    strategy: str
    ratio: str
    table: Dict[str, str]

    def serialize(self) -> str:
        lines = [f"strategy={self.strategy} ratio={self.ratio}"]
        lines += [f"{s} -> {self.table[s]}" for s in STAGES if s in self.table]
        return "\n".join(lines)


def build_injection_plan(
    strategy: str, ratio: str = "2:2", variant: str = "full"
) -> InjectionPlan:
    """Route conditioner nodes to backbone stages.

    crisscross: core features into the shallow k encoder/decoder layers,
    boundary features into the deeper ones (k from the ratio). sbs swaps the
    roles (boundary shallow, core deep). Variants without both grids route
    whatever single stream they produce to every stage.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if ratio not in RATIOS:
        raise ValueError(f"unknown ratio {ratio!r}; choose from {RATIOS}")
    k = int(ratio.split(":")[0])
    table = {}
    for i in range(1, 5):
        if variant in ("p", "pstar"):
            key = f"P:{i}"
        elif variant == "pb":
            key = f"B:{i}:{5 - i}"
        elif variant == "pc":
            key = f"C:{i}:{i}"
        else:
            core = i <= k if strategy == "crisscross" else i > k
            key = f"C:{i}:{i}" if core else f"B:{i}:{5 - i}"
        table[f"E{i}"] = key
        table[f"D{5 - i}"] = key
    return InjectionPlan(strategy=strategy, ratio=ratio, table=table)


def empty_plan() -> InjectionPlan:
    """No-op plan: the backbone runs uninjected (used for GP pretraining)."""
    return InjectionPlan(strategy="none", ratio="-", table={})


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style sinusoidal timestep embedding."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1)
    ).to(t.dtype)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    """GroupNorm-SiLU-Conv residual block with additive time conditioning."""

    def __init__(self, in_ch: int, out_ch: int, tdim: int, groups: int = 8):
        super().__init__()
        g1 = math.gcd(groups, in_ch)
        g2 = math.gcd(groups, out_ch)
        self.norm1 = nn.GroupNorm(g1, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(tdim, out_ch)
        self.norm2 = nn.GroupNorm(g2, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttentionInjector(nn.Module):
    """Residual single-head cross-attention: queries from the diffusion
    feature, keys/values from the conditioner node.

    The output projection is zero-initialized, so the block is an exact
    identity on the backbone feature until trained.

    A learnable positional gate adds a spatial-alignment bias to the logits
    (peaked where query and key positions coincide). Queries computed from a
    noisy diffusion feature carry little content, so without this bias the
    softmax collapses toward a uniform average over the conditioner map and
    no spatial information gets through.
    """

    def __init__(self, feat_ch: int, cond_ch: int = GRID_CH, pos_gate: float = 10.0):
        super().__init__()
        self.cond_proj = nn.Conv2d(cond_ch, feat_ch, 1)
        self.to_q = nn.Conv2d(feat_ch, feat_ch, 1)
        self.to_k = nn.Conv2d(feat_ch, feat_ch, 1)
        self.to_v = nn.Conv2d(feat_ch, feat_ch, 1)
        self.out_proj = nn.Conv2d(feat_ch, feat_ch, 1)
        self.pos_gate = nn.Parameter(torch.tensor(float(pos_gate)))
        self._bias_cache: Dict[tuple, torch.Tensor] = {}
        self.reset_out_proj()

    def reset_out_proj(self):
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def _alignment_bias(self, h: int, w: int) -> torch.Tensor:
        """(N, N) bias, 0 at aligned positions and -|Δ|^2 (normalized) away."""
        key = (h, w)
        if key not in self._bias_cache:
            ys, xs = torch.meshgrid(
                torch.arange(h, dtype=torch.float32) / max(h, 1),
                torch.arange(w, dtype=torch.float32) / max(w, 1),
                indexing="ij",
            )
            pos = torch.stack([ys.flatten(), xs.flatten()], dim=1)  # (N, 2)
            self._bias_cache[key] = -((pos[:, None] - pos[None, :]) ** 2).sum(-1)
        return self._bias_cache[key]

    def attention(self, cond, feat):
        """Return (attended values (B,C,H,W), attention weights (B,Nq,Nk))."""
        if cond.shape[-2:] != feat.shape[-2:]:
            cond = F.interpolate(
                cond, size=feat.shape[-2:], mode="bilinear", align_corners=False
            )
        c = self.cond_proj(cond)
        bsz, ch, h, w = feat.shape
        q = self.to_q(feat).flatten(2)  # (B, C, Nq)
        k = self.to_k(c).flatten(2)
        v = self.to_v(c).flatten(2)
        logits = q.transpose(1, 2) @ k / math.sqrt(ch)
        logits = logits + self.pos_gate * self._alignment_bias(h, w)
        attn = torch.softmax(logits, dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(bsz, ch, h, w)
        return out, attn

    def forward(self, cond, feat):
        out, _ = self.attention(cond, feat)
        return feat + self.out_proj(out)


class Denoiser(nn.Module):
    """Noise-prediction ResUNet over single-channel inputs.

    Stage widths default to (64, 128, 256, 512); `small=True` halves them.
    Conditioning enters only through injected cross-attention, keeping the
    backbone's parameterization identical with and without conditioning
    (which is what makes generative-pretrain weight transfer exact).
    """

    def __init__(self, widths=(64, 128, 256, 512), small: bool = False, in_ch: int = 1):
        super().__init__()
        if small:
            widths = tuple(w // 2 for w in widths)
        self.widths = tuple(widths)
        w0, w1, w2, w3 = widths
        sc = w0 // 2
        tdim = w0 * 4
        self.tdim = tdim
        self.time_mlp = nn.Sequential(
            nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim)
        )
        self.stem = nn.Conv2d(in_ch, sc, 3, padding=1)
        self.down_half = nn.Conv2d(sc, sc, 3, stride=2, padding=1)
        self.block_half = ResBlock(sc, sc, tdim)
        self.down = nn.ModuleDict(
            {
                "E1": nn.Conv2d(sc, w0, 3, stride=2, padding=1),
                "E2": nn.Conv2d(w0, w1, 3, stride=2, padding=1),
                "E3": nn.Conv2d(w1, w2, 3, stride=2, padding=1),
                "E4": nn.Conv2d(w2, w3, 3, stride=2, padding=1),
            }
        )
        self.enc = nn.ModuleDict(
            {
                "E1": ResBlock(w0, w0, tdim),
                "E2": ResBlock(w1, w1, tdim),
                "E3": ResBlock(w2, w2, tdim),
                "E4": ResBlock(w3, w3, tdim),
            }
        )
        self.mid = ResBlock(w3, w3, tdim)
        self.dec = nn.ModuleDict(
            {
                "D1": ResBlock(w3 + w3, w3, tdim),
                "D2": ResBlock(w3 + w2, w2, tdim),
                "D3": ResBlock(w2 + w1, w1, tdim),
                "D4": ResBlock(w1 + w0, w0, tdim),
            }
        )
        self.post_half = ResBlock(w0 + sc, sc, tdim)
        self.post_full = ResBlock(sc + sc, sc, tdim)
        self.out_norm = nn.GroupNorm(math.gcd(8, sc), sc)
        self.out_conv = nn.Conv2d(sc, in_ch, 3, padding=1)
        self.injectors = nn.ModuleDict(
            {
                "E1": CrossAttentionInjector(w0),
                "E2": CrossAttentionInjector(w1),
                "E3": CrossAttentionInjector(w2),
                "E4": CrossAttentionInjector(w3),
                "D1": CrossAttentionInjector(w3),
                "D2": CrossAttentionInjector(w2),
                "D3": CrossAttentionInjector(w1),
                "D4": CrossAttentionInjector(w0),
            }
        )

    # -- conditioning -------------------------------------------------------

    def _inject(self, stage, feat, nodes, plan, captured):
        if plan is not None and stage in plan.table:
            if nodes is None:
                raise ValueError(f"plan routes {stage} but no nodes were given")
            key = plan.table[stage]
            if key not in nodes:
                raise KeyError(f"plan routes missing node {key!r} to {stage}")
            feat = self.injectors[stage](nodes[key], feat)
        if captured is not None:
            captured[stage] = feat
        return feat

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        x_t: torch.Tensor,
        t,
        nodes: Optional[Dict[str, torch.Tensor]] = None,
        plan: Optional[InjectionPlan] = None,
        collect_stages: bool = False,
    ):
        if x_t.ndim != 4:
            raise ValueError("x_t must be (B,1,H,W)")
        h, w = x_t.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {(h, w)} must be divisible by 32")
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), float(t), dtype=x_t.dtype)
        temb = self.time_mlp(sinusoidal_embedding(t.to(x_t.dtype), self.tdim))
        captured = {} if collect_stages else None

        s = self.stem(x_t)
        hh = self.block_half(self.down_half(s), temb)
        e1 = self._inject("E1", self.enc["E1"](self.down["E1"](hh), temb), nodes, plan, captured)
        e2 = self._inject("E2", self.enc["E2"](self.down["E2"](e1), temb), nodes, plan, captured)
        e3 = self._inject("E3", self.enc["E3"](self.down["E3"](e2), temb), nodes, plan, captured)
        e4 = self._inject("E4", self.enc["E4"](self.down["E4"](e3), temb), nodes, plan, captured)
        m = self.mid(e4, temb)
        d1 = self._inject("D1", self.dec["D1"](torch.cat([m, e4], 1), temb), nodes, plan, captured)
        d2 = self._inject("D2", self.dec["D2"](torch.cat([_up(d1), e3], 1), temb), nodes, plan, captured)
        d3 = self._inject("D3", self.dec["D3"](torch.cat([_up(d2), e2], 1), temb), nodes, plan, captured)
        d4 = self._inject("D4", self.dec["D4"](torch.cat([_up(d3), e1], 1), temb), nodes, plan, captured)
        ph = self.post_half(torch.cat([_up(d4), hh], 1), temb)
        pf = self.post_full(torch.cat([_up(ph), s], 1), temb)
        eps = self.out_conv(F.silu(self.out_norm(pf)))
        if collect_stages:
            return eps, captured
        return eps

    # -- weight handling ----------------------------------------------------

    def backbone_state_dict(self) -> Dict[str, torch.Tensor]:
        """All weights except the injection blocks (absent during pretraining)."""
        return {
            k: v.detach().clone()
            for k, v in self.state_dict().items()
            if not k.startswith("injectors.")
        }


def _up(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


def init_weights(model: Denoiser, mode: str, checkpoint_weights=None) -> Denoiser:
    """Initialize a denoiser in place.

    random  - module defaults (uniform fan-in)
    kaiming - He-normal conv kernels, zero biases
    gp      - load backbone tensors from a generative-pretrain checkpoint;
              injection blocks keep their identity initialization
    """
    if mode == "random":
        for m in model.modules():
            if hasattr(m, "reset_parameters"):
                m.reset_parameters()
    elif mode == "kaiming":
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
    elif mode == "gp":
        if checkpoint_weights is None:
            raise ValueError("gp init requires checkpoint weights")
        own = model.state_dict()
        backbone_keys = [k for k in own if not k.startswith("injectors.")]
        missing = [k for k in backbone_keys if k not in checkpoint_weights]
        if missing:
            raise ValueError(f"checkpoint missing backbone tensors: {missing[:5]}")
        for k in backbone_keys:
            if checkpoint_weights[k].shape != own[k].shape:
                raise ValueError(
                    f"shape mismatch for {k}: checkpoint "
                    f"{tuple(checkpoint_weights[k].shape)} vs model {tuple(own[k].shape)}"
                )
        model.load_state_dict({**own, **{k: checkpoint_weights[k] for k in backbone_keys}})
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    for inj in model.injectors.values():
        inj.reset_out_proj()
    return model
