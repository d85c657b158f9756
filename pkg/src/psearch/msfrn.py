"""Multi-scale frequency refinement of the re-ID feature maps.

Per-layer lightweight refinement (1x1 -> depth-wise 3x3 -> 1x1), per-level
concat + 1x1 aggregation, then coarse-to-fine fusion where each fused map is
split with a single-level orthonormal Haar transform, its three detail bands
re-weighted by channel-attention blocks and learnable gains, and inverted.

Haar band naming follows the ``(row, column)`` filter order: ``LH`` is
low-pass along rows (vertical) and high-pass along columns (horizontal), so a
pattern alternating across columns lands entirely in ``LH``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from psearch.errors import ConfigError, ContractError


@dataclass
class SubBandSet:
    LL: torch.Tensor
    LH: torch.Tensor
    HL: torch.Tensor
    HH: torch.Tensor

    def __iter__(self):
        return iter((self.LL, self.LH, self.HL, self.HH))


def dwt2(f: torch.Tensor) -> SubBandSet:
    """Single-level orthonormal 2-D Haar transform over the last two axes."""
    h, w = f.shape[-2:]
    if h % 2 or w % 2:
        raise ContractError(f"dwt2 needs even spatial size, got {h}x{w}")
    a = f[..., 0::2, 0::2]
    b = f[..., 0::2, 1::2]
    c = f[..., 1::2, 0::2]
    d = f[..., 1::2, 1::2]
    return SubBandSet(
        LL=(a + b + c + d) / 2,
        LH=(a - b + c - d) / 2,
        HL=(a + b - c - d) / 2,
        HH=(a - b - c + d) / 2,
    )


def idwt2(bands: SubBandSet) -> torch.Tensor:
    ll, lh, hl, hh = bands
    if not (ll.shape == lh.shape == hl.shape == hh.shape):
        raise ContractError("sub-bands must share one shape")
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    c = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    top = torch.stack([a, b], dim=-1).flatten(-2)
    bottom = torch.stack([c, d], dim=-1).flatten(-2)
    return torch.stack([top, bottom], dim=-2).flatten(-3, -2)


def high_frequency_ratio(f: torch.Tensor) -> float:
    bands = dwt2(_pad_even(f)[0])
    total = sum(float((x**2).sum()) for x in bands)
    high = float((bands.LH**2).sum() + (bands.HL**2).sum() + (bands.HH**2).sum())
    return high / total if total > 0 else 0.0


def _pad_even(x: torch.Tensor):
    h, w = x.shape[-2:]
    ph, pw = h % 2, w % 2
    if not (ph or pw):
        return x, (h, w)
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    mode = "reflect" if min(h, w) > 1 else "replicate"
    x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return (x[0] if squeeze else x), (h, w)


def _batched(x: torch.Tensor):
    return (x[None], True) if x.dim() == 3 else (x, False)


def _variance_preserving(conv: nn.Conv2d):
    """1x1 convs get std 1/sqrt(fan_in); depth-wise 3x3 kernels start as centered deltas."""
    with torch.no_grad():
        if conv.groups > 1 and conv.groups == conv.in_channels:
            conv.weight.zero_()
            conv.weight[:, 0, conv.kernel_size[0] // 2, conv.kernel_size[1] // 2] = 1.0
        else:
            fan_in = conv.weight[0].numel()
            conv.weight.normal_(0.0, fan_in ** -0.5)
        if conv.bias is not None:
            conv.bias.zero_()


class LPM(nn.Module):
    """1x1 conv -> depth-wise 3x3 (same padding) -> 1x1 conv."""

    def __init__(self, in_channels: int, out_channels: int, mid_channels: int | None = None,
                 bias: bool = True):
        super().__init__()
        mid = mid_channels or out_channels
        self.in_channels = in_channels
        self.reduce = nn.Conv2d(in_channels, mid, 1, bias=bias)
        self.depthwise = nn.Conv2d(mid, mid, 3, padding=1, groups=mid, bias=bias)
        self.expand = nn.Conv2d(mid, out_channels, 1, bias=bias)
        for conv in (self.reduce, self.depthwise, self.expand):
            _variance_preserving(conv)

    def forward(self, x):
        return self.expand(self.depthwise(self.reduce(x)))


def lpm_refine(f: torch.Tensor, block: LPM) -> torch.Tensor:
    if f.shape[-3] != block.in_channels:
        raise ContractError(f"LPM expects {block.in_channels} channels, got {f.shape[-3]}")
    x, squeeze = _batched(f)
    out = block(x)
    return out[0] if squeeze else out


def aggregate_level(maps, fuse: nn.Conv2d) -> torch.Tensor:
    """Channel-concatenate same-size maps and apply a 1x1 conv."""
    shapes = {tuple(m.shape[-2:]) for m in maps}
    if len(shapes) != 1:
        raise ContractError(f"maps to aggregate differ in spatial size: {sorted(shapes)}")
    x = torch.cat(list(maps), dim=-3)
    if x.shape[-3] != fuse.in_channels:
        raise ContractError(f"aggregation expects {fuse.in_channels} channels, got {x.shape[-3]}")
    x, squeeze = _batched(x)
    out = fuse(x)
    return out[0] if squeeze else out


class SRB(nn.Module):
    """Sub-band refinement: ``s * DepthConv(band)`` with
    ``s = sigmoid(Conv1x1(GAP(Pointwise(DepthConv(band)))))``.

    The depth-wise kernels start as centered deltas and the gate starts open
    (``s`` near 0.95), so a fresh block nearly passes the band through.
    """

    def __init__(self, channels: int, bias: bool = True):
        super().__init__()
        self.channels = channels
        self.depthwise = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=bias)
        self.pointwise = nn.Conv2d(channels, channels, 1, bias=bias)
        self.attn = nn.Conv2d(channels, channels, 1, bias=True)
        with torch.no_grad():
            self.depthwise.weight.zero_()
            self.depthwise.weight[:, 0, 1, 1] = 1.0
            if bias:
                self.depthwise.bias.zero_()
            self.attn.weight.normal_(0.0, 0.01)
            self.attn.bias.fill_(3.0)

    def attention(self, d):
        y = self.pointwise(d)
        return torch.sigmoid(self.attn(y.mean(dim=(-2, -1), keepdim=True)))

    def forward(self, x):
        d = self.depthwise(x)
        return self.attention(d) * d


def srb_refine(band: torch.Tensor, block: SRB) -> torch.Tensor:
    if band.shape[-3] != block.channels:
        raise ContractError(f"SRB expects {block.channels} channels, got {band.shape[-3]}")
    x, squeeze = _batched(band)
    out = block(x)
    return out[0] if squeeze else out


class ChannelLayerNorm(nn.Module):
    """LayerNorm over channels at every spatial position."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mu = x.mean(dim=-3, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-3, keepdim=True)
        y = (x - mu) / torch.sqrt(var + self.eps)
        return y * self.weight[:, None, None] + self.bias[:, None, None]


class FRM(nn.Module):
    """One coarse-to-fine fusion point."""

    def __init__(self, channels: int, gamma_init: float = 1.0, eps: float = 1e-5,
                 bias: bool = True, refine_bands: bool = True):
        super().__init__()
        self.norm = ChannelLayerNorm(channels, eps)
        self.refine_bands = refine_bands
        self.srbs = nn.ModuleDict({b: SRB(channels, bias) for b in ("LH", "HL", "HH")})
        self.gammas = nn.ParameterDict(
            {b: nn.Parameter(torch.tensor(float(gamma_init))) for b in ("LH", "HL", "HH")})

    def forward(self, coarse, fine):
        return frm_fuse(coarse, fine, self)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    x, squeeze = _batched(x)
    out = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def frm_fuse(coarse: torch.Tensor, fine: torch.Tensor, frm: FRM) -> torch.Tensor:
    ch, cw = coarse.shape[-2:]
    fh, fw = fine.shape[-2:]
    if (2 * ch, 2 * cw) != (fh, fw):
        raise ContractError(f"coarse {ch}x{cw} must be exactly half of fine {fh}x{fw}")
    x = frm.norm(_batched(upsample2x(coarse) + fine)[0])
    if fine.dim() == 3:
        x = x[0]
    if not frm.refine_bands:
        return x
    padded, (h, w) = _pad_even(x)
    bands = dwt2(padded)
    refined = SubBandSet(
        bands.LL,
        frm.gammas["LH"] * srb_refine(bands.LH, frm.srbs["LH"]),
        frm.gammas["HL"] * srb_refine(bands.HL, frm.srbs["HL"]),
        frm.gammas["HH"] * srb_refine(bands.HH, frm.srbs["HH"]),
    )
    return idwt2(refined)[..., :h, :w]


class MSFRN(nn.Module):
    """Full refinement stack.

    Args:
        level_channels: ``{level: [channels of each selected layer]}``.
        width: common channel width after LPM / aggregation.
        frequency_refinement: if False, fusion stops after LayerNorm
            (no DWT / SRB) -- the no-FRM ablation path.
    """

    def __init__(self, level_channels: dict[int, list[int]], width: int = 256, bias: bool = True,
                 gamma_init: float = 1.0, eps: float = 1e-5, frequency_refinement: bool = True):
        super().__init__()
        self.levels = sorted(level_channels)
        if len(self.levels) < 1:
            raise ConfigError("MSFRN needs at least one level")
        self.width = width
        self.lpms = nn.ModuleDict({
            str(l): nn.ModuleList([LPM(c, width, bias=bias) for c in level_channels[l]])
            for l in self.levels})
        self.aggregators = nn.ModuleDict({
            str(l): nn.Conv2d(width * len(level_channels[l]), width, 1, bias=bias)
            for l in self.levels})
        self.fusions = nn.ModuleList([
            FRM(width, gamma_init, eps, bias, refine_bands=frequency_refinement)
            for _ in self.levels[1:]])
        self.out = nn.Conv2d(width, width, 1, bias=bias)
        for conv in [*self.aggregators.values(), self.out]:
            _variance_preserving(conv)

    def level_features(self, selected):
        missing = [l for l in self.levels if l not in selected]
        if missing:
            raise ConfigError(f"missing feature maps for level(s) {missing}")
        out = {}
        for l in self.levels:
            maps = selected[l]
            if len(maps) != len(self.lpms[str(l)]):
                raise ConfigError(f"level {l}: expected {len(self.lpms[str(l)])} maps, got {len(maps)}")
            refined = [lpm_refine(m, lpm) for m, lpm in zip(maps, self.lpms[str(l)])]
            out[l] = aggregate_level(refined, self.aggregators[str(l)])
        return out

    def forward(self, selected: dict[int, list[torch.Tensor]]) -> torch.Tensor:
        per_level = self.level_features(selected)
        x = per_level[self.levels[0]]
        for fusion, l in zip(self.fusions, self.levels[1:]):
            x = frm_fuse(x, per_level[l], fusion)
        x, squeeze = _batched(x)
        out = self.out(x)
        return out[0] if squeeze else out


def refine(selected, msfrn: MSFRN) -> torch.Tensor:
    return msfrn(selected)


class AggregateOnly(nn.Module):
    """MSFRN-off baseline: every selected map bilinearly resized to the finest
    level, channel-concatenated and mixed by a single 1x1 conv."""

    def __init__(self, level_channels: dict[int, list[int]], width: int = 256, bias: bool = True):
        super().__init__()
        self.levels = sorted(level_channels)
        self.width = width
        self.fuse = nn.Conv2d(sum(sum(level_channels[l]) for l in self.levels), width, 1, bias=bias)
        _variance_preserving(self.fuse)

    def forward(self, selected):
        missing = [l for l in self.levels if l not in selected]
        if missing:
            raise ConfigError(f"missing feature maps for level(s) {missing}")
        maps = [m for l in self.levels for m in selected[l]]
        squeeze = maps[-1].dim() == 3
        size = tuple(maps[-1].shape[-2:])
        resized = [F.interpolate(_batched(m)[0], size=size, mode="bilinear", align_corners=False)
                   if tuple(m.shape[-2:]) != size else _batched(m)[0] for m in maps]
        out = self.fuse(torch.cat(resized, dim=1))
        return out[0] if squeeze else out
