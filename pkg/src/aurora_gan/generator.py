"""Generator: modulated convolutions with kernel banks, deformable MTM layers,
convolution/attention unit blocks, progressive RGB accumulation."""

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError
from .layers import EqualConv2d, EqualLinear, lrelu, upsample2x
from .moe import MoEFFN, RoutingDecision
from .text_encoding import MappingNetwork, TextTokens, TokenAdapter


class ModulatedConv2d(nn.Module):
    """Style-modulated convolution over a bank of ``num_kernels`` kernels.

    Per sample the bank is blended with ``softmax(selector(w))``, scaled per
    input channel by ``affine(w)`` and (optionally) demodulated so every output
    filter has unit L2 norm.
    """

    def __init__(self, in_channels, out_channels, kernel_size, w_dim, num_kernels=4,
                 demodulate=True, bias=True, activation=None, zero_init=False, eps=1e-8):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.demodulate = demodulate
        self.activation = activation
        self.eps = eps
        shape = (num_kernels, out_channels, in_channels, kernel_size, kernel_size)
        self.bank = nn.Parameter(torch.zeros(shape) if zero_init else torch.randn(shape))
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.selector = EqualLinear(w_dim, num_kernels)
        self.affine = EqualLinear(w_dim, in_channels, bias_init=1.0)
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None

    @property
    def num_kernels(self):
        return self.bank.shape[0]

    def selection(self, w):
        return self.selector(w).softmax(dim=-1)

    def kernel(self, w, styles=None):
        """Effective per-sample kernels, shape (B, O, I, k, k)."""
        sel = self.selection(w)
        weight = torch.einsum("bk,koihw->boihw", sel, self.bank) * self.scale
        styles = self.affine(w) if styles is None else styles
        weight = weight * styles[:, None, :, None, None]
        if self.demodulate:
            weight = weight * torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4), keepdim=True) + self.eps)
        return weight

    def forward(self, x, w):
        B, C, H, W = x.shape
        if C != self.in_channels:
            raise ConfigError(f"ModulatedConv2d expects {self.in_channels} channels, got {C}")
        weight = self.kernel(w)
        k = self.kernel_size
        out = F.conv2d(x.reshape(1, B * C, H, W),
                       weight.reshape(B * self.out_channels, C, k, k),
                       padding=k // 2, groups=B)
        out = out.reshape(B, self.out_channels, H, W)
        if self.bias is not None:
            out = out + self.bias[None, :, None, None]
        if self.activation == "lrelu":
            out = lrelu(out)
        return out


def displace(f, offsets, mode="bilinear"):
    """Resample ``f`` at ``(x + dx, y + dy)`` per position; outside samples are zero.

    ``offsets`` is (B, 2, H, W) in pixels, channel 0 horizontal, channel 1
    vertical. Zero offsets reproduce ``f`` exactly (no interpolation error).
    """
    B, C, H, W = f.shape
    ys = torch.arange(H, dtype=f.dtype, device=f.device).view(1, H, 1)
    xs = torch.arange(W, dtype=f.dtype, device=f.device).view(1, 1, W)
    px = xs + offsets[:, 0]
    py = ys + offsets[:, 1]
    flat = f.reshape(B, C, H * W)

    def tap(iy, ix):
        valid = (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H)
        idx = (iy.clamp(0, H - 1) * W + ix.clamp(0, W - 1)).reshape(B, 1, H * W)
        vals = flat.gather(2, idx.expand(B, C, H * W)).reshape(B, C, H, W)
        return vals * valid[:, None].to(f.dtype)

    if mode == "nearest":
        return tap(torch.round(py).long(), torch.round(px).long())
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = (px - x0)[:, None]
    fy = (py - y0)[:, None]
    x0 = x0.long()
    y0 = y0.long()
    return ((1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1))
            + fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1)))


class MTM(nn.Module):
    """Modulated 3x3 conv whose input grid is displaced by predicted offsets.

    Offsets come from a zero-initialized 1x1 conv on ``[f, w]`` and exist only
    when ``deform`` is set (resolutions up to 16x16 by default).
    ``zero_output`` puts a zero-initialized per-channel gain on the output.
    """

    def __init__(self, channels, w_dim, num_kernels, deform, sampling="bilinear", zero_output=False):
        super().__init__()
        self.conv = ModulatedConv2d(channels, channels, 3, w_dim, num_kernels, activation="lrelu")
        self.sampling = sampling
        self.offset = EqualConv2d(channels + w_dim, 2, 1, zero_init=True) if deform else None
        self.gain = nn.Parameter(torch.zeros(channels)) if zero_output else None

    def offsets(self, f, w):
        if self.offset is None:
            return None
        B, _, H, W = f.shape
        return self.offset(torch.cat([f, w[:, :, None, None].expand(B, w.shape[1], H, W)], dim=1))

    def forward(self, f, w):
        off = self.offsets(f, w)
        if off is not None:
            f = displace(f, off, self.sampling)
        out = self.conv(f, w)
        if self.gain is not None:
            out = out * self.gain[None, :, None, None]
        return out


class ConvBlock(nn.Module):
    """f + MTM(MTM(f, w), w); the second MTM starts at zero so the block is the identity."""

    def __init__(self, channels, w_dim, num_kernels, deform, sampling="bilinear"):
        super().__init__()
        self.mtm1 = MTM(channels, w_dim, num_kernels, deform, sampling)
        self.mtm2 = MTM(channels, w_dim, num_kernels, deform, sampling, zero_output=True)

    def forward(self, f, w):
        return self.mtm2(self.mtm1(f, w), w) + f


def l2_attention(q, k, v, mask=None):
    """Attention with logits ``-||q_i - k_j||^2 / sqrt(d)``.

    q: (..., Lq, d), k: (..., Lk, d), v: (..., Lk, dv), mask: broadcastable to
    (..., Lq, Lk) with True marking usable keys. Returns (output, weights).
    """
    d = q.shape[-1]
    dist = (q.pow(2).sum(-1, keepdim=True)
            - 2 * q @ k.transpose(-1, -2)
            + k.pow(2).sum(-1).unsqueeze(-2))
    logits = -dist / math.sqrt(d)
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = logits.softmax(dim=-1)
    if mask is not None:
        # rows with no usable key produce zeros instead of NaN
        weights = torch.nan_to_num(weights, nan=0.0)
    return weights @ v, weights


class L2MultiHeadAttention(nn.Module):
    def __init__(self, dim, kv_dim, heads, zero_init_output=True):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.to_q = EqualLinear(dim, dim)
        self.to_k = EqualLinear(kv_dim, dim)
        self.to_v = EqualLinear(kv_dim, dim)
        self.out = EqualLinear(dim, dim, zero_init=zero_init_output)

    def forward(self, x, context=None, mask=None):
        B, L, D = x.shape
        h = self.heads
        xn = self.norm(x)
        ctx = xn if context is None else context
        q = self.to_q(xn).reshape(B, L, h, D // h).transpose(1, 2)
        k = self.to_k(ctx).reshape(B, ctx.shape[1], h, D // h).transpose(1, 2)
        v = self.to_v(ctx).reshape(B, ctx.shape[1], h, D // h).transpose(1, 2)
        if mask is not None:
            mask = mask[:, None, None, :]
        y, _ = l2_attention(q, k, v, mask)
        return self.out(y.transpose(1, 2).reshape(B, L, D))


class AttentionBlock(nn.Module):
    """ModConv in-projection, self-attention, text cross-attention, routed
    expert FFN and ModConv out-projection, each attention/FFN step residual."""

    def __init__(self, in_channels, channels, w_dim, text_dim, num_kernels, heads,
                 num_experts, expert_ratio=4):
        super().__init__()
        self.proj_in = ModulatedConv2d(in_channels, channels, 1, w_dim, num_kernels, activation="lrelu")
        self.self_attn = L2MultiHeadAttention(channels, channels, heads)
        self.cross_attn = L2MultiHeadAttention(channels, text_dim, heads)
        self.moe = MoEFFN(channels, w_dim, num_experts, expert_ratio)
        self.proj_out = ModulatedConv2d(channels, channels, 1, w_dim, num_kernels, activation="lrelu")

    def forward(self, f_conv, w, tokens):
        f = self.proj_in(f_conv, w)
        B, C, H, W = f.shape
        x = f.flatten(2).transpose(1, 2)
        x = self.self_attn(x) + x
        x = self.cross_attn(x, tokens.t_seq, tokens.mask) + x
        x, decision = self.moe(x, w)
        f = x.transpose(1, 2).reshape(B, C, H, W)
        return self.proj_out(f, w), decision


class ToRGB(nn.Module):
    """1x1 modulated projection to RGB without demodulation."""

    def __init__(self, channels, w_dim, zero_init=False):
        super().__init__()
        self.conv = ModulatedConv2d(channels, 3, 1, w_dim, num_kernels=1,
                                    demodulate=False, zero_init=zero_init)

    def forward(self, f, w):
        return self.conv(f, w)


def rgb_accumulate(prev_rgb, f, w, to_rgb):
    """``upsample2x(prev_rgb) + to_rgb(f, w)``; at the root just ``to_rgb(f, w)``."""
    rgb = to_rgb(f, w)
    if prev_rgb is None:
        return rgb
    if prev_rgb.shape[-1] * 2 != f.shape[-1] or prev_rgb.shape[-2] * 2 != f.shape[-2]:
        raise ValueError(f"previous RGB {tuple(prev_rgb.shape[-2:])} is not half of "
                         f"feature resolution {tuple(f.shape[-2:])}")
    return upsample2x(prev_rgb) + rgb


class GenerativeUnit(nn.Module):
    def __init__(self, res, in_channels, channels, cfg, zero_rgb):
        super().__init__()
        m = cfg
        self.res = res
        self.conv = ConvBlock(in_channels, m.w_dim, m.num_kernels,
                              deform=res <= m.mtm_max_res, sampling=m.mtm_sampling)
        if res >= m.attn_min_res:
            self.attn = AttentionBlock(in_channels, channels, m.w_dim, m.text_dim, m.num_kernels,
                                       m.attn_heads, m.num_experts, m.expert_ratio)
        else:
            if in_channels != channels:
                raise ConfigError("attention can only be disabled where channels stay constant")
            self.attn = None
        self.to_rgb = ToRGB(channels, m.w_dim, zero_init=zero_rgb)


@dataclass
class SynthesisOutput:
    pyramid: list
    decisions: list = field(default_factory=list)
    decision_resolutions: list = field(default_factory=list)
    w: torch.Tensor = None

    @property
    def image(self):
        return self.pyramid[-1]


class Generator(nn.Module):
    """Text-conditioned progressive generator.

    Holds the learnable token adapter, the mapping network and one
    :class:`GenerativeUnit` per grown resolution. The frozen text encoder is
    kept outside; callers pass its :class:`TextTokens`.
    """

    def __init__(self, cfg, num_stages=1):
        super().__init__()
        self.cfg = cfg
        m = cfg
        self.adapter = TokenAdapter(m.text_dim, m.adapter_layers)
        self.mapping = MappingNetwork(m.z_dim, m.text_dim, m.w_dim, m.mapping_layers, m.mapping_lr_mul)
        self.const = nn.Parameter(torch.randn(1, m.channels_at(4), 4, 4))
        self.units = nn.ModuleDict()
        for _ in range(num_stages):
            self.add_stage()

    @property
    def resolutions(self):
        return [int(k) for k in self.units.keys()]

    @property
    def resolution(self):
        return self.resolutions[-1]

    def add_stage(self):
        """Instantiate the next resolution; returns the new unit."""
        all_res = list(self.cfg.resolutions)
        n = len(self.units)
        if n >= len(all_res):
            raise ValueError("generator already at its final resolution")
        res = all_res[n]
        in_ch = self.cfg.channels_at(res // 2) if n else self.cfg.channels_at(4)
        unit = GenerativeUnit(res, in_ch, self.cfg.channels_at(res), self.cfg, zero_rgb=n > 0)
        self.units[str(res)] = unit
        return unit

    def adapt(self, tokens):
        return self.adapter(tokens)

    def map_latent(self, z, t_g):
        return self.mapping(z, t_g)

    def synthesis(self, w, tokens, resolution=None):
        """Run the unit blocks from 4x4 up to ``resolution`` with adapted tokens."""
        resolution = resolution or self.resolution
        if resolution not in self.resolutions:
            raise ValueError(f"resolution {resolution} is not an active stage {self.resolutions}")
        B = w.shape[0]
        x = self.const.expand(B, -1, -1, -1)
        rgb = None
        out = SynthesisOutput(pyramid=[], w=w)
        for res in self.resolutions:
            if res > resolution:
                break
            unit = self.units[str(res)]
            if rgb is not None:
                x = upsample2x(x)
            x = unit.conv(x, w)
            if unit.attn is not None:
                x, decision = unit.attn(x, w, tokens)
                out.decisions.append(decision)
                out.decision_resolutions.append(res)
            rgb = rgb_accumulate(rgb, x, w, unit.to_rgb)
            out.pyramid.append(rgb)
        return out

    def forward(self, z, tokens, resolution=None):
        """``tokens`` are raw frozen-encoder tokens; the adapter is applied here."""
        adapted = self.adapt(tokens)
        w = self.map_latent(z, adapted.t_g)
        return self.synthesis(w, adapted, resolution)


def synthesize(generator, encoder, z, captions, resolution=None):
    """Convenience wrapper: caption strings -> pyramid via the frozen encoder."""
    if isinstance(captions, str):
        captions = [captions] * z.shape[0]
    tokens = encoder.encode_text(captions)
    return generator(z, tokens, resolution)


def to_image(rgb):
    """Map raw generator output to displayable range [-1, 1]."""
    return rgb.clamp(-1.0, 1.0)
