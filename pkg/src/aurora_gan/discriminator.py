"""Projection-conditioned discriminator that grows alongside the generator."""

import torch
import torch.nn as nn

from .layers import EqualConv2d, EqualLinear, downsample2x, lrelu


class DiscBlock(nn.Module):
    """Two 3x3 convs and a 2x average pool: (in, r, r) -> (out, r/2, r/2)."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = EqualConv2d(in_channels, in_channels, 3, padding=1)
        self.conv2 = EqualConv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x):
        x = lrelu(self.conv1(x))
        x = lrelu(self.conv2(x))
        return downsample2x(x)


class Discriminator(nn.Module):
    """D(x, c) = head(phi) + <proj(phi), psi(t_g)>, phi = features(x).

    Each grown resolution r > 4 owns an input head and a downsampling block.
    Level r/2 of the trunk is ``from_rgb[r/2](avgpool(x)) + gain_r * block_r(level r)``
    with ``gain_r`` starting at zero, so at the instant of growth
    ``D(x_2r) == D(avgpool(x_2r))`` under the previous network.
    """

    def __init__(self, cfg, num_stages=1):
        super().__init__()
        self.cfg = cfg
        c4 = cfg.disc_channels[4]
        self.from_rgb = nn.ModuleDict()
        self.blocks = nn.ModuleDict()
        self.gains = nn.ParameterDict()
        self.from_rgb["4"] = EqualConv2d(3, c4, 1)
        self.final_conv = EqualConv2d(c4, c4, 3, padding=1)
        self.final_fc = EqualLinear(c4 * 16, cfg.disc_feature_dim, activation="lrelu")
        self.head = EqualLinear(cfg.disc_feature_dim, 1)
        self.proj = EqualLinear(cfg.disc_feature_dim, cfg.disc_feature_dim, bias=False, zero_init=True)
        self.text_proj = EqualLinear(cfg.text_dim, cfg.disc_feature_dim)
        for _ in range(num_stages - 1):
            self.add_stage()

    @property
    def resolutions(self):
        return [int(k) for k in self.from_rgb.keys()]

    @property
    def resolution(self):
        return self.resolutions[-1]

    def add_stage(self):
        all_res = list(self.cfg.resolutions)
        n = len(self.from_rgb)
        if n >= len(all_res):
            raise ValueError("discriminator already at its final resolution")
        res = all_res[n]
        ch = self.cfg.disc_channels
        self.from_rgb[str(res)] = EqualConv2d(3, ch[res], 1)
        self.blocks[str(res)] = DiscBlock(ch[res], ch[res // 2])
        self.gains[str(res)] = nn.Parameter(torch.zeros(()))
        return res

    def _trunk(self, x, res):
        # every level r < res also sees the image downsampled to r
        h = lrelu(self.from_rgb[str(res)](x))
        while res > 4:
            x = downsample2x(x)
            h = self.gains[str(res)] * self.blocks[str(res)](h)
            res //= 2
            h = h + lrelu(self.from_rgb[str(res)](x))
        return h

    def features(self, x):
        """Image -> fixed-width feature vector (B, disc_feature_dim)."""
        res = x.shape[-1]
        if x.shape[-2] != res or res not in self.resolutions:
            raise ValueError(f"image resolution {tuple(x.shape[-2:])} does not match an active "
                             f"discriminator stage {self.resolutions}")
        h = self._trunk(x, res)
        h = lrelu(self.final_conv(h))
        return self.final_fc(h.flatten(1))

    def forward(self, x, t_g):
        phi = self.features(x)
        uncond = self.head(phi).squeeze(1)
        cond = (self.proj(phi) * self.text_proj(t_g)).sum(dim=1)
        return uncond + cond
