"""Per-point expert pool, the style-conditioned top-1 router, dispatch, load
statistics and routing-map export."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import EqualLinear

# 16 well-separated colors; the map value indexes this palette directly
PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
    [170, 110, 40], [255, 250, 200], [128, 0, 0], [0, 0, 128],
], dtype=np.uint8)


@dataclass
class RoutingDecision:
    """Top-1 assignment for M flattened points.

    ``index`` (M,) chosen expert, ``gate`` (M,) its router probability,
    ``probs`` (M, N) full router distribution.
    """

    index: torch.Tensor
    gate: torch.Tensor
    probs: torch.Tensor

    @property
    def num_experts(self):
        return self.probs.shape[1]

    def stats(self):
        return RoutingStats.from_decision(self)


@dataclass
class RoutingStats:
    fractions: torch.Tensor   # f_j, piecewise constant in the parameters
    mean_probs: torch.Tensor  # mean router probability per expert

    @classmethod
    def from_decision(cls, decision):
        n = decision.num_experts
        counts = torch.bincount(decision.index, minlength=n).to(decision.probs.dtype)
        return cls(counts / decision.index.numel(), decision.probs.mean(dim=0))


def load_balance_loss(stats, alpha=0.01):
    """alpha * N * sum_j f_j * mean_prob_j; gradient flows only through ``mean_probs``."""
    n = stats.fractions.numel()
    return alpha * n * torch.sum(stats.fractions.detach() * stats.mean_probs)


class Router(nn.Module):
    """Linear scorer over the concatenation of a feature point and the style vector."""

    def __init__(self, channels, w_dim, num_experts):
        super().__init__()
        self.num_experts = num_experts
        self.proj = EqualLinear(channels + w_dim, num_experts)

    def forward(self, points, w):
        # points: (M, C); w: (M, w_dim) already broadcast per point
        logits = self.proj(torch.cat([points, w], dim=-1))
        return route_from_logits(logits)


def route_from_logits(logits):
    probs = logits.softmax(dim=-1)
    # torch.argmax returns the first maximal index, i.e. ties go to the lower expert
    index = torch.argmax(logits, dim=-1)
    gate = probs.gather(1, index[:, None]).squeeze(1)
    return RoutingDecision(index, gate, probs)


class ExpertPool(nn.Module):
    """N two-layer MLPs (C -> ratio*C -> C) stored as stacked weights.

    ``invocations`` counts how many points each expert has processed since the
    last :meth:`reset_counters`; used to verify top-1 sparsity.
    """

    def __init__(self, channels, num_experts, ratio=4, zero_init_output=True):
        super().__init__()
        hidden = ratio * channels
        self.num_experts = num_experts
        self.channels = channels
        self.w1 = nn.Parameter(torch.randn(num_experts, channels, hidden))
        self.b1 = nn.Parameter(torch.zeros(num_experts, hidden))
        w2 = torch.zeros(num_experts, hidden, channels) if zero_init_output \
            else torch.randn(num_experts, hidden, channels)
        self.w2 = nn.Parameter(w2)
        self.b2 = nn.Parameter(torch.zeros(num_experts, channels))
        self.scale1 = channels ** -0.5
        self.scale2 = hidden ** -0.5
        self.register_buffer("invocations", torch.zeros(num_experts, dtype=torch.long), persistent=False)

    def reset_counters(self):
        self.invocations.zero_()

    def expert(self, j, x):
        self.invocations[j] += x.shape[0]
        h = F.leaky_relu(x @ (self.w1[j] * self.scale1) + self.b1[j], 0.2)
        return h @ (self.w2[j] * self.scale2) + self.b2[j]


def dispatch_experts(points, decision, pool):
    """Residual top-1 expert application: ``x + gate * FFN_j(x)`` per point."""
    M = points.shape[0]
    if decision.index.numel() != M:
        raise RuntimeError("routing decision does not match the number of points")
    if M and int(decision.index.max()) >= pool.num_experts:
        raise RuntimeError("expert index out of range")
    out = None
    for j in range(pool.num_experts):
        sel = decision.index == j
        count = int(sel.sum())
        if count == 0:
            continue
        if count == M:
            out = pool.expert(j, points)
            break
        idx = sel.nonzero().squeeze(1)
        y = pool.expert(j, points.index_select(0, idx))
        base = out if out is not None else points.new_zeros(M, points.shape[1])
        out = base.index_put((idx,), y)
    if out is None:
        return points
    return points + decision.gate[:, None] * out


class MoEFFN(nn.Module):
    """Router + expert pool over a (B, M, C) point cloud conditioned on w (B, w_dim)."""

    def __init__(self, channels, w_dim, num_experts, ratio=4, zero_init_output=True):
        super().__init__()
        self.router = Router(channels, w_dim, num_experts)
        self.pool = ExpertPool(channels, num_experts, ratio, zero_init_output)

    def forward(self, x, w):
        B, M, C = x.shape
        flat = x.reshape(B * M, C)
        w_points = w[:, None, :].expand(B, M, w.shape[-1]).reshape(B * M, -1)
        decision = self.router(flat, w_points)
        out = dispatch_experts(flat, decision, self.pool)
        return out.reshape(B, M, C), decision


def routing_map(decision, height, width, sample=0):
    """Expert indices of one sample reshaped to an (H, W) integer array."""
    index = decision.index.detach().cpu()
    per_sample = height * width
    if index.numel() % per_sample:
        raise ValueError(f"{index.numel()} routed points do not tile a {height}x{width} map")
    n_samples = index.numel() // per_sample
    if not 0 <= sample < n_samples:
        raise ValueError(f"sample {sample} out of range for {n_samples} routed samples")
    chunk = index[sample * per_sample:(sample + 1) * per_sample]
    return chunk.numpy().astype(np.int64).reshape(height, width)


def render_routing_map(index_map, num_experts):
    """Palette image (PIL mode ``P``) whose pixel values are expert indices."""
    from PIL import Image

    if num_experts > len(PALETTE):
        raise ValueError(f"palette supports at most {len(PALETTE)} experts")
    img = Image.fromarray(index_map.astype(np.uint8), mode="P")
    img.putpalette(PALETTE[:num_experts].reshape(-1).tolist())
    return img


def export_routing_maps(decisions, resolutions, out_dir, sample=0, prefix="layer"):
    """Write one palette PNG per MoE layer plus a utilization sidecar.

    The sidecar lists, per layer, the fraction of points sent to each expert.
    Returns the list of written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    lines = []
    for layer, (decision, res) in enumerate(zip(decisions, resolutions)):
        imap = routing_map(decision, res, res, sample)
        path = out_dir / f"{prefix}{layer:02d}_{res}x{res}.png"
        render_routing_map(imap, decision.num_experts).save(path, format="PNG", optimize=False)
        written.append(path)
        fractions = RoutingStats.from_decision(decision).fractions.tolist()
        lines.append(f"{layer}\t{res}\t" + "\t".join(f"{f:.8f}" for f in fractions))
    sidecar = out_dir / "utilization.txt"
    sidecar.write_text("layer\tresolution\tfractions\n" + "\n".join(lines) + "\n")
    written.append(sidecar)
    return written
