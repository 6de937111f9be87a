"""Adversarial, R1, matching-aware, multi-level contrastive and MoE objectives."""

import json
import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError
from .layers import lrelu
from .moe import load_balance_loss

log = logging.getLogger(__name__)

LOSS_KEYS = ("g_adv", "d_adv", "r1", "match", "clip_multi", "moe")
WEIGHT_KEYS = ("lambda_clip", "lambda_match")


def d_adversarial(real_scores, fake_scores):
    return (F.softplus(-real_scores).mean() + F.softplus(fake_scores).mean())


def g_adversarial(fake_scores):
    return F.softplus(-fake_scores).mean()


def r1_penalty(discriminator, real_images, t_g, gamma):
    """(gamma / 2) * E ||grad_x D(x, c)||^2 with a graph for backprop."""
    x = real_images.detach().requires_grad_(True)
    scores = discriminator(x, t_g)
    (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=True)
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(1).mean()


def matching_aware(mismatched_scores):
    """Discriminator term pushing real images with wrong captions toward 'fake'.

    Returns ``(loss, skipped)``; an empty score tensor (batch of one, which
    cannot be deranged) yields zero and ``skipped=True``.
    """
    if mismatched_scores is None or mismatched_scores.numel() == 0:
        log.warning("matching-aware term skipped: batch too small to derange")
        return torch.zeros(()), True
    return F.softplus(mismatched_scores).mean(), False


def info_nce(image_emb, text_emb, temperature=0.07):
    """Symmetric InfoNCE over matched rows of two embedding matrices."""
    a = F.normalize(image_emb, dim=-1)
    b = F.normalize(text_emb, dim=-1)
    logits = a @ b.t() / temperature
    target = torch.arange(a.shape[0], device=a.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target))


class FrozenImageEmbedder(nn.Module):
    """Seeded random conv tower mapping an RGB image to ``dim`` features.

    Stand-in for a pretrained image tower; its weights never train.
    """

    def __init__(self, resolution, dim, seed=0, width=32):
        super().__init__()
        self.resolution = resolution
        gen = torch.Generator().manual_seed(seed)
        depth = max(1, int(math.log2(resolution)) - 2)
        chans = [3] + [width] * depth
        self.weights = nn.ParameterList(
            nn.Parameter(torch.randn(chans[i + 1], chans[i], 3, 3, generator=gen)
                         / math.sqrt(9 * chans[i]), requires_grad=False)
            for i in range(depth)
        )
        self.head = nn.Parameter(torch.randn(dim, width * 2, generator=gen) / math.sqrt(2 * width),
                                 requires_grad=False)

    def forward(self, x):
        if x.shape[-1] != self.resolution:
            raise ValueError(f"embedder built for {self.resolution}px, got {x.shape[-1]}px")
        h = x
        for i, wt in enumerate(self.weights):
            h = lrelu(F.conv2d(h, wt, padding=1, stride=2 if i else 1))
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return pooled @ self.head.t()


class MultiLevelClip(nn.Module):
    """Contrastive text-image loss averaged over every pyramid level."""

    def __init__(self, resolutions, dim, temperature=0.07, seed=4321):
        super().__init__()
        self.temperature = temperature
        self.embedders = nn.ModuleDict(
            {str(r): FrozenImageEmbedder(r, dim, seed=seed + r) for r in resolutions})
        self.requires_grad_(False)

    def forward(self, pyramid, t_g):
        if t_g.shape[0] < 2:
            return pyramid[-1].new_zeros(())
        losses = [info_nce(self.embedders[str(img.shape[-1])](img), t_g, self.temperature)
                  for img in pyramid]
        return torch.stack(losses).mean()


def moe_loss(decisions, alpha):
    if not decisions:
        return torch.zeros(())
    return sum(load_balance_loss(d.stats(), alpha) for d in decisions)


@dataclass
class LossReport:
    values: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def finite(self):
        return all(math.isfinite(v) for v in self.values.values())

    def to_json(self, **extra):
        return json.dumps({**extra, **self.values, "weights": self.weights, **self.flags},
                          sort_keys=True)


def total_losses(parts, weights):
    """Weighted generator/discriminator totals.

    ``parts`` maps loss names to tensors or floats; ``weights`` may hold only
    ``lambda_clip`` and ``lambda_match``. Returns ``(total_g, total_d)``.
    """
    unknown = set(weights) - set(WEIGHT_KEYS)
    if unknown:
        raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
    lam_clip = weights.get("lambda_clip", 1.0)
    lam_match = weights.get("lambda_match", 1.0)
    get = lambda k: parts.get(k, 0.0)  # noqa: E731
    total_g = get("g_adv") + lam_clip * get("clip_multi") + get("moe")
    total_d = get("d_adv") + lam_match * get("match") + get("r1")
    return total_g, total_d


def report_from(parts, weights, flags=None):
    values = {k: float(parts.get(k, 0.0)) for k in LOSS_KEYS}
    values["total_g"], values["total_d"] = total_losses(values, weights)
    return LossReport(values, dict(weights), dict(flags or {}))
