"""Feature statistics, Frechet distance, desk-scale FID and interpolation tools.

Absolute FID values here come from a seeded random-convolution extractor and
are not comparable with Inception-based numbers reported elsewhere.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import lrelu
from .text_encoding import TextTokens

log = logging.getLogger(__name__)


@dataclass
class FeatureStats:
    """Mean, unbiased covariance and sample count of a feature set."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-d array (samples, dims)")
        n = feats.shape[0]
        mean = feats.mean(axis=0)
        if n > 1:
            cov = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
        else:
            cov = np.zeros((feats.shape[1], feats.shape[1]))
        return cls(mean, cov, n)

    def merge(self, other):
        """Combine two disjoint sample sets (parallel variance update)."""
        n = self.count + other.count
        if n == 0:
            return self
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = (self.cov * max(self.count - 1, 0) + other.cov * max(other.count - 1, 0)
              + np.outer(delta, delta) * self.count * other.count / n)
        cov = m2 / (n - 1) if n > 1 else np.zeros_like(self.cov)
        return FeatureStats(mean, cov, n)


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -1e-6:
        log.warning("covariance has eigenvalue %.3g below tolerance", vals.min())
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a, b):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the cross term is taken from the eigenvalues of the
    symmetric PSD matrix S_a^(1/2) S_b S_a^(1/2); negative eigenvalues are
    clipped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    for s in (a, b):
        if not np.allclose(s.cov, s.cov.T, rtol=1e-7, atol=1e-10):
            raise ValueError("covariance matrix is not symmetric")
    d = a.mean.shape[0]
    if min(a.count, b.count) < d + 1:
        log.warning("FID with %d/%d samples for %d dims is rank deficient", a.count, b.count, d)
    root_a = _psd_sqrt(a.cov)
    cross = root_a @ b.cov @ root_a
    cross_vals = np.clip(np.linalg.eigvalsh(0.5 * (cross + cross.T)), 0.0, None)
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(cross_vals).sum()
    return float(max(value, 0.0))


class FeatureExtractor(nn.Module):
    """Seeded random conv network producing ``dim`` features per image.

    Three conv stages (the last two strided); each stage contributes its
    global average of ``dim // 3`` channels. No biases, so a zero image maps
    to zero features.
    """

    def __init__(self, resolution, dim=192, seed=777):
        super().__init__()
        if dim % 3:
            raise ValueError("feature dim must be divisible by 3")
        self.resolution = resolution
        self.dim = dim
        width = dim // 3
        gen = torch.Generator().manual_seed(seed + resolution)
        chans = [3, width, width, width]
        self.weights = nn.ParameterList(
            nn.Parameter(torch.randn(chans[i + 1], chans[i], 3, 3, generator=gen)
                         / math.sqrt(9 * chans[i]), requires_grad=False)
            for i in range(3)
        )
        self.eval()

    @torch.no_grad()
    def forward(self, images):
        if images.shape[-1] != self.resolution or images.shape[-2] != self.resolution:
            raise ValueError(f"extractor expects {self.resolution}px images, "
                             f"got {tuple(images.shape[-2:])}")
        h = images.float()
        pooled = []
        for i, wt in enumerate(self.weights):
            h = lrelu(F.conv2d(h, wt, padding=1, stride=1 if i == 0 else 2))
            pooled.append(h.mean(dim=(2, 3)))
        return torch.cat(pooled, dim=1)


def extract_features(extractor, images, batch_size=256):
    out = [extractor(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    return torch.cat(out).double().numpy()


@torch.no_grad()
def generate_images(generator, encoder, captions, seed, resolution=None, batch_size=64, z_dim=None):
    """Clamped generator samples for a caption list with a seeded latent stream."""
    gen = torch.Generator().manual_seed(seed)
    z_dim = z_dim or generator.cfg.z_dim
    was_training = generator.training
    generator.eval()
    images = []
    try:
        for i in range(0, len(captions), batch_size):
            chunk = captions[i:i + batch_size]
            z = torch.randn(len(chunk), z_dim, generator=gen)
            tokens = encoder.encode_text(chunk)
            images.append(generator(z, tokens, resolution).image.clamp(-1, 1))
    finally:
        generator.train(was_training)
    return torch.cat(images)


def fid_score(generator, encoder, dataset, n, seed, resolution=None, extractor=None, feature_seed=777):
    """FID between ``n`` generated and ``n`` real images at ``resolution``.

    Real images and the generator's captions are drawn by the same seeded
    index sample so the comparison is caption-matched.
    """
    resolution = resolution or generator.resolution
    extractor = extractor or FeatureExtractor(resolution, seed=feature_seed)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=n, replace=n > len(dataset))
    real = dataset.images_at(resolution)[torch.as_tensor(idx)]
    captions = [dataset.captions[i] for i in idx]
    fake = generate_images(generator, encoder, captions, seed, resolution)
    fs = FeatureStats.from_features(extract_features(extractor, fake))
    rs = FeatureStats.from_features(extract_features(extractor, real))
    return frechet_distance(fs, rs)


def interpolate_tokens(t1, t2, alphas):
    """Element-wise lerp of two single-caption token sets; mask is the union."""
    mask = t1.mask | t2.mask
    out = []
    for a in alphas:
        if a == 0:
            out.append(TextTokens(t1.t_seq.clone(), t1.t_g.clone(), mask))
        elif a == 1:
            out.append(TextTokens(t2.t_seq.clone(), t2.t_g.clone(), mask))
        else:
            out.append(TextTokens(torch.lerp(t1.t_seq, t2.t_seq, float(a)),
                                  torch.lerp(t1.t_g, t2.t_g, float(a)), mask))
    return out


def slerp(z1, z2, alpha):
    """Spherical interpolation of direction with linear interpolation of norm.

    Zero-norm endpoints fall back to linear interpolation. Exactly antipodal
    directions use a deterministic perpendicular to define the great circle.
    """
    if alpha == 0:
        return z1.clone()
    if alpha == 1:
        return z2.clone()
    n1, n2 = z1.norm(), z2.norm()
    if n1 == 0 or n2 == 0:
        log.warning("zero-norm latent endpoint; using linear interpolation")
        return torch.lerp(z1, z2, float(alpha))
    u1, u2 = z1 / n1, z2 / n2
    cos = torch.clamp((u1 * u2).sum(), -1.0, 1.0)
    omega = torch.arccos(cos)
    if omega < 1e-7:
        direction = torch.lerp(u1, u2, float(alpha))
    elif math.pi - omega < 1e-6:
        # antipodal: rotate through the plane spanned by u1 and a fixed perpendicular
        basis = torch.zeros_like(u1).flatten()
        basis[int(torch.argmin(u1.abs().flatten()))] = 1.0
        basis = basis.reshape(u1.shape)
        perp = basis - (basis * u1).sum() * u1
        perp = perp / perp.norm()
        angle = math.pi * float(alpha)
        direction = math.cos(angle) * u1 + math.sin(angle) * perp
    else:
        s = torch.sin(omega)
        direction = (torch.sin((1 - alpha) * omega) / s) * u1 + (torch.sin(alpha * omega) / s) * u2
    return direction * torch.lerp(n1, n2, float(alpha))


def interpolate_latents(c1, c2, alphas, space="Z", z_mode="slerp"):
    """Z space: slerp (or lerp if ``z_mode='lerp'``); W space: lerp."""
    if space not in ("Z", "W"):
        raise ValueError(f"unknown latent space {space!r}")
    out = []
    for a in alphas:
        if a == 0:
            out.append(c1.clone())
        elif a == 1:
            out.append(c2.clone())
        elif space == "Z" and z_mode == "slerp":
            out.append(slerp(c1, c2, a))
        else:
            out.append(torch.lerp(c1, c2, float(a)))
    return out


def image_grid(rows, pad=1):
    """Tile a list of rows (each a (K, 3, H, W) tensor in [-1, 1]) into a uint8 HxWx3 array."""
    rows = [r.detach().clamp(-1, 1) for r in rows]
    k = max(r.shape[0] for r in rows)
    _, _, h, w = rows[0].shape
    grid = np.full((len(rows) * (h + pad) + pad, k * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i, row in enumerate(rows):
        arr = ((row.permute(0, 2, 3, 1).numpy() + 1) * 127.5).round().astype(np.uint8)
        for j in range(row.shape[0]):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[y:y + h, x:x + w] = arr[j]
    return grid
