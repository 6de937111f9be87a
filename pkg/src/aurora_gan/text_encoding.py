"""Caption tokenization, the frozen toy text encoder, the learnable adapter and
the latent mapping network."""

import math
import zlib
from dataclasses import dataclass
from typing import Protocol, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError
from .layers import EqualLinear

PAD, BOS, EOS = 0, 1, 2
NUM_SPECIALS = 3


@dataclass
class TextTokens:
    """Per-token features ``t_seq`` (B, L, d), global token ``t_g`` (B, d), validity ``mask`` (B, L)."""

    t_seq: torch.Tensor
    t_g: torch.Tensor
    mask: torch.Tensor

    def __len__(self):
        return self.t_seq.shape[0]

    def select(self, index):
        return TextTokens(self.t_seq[index], self.t_g[index], self.mask[index])

    def detach(self):
        return TextTokens(self.t_seq.detach(), self.t_g.detach(), self.mask)

    @staticmethod
    def cat(items):
        return TextTokens(torch.cat([t.t_seq for t in items]),
                          torch.cat([t.t_g for t in items]),
                          torch.cat([t.mask for t in items]))


class TextEncoderLike(Protocol):
    """Plug point: anything exposing ``encode_text`` can replace the toy encoder."""

    def encode_text(self, captions: Union[str, Sequence[str]]) -> TextTokens: ...


def word_id(word, vocab_size):
    return NUM_SPECIALS + zlib.crc32(word.encode("utf-8")) % (vocab_size - NUM_SPECIALS)


def tokenize(caption, context_length=77, vocab_size=4096):
    """Whitespace tokenizer with hashed ids.

    Returns ``(ids, mask)`` as python lists of length ``context_length``.
    Overlong captions are truncated silently but always keep BOS and EOS.
    """
    if caption is None:
        raise ValueError("caption must not be None")
    words = caption.lower().split()[: context_length - 2]
    ids = [BOS] + [word_id(w, vocab_size) for w in words] + [EOS]
    n_valid = len(ids)
    ids += [PAD] * (context_length - n_valid)
    mask = [True] * n_valid + [False] * (context_length - n_valid)
    return ids, mask


def sinusoidal_positions(length, dim):
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float32) / dim)
    table = torch.zeros(length, dim)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table


class _FrozenLayer(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)

    def forward(self, x, mask):
        B, L, D = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q, k, v = (t.reshape(B, L, h, D // h).transpose(1, 2) for t in (q, k, v))
        logits = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        x = x + self.proj((attn @ v).transpose(1, 2).reshape(B, L, D))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


class ToyTextEncoder(nn.Module):
    """Deterministic frozen stand-in for a pretrained text tower.

    Hashed embedding table + sinusoidal positions + a couple of seeded,
    untrained self-attention layers; the global token is the masked mean of
    the final-layer features. All parameters have ``requires_grad=False``.
    """

    def __init__(self, dim=256, context_length=77, vocab_size=4096, layers=2, heads=4, seed=1234):
        super().__init__()
        self.dim = dim
        self.context_length = context_length
        self.vocab_size = vocab_size
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.embedding = nn.Embedding(vocab_size, dim)
            nn.init.normal_(self.embedding.weight, std=1.0)
            self.layers = nn.ModuleList(_FrozenLayer(dim, heads) for _ in range(layers))
        finally:
            torch.random.set_rng_state(gen_state)
        self.register_buffer("positions", sinusoidal_positions(context_length, dim), persistent=False)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # frozen: always evaluation mode
        return super().train(False)

    def tokenize(self, captions):
        pairs = [tokenize(c, self.context_length, self.vocab_size) for c in captions]
        ids = torch.tensor([p[0] for p in pairs], dtype=torch.long)
        mask = torch.tensor([p[1] for p in pairs], dtype=torch.bool)
        return ids, mask

    @torch.no_grad()
    def encode_ids(self, ids, mask):
        x = self.embedding(ids) + self.positions[None, : ids.shape[1]]
        for layer in self.layers:
            x = layer(x, mask)
        m = mask[..., None].to(x.dtype)
        t_g = (x * m).sum(1) / m.sum(1).clamp_min(1.0)
        return TextTokens(x, t_g, mask)

    def encode_text(self, captions):
        if isinstance(captions, str):
            captions = [captions]
        ids, mask = self.tokenize(list(captions))
        return self.encode_ids(ids, mask)


class TokenAdapter(nn.Module):
    """Learnable token-wise residual MLPs stacked on the frozen encoder.

    Output projections start at zero so the adapter is the identity at init.
    The same layers act on every sequence token and on the global token.
    """

    def __init__(self, dim, layers=2, hidden=None):
        super().__init__()
        self.dim = dim
        hidden = hidden or 2 * dim
        self.blocks = nn.ModuleList(
            nn.ModuleDict({
                "norm": nn.LayerNorm(dim),
                "fc1": EqualLinear(dim, hidden, activation="lrelu"),
                "fc2": EqualLinear(hidden, dim, zero_init=True),
            })
            for _ in range(layers)
        )

    def _residual(self, x):
        for blk in self.blocks:
            x = x + blk["fc2"](blk["fc1"](blk["norm"](x)))
        return x

    def forward(self, tokens):
        if tokens.t_seq.shape[-1] != self.dim or tokens.t_g.shape[-1] != self.dim:
            raise ConfigError(
                f"adapter width {self.dim} does not match token width {tokens.t_seq.shape[-1]}")
        return TextTokens(self._residual(tokens.t_seq), self._residual(tokens.t_g), tokens.mask)


class MappingNetwork(nn.Module):
    """w = MLP([z, t_g]) with the concatenation normalized to unit RMS first.

    Hidden layers use leaky ReLU; the last layer is linear.
    """

    def __init__(self, z_dim, text_dim, w_dim, layers=4, lr_mul=0.01):
        super().__init__()
        self.z_dim = z_dim
        self.text_dim = text_dim
        dims = [z_dim + text_dim] + [w_dim] * layers
        self.net = nn.Sequential(*[
            EqualLinear(dims[i], dims[i + 1], lr_mul=lr_mul,
                        activation="lrelu" if i < layers - 1 else None)
            for i in range(layers)
        ])

    def forward(self, z, t_g):
        if not (torch.isfinite(z).all() and torch.isfinite(t_g).all()):
            raise ValueError("map_latent received non-finite input")
        x = torch.cat([z, t_g], dim=-1)
        x = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + 1e-8)
        return self.net(x)
