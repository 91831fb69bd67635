"""Deterministic stand-in encoders for tests and the synthetic benchmark.

``StubVisionEncoder`` is a small pre-norm transformer over image patches
whose attention and MLP linears use the same names as HF CLIP
(``q_proj``, ``k_proj``, ``v_proj``, ``out_proj``, ``fc1``, ``fc2``), so
adapter injection treats both alike. Weights are seeded and frozen.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .embedding_store import EncoderGateway


class Attention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        h = self.n_heads

        def split(t):
            return t.reshape(b, n, h, d // h).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        att = torch.softmax(q @ k.transpose(-2, -1) / np.sqrt(d // h), dim=-1)
        return self.out_proj((att @ v).transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim, n_heads, mlp_ratio=2):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class StubVisionEncoder(nn.Module):
    """Patchify -> linear embed -> ``n_blocks`` transformer blocks -> mean pool."""

    def __init__(self, dim=64, image_size=16, patch=4, channels=3, n_blocks=2, n_heads=4, seed=0):
        super().__init__()
        if image_size % patch:
            raise ValueError("image_size must be a multiple of patch")
        self.dim = dim
        self.patch = patch
        n_patches = (image_size // patch) ** 2
        gen = torch.Generator().manual_seed(seed)
        self.patch_embed = nn.Linear(channels * patch * patch, dim)
        self.pos = nn.Parameter(torch.randn(n_patches, dim, generator=gen) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, n_heads) for _ in range(n_blocks))
        self.ln_post = nn.LayerNorm(dim)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "pos" or "ln" in name:
                    continue
                if p.ndim == 2:
                    bound = 1.0 / np.sqrt(p.shape[1])
                    p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)
                else:
                    p.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images):
        x = torch.as_tensor(images, dtype=self.patch_embed.weight.dtype)
        b, c, hgt, wid = x.shape
        p = self.patch
        x = x.unfold(2, p, p).unfold(3, p, p)  # b, c, H/p, W/p, p, p
        x = x.permute(0, 2, 3, 1, 4, 5).reshape(b, (hgt // p) * (wid // p), c * p * p)
        x = self.patch_embed(x) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln_post(x.mean(1))


def hashed_text_features(texts, dim: int, salt: str = "") -> np.ndarray:
    """Deterministic pseudo-random unit vectors keyed by string content."""
    out = np.empty((len(texts), dim))
    for i, t in enumerate(texts):
        digest = hashlib.sha256((salt + str(t)).encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(dim)
        out[i] = v / np.linalg.norm(v)
    return out


def stub_gateway(encoder: StubVisionEncoder | None = None, dim: int | None = None) -> EncoderGateway:
    """Gateway over the stub vision encoder and the hashing text encoder."""
    if encoder is None and dim is None:
        raise ValueError("need an encoder or a dim")
    dim = encoder.dim if encoder is not None else dim

    def encode_images(batch):
        with torch.no_grad():
            return encoder(torch.as_tensor(np.asarray(batch))).numpy()

    return EncoderGateway(
        encode_images if encoder is not None else None,
        lambda batch: hashed_text_features(batch, dim),
        name="stub",
        dim=dim,
    )


def identity_gateway(dim: int) -> EncoderGateway:
    """Images are already vectors; returned unchanged."""
    return EncoderGateway(
        lambda batch: np.asarray(batch, dtype=np.float64).reshape(len(batch), dim),
        lambda batch: hashed_text_features(batch, dim),
        name="identity",
        dim=dim,
    )
