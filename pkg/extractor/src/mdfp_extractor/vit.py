"""Minimal vision transformer with per-head query/key capture.

Module names mirror the reference self-supervised checkpoints
(``patch_embed.proj``, ``blocks.N.attn.qkv``, ...) so published ViT-S/16
weights load with ``strict=True``. The final attention block exposes its
raw per-head query and key tensors (straight off the qkv projection,
unscaled) - exactly what the affinity computation downstream expects.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_qk: bool = False):
        b, n, c = x.shape
        qkv = (self.qkv(x)
               .reshape(b, n, 3, self.num_heads, self.head_dim)
               .permute(2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj(out)
        if return_qk:
            return out, q, k
        return out


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, dim * mlp_ratio)

    def forward(self, x, return_qk: bool = False):
        if return_qk:
            attended, q, k = self.attn(self.norm1(x), return_qk=True)
            x = x + attended
            x = x + self.mlp(self.norm2(x))
            return x, q, k
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)  # row-major patch order


class VisionTransformer(nn.Module):
    """ViT backbone; defaults match the small/16 configuration."""

    def __init__(self, patch_size: int = 16, embed_dim: int = 384,
                 depth: int = 12, num_heads: int = 6, base_image_size: int = 224):
        super().__init__()
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.patch_embed = PatchEmbed(patch_size, embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        base_patches = (base_image_size // patch_size) ** 2
        self.pos_embed = nn.Parameter(torch.zeros(1, base_patches + 1, embed_dim))
        self.blocks = nn.ModuleList(Block(embed_dim, num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def interpolate_pos_encoding(self, n_patches: int, h: int, w: int) -> torch.Tensor:
        base = self.pos_embed.shape[1] - 1
        if n_patches == base and h == w:
            return self.pos_embed
        class_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:]
        side = int(math.sqrt(base))
        gh, gw = h // self.patch_size, w // self.patch_size
        patch_pos = patch_pos.reshape(1, side, side, self.embed_dim).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(gh, gw), mode="bicubic",
                                  align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, gh * gw, self.embed_dim)
        return torch.cat((class_pos, patch_pos), dim=1)

    def _embed(self, images: torch.Tensor) -> torch.Tensor:
        b, _, h, w = images.shape
        x = self.patch_embed(images)
        cls = self.cls_token.expand(b, -1, -1)
        x = torch.cat((cls, x), dim=1)
        return x + self.interpolate_pos_encoding(x.shape[1] - 1, h, w)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Final-norm token sequence ``[B, N+1, dim]``."""
        x = self._embed(images)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def forward_with_qk(self, images: torch.Tensor):
        """Tokens plus the final block's raw per-head q/k.

        Returns ``(tokens [B, N+1, dim], q, k)`` with q/k shaped
        ``[B, heads, N+1, head_dim]``, captured before attention scaling
        and before the output projection.
        """
        x = self._embed(images)
        for block in self.blocks[:-1]:
            x = block(x)
        x, q, k = self.blocks[-1](x, return_qk=True)
        return self.norm(x), q, k


def load_checkpoint(model: VisionTransformer, state) -> None:
    """Load published self-supervised weights (plain or nested state dicts)."""
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if isinstance(state, dict) and "teacher" in state:
        state = state["teacher"]
    cleaned = {}
    for key, value in state.items():
        for prefix in ("module.", "backbone."):
            if key.startswith(prefix):
                key = key[len(prefix):]
        if key.startswith("head."):
            continue
        cleaned[key] = value
    model.load_state_dict(cleaned, strict=True)


def build_model(weights: str | None = None, patch_size: int = 16,
                embed_dim: int = 384, depth: int = 12, num_heads: int = 6,
                seed: int = 0) -> VisionTransformer:
    """Construct the backbone; ``weights`` is a checkpoint path, a
    ``hub:<name>`` reference, or None for seeded random initialization."""
    torch.manual_seed(seed)
    model = VisionTransformer(patch_size=patch_size, embed_dim=embed_dim,
                              depth=depth, num_heads=num_heads)
    if weights:
        if weights.startswith("hub:"):
            hub_model = torch.hub.load("facebookresearch/dino:main",
                                       weights.split(":", 1)[1])
            load_checkpoint(model, hub_model.state_dict())
        else:
            load_checkpoint(model, torch.load(weights, map_location="cpu",
                                              weights_only=True))
    model.eval()
    return model
