"""Small vision transformer producing per-frame features, with a
freeze-all-but-last-k-blocks fine-tuning policy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .encodings import location_encoding_batch


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    depth: int = 4
    heads: int = 4
    width: int = 128  # feature dimension D, shared with the video embedding
    frozen_blocks: int = 0
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.width % 4 != 0:
            raise ValueError(f"width must be divisible by 4, got {self.width}")
        if self.width % self.heads != 0:
            raise ValueError("heads must divide width")
        if not 0 <= self.frozen_blocks <= self.depth:
            raise ValueError(
                f"frozen_blocks must be in [0, {self.depth}], got {self.frozen_blocks}"
            )


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.head_dim ** -0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class FrameEncoder(nn.Module):
    """ViT over single frames; returns a CLS summary and the patch tokens.

    The patch positional table is a fixed sinusoid of the patch centers, so the
    encoder accepts any frame size divisible by ``patch_size``.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d)
        self._pos_cache: dict[tuple, torch.Tensor] = {}

    def _patch_positions(self, h: int, w: int, device, dtype) -> torch.Tensor:
        key = (h, w, device, dtype)
        cached = self._pos_cache.get(key)
        if cached is None:
            ps = self.cfg.patch_size
            ys, xs = np.meshgrid(np.arange(h // ps), np.arange(w // ps), indexing="ij")
            centers = np.stack([(xs + 0.5) * ps, (ys + 0.5) * ps], axis=-1).reshape(-1, 2)
            table = location_encoding_batch(centers, self.cfg.width, w, h)
            cached = torch.as_tensor(table, device=device, dtype=dtype)
            self._pos_cache[key] = cached
        return cached

    def embed(self, frames: torch.Tensor) -> torch.Tensor:
        """Patch-embed frames (B, H, W, 3) into tokens (B, 1+N, D), CLS first."""
        b, h, w, _ = frames.shape
        ps = self.cfg.patch_size
        if h % ps or w % ps:
            raise ValueError(f"frame size {h}x{w} not divisible by patch size {ps}")
        x = frames.permute(0, 3, 1, 2) - 0.5
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = tokens + self._patch_positions(h, w, frames.device, tokens.dtype)
        cls = self.cls_token.expand(b, -1, -1).to(tokens.dtype)
        return torch.cat([cls, tokens], dim=1)

    def forward(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.embed(frames)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[:, 0], x[:, 1:]


def encode_frame(frame: np.ndarray | torch.Tensor, encoder: FrameEncoder):
    """Encode one (H, W, 3) frame; returns (cls D-vector, patch token matrix)."""
    arr = torch.as_tensor(np.asarray(frame, dtype=np.float32))
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) frame, got shape {tuple(arr.shape)}")
    with torch.no_grad():
        cls, patches = encoder(arr.unsqueeze(0))
    return cls[0], patches[0]


def freeze_partition(encoder: FrameEncoder, frozen_blocks: int) -> tuple[list[str], list[str]]:
    """Parameter names split into (frozen, trainable).

    With ``frozen_blocks > 0`` the embedding layer and the first
    ``frozen_blocks`` blocks are frozen while the remaining blocks and the
    final norm stay trainable; ``frozen_blocks == 0`` trains everything.
    """
    if not 0 <= frozen_blocks <= encoder.cfg.depth:
        raise ValueError(f"frozen_blocks must be in [0, {encoder.cfg.depth}]")
    frozen, trainable = [], []
    for name, _ in encoder.named_parameters():
        if name.startswith(("patch_embed", "cls_token")):
            is_frozen = frozen_blocks > 0
        elif name.startswith("blocks."):
            is_frozen = int(name.split(".")[1]) < frozen_blocks
        else:  # final norm
            is_frozen = False
        (frozen if is_frozen else trainable).append(name)
    return frozen, trainable


def apply_freeze_policy(encoder: FrameEncoder, frozen_blocks: int) -> tuple[list[str], list[str]]:
    """Set ``requires_grad`` per :func:`freeze_partition` and return it."""
    frozen, trainable = freeze_partition(encoder, frozen_blocks)
    frozen_set = set(frozen)
    for name, param in encoder.named_parameters():
        param.requires_grad_(name not in frozen_set)
    return frozen, trainable
