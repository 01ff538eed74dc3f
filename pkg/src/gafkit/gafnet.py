"""Video-level embedding network and the pretext-task heads.

Per-frame features are passed through a temporal transformer encoder and an
MLP, then max-pooled over time into a single embedding ``g``.  Four
independent MLP heads consume it (or the raw frame features) to predict
per-person flows and group-relevant object locations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .encoder import Block, EncoderConfig, FrameEncoder
from .encodings import location_encoding_batch, temporal_encoding


@dataclass(frozen=True)
class HeadConfig:
    """Shared MLP architecture for the four heads (weights are independent)."""

    hidden_dims: tuple[int, ...] = (128,)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden dims must be positive, got {self.hidden_dims}")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    num_objects: int = 1
    video_blocks: int = 2
    video_heads: int = 4
    location_guidance: bool = True
    feature_mode: str = "cls"  # "cls" or "cropped" (box-masked patch mean)
    direct_pool: bool = False  # bypass E and M; pool frame features directly

    def __post_init__(self):
        if self.num_objects < 1:
            raise ValueError("num_objects must be >= 1")
        if self.feature_mode not in ("cls", "cropped"):
            raise ValueError(f"feature_mode must be 'cls' or 'cropped', got {self.feature_mode!r}")

    @property
    def width(self) -> int:
        return self.encoder.width


class HeadMLP(nn.Module):
    def __init__(self, dim: int, hidden_dims: tuple[int, ...], out_dim: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = dim
        for h in hidden_dims:
            layers += [nn.Linear(prev, h), nn.GELU()]
            prev = h
        layers.append(nn.Linear(prev, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class PatchFlowHead(nn.Module):
    """Two pointwise layers mapping patch tokens to a per-patch flow map."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim, 2)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(patches)))


class VideoNet(nn.Module):
    """Transformer encoder over the frame-feature sequence followed by an MLP."""

    def __init__(self, dim: int, blocks: int, heads: int):
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList(Block(dim, heads, 4.0) for _ in range(blocks))
        self.norm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        t = features.shape[1]
        te = torch.as_tensor(temporal_encoding(np.arange(t), self.dim),
                             device=features.device, dtype=features.dtype)
        x = features + te
        for block in self.blocks:
            x = block(x)
        return self.mlp(self.norm(x))


def pool_gaf(video_features) -> np.ndarray | torch.Tensor:
    """Elementwise max over the time axis of (..., T, D) video features."""
    if isinstance(video_features, torch.Tensor):
        return video_features.max(dim=-2).values
    return np.max(np.asarray(video_features), axis=-2)


class GafModel(nn.Module):
    """Frame encoder + video network + the four pretext heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        out_obj = 2 * cfg.num_objects
        self.frame_encoder = FrameEncoder(cfg.encoder)
        self.video_net = VideoNet(d, cfg.video_blocks, cfg.video_heads)
        self.flow_head_g = HeadMLP(d, cfg.head.hidden_dims, 2)
        self.flow_head_i = HeadMLP(d, cfg.head.hidden_dims, 2)
        self.object_head_g = HeadMLP(d, cfg.head.hidden_dims, out_obj)
        self.object_head_i = HeadMLP(d, cfg.head.hidden_dims, out_obj)
        self.whole_flow_head = PatchFlowHead(d)

    # -- feature extraction -------------------------------------------------

    def frame_features(self, frames: torch.Tensor,
                       boxes: torch.Tensor | None = None
                       ) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-frame features for (B, T, H, W, 3) input.

        Returns ``(features, patches)`` with shapes (B, T, D) and
        (B, T, N, D).  In ``cropped`` mode the frame feature is the mean of
        the patch tokens whose centers fall inside any person box.
        """
        b, t, h, w, _ = frames.shape
        cls, patches = self.frame_encoder(frames.reshape(b * t, h, w, 3))
        patches = patches.reshape(b, t, -1, self.cfg.width)
        if self.cfg.feature_mode == "cropped":
            if boxes is None:
                raise ValueError("cropped feature mode needs person boxes")
            mask = _patch_box_mask(boxes, h, w, self.cfg.encoder.patch_size,
                                   frames.device).to(patches.dtype)
            denom = mask.sum(dim=2, keepdim=True).clamp(min=1.0)
            feats = (patches * mask.unsqueeze(-1)).sum(dim=2) / denom
        else:
            feats = cls.reshape(b, t, self.cfg.width)
        return feats, patches

    def video_features(self, features: torch.Tensor) -> torch.Tensor:
        if self.cfg.direct_pool:
            return features
        return self.video_net(features)

    def gaf(self, frames: torch.Tensor, boxes: torch.Tensor | None = None) -> torch.Tensor:
        feats, _ = self.frame_features(frames, boxes)
        return pool_gaf(self.video_features(feats))

    # -- pretext heads -------------------------------------------------------

    def predict_flow_g(self, g: torch.Tensor, loc: torch.Tensor | None,
                       te: torch.Tensor) -> torch.Tensor:
        """Flow from the video embedding: (B, D) + (B, P, T, D) + (T, D) -> (B, P, T, 2)."""
        x = g[:, None, None, :] + te[None, None, :, :]
        if self.cfg.location_guidance and loc is not None:
            x = x + loc
        else:
            x = x.expand(g.shape[0], loc.shape[1] if loc is not None else 1, -1, -1)
        return self.flow_head_g(x)

    def predict_flow_i(self, features: torch.Tensor, loc: torch.Tensor | None) -> torch.Tensor:
        """Flow from frame features: (B, T, D) + (B, P, T, D) -> (B, P, T, 2)."""
        x = features[:, None, :, :]
        if self.cfg.location_guidance and loc is not None:
            x = x + loc
        else:
            x = x.expand(-1, loc.shape[1] if loc is not None else 1, -1, -1)
        return self.flow_head_i(x)

    def predict_object_g(self, g: torch.Tensor, te: torch.Tensor) -> torch.Tensor:
        """Object locations from the video embedding: -> (B, T, 2 * N_o)."""
        return self.object_head_g(g[:, None, :] + te[None, :, :])

    def predict_object_i(self, features: torch.Tensor) -> torch.Tensor:
        """Object locations from frame features alone (no temporal encoding)."""
        return self.object_head_i(features)

    def predict_whole_flow(self, patches: torch.Tensor, grid_h: int,
                           grid_w: int) -> torch.Tensor:
        """Per-patch flow map: (B, T, N, D) -> (B, T, grid_h, grid_w, 2)."""
        out = self.whole_flow_head(patches)
        return out.reshape(*patches.shape[:2], grid_h, grid_w, 2)

    # -- helpers --------------------------------------------------------------

    def location_table(self, centers: np.ndarray, width: int, height: int,
                       device=None, dtype=None) -> torch.Tensor:
        table = location_encoding_batch(centers, self.cfg.width, width, height)
        return torch.as_tensor(table, device=device, dtype=dtype or torch.float32)

    def temporal_table(self, t: int, device=None, dtype=None) -> torch.Tensor:
        table = temporal_encoding(np.arange(t), self.cfg.width)
        return torch.as_tensor(table, device=device, dtype=dtype or torch.float32)


def _patch_box_mask(boxes: torch.Tensor, h: int, w: int, patch: int,
                    device) -> torch.Tensor:
    """(B, P, T, 4) boxes -> (B, T, N) mask of patch centers inside any box."""
    gh, gw = h // patch, w // patch
    ys = (torch.arange(gh, device=device, dtype=torch.float64) + 0.5) * patch
    xs = (torch.arange(gw, device=device, dtype=torch.float64) + 0.5) * patch
    cy = ys[:, None].expand(gh, gw).reshape(-1)
    cx = xs[None, :].expand(gh, gw).reshape(-1)
    bx = boxes.to(torch.float64).permute(0, 2, 1, 3)  # (B, T, P, 4)
    inside = ((cx >= bx[..., 0:1]) & (cx <= bx[..., 2:3])
              & (cy >= bx[..., 1:2]) & (cy <= bx[..., 3:4]))
    return inside.any(dim=2)
