"""Tiny encoder-decoder segmentation network with projection/prediction heads,
an FPN-style per-pixel representation head, and a student/teacher pair with
EMA weight updates.

All modules are plain torch on CPU; dtype is configurable so gradient checks
can run in float64 while training runs in float32.
"""

from __future__ import annotations

import copy
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

L2_EPS = 1e-8


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / (x.norm(dim=dim, keepdim=True) + L2_EPS)


class EmbeddingBatch:
    """L2-normalized embedding rows with provenance tags."""

    def __init__(self, vectors: torch.Tensor, scope: str, source: str):
        assert scope in ("global", "local")
        assert source in ("student_aug", "teacher_aug", "teacher_mined")
        self.vectors = vectors
        self.scope = scope
        self.source = source

    def __len__(self):
        return self.vectors.shape[0]


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.GroupNorm(1, c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.GroupNorm(1, c_out),
        nn.ReLU(inplace=True),
    )


class TinyUNet(nn.Module):
    """3-level UNet-style backbone returning logits, multiscale decoder
    features, and a pooled global feature."""

    def __init__(self, num_classes: int, base_width: int = 8, in_channels: int = 1):
        super().__init__()
        w = base_width
        self.enc1 = _conv_block(in_channels, w)
        self.enc2 = _conv_block(w, 2 * w)
        self.bottleneck = _conv_block(2 * w, 4 * w)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = _conv_block(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _conv_block(2 * w, w)
        self.head = nn.Conv2d(w, num_classes, 1)
        self.num_classes = num_classes
        self.base_width = w

    def forward(self, x: torch.Tensor):
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[:, None]
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        b = self.bottleneck(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        logits = self.head(d1)
        feats = [d1, d2, b]
        global_feat = b.mean(dim=(2, 3))
        return logits, feats, global_feat


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(inplace=True),
                         nn.Linear(d_hidden, d_out))


class SegModel(nn.Module):
    """Backbone plus the training-only heads (discarded at inference)."""

    def __init__(self, num_classes: int, base_width: int = 8, m_embed: int = 32,
                 m_rep: Optional[int] = None, in_channels: int = 1):
        super().__init__()
        w = base_width
        m_rep = m_embed if m_rep is None else m_rep
        self.backbone = TinyUNet(num_classes, base_width, in_channels)
        self.global_proj = _mlp(4 * w, 2 * m_embed, m_embed)
        self.predictor = _mlp(m_embed, 2 * m_embed, m_embed)
        self.local_proj = _mlp(m_rep, 2 * m_embed, m_embed)
        self.fpn_lateral = nn.ModuleList([
            nn.Conv2d(w, m_rep, 1), nn.Conv2d(2 * w, m_rep, 1), nn.Conv2d(4 * w, m_rep, 1)])
        self.rep_conv = nn.Sequential(
            nn.Conv2d(m_rep, m_rep, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(m_rep, m_rep, 3, padding=1))
        # separate fusion stem for the crop-level instance task: training the
        # class-contrastive representation head on an instance objective
        # collapses its per-pixel features toward one vector per image
        self.inst_lateral = nn.ModuleList([
            nn.Conv2d(w, m_rep, 1), nn.Conv2d(2 * w, m_rep, 1), nn.Conv2d(4 * w, m_rep, 1)])
        self.inst_conv = nn.Sequential(
            nn.Conv2d(m_rep, m_rep, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(m_rep, m_rep, 3, padding=1))
        self.m_embed = m_embed
        self.m_rep = m_rep
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor):
        return self.backbone(x)

    def global_embed(self, global_feat: torch.Tensor, use_predictor: bool,
                     scope_source: tuple = ("global", "student_aug")) -> EmbeddingBatch:
        v = self.global_proj(global_feat)
        if use_predictor:
            v = self.predictor(v)
        return EmbeddingBatch(l2_normalize(v), *scope_source)

    @staticmethod
    def _fuse(feats, laterals, conv) -> torch.Tensor:
        target = feats[0].shape[-2:]
        fused = None
        for lat, f in zip(laterals, feats):
            y = lat(f)
            if y.shape[-2:] != target:
                y = F.interpolate(y, size=target, mode="bilinear", align_corners=False)
            fused = y if fused is None else fused + y
        out = conv(fused)
        return out / (out.norm(dim=1, keepdim=True) + L2_EPS)

    def representation_head(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        """Fuse multiscale features into per-pixel unit-norm representations
        of shape B x m_rep x H x W."""
        return self._fuse(feats, self.fpn_lateral, self.rep_conv)

    def instance_map(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        """Same fusion as `representation_head` but with its own parameters;
        feeds the crop-level instance-discrimination branch.

        Backbone features are detached: at the narrow widths used here the
        crop-level objective otherwise drives decoder channels permanently
        negative, starving the segmentation head of features and gradients.
        The image-level branch still shapes the encoder through the pooled
        bottleneck feature.
        """
        return self._fuse([f.detach() for f in feats],
                          self.inst_lateral, self.inst_conv)

    def local_project(self, feat_map: torch.Tensor, windows: Sequence[tuple],
                      use_predictor: bool,
                      scope_source: tuple = ("local", "student_aug")) -> EmbeddingBatch:
        """Embed fixed-size crops of the fused per-pixel representation map
        (m_rep x H x W or 1 x m_rep x H x W, see `representation_head`).

        Each window (r0, c0, h, w) is mean-pooled over its pixels and pushed
        through the local projection head (and optionally the predictor).
        Pooling the fused map rather than a raw decoder layer keeps the crop
        embeddings from monopolizing the narrow channels the logits head reads.
        """
        if feat_map.dim() == 4:
            feat_map = feat_map[0]
        _, hh, ww = feat_map.shape
        pooled = []
        for (r0, c0, h, w) in windows:
            if r0 < 0 or c0 < 0 or r0 + h > hh or c0 + w > ww:
                raise ValueError(f"crop window {(r0, c0, h, w)} outside {hh}x{ww} map")
            pooled.append(feat_map[:, r0:r0 + h, c0:c0 + w].mean(dim=(1, 2)))
        v = self.local_proj(torch.stack(pooled))
        if use_predictor:
            v = self.predictor(v)
        return EmbeddingBatch(l2_normalize(v), *scope_source)


class StudentTeacherPair:
    """Student network theta and EMA teacher xi. The teacher never receives
    gradients; it changes only through `ema_update`."""

    def __init__(self, student: SegModel, momentum: float = 0.99):
        if not (0 <= momentum < 1):
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.student = student
        self.teacher = copy.deepcopy(student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.momentum = momentum

    @torch.no_grad()
    def ema_update(self) -> None:
        t = self.momentum
        s_params = dict(self.student.state_dict())
        for name, w in self.teacher.state_dict().items():
            src = s_params[name]
            if src.shape != w.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {w.shape}")
            if w.dtype.is_floating_point:
                w.mul_(t).add_(src, alpha=1 - t)
            else:
                w.copy_(src)


def make_windows(h: int, w: int, n_crops: int, size: int, rng: np.random.Generator):
    """Random fixed-size crop windows shared between two logit maps."""
    size = min(size, h, w)
    return [(int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)),
             size, size) for _ in range(n_crops)]
