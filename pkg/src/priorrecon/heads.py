"""Dense (DPT-style), camera and Gaussian-attribute decoders."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Block, make_norm
from .geomcore import quat_conjugate_t, quat_multiply_t, quat_to_matrix_t

DENSE_KINDS = {"point": 4, "depth": 2, "normal": 3}


class HeadConfigError(ValueError):
    pass


class ResidualConvUnit(nn.Module):
    def __init__(self, features: int):
        super().__init__()
        self.conv1 = nn.Conv2d(features, features, 3, padding=1)
        self.conv2 = nn.Conv2d(features, features, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(F.gelu(x))))


class FusionBlock(nn.Module):
    def __init__(self, features: int, with_skip: bool = True):
        super().__init__()
        self.skip_unit = ResidualConvUnit(features) if with_skip else None
        self.unit = ResidualConvUnit(features)
        self.out = nn.Conv2d(features, features, 1)

    def forward(self, x, skip=None, size=None):
        if skip is not None:
            x = x + self.skip_unit(skip)
        x = self.unit(x)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=True)
        return self.out(x)


class DPTHead(nn.Module):
    """Reassemble four token levels at 4x, 2x, 1x and 0.5x the token grid, fuse them
    coarse-to-fine with residual conv units, then upsample to the image size."""

    def __init__(self, dim: int, out_channels: int, features: int = 64):
        super().__init__()
        f = features
        self.norm = nn.LayerNorm(dim)
        self.project = nn.ModuleList(nn.Conv2d(dim, f, 1) for _ in range(4))
        self.resize = nn.ModuleList([
            nn.ConvTranspose2d(f, f, 4, stride=4),
            nn.ConvTranspose2d(f, f, 2, stride=2),
            nn.Identity(),
            nn.Conv2d(f, f, 3, stride=2, padding=1),
        ])
        self.layer_rn = nn.ModuleList(nn.Conv2d(f, f, 3, padding=1, bias=False) for _ in range(4))
        self.fusion = nn.ModuleList(FusionBlock(f, with_skip=i < 3) for i in range(4))
        self.head_in = nn.Conv2d(f, f // 2, 3, padding=1)
        self.head_out = nn.Sequential(nn.Conv2d(f // 2, 32, 3, padding=1), nn.GELU(), nn.Conv2d(32, out_channels, 1))

    def forward(self, levels: list, hp: int, wp: int, height: int, width: int) -> torch.Tensor:
        feats = []
        for i, tok in enumerate(levels):
            N, L, D = tok.shape
            x = self.norm(tok).transpose(1, 2).reshape(N, D, hp, wp)
            feats.append(self.layer_rn[i](self.resize[i](self.project[i](x))))
        path = self.fusion[3](feats[3], size=feats[2].shape[-2:])
        path = self.fusion[2](path, feats[2], size=feats[1].shape[-2:])
        path = self.fusion[1](path, feats[1], size=feats[0].shape[-2:])
        h0, w0 = feats[0].shape[-2:]
        path = self.fusion[0](path, feats[0], size=(2 * h0, 2 * w0))
        out = F.interpolate(self.head_in(path), size=(height, width), mode="bilinear", align_corners=True)
        return self.head_out(out)


def confidence(raw: torch.Tensor) -> torch.Tensor:
    return 1.0 + F.softplus(raw)


def activate_dense(kind: str, raw: torch.Tensor) -> dict:
    """Map raw (N, C, H, W) head output to channels-last predictions for ``kind``."""
    if kind == "point":
        return {"pointmap": raw[:, :3].permute(0, 2, 3, 1), "point_conf": confidence(raw[:, 3])}
    if kind == "depth":
        return {"depth": F.softplus(raw[:, 0]), "depth_conf": confidence(raw[:, 1])}
    if kind == "normal":
        return {"normals": F.normalize(raw, dim=1, eps=1e-12).permute(0, 2, 3, 1)}
    if kind == "gs":
        return {"gs_depth": F.softplus(raw[:, 0]), "gs_features": raw[:, 1:]}
    raise HeadConfigError(f"unknown dense head kind {kind!r}")


class DenseHead(nn.Module):
    def __init__(self, kind: str, dim: int, features: int = 64, gs_feature_dim: int = 16):
        super().__init__()
        if kind == "gs":
            out = 1 + gs_feature_dim
        elif kind in DENSE_KINDS:
            out = DENSE_KINDS[kind]
        else:
            raise HeadConfigError(f"unknown dense head kind {kind!r}")
        self.kind = kind
        self.dpt = DPTHead(dim, out, features)

    def forward(self, levels, hp, wp, height, width) -> dict:
        return activate_dense(self.kind, self.dpt(levels, hp, wp, height, width))


class CameraHead(nn.Module):
    """Self-attention over the N camera tokens, read out to a 9-vector per view:
    ``[quat(4), translation(3), fx/W, fy/H]`` expressed relative to view 0."""

    def __init__(self, dim: int, heads: int, layers: int = 2, mlp_ratio: float = 4.0, norm: str = "layer"):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio, norm) for _ in range(layers))
        self.norm = make_norm(norm, dim)
        self.out = nn.Linear(dim, 9)
        with torch.no_grad():
            self.out.weight.mul_(0.1)
            self.out.bias.zero_()
            self.out.bias[0] = 1.0

    def forward(self, cam_tokens: torch.Tensor) -> torch.Tensor:
        x = cam_tokens[None]
        for blk in self.blocks:
            x = blk(x)
        raw = self.out(self.norm(x))[0]
        return canonicalize_cameras(raw)


def canonicalize_cameras(raw: torch.Tensor) -> torch.Tensor:
    """Normalize quaternions, re-express poses relative to view 0, fix sign ``w >= 0``."""
    q = F.normalize(raw[:, :4], dim=-1, eps=1e-12)
    t = raw[:, 4:7]
    focal = torch.exp(raw[:, 7:9])
    q_rel = quat_multiply_t(q, quat_conjugate_t(q[:1]))
    R_rel = quat_to_matrix_t(q_rel)
    t_rel = t - (R_rel @ t[0])
    q_rel = torch.where(q_rel[:, :1] < 0, -q_rel, q_rel)
    ident = torch.zeros(1, 7, dtype=raw.dtype, device=raw.device)
    ident[0, 0] = 1.0
    pose = torch.cat([ident, torch.cat([q_rel, t_rel], -1)[1:]], 0)
    return torch.cat([pose, focal], -1)


def blend_color(weight: torch.Tensor, pixel_rgb: torch.Tensor, dc_residual: torch.Tensor) -> torch.Tensor:
    return weight * pixel_rgb + (1.0 - weight) * torch.sigmoid(dc_residual)


class GaussianAttributeHead(nn.Module):
    """Fuses GS-head features with the raw image into per-pixel Gaussian attributes."""

    def __init__(self, feature_dim: int, s_max: float = 0.05, hidden: int = 32):
        super().__init__()
        self.s_max = s_max
        self.net = nn.Sequential(
            nn.Conv2d(feature_dim + 3, hidden, 3, padding=1), nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.GELU(),
            nn.Conv2d(hidden, 12, 1),
        )
        with torch.no_grad():
            last = self.net[-1]
            last.weight.mul_(0.1)
            last.bias.copy_(torch.tensor([2.0, 1.0, 0, 0, 0, -1.0, -1.0, -1.0, 0, 0, 0, 2.0]))

    def forward(self, features: torch.Tensor, image: torch.Tensor) -> dict:
        """``features`` (N, C, H, W), ``image`` (N, 3, H, W) in [0, 1] -> channels-last maps."""
        raw = self.net(torch.cat([features, image], 1)).permute(0, 2, 3, 1)
        rgb = image.permute(0, 2, 3, 1)
        weight = torch.sigmoid(raw[..., 11:12])
        return {
            "opacity": torch.sigmoid(raw[..., 0]),
            "rotation": F.normalize(raw[..., 1:5], dim=-1, eps=1e-12),
            "scale": self.s_max * torch.sigmoid(raw[..., 5:8]),
            "dc_residual": raw[..., 8:11],
            "fusion_weight": weight[..., 0],
            "color": blend_color(weight, rgb, raw[..., 8:11]),
        }
