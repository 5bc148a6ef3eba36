"""The composite multi-task objective and every sub-term.

Dense inputs are channels-last: maps (N, H, W), vector fields (N, H, W, C).
Confidence-weighted terms are mean-reduced over their own support, so an
all-perfect prediction with unit confidence scores exactly zero.
"""

from __future__ import annotations

import warnings
from typing import Callable

import torch
import torch.nn.functional as F

from .config import LossWeights


class EmptyMaskWarning(UserWarning):
    pass


class TrainingFault(RuntimeError):
    """A loss term went non-finite; ``term`` names it."""

    def __init__(self, term: str, value):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term


def _empty(like: torch.Tensor, what: str) -> torch.Tensor:
    warnings.warn(f"{what}: empty mask, loss set to zero", EmptyMaskWarning, stacklevel=3)
    return like.sum() * 0.0


def _vec(x: torch.Tensor) -> torch.Tensor:
    return x if x.ndim == 4 else x[..., None]


def forward_diffs(x: torch.Tensor, mask: torch.Tensor):
    """Forward differences along columns and rows with their validity masks.

    ``x`` is (N, H, W, C); each pair is ``(diff, valid)`` where a difference is
    valid only if both pixels are.
    """
    dx = x[:, :, 1:] - x[:, :, :-1]
    mx = mask[:, :, 1:] & mask[:, :, :-1]
    dy = x[:, 1:] - x[:, :-1]
    my = mask[:, 1:] & mask[:, :-1]
    return (dx, mx), (dy, my)


def confidence_regression_loss(pred: torch.Tensor, gt: torch.Tensor, conf: torch.Tensor,
                               valid: torch.Tensor, alpha: float) -> torch.Tensor:
    """``conf * |err| + conf * |grad err| - alpha * log conf`` over valid pixels."""
    pred, gt = _vec(pred), _vec(gt)
    valid = valid.bool()
    n = valid.sum()
    if n == 0:
        return _empty(pred, "confidence regression")
    err = pred - gt
    c = conf[..., None]
    data = (c * err).norm(dim=-1)[valid].sum() / n
    grad = err.new_zeros(())
    for (d, m), cm in zip(forward_diffs(err, valid), (c[:, :, :-1], c[:, :-1])):
        if m.any():
            grad = grad + (cm * d).norm(dim=-1)[m].mean()
    reg = -alpha * torch.log(conf)[valid].sum() / n
    return data + grad + reg


def point_loss(pred, gt, conf, valid, alpha: float = 0.2):
    return confidence_regression_loss(pred, gt, conf, valid, alpha)


def depth_loss(pred, gt, conf, valid, alpha: float = 0.2):
    return confidence_regression_loss(pred, gt, conf, valid, alpha)


def gs_depth_loss(pred, gt, conf, valid, alpha: float = 0.2):
    return confidence_regression_loss(pred, gt, conf, valid, alpha)


def camera_loss(pred: torch.Tensor, gt: torch.Tensor, delta: float = 0.1) -> torch.Tensor:
    """Elementwise Huber over the 9-vectors, summed over entries and views."""
    if pred.shape != gt.shape:
        raise ValueError(f"camera vectors {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return F.huber_loss(pred, gt, reduction="sum", delta=delta)


def normal_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor, weight: float = 1.0) -> torch.Tensor:
    valid = valid.bool()
    if not valid.any():
        return _empty(pred, "normal loss")
    cos = (pred * gt).sum(-1)
    return weight * (1.0 - cos.abs())[valid].mean()


def gradient_magnitude_proxy(a: torch.Tensor, b: torch.Tensor, scales: int = 3) -> torch.Tensor:
    """Deterministic stand-in for a learned perceptual metric.

    L1 between gradient-magnitude maps of (N, H, W, 3) images at ``scales``
    dyadic resolutions.
    """
    a = a.permute(0, 3, 1, 2)
    b = b.permute(0, 3, 1, 2)
    total = a.new_zeros(())
    for s in range(scales):
        if s:
            if min(a.shape[-2:]) < 4:
                break
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
        total = total + (_grad_mag(a) - _grad_mag(b)).abs().mean()
    return total


def _grad_mag(x: torch.Tensor) -> torch.Tensor:
    gx = x[..., :-1, 1:] - x[..., :-1, :-1]
    gy = x[..., 1:, :-1] - x[..., :-1, :-1]
    return torch.sqrt(gx * gx + gy * gy + 1e-12)


def rgb_loss(rendered: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, lpips_weight: float = 0.05,
             perceptual: Callable = gradient_magnitude_proxy) -> torch.Tensor:
    """L1 over pixels visible from the context views plus the weighted perceptual term."""
    mask = mask.bool()
    if not mask.any():
        return _empty(rendered, "rgb loss")
    l1 = (rendered - target).abs().mean(-1)[mask].mean()
    m = mask[..., None].to(rendered.dtype)
    return l1 + lpips_weight * perceptual(rendered * m, target * m)


def confidence_mask(conf: torch.Tensor, top_fraction: float = 0.3) -> torch.Tensor:
    """Per-view mask of the ``top_fraction`` most confident pixels."""
    flat = conf.detach().reshape(conf.shape[0], -1)
    thresh = torch.quantile(flat, 1.0 - top_fraction, dim=1)
    return conf.detach() >= thresh[:, None, None]


def gradient_consistency_loss(rendered_depth: torch.Tensor, head_depth: torch.Tensor,
                              mask: torch.Tensor) -> torch.Tensor:
    """L1 between forward differences of two depth maps over ``mask``."""
    mask = mask.bool()
    r, h = _vec(rendered_depth), _vec(head_depth)
    (drx, mx), (dry, my) = forward_diffs(r, mask)
    (dhx, _), (dhy, _) = forward_diffs(h, mask)
    if not (mx.any() or my.any()):
        return _empty(rendered_depth, "gradient consistency")
    total = r.new_zeros(())
    for a, b, m in ((drx, dhx, mx), (dry, dhy, my)):
        if m.any():
            total = total + (a - b).abs().sum(-1)[m].mean()
    return total


def total_loss(terms: dict, weights: LossWeights) -> tuple[torch.Tensor, dict]:
    """Weighted sum of the available sub-terms.

    ``terms`` may hold ``points, depth, cam, normal`` and the 3DGS pieces
    ``rgb, gsdepth, consis``; missing entries are treated as inactive.
    Returns ``(total, breakdown)`` with plain floats in ``breakdown``.
    """
    for name, val in terms.items():
        if not torch.isfinite(val).all():
            raise TrainingFault(name, float(val.detach()))
    zero = next(iter(terms.values())).new_zeros(()) if terms else torch.zeros(())
    gs_parts = [k for k in ("rgb", "gsdepth", "consis") if k in terms]
    gs = zero
    if gs_parts:
        gs = terms.get("rgb", zero) + weights.gsdepth * terms.get("gsdepth", zero) + weights.consis * terms.get("consis", zero)
    total = (weights.points * terms.get("points", zero) + weights.depth * terms.get("depth", zero)
             + weights.cam * terms.get("cam", zero) + weights.normal * terms.get("normal", zero)
             + weights.gs * gs)
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    if gs_parts:
        breakdown["gs"] = float(gs.detach())
    breakdown["total"] = float(total.detach())
    if not torch.isfinite(total):
        raise TrainingFault("total", breakdown["total"])
    return total, breakdown

