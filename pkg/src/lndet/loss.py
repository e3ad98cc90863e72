"""Training objectives.

Segmentation: deep-supervised cross-entropy + soft Dice over four scales.
Detection: MSE on the heatmap, penalty-reduced focal on the heatmap, and L1
on offsets and sizes at annotated center voxels, with fixed mixing weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

_CE_EPS = 1e-7
_DICE_EPS = 1e-5
_FOCAL_EPS = 1e-4

# level weights 1, 1/2, 1/4, 1/8 normalized to sum to 1
_LEVEL_W = tuple(w / 1.875 for w in (1.0, 0.5, 0.25, 0.125))


@dataclass(frozen=True)
class SegLossWeights:
    alpha: tuple[float, float, float, float] = _LEVEL_W
    beta: tuple[float, float, float, float] = _LEVEL_W


@dataclass(frozen=True)
class DetLossWeights:
    sigma1: float = 2.0   # heatmap MSE
    sigma2: float = 10.0  # heatmap focal
    kappa: float = 1.0    # center offsets
    mu: float = 0.1       # box sizes
    focal_alpha: float = 2.0
    focal_beta: float = 4.0


def _soft_dice(p: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    # per-sample dice, averaged over the batch
    p = p.flatten(1)
    m = m.flatten(1)
    inter = (p * m).sum(dim=1)
    denom = p.sum(dim=1) + m.sum(dim=1)
    return (1.0 - (2.0 * inter + _DICE_EPS) / (denom + _DICE_EPS)).mean()


def seg_loss(probs: Sequence[torch.Tensor], masks: Sequence[torch.Tensor],
             weights: SegLossWeights = SegLossWeights()) -> tuple[torch.Tensor, dict]:
    """Weighted sum of CE and Dice over the supervision pyramid.

    probs: four [B, 1, X, Y, Z] foreground probabilities, full resolution
    first. masks: matching [B, X, Y, Z] foreground masks (bool or float).
    """
    if len(probs) != 4 or len(masks) != 4:
        raise ValueError("expected 4 supervision levels")
    total = probs[0].new_zeros(())
    parts = {}
    for i, (pc, m) in enumerate(zip(probs, masks)):
        if pc.shape[1] != 1 or pc.shape[0] != m.shape[0] or pc.shape[2:] != m.shape[1:]:
            raise ValueError(f"level {i}: prob shape {tuple(pc.shape)} vs mask {tuple(m.shape)}")
        m = m.to(pc.dtype)
        p = pc[:, 0].clamp(_CE_EPS, 1.0 - _CE_EPS)
        ce = -(m * torch.log(p) + (1.0 - m) * torch.log(1.0 - p)).mean()
        dice = _soft_dice(pc[:, 0], m)
        total = total + weights.alpha[i] * ce + weights.beta[i] * dice
        parts[f"ce_l{i}"] = float(ce.detach())
        parts[f"dice_l{i}"] = float(dice.detach())
    return total, parts


def _focal(pred: torch.Tensor, gt: torch.Tensor, pos: torch.Tensor,
           alpha: float, beta: float) -> torch.Tensor:
    """Penalty-reduced focal loss; positives are the annotated center voxels,
    the Gaussian tail only softens the negative penalty."""
    p = pred.clamp(_FOCAL_EPS, 1.0 - _FOCAL_EPS)
    neg_w = (1.0 - gt).clamp(min=0.0).pow(beta)
    pos_loss = -((1.0 - p).pow(alpha) * torch.log(p))[pos].sum()
    neg_loss = -(neg_w * p.pow(alpha) * torch.log(1.0 - p))[~pos].sum()
    n = pos.sum().clamp(min=1)
    return (pos_loss + neg_loss) / n


def det_loss(heatmap: torch.Tensor, whd: torch.Tensor, offsets: torch.Tensor,
             gt_heatmap: torch.Tensor, gt_whd: torch.Tensor, gt_offsets: torch.Tensor,
             center_mask: torch.Tensor,
             weights: DetLossWeights = DetLossWeights()) -> tuple[torch.Tensor, dict]:
    """sigma1 * MSE + sigma2 * focal + kappa * L1(offsets) + mu * L1(sizes).

    heatmap [B, 1, X, Y, Z]; whd, offsets [B, 3, X, Y, Z]; gt_heatmap and
    center_mask [B, X, Y, Z]. Regression terms are sums of absolute error
    over the three components at center voxels, averaged over centers; both
    vanish when a batch has no centers.
    """
    pred_h = heatmap[:, 0]
    pos = center_mask.bool()
    n = pos.sum().clamp(min=1).to(pred_h.dtype)

    mse = torch.nn.functional.mse_loss(pred_h, gt_heatmap.to(pred_h.dtype))
    focal = _focal(pred_h, gt_heatmap.to(pred_h.dtype), pos,
                   weights.focal_alpha, weights.focal_beta)

    pos3 = pos.unsqueeze(1).expand_as(whd)
    off_l1 = (offsets - gt_offsets.to(offsets.dtype))[pos3].abs().sum() / n
    whd_l1 = (whd - gt_whd.to(whd.dtype))[pos3].abs().sum() / n

    total = (weights.sigma1 * mse + weights.sigma2 * focal
             + weights.kappa * off_l1 + weights.mu * whd_l1)
    parts = {"mse": float(mse.detach()), "focal": float(focal.detach()),
             "off_l1": float(off_l1.detach()), "whd_l1": float(whd_l1.detach())}
    return total, parts


def grad_check(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
               direction: torch.Tensor, h: float = 1e-3) -> tuple[float, float]:
    """Compare the autograd directional derivative of a scalar function
    against a central finite difference along the given direction.

    Returns (analytic, numeric); callers assert on their relative error.
    """
    u = direction / direction.norm()
    x = x.detach().clone().requires_grad_(True)
    y = fn(x)
    if y.dim() != 0:
        raise ValueError("fn must return a scalar")
    (grad,) = torch.autograd.grad(y, x)
    analytic = float((grad * u).sum())
    with torch.no_grad():
        numeric = float((fn(x + h * u) - fn(x - h * u)) / (2.0 * h))
    return analytic, numeric
