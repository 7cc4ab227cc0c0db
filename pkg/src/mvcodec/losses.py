"""Training objectives.

All image losses are mean-reduced so the loss weights are independent of
resolution. Every function here is pure and differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossWeights

SSIM_C1 = 0.01 ** 2   # for unit dynamic range
SSIM_C2 = 0.03 ** 2


def gaussian_window(size: int = 11, sigma: float = 1.5,
                    dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """1-D Gaussian window normalized to sum 1."""
    xs = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return (g / g.sum()).to(dtype)


def _as_batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() == 4:
        return x
    raise ValueError(f"expected (C, H, W) or (B, C, H, W), got {tuple(x.shape)}")


def _window_filter(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    """Depthwise separable Gaussian filter, valid region only."""
    c = x.shape[1]
    wrow = window.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    wcol = window.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    return F.conv2d(F.conv2d(x, wrow, groups=c), wcol, groups=c)


def _ssim_terms(x: torch.Tensor, y: torch.Tensor, window_size: int, sigma: float):
    """Mean luminance term and mean contrast-structure term."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    x, y = _as_batched(x), _as_batched(y)
    if min(x.shape[-2:]) < window_size:
        raise ValueError(
            f"image {tuple(x.shape[-2:])} smaller than the {window_size}x"
            f"{window_size} window")
    win = gaussian_window(window_size, sigma, dtype=x.dtype).to(x.device)
    mu_x = _window_filter(x, win)
    mu_y = _window_filter(y, win)
    var_x = _window_filter(x * x, win) - mu_x ** 2
    var_y = _window_filter(y * y, win) - mu_y ** 2
    cov = _window_filter(x * y, win) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + SSIM_C1) / (mu_x ** 2 + mu_y ** 2 + SSIM_C1)
    cs = (2 * cov + SSIM_C2) / (var_x + var_y + SSIM_C2)
    return (lum * cs).mean(), cs.mean()


def ssim(x: torch.Tensor, y: torch.Tensor, window_size: int = 11,
         sigma: float = 1.5) -> torch.Tensor:
    """Single-scale SSIM with a Gaussian window, averaged over the image.

    Raises if the image is smaller than the window.
    """
    full, _ = _ssim_terms(x, y, window_size, sigma)
    return full


def _auto_window(shape, cap: int = 11) -> int:
    """Largest odd window size that fits the image, at most `cap`."""
    side = min(int(shape[-2]), int(shape[-1]), cap)
    return side if side % 2 == 1 else side - 1


def loss_spa(pred: torch.Tensor, target: torch.Tensor, alpha: float = 0.7,
             window_size: int | None = None) -> torch.Tensor:
    """alpha * L1 + (1 - alpha) * (1 - SSIM).

    With window_size=None the SSIM window shrinks to fit small images so the
    loss stays defined down to 1x1 inputs.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if window_size is None:
        window_size = _auto_window(pred.shape)
    l1 = (pred - target).abs().mean()
    return alpha * l1 + (1.0 - alpha) * (1.0 - ssim(pred, target, window_size))


def loss_freq(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 distance in the frequency domain.

    Unnormalized 2-D DFT per channel; the mean absolute difference is taken
    over the concatenated real and imaginary parts.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = torch.fft.fft2(pred, norm="backward") - torch.fft.fft2(target, norm="backward")
    return torch.view_as_real(diff).abs().mean()


def _check_reg_map(reg_map: torch.Tensor) -> None:
    if reg_map.dim() != 3 or reg_map.shape[0] != 2:
        raise ValueError(f"regularization map must be (2, H, W), got {tuple(reg_map.shape)}")
    if (reg_map < 0).any():
        raise ValueError("regularization map has negative entries")
    sums = reg_map.sum(dim=0)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-4):
        raise ValueError("regularization map channels must sum to 1 per pixel")


def loss_flow(pred_f: torch.Tensor, pred_b: torch.Tensor,
              gt_f: torch.Tensor, gt_b: torch.Tensor,
              reg_map: torch.Tensor, regularized: bool = True) -> torch.Tensor:
    """Masked L1 between predicted and reference flows, both directions.

    The second regularization channel gates every pixel; `regularized=False`
    recovers the plain unmasked loss for ablation.
    """
    for m in (pred_b, gt_f, gt_b):
        if m.shape != pred_f.shape:
            raise ValueError("all flow maps must share one shape")
    if regularized:
        _check_reg_map(reg_map)
        w = reg_map[1:2]
    else:
        w = torch.ones(1, *pred_f.shape[-2:], dtype=pred_f.dtype, device=pred_f.device)
    fwd = (w * pred_f - w * gt_f).abs().mean()
    bwd = (w * pred_b - w * gt_b).abs().mean()
    return fwd + bwd


def loss_ent(reg_map: torch.Tensor) -> torch.Tensor:
    """Mean binary entropy of the regularization map (natural log).

    Zero for one-hot maps, ln 2 for uniform ones; 0*log(0) counts as 0.
    """
    _check_reg_map(reg_map)
    plogp = torch.where(reg_map > 0, reg_map * torch.log(reg_map.clamp_min(1e-30)),
                        torch.zeros_like(reg_map))
    return -plogp.sum(dim=0).mean()


def gaussian_weights(t: int, window: list[int], sigma2: float = 10.0) -> torch.Tensor:
    """Normalized Gaussian weights over timestamp distances t - j.

    The Gaussian prefactor cancels in the normalization, so only the
    exponentials matter. Weights sum to 1.
    """
    if len(window) == 0:
        raise ValueError("timestamp window must be nonempty")
    if any(j >= t for j in window):
        raise ValueError(f"window timestamps must precede t={t}, got {window}")
    d = torch.tensor([t - j for j in window], dtype=torch.float64)
    w = torch.exp(-(d ** 2) / (2.0 * sigma2))
    return w / w.sum()


def loss_cont(h_t: torch.Tensor, prev: torch.Tensor, weights: torch.Tensor,
              tau: float = 0.1) -> torch.Tensor:
    """Cross-entropy between the softmax of cosine similarities and the
    temporal-distance prior.

    Gradients flow through `h_t` only; the previous embeddings are detached.
    """
    prev = torch.as_tensor(prev).detach()
    if prev.dim() != 2:
        raise ValueError(f"previous embeddings must be (L, D), got {tuple(prev.shape)}")
    if prev.shape[0] != weights.shape[0]:
        raise ValueError(f"{prev.shape[0]} embeddings vs {weights.shape[0]} weights")
    norms = prev.norm(dim=1)
    if h_t.norm() == 0 or (norms == 0).any():
        raise ValueError("cosine similarity undefined for zero-norm embeddings")
    sims = (prev @ h_t) / (norms * h_t.norm())
    logp = torch.log_softmax(sims / tau, dim=0)
    return -(weights.to(logp.dtype) * logp).sum()


@dataclass
class LossReport:
    """Scalar loss components of one training step."""

    l_spa: float
    l_freq: float
    l_flow: float
    l_ent: float
    l_cont: float
    l_total: float


def loss_total(l_spa: torch.Tensor, l_freq: torch.Tensor, l_flow: torch.Tensor,
               l_ent: torch.Tensor, l_cont: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    """Weighted total; components absent for a frame enter as exact zeros."""
    total = weights.lam * l_spa + l_freq + l_flow + l_ent + l_cont
    if not torch.isfinite(total):
        raise ValueError(
            "non-finite loss: spa={} freq={} flow={} ent={} cont={}".format(
                float(l_spa), float(l_freq), float(l_flow), float(l_ent), float(l_cont)))
    return total


def entropy(weights: torch.Tensor) -> float:
    """Shannon entropy (nats) of a probability vector; lower bound of the
    contrastive loss over similarities."""
    w = torch.as_tensor(weights, dtype=torch.float64)
    nz = w[w > 0]
    return float(-(nz * nz.log()).sum())
