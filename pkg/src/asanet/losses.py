"""Self-supervised consistency losses, masks and regularizers.

All maps are ``B x 1 x H x W`` tensors unless noted; images are
``B x C x H x W`` with values in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .geometry import bilinear_sample, reproject

_GE_EPS = 1e-7
_MEAN_EPS = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.85
    eta: float = 1.2
    lambda_G: float = 0.1
    lambda_F: float = 0.001
    lambda_D: float = 0.001
    ssim_window: int = 3
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.eta < 1.0:
            raise ValueError(f"eta must be >= 1, got {self.eta}")
        for name in ("lambda_G", "lambda_F", "lambda_D"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be a positive odd integer")


def _local_mean(x: torch.Tensor, window: int) -> torch.Tensor:
    # statistics over the in-image part of each window; no reflection padding
    return F.avg_pool2d(x, window, stride=1, padding=window // 2, count_include_pad=False)


def ssim_map(a, b, window: int = 3, c1: float = 0.01**2, c2: float = 0.03**2) -> torch.Tensor:
    """Per-pixel SSIM averaged over channels, ``B x 1 x H x W``."""
    mu_a = _local_mean(a, window)
    mu_b = _local_mean(b, window)
    var_a = _local_mean(a * a, window) - mu_a**2
    var_b = _local_mean(b * b, window) - mu_b**2
    cov = _local_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).mean(1, keepdim=True)


def photometric_error(target, synthesized, alpha: float = 0.85, cfg: LossConfig | None = None):
    """``alpha/2 * (1 - SSIM) + (1 - alpha) * L1`` per pixel."""
    l1 = (target - synthesized).abs().mean(1, keepdim=True)
    if alpha == 0:
        return l1
    if cfg is not None:
        ssim = ssim_map(target, synthesized, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2)
    else:
        ssim = ssim_map(target, synthesized)
    return alpha / 2 * (1 - ssim) + (1 - alpha) * l1


def auto_mask(target, sources, synthesized, alpha: float = 0.85, cfg: LossConfig | None = None):
    """1 where the best reconstruction beats the best raw source, strictly."""
    if len(sources) == 0 or len(sources) != len(synthesized):
        raise ValueError("need one synthesized view per source, and at least one source")
    with torch.no_grad():
        pe_syn = torch.stack([photometric_error(target, s, alpha, cfg) for s in synthesized]).min(0).values
        pe_raw = torch.stack([photometric_error(target, s, alpha, cfg) for s in sources]).min(0).values
    return (pe_syn < pe_raw).to(target.dtype)


def min_reduce_masked(errors, mask=None) -> torch.Tensor:
    """Mean over all pixels of ``mask * min_over_views(errors)``.

    The mean divides by the total pixel count, not by the number of pixels
    the mask keeps.
    """
    if len(errors) == 0:
        raise ValueError("need at least one error map")
    best = torch.stack(list(errors)).min(0).values
    if mask is not None:
        best = best * mask
    return best.mean()


def normalized_depth_difference(a, b) -> torch.Tensor:
    return (a - b).abs() / (a + b).clamp(min=_GE_EPS)


def geometric_error(depth_t, depth_src, transform, K, residual_translation=None, grid=None):
    """Normalized difference between the target depth moved into the source
    frame and the source depth interpolated at the warped positions."""
    if grid is None:
        grid = reproject(depth_t, transform, K, residual_translation)
    interpolated = bilinear_sample(depth_src, grid, padding="border")
    return normalized_depth_difference(grid.projected_depth, interpolated)


def disparity_smoothness(disp, image) -> torch.Tensor:
    """Edge-aware first-order smoothness on the mean-normalized disparity."""
    mean_disp = disp.mean(dim=(2, 3), keepdim=True).clamp(min=_MEAN_EPS)
    d = disp / mean_disp
    loss = disp.new_zeros(())
    if d.shape[-1] > 1:
        dx = (d[..., :, 1:] - d[..., :, :-1]).abs()
        ix = (image[..., :, 1:] - image[..., :, :-1]).abs().mean(1, keepdim=True)
        loss = loss + (dx * torch.exp(-ix)).mean()
    if d.shape[-2] > 1:
        dy = (d[..., 1:, :] - d[..., :-1, :]).abs()
        iy = (image[..., 1:, :] - image[..., :-1, :]).abs().mean(1, keepdim=True)
        loss = loss + (dy * torch.exp(-iy)).mean()
    return loss


def _second_x(x):
    return x[..., :, 2:] - 2 * x[..., :, 1:-1] + x[..., :, :-2]


def _second_y(x):
    return x[..., 2:, :] - 2 * x[..., 1:-1, :] + x[..., :-2, :]


def motion_field_smoothness(flow, depth) -> torch.Tensor:
    """Second-order smoothness of a ``B x 2 x H x W`` flow, weighted by depth edges."""
    loss = flow.new_zeros(())
    if flow.shape[-1] > 2:
        w = torch.exp(-_second_x(depth).abs().mean(1, keepdim=True))
        loss = loss + (_second_x(flow).abs() * w).mean()
    if flow.shape[-2] > 2:
        w = torch.exp(-_second_y(depth).abs().mean(1, keepdim=True))
        loss = loss + (_second_y(flow).abs() * w).mean()
    return loss


def dynamic_select_mask(pe_ego, pe_field, ge_ego, ge_field, eta: float = 1.2) -> torch.Tensor:
    """1 where both ego-motion errors exceed ``eta`` times the motion-field errors.

    Acts as a hard selector; no gradient flows through it.
    """
    if eta < 1.0:
        raise ValueError(f"eta must be >= 1, got {eta}")
    with torch.no_grad():
        sel = (pe_ego > eta * pe_field) & (ge_ego > eta * ge_field)
    return sel.to(pe_ego.dtype)


def merge_consistency(err_ego, err_field, m_dynamic) -> torch.Tensor:
    return m_dynamic * err_field + (1 - m_dynamic) * err_ego
