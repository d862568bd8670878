"""Charbonnier loss and PSNR / SSIM metrics."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
import torch

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class LossConfig:
    """``reduction`` is ``"per_pixel_mean"`` or ``"per_image_norm"``."""

    epsilon: float = 1e-3
    reduction: str = "per_pixel_mean"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.reduction not in ("per_pixel_mean", "per_image_norm"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def charbonnier(out, gt, cfg=LossConfig()):
    """Charbonnier penalty ``sqrt(d^2 + eps^2)``.

    ``per_pixel_mean`` averages the penalty over every element.
    ``per_image_norm`` takes the L2 norm of each image's difference
    (leading axis is the batch) and averages over images.

    Accepts torch tensors (differentiable) or numpy arrays.
    """
    _check_same_shape(out, gt)
    as_numpy = not isinstance(out, torch.Tensor)
    if as_numpy:
        out = torch.as_tensor(np.asarray(out, dtype=np.float64))
        gt = torch.as_tensor(np.asarray(gt, dtype=np.float64))
    # eps * sqrt((d/eps)^2 + 1): equal to sqrt(d^2 + eps^2), and exactly eps at d == 0
    eps = cfg.epsilon
    d = (out - gt) / eps
    if cfg.reduction == "per_pixel_mean":
        loss = eps * torch.sqrt(d * d + 1.0).mean()
    else:
        sq = (d * d).reshape(d.shape[0], -1).sum(dim=1)
        loss = eps * torch.sqrt(sq + 1.0).mean()
    return float(loss) if as_numpy else loss


def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    err = mse(a, b)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / err))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 2-D correlation with ``g``, keeping only fully covered pixels."""
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r: img.shape[0] - r, r: img.shape[1] - r]


def ssim(a, b, window=11, k1=0.01, k2=0.03, peak=1.0, sigma=1.5):
    """Mean structural similarity over Gaussian windows, averaged over channels.

    Inputs are ``H x W`` or ``H x W x C`` arrays.  Only window positions
    lying entirely inside the image contribute.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise DimensionError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = _filter_valid(x, g)
        my = _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
