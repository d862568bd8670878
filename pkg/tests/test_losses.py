import math

import numpy as np
import pytest
import torch

from epnet.errors import ConfigError, DimensionError
from epnet.losses import LossConfig, charbonnier, gaussian_window, psnr, ssim


def charbonnier_loop(out, gt, eps=1e-3):
    total = 0.0
    flat_o, flat_g = out.ravel(), gt.ravel()
    for o, g in zip(flat_o, flat_g):
        total += math.sqrt((o - g) ** 2 + eps * eps)
    return total / len(flat_o)


def psnr_loop(a, b, peak=1.0):
    s = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        s += (x - y) ** 2
    return 10 * math.log10(peak * peak / (s / a.size))


def ssim_loop(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0):
    """Direct windowed SSIM: explicit weighted sums at every valid position."""
    g1 = [math.exp(-((i - (window - 1) / 2) ** 2) / (2 * sigma * sigma)) for i in range(window)]
    tot = sum(g1)
    g1 = [v / tot for v in g1]
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    per_channel = []
    for ch in range(a.shape[2]):
        vals = []
        for y in range(a.shape[0] - window + 1):
            for x in range(a.shape[1] - window + 1):
                mx = my = sxx = syy = sxy = 0.0
                for i in range(window):
                    for j in range(window):
                        wgt = g1[i] * g1[j]
                        p, q = a[y + i, x + j, ch], b[y + i, x + j, ch]
                        mx += wgt * p
                        my += wgt * q
                        sxx += wgt * p * p
                        syy += wgt * q * q
                        sxy += wgt * p * q
                sxx -= mx * mx
                syy -= my * my
                sxy -= mx * my
                vals.append((2 * mx * my + c1) * (2 * sxy + c2)
                            / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
        per_channel.append(sum(vals) / len(vals))
    return sum(per_channel) / len(per_channel)


def test_charbonnier_floor():
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 8, 8))
    assert charbonnier(x, x) == 1e-3


def test_charbonnier_single_pixel():
    got = charbonnier(np.array([3e-3]), np.array([0.0]))
    assert got == pytest.approx(math.sqrt(10) * 1e-3, rel=1e-12)


def test_charbonnier_matches_loop(rng):
    a, b = rng.uniform(0, 1, (2, 3, 5, 7)), rng.uniform(0, 1, (2, 3, 5, 7))
    assert charbonnier(a, b) == pytest.approx(charbonnier_loop(a, b), rel=1e-12, abs=0)


def test_charbonnier_per_image_norm(rng):
    a, b = rng.uniform(0, 1, (3, 3, 4, 4)), rng.uniform(0, 1, (3, 3, 4, 4))
    want = np.mean([math.sqrt(((a[i] - b[i]) ** 2).sum() + 1e-6) for i in range(3)])
    got = charbonnier(a, b, LossConfig(reduction="per_image_norm"))
    assert got == pytest.approx(want, rel=1e-12)


def test_charbonnier_lower_bound(rng):
    a = rng.uniform(0, 1, (1, 3, 4, 4))
    b = a.copy()
    b[0, 0, 0, 0] += 1e-4
    assert charbonnier(a, b) > 1e-3


def test_charbonnier_gradient_fd(rng):
    out = torch.tensor(rng.uniform(0, 1, (1, 2, 3, 3)), requires_grad=True)
    gt = torch.tensor(rng.uniform(0, 1, (1, 2, 3, 3)))
    charbonnier(out, gt).backward()
    h = 1e-6
    num = torch.zeros_like(out)
    with torch.no_grad():
        for i in range(out.numel()):
            o = out.detach().clone().view(-1)
            o[i] += h
            fp = charbonnier(o.view_as(out), gt)
            o[i] -= 2 * h
            fm = charbonnier(o.view_as(out), gt)
            num.view(-1)[i] = (fp - fm) / (2 * h)
    assert torch.allclose(out.grad, num, rtol=1e-6, atol=1e-9)


def test_charbonnier_errors():
    with pytest.raises(DimensionError):
        charbonnier(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))
    with pytest.raises(ConfigError):
        LossConfig(epsilon=0)


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    assert psnr(a, a) == math.inf


def test_psnr_analytic():
    a = np.zeros((10, 10, 3))
    b = np.full((10, 10, 3), 0.1)  # MSE = 0.01
    assert abs(psnr(a, b) - 20.0) <= 1e-9


def test_psnr_matches_loop(rng):
    a, b = rng.uniform(0, 1, (9, 7, 3)), rng.uniform(0, 1, (9, 7, 3))
    assert psnr(a, b) == pytest.approx(psnr_loop(a, b), abs=1e-10)


def test_psnr_monotone_in_noise(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    noise = rng.standard_normal(a.shape)
    values = [psnr(a, a + s * noise) for s in np.linspace(0.01, 0.5, 10)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_ssim_identical_is_one(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    assert ssim(a, a) == 1.0


def test_ssim_constant_complement():
    a = np.zeros((12, 12, 3))
    assert ssim(a, 1 - a) == pytest.approx(ssim_loop(a, 1 - a), abs=1e-10)


def test_ssim_matches_loop(rng):
    a, b = rng.uniform(0, 1, (13, 14, 2)), rng.uniform(0, 1, (13, 14, 2))
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-10)


def test_ssim_symmetric(rng):
    for _ in range(5):
        a, b = rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16, 3))
        assert ssim(a, b) == ssim(b, a)
        assert psnr(a, b) == psnr(b, a)


def test_ssim_too_small():
    with pytest.raises(DimensionError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_gaussian_window_normalised():
    g = gaussian_window()
    assert len(g) == 11 and g.sum() == pytest.approx(1.0, abs=1e-15)
