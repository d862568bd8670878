"""Network building blocks: CIMB, EAM, SE-ResBlock and the samplers.

All modules take ``N x C x H x W`` tensors.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class BlockConfig:
    """Configuration of one Channel Information Mining Block.

    ``activation`` is ``"gelu"`` or ``"relu"``.
    """

    channels: int
    expand_factor: int = 2
    shuffle_groups: int = 8
    se_reduction: int = 4
    use_layer_norm: bool = True
    activation: str = "gelu"
    use_shuffle: bool = True

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if self.expand_factor < 1:
            raise ConfigError("expand_factor must be >= 1")
        expanded = self.channels * self.expand_factor
        if self.shuffle_groups < 1 or expanded % self.shuffle_groups:
            raise ConfigError(
                f"shuffle_groups={self.shuffle_groups} does not divide {expanded} channels"
            )
        if self.se_reduction < 1 or expanded % self.se_reduction:
            raise ConfigError(
                f"se_reduction={self.se_reduction} does not divide {expanded} channels"
            )
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown CIMB activation {self.activation!r}")

    @property
    def expanded(self):
        return self.channels * self.expand_factor


def _check_channels(x, channels, where):
    if x.dim() != 4 or x.shape[1] != channels:
        raise DimensionError(
            f"{where} expects N x {channels} x H x W input, got {tuple(x.shape)}"
        )


def channel_shuffle(x, groups):
    """Interleave channel groups: view channels as ``(groups, C/groups)`` and transpose."""
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels are not divisible into {groups} groups")
    return x.reshape(n, groups, c // groups, h, w).transpose(1, 2).reshape(n, c, h, w)


class ChannelShuffle(nn.Module):
    def __init__(self, groups):
        super().__init__()
        self.groups = groups

    def forward(self, x):
        return channel_shuffle(x, self.groups)

    def extra_repr(self):
        return f"groups={self.groups}"


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis at every pixel, with affine parameters."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        y = (x - mu) / torch.sqrt(var + self.eps)
        return y * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class SqueezeExcite(nn.Module):
    """Global average pool -> 1x1 (C -> C/r) -> ReLU -> 1x1 (C/r -> C) -> sigmoid gate."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"se reduction {reduction} does not divide {channels}")
        hidden = channels // reduction
        self.squeeze = nn.Conv2d(channels, hidden, 1)
        self.excite = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        s = F.adaptive_avg_pool2d(x, 1)
        s = torch.sigmoid(self.excite(F.relu(self.squeeze(s))))
        return x * s


def _activation(name):
    return {"gelu": nn.GELU(), "relu": nn.ReLU(), "elu": nn.ELU()}[name]


class CIMB(nn.Module):
    """Channel Information Mining Block.

    Two residual stages over channel-expanded features::

        y   = x + proj_a(SE(shuffle(act(dwconv(expand_a(LN(x)))))))
        out = y + proj_b(shuffle(act(expand_b(LN(y)))))

    ``use_layer_norm=False`` and ``use_shuffle=False`` swap the norm and
    shuffle for identities.
    """

    def __init__(self, cfg):
        super().__init__()
        if isinstance(cfg, int):
            cfg = BlockConfig(cfg)
        self.cfg = cfg
        c, e = cfg.channels, cfg.expanded

        self.norm_a = LayerNorm2d(c) if cfg.use_layer_norm else nn.Identity()
        self.expand_a = nn.Conv2d(c, e, 1)
        self.dwconv = nn.Conv2d(e, e, 3, padding=1, groups=e)
        self.act_a = _activation(cfg.activation)
        self.shuffle_a = ChannelShuffle(cfg.shuffle_groups) if cfg.use_shuffle else nn.Identity()
        self.se = SqueezeExcite(e, cfg.se_reduction)
        self.proj_a = nn.Conv2d(e, c, 1)

        self.norm_b = LayerNorm2d(c) if cfg.use_layer_norm else nn.Identity()
        self.expand_b = nn.Conv2d(c, e, 1)
        self.act_b = _activation(cfg.activation)
        self.shuffle_b = ChannelShuffle(cfg.shuffle_groups) if cfg.use_shuffle else nn.Identity()
        self.proj_b = nn.Conv2d(e, c, 1)

    def forward(self, x):
        _check_channels(x, self.cfg.channels, "CIMB")
        t = self.act_a(self.dwconv(self.expand_a(self.norm_a(x))))
        y = x + self.proj_a(self.se(self.shuffle_a(t)))
        t = self.shuffle_b(self.act_b(self.expand_b(self.norm_b(y))))
        return y + self.proj_b(t)

    def final_projections(self):
        return [self.proj_a, self.proj_b]


class EAM(nn.Module):
    """External Attention Module.

    An attention map ``M`` is computed from the downsampled input image by
    ``1x1 conv -> ELU -> 1x1 conv`` and multiplies the incoming features.
    The product is concatenated with the image and compressed back to
    ``channels`` by a 3x3 conv.  ``M`` is not squashed.

    With ``from_features=True`` the map is computed from the incoming
    features instead of the image (ablation).
    """

    def __init__(self, channels, image_channels=3, activation="elu", from_features=False):
        super().__init__()
        if activation not in ("elu", "relu"):
            raise ConfigError(f"unknown EAM activation {activation!r}")
        self.channels = channels
        self.image_channels = image_channels
        self.from_features = from_features
        src = channels if from_features else image_channels
        self.attn_in = nn.Conv2d(src, channels, 1)
        self.act = _activation(activation)
        self.attn_out = nn.Conv2d(channels, channels, 1)
        self.fuse = nn.Conv2d(channels + image_channels, channels, 3, padding=1)

    def attention_map(self, f_in, image):
        src = f_in if self.from_features else image
        return self.attn_out(self.act(self.attn_in(src)))

    def forward(self, f_in, image):
        _check_channels(f_in, self.channels, "EAM")
        _check_channels(image, self.image_channels, "EAM image input")
        if f_in.shape[-2:] != image.shape[-2:] or f_in.shape[0] != image.shape[0]:
            raise DimensionError(
                f"EAM image {tuple(image.shape)} does not match features {tuple(f_in.shape)}"
            )
        f_att = self.attention_map(f_in, image) * f_in
        return self.fuse(torch.cat([image, f_att], dim=1))


class SEResBlock(nn.Module):
    """``x + SE(conv3x3(relu(conv3x3(x))))``."""

    def __init__(self, channels, se_reduction=4):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.se = SqueezeExcite(channels, se_reduction)

    def forward(self, x):
        _check_channels(x, self.channels, "SEResBlock")
        return x + self.se(self.conv2(F.relu(self.conv1(x))))

    def final_projections(self):
        return [self.conv2]


class Downsample(nn.Module):
    """Strided 3x3 conv: ``c`` channels at ``H x W`` -> ``2c`` at ``H/2 x W/2``."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(channels, 2 * channels, 3, stride=2, padding=1)

    def forward(self, x):
        _check_channels(x, self.channels, "Downsample")
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise DimensionError(f"Downsample needs even spatial dims, got {tuple(x.shape[-2:])}")
        return self.conv(x)


class Upsample(nn.Module):
    """Nearest-neighbour 2x then 3x3 conv: ``c`` -> ``c/2`` channels."""

    def __init__(self, channels):
        super().__init__()
        if channels % 2:
            raise ConfigError("Upsample needs an even channel count")
        self.channels = channels
        self.conv = nn.Conv2d(channels, channels // 2, 3, padding=1)

    def forward(self, x):
        _check_channels(x, self.channels, "Upsample")
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
