"""Efficient Pyramid Network: model definition, inference and checkpoints."""

from dataclasses import asdict, dataclass, fields
import json
import math
from pathlib import Path
import struct
import time

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import CIMB, EAM, BlockConfig, Downsample, SEResBlock, Upsample
from .errors import CheckpointError, ConfigError, DimensionError
from .imageio import read_png, to_image, to_tensor, write_png

DIVISOR = 32
ABLATIONS = (
    "cimb_to_se_resblock",
    "wo_eam",
    "wo_ln",
    "gelu_to_relu",
    "wo_shuffle",
    "eam_from_fin",
    "eam_elu_to_relu",
)


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 128, 256, 512)
    hor_depth: int = 20
    expand_factor: int = 2
    shuffle_groups: int = 8
    se_reduction: int = 4
    input_channels: int = 3
    cimb_to_se_resblock: bool = False
    wo_eam: bool = False
    wo_ln: bool = False
    gelu_to_relu: bool = False
    wo_shuffle: bool = False
    eam_from_fin: bool = False
    eam_elu_to_relu: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 6:
            raise ConfigError(f"channel schedule needs 6 stages, got {len(self.channels)}")
        if self.channels[0] < 1 or any(
            b != 2 * a for a, b in zip(self.channels, self.channels[1:])
        ):
            raise ConfigError(f"channel schedule must double per stage: {self.channels}")
        if self.hor_depth < 0:
            raise ConfigError("hor_depth must be non-negative")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be positive")
        # SE-ResBlocks run on un-expanded widths, down to channels[0]
        if self.se_reduction < 1 or self.channels[0] % self.se_reduction:
            raise ConfigError(
                f"se_reduction={self.se_reduction} does not divide {self.channels[0]}"
            )
        for c in self.channels:
            self.block_config(c)

    def block_config(self, channels):
        return BlockConfig(
            channels=channels,
            expand_factor=self.expand_factor,
            shuffle_groups=self.shuffle_groups,
            se_reduction=self.se_reduction,
            use_layer_norm=not self.wo_ln,
            activation="relu" if self.gelu_to_relu else "gelu",
            use_shuffle=not self.wo_shuffle,
        )

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}; valid: {sorted(known)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **kw):
        """Halved channel widths; used for desk-scale training checks."""
        kw.setdefault("channels", (8, 16, 32, 64, 128, 256))
        kw.setdefault("hor_depth", 2)
        return cls(**kw)


class EfficientPyramidNet(nn.Module):
    """Asymmetric pyramid encoder-decoder predicting a residual on the input.

    Every encoder stage runs one CIMB and one EAM (fed with the input image
    average-pooled to the stage resolution) and then downsamples.  The
    deepest features pass through ``hor_depth`` CIMBs; the decoder
    upsamples, adds the same-scale encoder feature and applies one
    SE-ResBlock per level.
    """

    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        ch = cfg.channels

        def body(c):
            if cfg.cimb_to_se_resblock:
                return SEResBlock(c, cfg.se_reduction)
            return CIMB(cfg.block_config(c))

        self.stem = nn.Conv2d(cfg.input_channels, ch[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList(body(c) for c in ch)
        if cfg.wo_eam:
            self.eams = None
        else:
            self.eams = nn.ModuleList(
                EAM(
                    c,
                    image_channels=cfg.input_channels,
                    activation="relu" if cfg.eam_elu_to_relu else "elu",
                    from_features=cfg.eam_from_fin,
                )
                for c in ch
            )
        self.downs = nn.ModuleList(Downsample(c) for c in ch[:-1])
        self.hor = nn.Sequential(*(body(ch[-1]) for _ in range(cfg.hor_depth)))
        self.ups = nn.ModuleList(Upsample(c) for c in ch[1:])
        self.dec_blocks = nn.ModuleList(SEResBlock(c, cfg.se_reduction) for c in ch[:-1])
        self.head = nn.Conv2d(ch[0], cfg.input_channels, 3, padding=1)

    def forward(self, image):
        if image.dim() != 4 or image.shape[1] != self.cfg.input_channels:
            raise DimensionError(
                f"expected N x {self.cfg.input_channels} x H x W, got {tuple(image.shape)}"
            )
        h, w = image.shape[-2:]
        if h % DIVISOR or w % DIVISOR:
            raise DimensionError(
                f"spatial dims {h}x{w} must be divisible by {DIVISOR}; pad the input first"
            )
        x = self.stem(image)
        img = image
        skips = []
        n_stages = len(self.enc_blocks)
        for k in range(n_stages):
            if k > 0:
                img = F.avg_pool2d(img, 2)
            x = self.enc_blocks[k](x)
            if self.eams is not None:
                x = self.eams[k](x, img)
            if k < n_stages - 1:
                skips.append(x)
                x = self.downs[k](x)
        x = self.hor(x)
        for k in reversed(range(n_stages - 1)):
            x = self.ups[k](x) + skips[k]
            x = self.dec_blocks[k](x)
        return image + self.head(x)

    def num_params(self):
        return sum(p.numel() for p in self.parameters())


def _init_weights(model, seed):
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.copy_(torch.rand(m.bias.shape, generator=gen) * 2 * bound - bound)


def build_model(cfg=None, seed=0, head_scale=1.0):
    """Instantiate a network with deterministic initial weights.

    ``head_scale`` multiplies the output head after init; 0 gives an exact
    identity map at start.
    """
    model = EfficientPyramidNet(cfg or ModelConfig())
    _init_weights(model, seed)
    if head_scale != 1.0:
        with torch.no_grad():
            model.head.weight.mul_(head_scale)
            model.head.bias.mul_(head_scale)
    return model


def _reflect_index(n, pad_before, pad_after, device):
    """Indices for reflect padding of any width (repeats the reflection)."""
    idx = torch.arange(-pad_before, n + pad_after, device=device)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = torch.remainder(idx, period)
    return torch.where(idx >= n, period - idx, idx)


def pad_to_multiple(x, multiple=DIVISOR):
    """Reflect-pad bottom/right so H and W are multiples of ``multiple``.

    Returns the padded tensor and the original ``(H, W)``.
    """
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    if ph < h and pw < w:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    else:
        x = x.index_select(-2, _reflect_index(h, 0, ph, x.device))
        x = x.index_select(-1, _reflect_index(w, 0, pw, x.device))
    return x, (h, w)


def infer(model, image):
    """Run ``model`` on a batch of any spatial size (pad, forward, crop)."""
    padded, (h, w) = pad_to_multiple(image)
    return model(padded)[..., :h, :w]


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: MAGIC | u64 little-endian manifest length | JSON manifest | payload.
# The payload is every tensor as little-endian float32, concatenated in
# manifest order; offsets are in bytes relative to the payload start.

MAGIC = b"EPNCKPT1"
FORMAT_VERSION = 1


def write_container(path, tensors, meta=None):
    """Write named float32 tensors plus a JSON-able ``meta`` dict."""
    entries = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_container(path):
    """Inverse of :func:`write_container`: returns ``(tensors, meta)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    head = len(MAGIC) + 8
    if len(data) < head or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic or truncated header)")
    (mlen,) = struct.unpack("<Q", data[len(MAGIC):head])
    if len(data) < head + mlen:
        raise CheckpointError(f"{path} is truncated inside the manifest")
    try:
        manifest = json.loads(data[head: head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {version}, expected {FORMAT_VERSION}"
        )
    payload = memoryview(data)[head + mlen:]
    tensors = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(
                f"tensor {name!r}: manifest shape {shape} disagrees with {nbytes} bytes"
            )
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path} is truncated inside tensor {name!r}")
        arr = np.frombuffer(payload[start: start + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, manifest.get("meta", {})


def save_checkpoint(model, path, extra=None):
    meta = {"model_config": model.cfg.to_dict()}
    if extra:
        meta.update(extra)
    write_container(path, model.state_dict(), meta)


def load_state_into(model, tensors, path="<checkpoint>"):
    state = model.state_dict()
    missing = [k for k in state if k not in tensors]
    if missing:
        raise CheckpointError(f"{path} lacks tensors {missing[:5]}")
    unexpected = [k for k in tensors if k not in state]
    if unexpected:
        raise CheckpointError(f"{path} has unexpected tensors {unexpected[:5]}")
    for k, v in state.items():
        if tuple(tensors[k].shape) != tuple(v.shape):
            raise CheckpointError(
                f"tensor {k!r} has shape {tuple(tensors[k].shape)} in {path}, "
                f"config expects {tuple(v.shape)}"
            )
    model.load_state_dict({k: tensors[k] for k in state})


def load_checkpoint(path):
    tensors, meta = read_container(path)
    try:
        cfg = ModelConfig.from_dict(meta["model_config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path} carries no valid model config: {exc}") from exc
    model = EfficientPyramidNet(cfg)
    load_state_into(model, tensors, path)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# full-image and tiled inference


def _tile_starts(length, tile, stride):
    if length <= tile:
        return [0]
    starts = list(range(0, length - tile, stride))
    starts.append(length - tile)
    return starts


def _ramp(n, overlap, fade_start, fade_end):
    w = np.ones(n)
    if overlap > 0:
        ramp = (np.arange(overlap) + 0.5) / overlap
        if fade_start:
            w[:overlap] = np.minimum(w[:overlap], ramp)
        if fade_end:
            w[-overlap:] = np.minimum(w[-overlap:], ramp[::-1])
    return w


@torch.no_grad()
def restore(model, image, tile=None, overlap=64):
    """Restore an ``H x W x 3`` array; returns the unclamped ``H x W x 3`` result.

    With ``tile`` set, overlapping ``tile x tile`` windows are processed
    one at a time and blended with linear feathering across the overlap.
    """
    dtype = next(model.parameters()).dtype
    h, w = image.shape[:2]
    if tile is None or (h <= tile and w <= tile):
        return to_image(infer(model, to_tensor(image, dtype)))
    if tile <= overlap:
        raise ConfigError(f"tile size {tile} must exceed the overlap {overlap}")
    th, tw = min(tile, h), min(tile, w)
    stride_h, stride_w = th - overlap, tw - overlap
    acc = np.zeros((h, w, image.shape[2]))
    wsum = np.zeros((h, w, 1))
    ys = _tile_starts(h, th, stride_h)
    xs = _tile_starts(w, tw, stride_w)
    for y in ys:
        for x in xs:
            crop = image[y: y + th, x: x + tw]
            out = to_image(infer(model, to_tensor(crop, dtype)))
            wy = _ramp(th, min(overlap, th), y > 0, y + th < h)
            wx = _ramp(tw, min(overlap, tw), x > 0, x + tw < w)
            wt = np.outer(wy, wx)[..., None]
            acc[y: y + th, x: x + tw] += out * wt
            wsum[y: y + th, x: x + tw] += wt
    return acc / wsum


def desnow_image(model, image_path, out_path, tile=None, overlap=64):
    """Restore one image file and write a PNG; returns a small report dict."""
    image = read_png(image_path)
    t0 = time.perf_counter()
    out = restore(model, image, tile=tile, overlap=overlap)
    elapsed = time.perf_counter() - t0
    write_png(out_path, np.clip(out, 0.0, 1.0))
    h, w = image.shape[:2]
    return {
        "input": str(image_path),
        "output": str(out_path),
        "height": h,
        "width": w,
        "tile": tile,
        "seconds": elapsed,
    }
