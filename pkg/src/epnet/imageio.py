"""8-bit RGB PNG I/O and numpy <-> torch image conversion.

Images live in memory as ``H x W x C`` float arrays in ``[0, 1]``; the
network consumes ``N x C x H x W`` tensors.
"""

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DimensionError


def read_png(path):
    """Decode an image file into an ``H x W x 3`` float64 array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def quantize(image):
    """Round a [0, 1] float image to uint8 with clamping."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image):
    path = Path(path)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected H x W x 3 image, got shape {image.shape}")
    try:
        Image.fromarray(quantize(image), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def to_tensor(image, dtype=torch.float32):
    """``H x W x C`` array -> ``1 x C x H x W`` tensor."""
    arr = np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1))
    return torch.from_numpy(arr).to(dtype).unsqueeze(0)


def to_image(tensor):
    """``1 x C x H x W`` (or ``C x H x W``) tensor -> ``H x W x C`` float64 array."""
    t = tensor.detach()
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise DimensionError("to_image expects a single image")
        t = t[0]
    return t.permute(1, 2, 0).cpu().double().numpy()
