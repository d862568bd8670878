"""Synthetic snow degradation.

A snowy image ``I`` is formed from a clean scene ``J`` as::

    K = J * (1 - Z * R) + C * Z * R
    I = K * T + A * (1 - T)

with ``Z`` the (translucent) snow mask, ``R`` the binary snow location
mask, ``C`` the snow colour map, ``A`` the atmospheric light and ``T``
the transmission map.  All maps are per pixel.

The procedural mask generator below is a stand-in for real snow
statistics: streaks are rasterised line segments at uniformly drawn
angles, particles are soft discs, and transmission is smoothed
low-frequency noise.
"""

from dataclasses import asdict, dataclass
import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError, DomainError
from .imageio import quantize, write_png

MANIFEST_VERSION = 1


@dataclass
class SnowParams:
    """Per-pixel maps of the snow imaging model for one scene."""

    z_mask: np.ndarray  # H x W, [0, 1]
    r_mask: np.ndarray  # H x W, {0, 1}
    c_map: np.ndarray  # H x W x 3, [0, 1]
    a_map: np.ndarray  # H x W x 3, [0, 1]
    t_map: np.ndarray  # H x W, (0, 1]

    @property
    def dims(self):
        return self.z_mask.shape

    def validate(self, allow_zero_transmission=False):
        h, w = self.z_mask.shape
        for name, arr, shape in (
            ("r_mask", self.r_mask, (h, w)),
            ("c_map", self.c_map, (h, w, 3)),
            ("a_map", self.a_map, (h, w, 3)),
            ("t_map", self.t_map, (h, w)),
        ):
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
        if not np.all((self.r_mask == 0) | (self.r_mask == 1)):
            raise DomainError("r_mask must be binary")
        if allow_zero_transmission:
            if np.any(self.t_map < 0):
                raise DomainError("t_map must be non-negative")
        elif np.any(self.t_map <= 0):
            raise DomainError("t_map must be strictly positive")
        for name in ("z_mask", "c_map", "a_map", "t_map"):
            arr = getattr(self, name)
            if np.any(arr < 0) or np.any(arr > 1):
                raise DomainError(f"{name} must lie in [0, 1]")

    def transformed(self, k=0, flip=False):
        """Apply ``rot90(k)`` then an optional horizontal flip to every map."""
        def tf(a):
            a = np.rot90(a, k, axes=(0, 1))
            if flip:
                a = a[:, ::-1]
            return np.ascontiguousarray(a)

        return SnowParams(*(tf(getattr(self, n)) for n in _MAP_NAMES))

    def crop(self, top, left, height, width):
        sl = (slice(top, top + height), slice(left, left + width))
        return SnowParams(*(getattr(self, n)[sl].copy() for n in _MAP_NAMES))


_MAP_NAMES = ("z_mask", "r_mask", "c_map", "a_map", "t_map")


@dataclass
class SynthConfig:
    """Ranges for the procedural snow generator.

    Integer ranges are inclusive; real ranges are ``[lo, hi]``.
    """

    streak_count_range: tuple = (20, 60)
    streak_length_range: tuple = (6.0, 24.0)
    streak_angle_range: tuple = (-30.0, 30.0)  # degrees from vertical
    particle_count_range: tuple = (10, 40)
    particle_size_range: tuple = (1.0, 3.0)  # disc radius in pixels
    translucency_range: tuple = (0.5, 1.0)
    haze_strength_range: tuple = (0.05, 0.35)
    atmospheric_light_range: tuple = (0.75, 0.95)
    snow_color_range: tuple = (0.85, 1.0)
    haze_smoothness: float = 0.15  # gaussian sigma as a fraction of min(H, W)
    rng_seed: int = 0

    def __post_init__(self):
        for name in (
            "streak_count_range", "streak_length_range", "streak_angle_range",
            "particle_count_range", "particle_size_range", "translucency_range",
            "haze_strength_range", "atmospheric_light_range", "snow_color_range",
        ):
            rng = tuple(getattr(self, name))
            if len(rng) != 2 or rng[0] > rng[1]:
                raise ConfigError(f"{name} must be an ordered pair, got {rng}")
            setattr(self, name, rng)
        if self.streak_count_range[0] < 0 or self.particle_count_range[0] < 0:
            raise ConfigError("counts must be non-negative")
        if self.particle_size_range[0] <= 0 or self.streak_length_range[0] < 0:
            raise ConfigError("sizes must be positive")
        for name in ("translucency_range", "atmospheric_light_range", "snow_color_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi > 1:
                raise ConfigError(f"{name} must lie within [0, 1]")
        lo, hi = self.haze_strength_range
        if lo < 0 or hi >= 1:
            raise ConfigError("haze_strength_range must lie within [0, 1)")
        if self.haze_smoothness <= 0:
            raise ConfigError("haze_smoothness must be positive")


def synthesize_snow(clean, params, clamp=True, allow_zero_transmission=False):
    """Degrade ``clean`` (``H x W x 3``) with the maps in ``params``.

    The model is evaluated exactly in float64; ``clamp`` only clips the
    final result to [0, 1].  ``allow_zero_transmission`` admits the
    limiting case ``T = 0`` for oracle checks.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3 or clean.shape[2] != 3:
        raise DimensionError(f"clean image must be H x W x 3, got {clean.shape}")
    if clean.shape[:2] != params.z_mask.shape:
        raise DimensionError(
            f"image dims {clean.shape[:2]} do not match maps {params.z_mask.shape}"
        )
    params.validate(allow_zero_transmission=allow_zero_transmission)
    if np.any(clean < 0) or np.any(clean > 1):
        raise DomainError("clean image must lie in [0, 1]")

    zr = (params.z_mask * params.r_mask)[..., None]
    t = params.t_map[..., None]
    veiled = clean * (1.0 - zr) + params.c_map * zr
    out = veiled * t + params.a_map * (1.0 - t)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


def _draw_streaks(rng, cfg, h, w, z, r):
    n = rng.integers(cfg.streak_count_range[0], cfg.streak_count_range[1] + 1)
    for _ in range(n):
        length = rng.uniform(*cfg.streak_length_range)
        theta = np.deg2rad(rng.uniform(*cfg.streak_angle_range))
        alpha = rng.uniform(*cfg.translucency_range)
        y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
        steps = max(int(np.ceil(length * 2)), 1)
        s = np.linspace(0.0, length, steps + 1)
        ys = np.rint(y0 + s * np.cos(theta)).astype(int)
        xs = np.rint(x0 + s * np.sin(theta)).astype(int)
        ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        ys, xs = ys[ok], xs[ok]
        # fade towards the streak ends
        fade = np.sin(np.pi * (s[ok] + 0.5) / (length + 1.0)) if length > 0 else np.ones(len(ys))
        vals = np.clip(alpha * fade, 0.0, 1.0)
        r[ys, xs] = 1
        np.maximum.at(z, (ys, xs), vals)


def _draw_particles(rng, cfg, h, w, z, r):
    n = rng.integers(cfg.particle_count_range[0], cfg.particle_count_range[1] + 1)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n):
        rad = rng.uniform(*cfg.particle_size_range)
        alpha = rng.uniform(*cfg.translucency_range)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        y_lo, y_hi = max(int(cy - rad - 1), 0), min(int(cy + rad + 2), h)
        x_lo, x_hi = max(int(cx - rad - 1), 0), min(int(cx + rad + 2), w)
        if y_lo >= y_hi or x_lo >= x_hi:
            continue
        dy = yy[y_lo:y_hi, x_lo:x_hi] + 0.5 - cy
        dx = xx[y_lo:y_hi, x_lo:x_hi] + 0.5 - cx
        d = np.hypot(dy, dx)
        inside = d <= rad
        soft = alpha * np.clip(1.0 - (d / rad) ** 2, 0.0, 1.0) ** 0.5
        sub_z = z[y_lo:y_hi, x_lo:x_hi]
        sub_r = r[y_lo:y_hi, x_lo:x_hi]
        sub_r[inside] = 1
        sub_z[inside] = np.maximum(sub_z[inside], soft[inside])


def _smooth_field(rng, h, w, sigma):
    """Low-frequency noise normalised to [0, 1]."""
    noise = rng.standard_normal((h, w))
    smooth = ndimage.gaussian_filter(noise, sigma=sigma, mode="reflect")
    lo, hi = smooth.min(), smooth.max()
    if hi - lo < 1e-12:
        return np.full((h, w), 0.5)
    return (smooth - lo) / (hi - lo)


def generate_snow_params(cfg, dims, rng=None):
    """Draw a random :class:`SnowParams` of spatial size ``dims``.

    With ``rng`` omitted the generator is seeded from ``cfg.rng_seed`` so
    identical configs give bitwise-identical maps.
    """
    h, w = (int(d) for d in dims)
    if h <= 0 or w <= 0:
        raise DimensionError(f"dims must be positive, got {dims}")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)

    z = np.zeros((h, w))
    r = np.zeros((h, w), dtype=np.uint8)
    _draw_streaks(rng, cfg, h, w, z, r)
    _draw_particles(rng, cfg, h, w, z, r)
    z *= r

    tint = rng.uniform(-0.03, 0.03, size=3)
    snow = rng.uniform(*cfg.snow_color_range)
    c_map = np.clip(
        snow + tint + rng.uniform(-0.02, 0.02, size=(h, w, 3)), *cfg.snow_color_range
    )
    c_map = np.clip(c_map, 0.0, 1.0)

    airlight = rng.uniform(*cfg.atmospheric_light_range)
    a_map = np.broadcast_to(np.clip(airlight + tint, 0.0, 1.0), (h, w, 3)).copy()

    strength = rng.uniform(*cfg.haze_strength_range)
    haze = _smooth_field(rng, h, w, sigma=max(cfg.haze_smoothness * min(h, w), 1.0))
    t_map = 1.0 - strength * (0.5 + 0.5 * haze)

    return SnowParams(
        z_mask=z, r_mask=r.astype(np.float64), c_map=c_map, a_map=a_map, t_map=t_map
    )


def _write_manifest(path, entries):
    lines = [f"{k}={v}" for k, v in entries.items()]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path):
    """Parse a ``key=value`` manifest into a dict of strings."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_params(params, path):
    np.savez(path, **{n: getattr(params, n) for n in _MAP_NAMES})


def load_params(path):
    with np.load(path) as data:
        return SnowParams(*(data[n] for n in _MAP_NAMES))


def make_pair_dataset(cfg, cleans, out_dir, start_index=0):
    """Write ``<id>_snow.png``, ``<id>_gt.png`` and a params manifest per image.

    Clean images are quantised to 8 bits before degradation so the stored
    ground truth and the stored maps reproduce the snowy PNG to within one
    quantisation step.  Image ``i`` draws its maps from a generator seeded
    with ``(rng_seed, i)``.  Returns the number of pairs written.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    count = 0
    for i, clean in enumerate(cleans, start=start_index):
        clean = quantize(clean).astype(np.float64) / 255.0
        rng = np.random.default_rng([cfg.rng_seed, i])
        params = generate_snow_params(cfg, clean.shape[:2], rng=rng)
        snowy = synthesize_snow(clean, params)
        sid = f"{i:05d}"
        maps_name = f"{sid}_maps.npz"
        try:
            write_png(out_dir / f"{sid}_snow.png", snowy)
            write_png(out_dir / f"{sid}_gt.png", clean)
            save_params(params, out_dir / maps_name)
            _write_manifest(
                out_dir / f"{sid}_params.txt",
                {
                    "version": MANIFEST_VERSION,
                    "id": sid,
                    "height": clean.shape[0],
                    "width": clean.shape[1],
                    "maps": maps_name,
                    "rng_seed": cfg.rng_seed,
                    "index": i,
                    "snow_fraction": f"{float(params.r_mask.mean()):.6f}",
                    "mean_transmission": f"{float(params.t_map.mean()):.6f}",
                    "config": json.dumps(asdict(cfg)),
                },
            )
        except OSError as exc:
            raise OSError(f"failed writing pair {sid} in {out_dir}: {exc}") from exc
        count += 1
    return count


def procedural_scene(rng, dims):
    """A smooth random clean scene: gradients plus a few coloured blobs.

    Used as ground truth when no real clean images are at hand.
    """
    h, w = dims
    yy, xx = np.mgrid[0:h, 0:w] / np.array([max(h - 1, 1), max(w - 1, 1)])[:, None, None]
    img = np.empty((h, w, 3))
    for ch in range(3):
        a, b, c = rng.uniform(-0.4, 0.4, size=3)
        img[..., ch] = 0.5 + a * yy + b * xx + c * yy * xx
    for _ in range(rng.integers(3, 8)):
        cy, cx = rng.uniform(0, 1, size=2)
        s = rng.uniform(0.05, 0.25)
        colour = rng.uniform(-0.35, 0.35, size=3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += blob[..., None] * colour
    return np.clip(img, 0.0, 1.0)
