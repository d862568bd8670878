"""Closed-form parameter / MAC accounting and inference benchmarking.

Counting conventions: one multiply-accumulate is one MAC; biases,
activations, normalisation, pooling and elementwise products are not
counted.  A convolution contributes ``k*k * C_in/groups * C_out`` MACs per
output pixel.  The squeeze-excitation 1x1 convs act on globally pooled
vectors, so their cost does not depend on the image size; it is reported
separately as ``pooled_macs`` and kept out of ``macs`` so that ``macs`` is
exactly proportional to the pixel count.
"""

import csv
from dataclasses import dataclass, field
import math
import os
import platform
import time

import numpy as np
import torch
import torch.nn as nn

from .blocks import SqueezeExcite
from .errors import DimensionError
from .network import DIVISOR, ModelConfig, infer

COMPONENTS = ("encoder", "eams", "hor", "decoder", "heads")
CSV_COLUMNS = ("resolution", "reps", "mean_s", "median_s", "p95_s", "fps", "params_m",
               "gmacs", "device")
THREADS_ENV = "EPNET_NUM_THREADS"


# -- closed-form parameter counts -------------------------------------------

def conv_params(cin, cout, k, groups=1, bias=True):
    return k * k * (cin // groups) * cout + (cout if bias else 0)


def se_params(c, r):
    h = c // r
    return conv_params(c, h, 1) + conv_params(h, c, 1)


def cimb_params(c, expand=2, r=4, layer_norm=True):
    e = expand * c
    ln = 2 * c if layer_norm else 0
    stage_a = ln + conv_params(c, e, 1) + conv_params(e, e, 3, groups=e) + se_params(e, r) \
        + conv_params(e, c, 1)
    stage_b = ln + conv_params(c, e, 1) + conv_params(e, c, 1)
    return stage_a + stage_b


def se_resblock_params(c, r=4):
    return 2 * conv_params(c, c, 3) + se_params(c, r)


def eam_params(c, image_channels=3, from_features=False):
    src = c if from_features else image_channels
    return conv_params(src, c, 1) + conv_params(c, c, 1) + conv_params(c + image_channels, c, 3)


def downsample_params(c):
    return conv_params(c, 2 * c, 3)


def upsample_params(c):
    return conv_params(c, c // 2, 3)


def _body_params(cfg, c):
    if cfg.cimb_to_se_resblock:
        return se_resblock_params(c, cfg.se_reduction)
    return cimb_params(c, cfg.expand_factor, cfg.se_reduction, not cfg.wo_ln)


@dataclass
class ComplexityReport:
    total_params: int
    components: dict
    height: int = None
    width: int = None
    macs: int = None
    pooled_macs: int = None
    per_layer_macs: dict = field(default_factory=dict)

    @property
    def params_m(self):
        return self.total_params / 1e6

    @property
    def gmacs(self):
        return None if self.macs is None else self.macs / 1e9

    def render(self):
        lines = ["component  params"]
        for k in COMPONENTS:
            lines.append(f"{k:<10} {self.components[k]:>12,d}")
        lines.append(f"{'total':<10} {self.total_params:>12,d}  ({self.params_m:.2f} M)")
        if self.macs is not None:
            lines.append(
                f"GMACs @ {self.width}x{self.height}: {self.gmacs:.2f} "
                f"(+{self.pooled_macs / 1e9:.4f} pooled)"
            )
        return "\n".join(lines)


def count_params(cfg=None):
    """Closed-form parameter count of the network described by ``cfg``."""
    cfg = cfg or ModelConfig()
    ch, ic = cfg.channels, cfg.input_channels
    comps = {
        "encoder": sum(_body_params(cfg, c) for c in ch)
        + sum(downsample_params(c) for c in ch[:-1]),
        "eams": 0 if cfg.wo_eam else sum(eam_params(c, ic, cfg.eam_from_fin) for c in ch),
        "hor": cfg.hor_depth * _body_params(cfg, ch[-1]),
        "decoder": sum(upsample_params(c) for c in ch[1:])
        + sum(se_resblock_params(c, cfg.se_reduction) for c in ch[:-1]),
        "heads": conv_params(ic, ch[0], 3) + conv_params(ch[0], ic, 3),
    }
    return ComplexityReport(total_params=sum(comps.values()), components=comps)


# -- closed-form MAC counts --------------------------------------------------

def _body_macs(cfg, c, pixels):
    """(spatial MACs, pooled MACs) of one encoder/HOR body block."""
    if cfg.cimb_to_se_resblock:
        return 2 * 9 * c * c * pixels, 2 * c * (c // cfg.se_reduction)
    e = cfg.expand_factor * c
    spatial = (c * e + 9 * e + e * c + c * e + e * c) * pixels
    return spatial, 2 * e * (e // cfg.se_reduction)


def count_macs(cfg, height, width, detail=False):
    """Closed-form MACs for one ``height x width`` forward pass.

    Returns the spatial MAC count, or a :class:`ComplexityReport` with a
    per-layer breakdown when ``detail`` is true.
    """
    cfg = cfg or ModelConfig()
    if height % DIVISOR or width % DIVISOR:
        raise DimensionError(f"{height}x{width} is not divisible by {DIVISOR}")
    ch, ic = cfg.channels, cfg.input_channels
    px = [(height >> k) * (width >> k) for k in range(len(ch))]
    layers = {}
    pooled = 0

    layers["stem"] = 9 * ic * ch[0] * px[0]
    for k, c in enumerate(ch):
        spatial, se = _body_macs(cfg, c, px[k])
        layers[f"enc{k}.body"] = spatial
        pooled += se
        if not cfg.wo_eam:
            src = c if cfg.eam_from_fin else ic
            layers[f"enc{k}.eam"] = (src * c + c * c + 9 * (c + ic) * c) * px[k]
        if k < len(ch) - 1:
            layers[f"enc{k}.down"] = 9 * c * 2 * c * px[k + 1]
    for i in range(cfg.hor_depth):
        spatial, se = _body_macs(cfg, ch[-1], px[-1])
        layers[f"hor{i}"] = spatial
        pooled += se
    for k in range(len(ch) - 1):
        c_in = ch[k + 1]
        layers[f"dec{k}.up"] = 9 * c_in * (c_in // 2) * px[k]
        layers[f"dec{k}.block"] = 2 * 9 * ch[k] * ch[k] * px[k]
        pooled += 2 * ch[k] * (ch[k] // cfg.se_reduction)
    layers["head"] = 9 * ch[0] * ic * px[0]

    macs = sum(layers.values())
    if not detail:
        return macs
    rep = count_params(cfg)
    rep.height, rep.width = height, width
    rep.macs, rep.pooled_macs, rep.per_layer_macs = macs, pooled, layers
    return rep


def measure_macs(model, height, width):
    """Count MACs of a live model with forward hooks: ``(spatial, pooled)``."""
    se_convs = set()
    for m in model.modules():
        if isinstance(m, SqueezeExcite):
            se_convs.update(id(c) for c in m.modules() if isinstance(c, nn.Conv2d))
    totals = {"spatial": 0, "pooled": 0}

    def hook(mod, _inp, out):
        k = mod.kernel_size[0] * mod.kernel_size[1]
        n = k * (mod.in_channels // mod.groups) * mod.out_channels * out.shape[-2] * out.shape[-1]
        totals["pooled" if id(mod) in se_convs else "spatial"] += n

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, nn.Conv2d)]
    try:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            model(torch.zeros(1, model.cfg.input_channels, height, width, dtype=dtype))
    finally:
        for h in handles:
            h.remove()
    return totals["spatial"], totals["pooled"]


# -- memory estimate and benchmarking ----------------------------------------

def estimate_activation_bytes(cfg, height, width, bytes_per_value=4):
    """Rough peak activation memory of an inference pass.

    Counts the retained skip features of every stage plus four working
    buffers of the widest (channel-expanded) full-resolution tensor.
    """
    ph = height + (-height) % DIVISOR
    pw = width + (-width) % DIVISOR
    px = [(ph >> k) * (pw >> k) for k in range(len(cfg.channels))]
    skips = sum(c * p for c, p in zip(cfg.channels, px))
    working = 4 * cfg.expand_factor * cfg.channels[0] * px[0] + 2 * cfg.input_channels * px[0]
    return bytes_per_value * (skips + working)


def device_descriptor():
    threads = torch.get_num_threads()
    cpu = platform.processor() or platform.machine()
    return f"cpu:{cpu} threads={threads}"


def apply_thread_env():
    """Honour ``EPNET_NUM_THREADS``; returns the thread count in effect."""
    value = os.environ.get(THREADS_ENV)
    if value:
        torch.set_num_threads(int(value))
    return torch.get_num_threads()


@dataclass
class BenchReport:
    resolution: str  # "WxH"
    reps: int
    mean_s: float = None
    median_s: float = None
    p95_s: float = None
    fps: float = None
    params_m: float = None
    gmacs: float = None
    device: str = ""
    status: str = "ok"  # "ok" or "OOM"
    samples: list = field(default_factory=list, compare=False)
    timestamps: list = field(default_factory=list, compare=False)
    overhead_s: float = field(default=0.0, compare=False)
    tile: int = field(default=None, compare=False)


def _is_oom(exc):
    if isinstance(exc, MemoryError):
        return True
    msg = str(exc).lower()
    return "out of memory" in msg or "can't allocate" in msg or "not enough memory" in msg


def _time_calls(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    samples, stamps = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        if torch.cuda.is_available():
            torch.cuda.synchronize()
        t1 = time.perf_counter()
        samples.append(t1 - t0)
        stamps.append(t1)
    return samples, stamps


def bench_inference(model, resolution, reps=10, warmup=3, tile=None, memory_budget=None):
    """Time ``reps`` forward passes at ``resolution = (width, height)``.

    ``memory_budget`` (bytes) simulates a constrained device: an untiled
    run whose activation estimate exceeds it is reported as an ``OOM`` row
    without being attempted.  Real allocation failures are reported the
    same way.  The median time of an identity pass over the same input
    (harness overhead) is subtracted from every sample.
    """
    from .network import restore  # local: restore lives beside the model

    if reps < 10 or warmup < 3:
        raise ValueError("benchmarks need reps >= 10 after warmup >= 3")
    width, height = resolution
    cfg = model.cfg
    label = f"{width}x{height}"
    ph = height + (-height) % DIVISOR
    pw = width + (-width) % DIVISOR
    report = BenchReport(
        resolution=label,
        reps=reps,
        params_m=sum(p.numel() for p in model.parameters()) / 1e6,
        gmacs=count_macs(cfg, ph, pw) / 1e9,
        device=device_descriptor(),
        tile=tile,
    )
    eff_h, eff_w = (height, width) if tile is None else (min(tile, height), min(tile, width))
    if memory_budget is not None and estimate_activation_bytes(cfg, eff_h, eff_w) > memory_budget:
        report.status = "OOM"
        return report

    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(0)
    image_t = torch.rand(1, cfg.input_channels, height, width, generator=gen, dtype=dtype)
    image_np = image_t[0].permute(1, 2, 0).double().numpy()
    model.eval()

    if tile is None:
        def run():
            with torch.no_grad():
                infer(model, image_t)
    else:
        def run():
            restore(model, image_np, tile=tile)

    identity = nn.Identity()

    def empty():
        with torch.no_grad():
            identity(image_t)

    try:
        base, _ = _time_calls(empty, reps, warmup)
        samples, stamps = _time_calls(run, reps, warmup)
    except (MemoryError, RuntimeError) as exc:
        if not _is_oom(exc):
            raise
        report.status = "OOM"
        return report

    overhead = float(np.median(base))
    samples = [max(s - overhead, 0.0) for s in samples]
    report.samples, report.timestamps, report.overhead_s = samples, stamps, overhead
    report.mean_s = float(np.mean(samples))
    report.median_s = float(np.median(samples))
    report.p95_s = float(np.percentile(samples, 95))
    report.fps = 1.0 / report.mean_s if report.mean_s > 0 else math.inf
    return report


# -- comparison tables --------------------------------------------------------

def _fmt(v):
    return "" if v is None else repr(v)


def emit_comparison_table(reports, path):
    """Write ``reports`` as CSV to ``path`` and as an aligned text table next to it.

    Returns ``(csv_path, text_path)``.
    """
    from pathlib import Path

    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            if r.status == "OOM":
                timing = ["OOM"] * 4
            else:
                timing = [_fmt(r.mean_s), _fmt(r.median_s), _fmt(r.p95_s), _fmt(r.fps)]
            writer.writerow([r.resolution, r.reps, *timing, _fmt(r.params_m), _fmt(r.gmacs),
                             r.device])
    text_path = path.with_suffix(".txt")
    text_path.write_text(render_comparison_table(reports))
    return path, text_path


def render_comparison_table(reports):
    header = ("Resolution", "Inf. Time(in s)", "GMACs(G)", "Params(M)")
    rows = []
    for r in reports:
        t = "Out of Memory" if r.status == "OOM" else f"{r.mean_s:.4f}"
        rows.append((r.resolution, t, f"{r.gmacs:.2f}", f"{r.params_m:.2f}"))
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    lines.extend(" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
    return "\n".join(lines) + "\n"


def parse_comparison_table(path):
    """Read a CSV written by :func:`emit_comparison_table` back into reports."""
    def num(s, kind=float):
        return None if s == "" else kind(s)

    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            oom = row["mean_s"] == "OOM"
            out.append(BenchReport(
                resolution=row["resolution"],
                reps=int(row["reps"]),
                mean_s=None if oom else num(row["mean_s"]),
                median_s=None if oom else num(row["median_s"]),
                p95_s=None if oom else num(row["p95_s"]),
                fps=None if oom else num(row["fps"]),
                params_m=num(row["params_m"]),
                gmacs=num(row["gmacs"]),
                device=row["device"],
                status="OOM" if oom else "ok",
            ))
    return out
