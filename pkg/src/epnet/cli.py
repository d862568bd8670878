"""Command line entry point: ``epnet <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

import argparse
from dataclasses import fields
import logging
from pathlib import Path
import sys

import numpy as np

from . import analysis
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    DimensionError,
    DomainError,
    TrainingError,
)

log = logging.getLogger("epnet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _keys_epilog(*classes):
    lines = ["config keys (key=value, defaults shown):"]
    for cls in classes:
        for f in fields(cls):
            default = getattr(cls(), f.name)
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            lines.append(f"  {f.name} = {default}")
    return "\n".join(lines)


def _split_overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _split_keys(values, *classes):
    """Route flat ``key -> value`` pairs to the dataclass that owns each key."""
    from .train import coerce_dataclass

    owned = [{f.name for f in fields(c)} for c in classes]
    valid = sorted(set().union(*owned))
    unknown = sorted(k for k in values if not any(k in o for o in owned))
    if unknown:
        raise ConfigError(f"unknown keys {unknown}; valid keys: {valid}")
    return [
        coerce_dataclass(cls, {k: v for k, v in values.items() if k in o})
        for cls, o in zip(classes, owned)
    ]


def _model_config(source, overrides):
    from .network import ModelConfig
    from .train import parse_kv_file

    values = {}
    if source in (None, "default"):
        pass
    elif source == "tiny":
        tiny = ModelConfig.tiny()
        values = {"channels": ",".join(map(str, tiny.channels)), "hor_depth": str(tiny.hor_depth)}
    else:
        values = parse_kv_file(source)
    values.update(overrides)
    (cfg,) = _split_keys(values, ModelConfig)
    return cfg


def cmd_synth(args):
    from .snow import SynthConfig, make_pair_dataset, procedural_scene
    from .imageio import read_png

    values = _split_overrides(args.overrides)
    values.setdefault("rng_seed", str(args.seed))
    (cfg,) = _split_keys(values, SynthConfig)
    if args.clean_dir:
        paths = sorted(Path(args.clean_dir).glob("*.png"))
        if not paths:
            raise DatasetError(f"no PNG files in {args.clean_dir}")
        cleans = [read_png(p) for p in paths]
    else:
        rng = np.random.default_rng([cfg.rng_seed, 2**31])
        cleans = [procedural_scene(rng, (args.size, args.size)) for _ in range(args.count)]
    n = make_pair_dataset(cfg, cleans, args.out)
    print(f"pairs={n} out={args.out}")


def cmd_train(args):
    from .network import ModelConfig
    from .train import TrainConfig, parse_kv_file, train

    values = parse_kv_file(args.config) if args.config else {}
    values.update(_split_overrides(args.overrides))
    model_cfg, train_cfg = _split_keys(values, ModelConfig, TrainConfig)
    result = train(model_cfg, train_cfg, args.data, args.out, resume=args.resume)
    last = result.rows[-1] if result.rows else None
    print(f"checkpoint={result.checkpoint} log={result.log_path}"
          + (f" final_loss={last.loss:.6g}" if last else ""))


def cmd_eval(args):
    from .data import load_pairs
    from .losses import psnr, ssim
    from .network import load_checkpoint, restore

    model = load_checkpoint(args.ckpt)
    source = load_pairs(args.data)
    scores = []
    for sample in source:
        out = np.clip(restore(model, sample.snowy, tile=args.tile), 0.0, 1.0)
        p, s = psnr(out, sample.clean), ssim(out, sample.clean)
        scores.append((p, s))
        print(f"{sample.source_id} psnr={p:.4f} ssim={s:.6f}")
    arr = np.array(scores)
    print(f"mean psnr={arr[:, 0].mean():.4f} ssim={arr[:, 1].mean():.6f}")


def cmd_desnow(args):
    from .network import desnow_image, load_checkpoint

    model = load_checkpoint(args.ckpt)
    rep = desnow_image(model, args.input, args.output, tile=args.tile, overlap=args.overlap)
    print(f"wrote {rep['output']} ({rep['width']}x{rep['height']}) in {rep['seconds']:.3f}s")


def cmd_analyze(args):
    cfg = _model_config(args.config, _split_overrides(args.overrides))
    rep = analysis.count_macs(cfg, args.height, args.width, detail=True)
    print(rep.render())


def _parse_resolution(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"resolution must look like 1280x720, got {text!r}")
    return w, h


def cmd_bench(args):
    from .network import build_model, load_checkpoint

    threads = analysis.apply_thread_env()
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        model = build_model(_model_config(args.config, _split_overrides(args.overrides)))
    reports = []
    for res in args.resolution:
        rep = analysis.bench_inference(
            model, _parse_resolution(res), reps=args.reps, warmup=args.warmup,
            tile=args.tile, memory_budget=args.memory_budget,
        )
        reports.append(rep)
    log.info("benchmarked with %d thread(s)", threads)
    if args.out:
        analysis.emit_comparison_table(reports, args.out)
    sys.stdout.write(analysis.render_comparison_table(reports))


def build_parser():
    from .network import ModelConfig
    from .snow import SynthConfig
    from .train import TrainConfig

    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="epnet", description="Efficient pyramid network for image desnowing.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write synthetic snowy/clean pairs",
                       epilog=_keys_epilog(SynthConfig), formatter_class=fmt)
    s.add_argument("--out", required=True)
    s.add_argument("--clean-dir", help="directory of clean PNGs (default: procedural scenes)")
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("overrides", nargs="*", metavar="key=value")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model",
                       epilog=_keys_epilog(ModelConfig, TrainConfig), formatter_class=fmt)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="key = value file")
    s.add_argument("--resume", help="state_<step>.ckpt to continue from")
    s.add_argument("overrides", nargs="*", metavar="key=value")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a pair directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--tile", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("desnow", help="restore one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--tile", type=int)
    s.add_argument("--overlap", type=int, default=64)
    s.set_defaults(func=cmd_desnow)

    s = sub.add_parser("analyze", help="parameter and MAC counts",
                       epilog=_keys_epilog(ModelConfig), formatter_class=fmt)
    s.add_argument("--config", default="default", help="'default', 'tiny' or a key = value file")
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("overrides", nargs="*", metavar="key=value")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("bench", help="time inference",
                       epilog=_keys_epilog(ModelConfig) + f"\n\nthread count: ${analysis.THREADS_ENV}",
                       formatter_class=fmt)
    s.add_argument("--ckpt")
    s.add_argument("--config", default="default")
    s.add_argument("--resolution", action="append", default=None,
                   help="WxH, repeatable (default 1280x720)")
    s.add_argument("--reps", type=int, default=10)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--tile", type=int)
    s.add_argument("--memory-budget", type=int, help="bytes; simulate a constrained device")
    s.add_argument("--out", help="CSV output path (a .txt table is written alongside)")
    s.add_argument("overrides", nargs="*", metavar="key=value")
    s.set_defaults(func=cmd_bench)
    return p


VALIDATION_ERRORS = (UsageError, ConfigError, DimensionError, DomainError, DatasetError)
RUNTIME_ERRORS = (CheckpointError, TrainingError, OSError, RuntimeError, MemoryError)


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "resolution", "") is None:
        args.resolution = ["1280x720"]
    try:
        args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
