"""Training: cyclic learning rate, AdamW and the optimisation loop."""

import csv
from dataclasses import asdict, dataclass, fields
import logging
import math
from pathlib import Path
import time

import numpy as np
import torch

from .data import BatchLoader, load_pairs
from .errors import ConfigError, TrainingError
from .losses import LossConfig, charbonnier, psnr, ssim
from .imageio import to_image, to_tensor
from .network import (
    build_model,
    infer,
    load_state_into,
    read_container,
    save_checkpoint,
    write_container,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "loss", "wall_ms", "psnr", "ssim")


@dataclass
class TrainConfig:
    base_lr: float = 4e-4
    max_lr: float = 6e-4
    cyclic_mode: str = "triangular"
    cyclic_gamma: float = 1.0
    base_momentum: float = 0.9  # AdamW beta1
    beta2: float = 0.999
    adam_eps: float = 1e-8
    half_period: int = 2000  # steps from base_lr up to max_lr
    batch_size: int = 60
    patch_size: int = 256
    weight_decay: float = 1e-4
    total_steps: int = 100000
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 0  # 0 disables periodic train-set evaluation
    augment: bool = True
    grad_clip: float = 0.0  # 0 disables clipping
    producers: int = 1
    loss_epsilon: float = 1e-3
    loss_reduction: str = "per_pixel_mean"
    head_scale: float = 1.0

    def __post_init__(self):
        if self.base_lr > self.max_lr:
            raise ConfigError("base_lr must not exceed max_lr")
        if self.half_period <= 0:
            raise ConfigError("half_period must be positive")
        if self.cyclic_mode not in ("triangular", "exp_range"):
            raise ConfigError(f"unknown cyclic_mode {self.cyclic_mode!r}")
        if self.batch_size < 1 or self.total_steps < 0 or self.patch_size < 1:
            raise ConfigError("batch_size, patch_size must be positive and total_steps >= 0")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ConfigError("checkpoint_every and eval_every must be >= 0")
        if not 0 <= self.base_momentum < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("betas must lie in [0, 1)")

    @property
    def loss_config(self):
        return LossConfig(self.loss_epsilon, self.loss_reduction)


@dataclass
class TrainLogRow:
    step: int
    lr: float
    loss: float
    wall_ms: float
    psnr: float = None
    ssim: float = None


def cyclic_lr(step, cfg):
    """Triangular cyclic learning rate.

    Rises linearly from ``base_lr`` to ``max_lr`` over ``half_period``
    steps and falls back over the next ``half_period``.  In ``exp_range``
    mode the amplitude is scaled by ``cyclic_gamma ** step``.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    cycle = math.floor(1 + step / (2 * cfg.half_period))
    x = abs(step / cfg.half_period - 2 * cycle + 1)
    scale = max(0.0, 1.0 - x)
    if cfg.cyclic_mode == "exp_range":
        scale *= cfg.cyclic_gamma ** step
    return cfg.base_lr + (cfg.max_lr - cfg.base_lr) * scale


@dataclass
class AdamWState:
    step: int
    exp_avg: list
    exp_avg_sq: list

    @classmethod
    def zeros_like(cls, params):
        return cls(
            step=0,
            exp_avg=[torch.zeros_like(p) for p in params],
            exp_avg_sq=[torch.zeros_like(p) for p in params],
        )


def adamw_step(params, grads, state, lr, cfg):
    """One decoupled-weight-decay Adam update, in place.

    Weight decay shrinks each parameter by ``lr * weight_decay`` before the
    bias-corrected moment update.  If any gradient is non-finite the step
    is skipped and ``False`` is returned.
    """
    if not (len(params) == len(grads) == len(state.exp_avg) == len(state.exp_avg_sq)):
        raise ValueError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.exp_avg):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {tuple(p.shape)} / {tuple(g.shape)}")
    if not all(torch.isfinite(g).all() for g in grads):
        log.warning("non-finite gradient at optimizer step %d; step skipped", state.step + 1)
        return False

    b1, b2 = cfg.base_momentum, cfg.beta2
    state.step += 1
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            p.mul_(1 - lr * cfg.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(cfg.adam_eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return True


def load_train_config(path, overrides=None):
    """Read a ``key = value`` file whose keys are :class:`TrainConfig` fields."""
    values = parse_kv_file(path) if path else {}
    values.update(overrides or {})
    return coerce_dataclass(TrainConfig, values)


def parse_kv_file(path):
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(value, default):
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.strip("()[] ").split(",") if v.strip())
    return value


def coerce_dataclass(cls, values):
    """Build ``cls`` from string values, rejecting unknown keys."""
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown keys {unknown}; valid keys: {sorted(defaults)}")
    try:
        kw = {k: _coerce(v, defaults[k]) for k, v in values.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cls(**kw)


def _write_state(path, model, opt_state, step, train_cfg):
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    names = [n for n, _ in model.named_parameters()]
    for n, m, v in zip(names, opt_state.exp_avg, opt_state.exp_avg_sq):
        tensors[f"exp_avg/{n}"] = m
        tensors[f"exp_avg_sq/{n}"] = v
    write_container(
        path,
        tensors,
        {
            "model_config": model.cfg.to_dict(),
            "train_config": asdict(train_cfg),
            "step": step,
            "optimizer_step": opt_state.step,
        },
    )


def _read_state(path, model):
    tensors, meta = read_container(path)
    load_state_into(
        model, {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}, path
    )
    names = [n for n, _ in model.named_parameters()]
    state = AdamWState(
        step=int(meta["optimizer_step"]),
        exp_avg=[tensors[f"exp_avg/{n}"].clone() for n in names],
        exp_avg_sq=[tensors[f"exp_avg_sq/{n}"].clone() for n in names],
    )
    return state, int(meta["step"])


@torch.no_grad()
def evaluate(model, source):
    """Mean PSNR / SSIM of the model's (clamped) output over a pair source."""
    was_training = model.training
    model.eval()
    scores = []
    for sample in source:
        out = np.clip(to_image(infer(model, to_tensor(sample.snowy))), 0.0, 1.0)
        scores.append((psnr(out, sample.clean), ssim(out, sample.clean)))
    model.train(was_training)
    arr = np.array(scores)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    rows: list
    model: object


def train(model_cfg, train_cfg, data_dir, out_dir, resume=None, stop_step=None,
          on_step=None):
    """Optimise a model on the pairs in ``data_dir``.

    Writes ``train_log.csv``, periodic ``state_<step>.ckpt`` files (model
    plus optimizer state, resumable) and a final ``model.ckpt``.  Step
    ``s`` always sees the same batch, so a run resumed from the state at
    step ``k`` reproduces the uninterrupted run.  ``stop_step`` ends the run
    early (exclusive) without changing the schedule.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = load_pairs(data_dir)
    torch.manual_seed(train_cfg.seed)

    model = build_model(model_cfg, seed=train_cfg.seed, head_scale=train_cfg.head_scale)
    model.train()
    params = list(model.parameters())
    start = 0
    if resume is not None:
        opt_state, last = _read_state(resume, model)
        start = last + 1
    else:
        opt_state = AdamWState.zeros_like(params)

    loader = BatchLoader(
        source,
        batch_size=train_cfg.batch_size,
        patch_size=train_cfg.patch_size,
        seed=train_cfg.seed,
        augment=train_cfg.augment,
        producers=train_cfg.producers,
    )
    loss_cfg = train_cfg.loss_config
    end = train_cfg.total_steps if stop_step is None else min(stop_step, train_cfg.total_steps)

    log_path = out_dir / "train_log.csv"
    rows = []
    mode = "a" if resume is not None and log_path.exists() else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOG_COLUMNS)
        for step, (snowy, clean) in loader.batches(start, end):
            t0 = time.perf_counter()
            lr = cyclic_lr(step, train_cfg)
            for p in params:
                p.grad = None
            loss = charbonnier(model(snowy), clean, loss_cfg)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at step {step} (lr={lr:.3g})"
                )
            loss.backward()
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
            if train_cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, train_cfg.grad_clip)
            adamw_step(params, grads, opt_state, lr, train_cfg)
            row = TrainLogRow(step, lr, loss.item(), (time.perf_counter() - t0) * 1e3)
            if train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0:
                row.psnr, row.ssim = evaluate(model, source)
                log.info("step %d loss %.6f psnr %.2f", step, row.loss, row.psnr)
            rows.append(row)
            writer.writerow(
                ["" if getattr(row, c) is None else getattr(row, c) for c in LOG_COLUMNS]
            )
            if train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
                fh.flush()
                _write_state(out_dir / f"state_{step:07d}.ckpt", model, opt_state, step,
                             train_cfg)
            if on_step is not None:
                on_step(row)

    final = out_dir / "model.ckpt"
    save_checkpoint(model, final, {"train_config": asdict(train_cfg), "steps": end})
    model.eval()
    return TrainResult(final, log_path, rows, model)
