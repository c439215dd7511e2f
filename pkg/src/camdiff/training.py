"""Run configuration and the training loop.

A run is fully described by a flat key=value config plus a seed; the config
is serialized next to every run's outputs and runs resume exactly from
their last checkpoint (model, optimizer moments, RNG state, and step count
all round-trip).

Fine-tune variants start from a pretrained base checkpoint and optimize
only the camera pathway's parameters; everything else is frozen and audited
bitwise afterwards.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import (
    CheckpointError,
    DatasetBundle,
    frozen_audit,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
)
from .diffusion import DiffusionConfig, denoising_loss
from .model import ModelConfig, VideoModel, camera_input
from .optim import make_optimizer, warmup_linear_lr
from .tensor import Tape

LAST_CKPT = "checkpoint_last.ckpt"
FINAL_CKPT = "checkpoint_final.ckpt"
LOSS_LOG = "loss.csv"
CONFIG_FILE = "run.cfg"


@dataclass
class RunConfig:
    """Flat description of one run (model, diffusion, optimization, paths)."""

    # model
    variant: str = "base"
    blocks: int = 2
    latents: int = 32
    dim: int = 64
    heads: int = 4
    patch_h: int = 4
    patch_w: int = 4
    frames: int = 8
    height: int = 16
    width: int = 16
    channels: int = 3
    vocab: int = 16
    self_attn_layers: int = 4
    ff_mult: int = 4
    conv_kernel: int = 3
    sigma_freqs: int = 8
    # diffusion
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sampler_steps: int = 32
    # optimization
    optimizer: str = "adamw"
    lr_peak: float = 0.003
    lr_final: float = 0.001
    warmup_frac: float = 0.1
    weight_decay: float = 0.0
    batch_size: int = 16
    total_steps: int = 3000
    seed: int = 0
    dtype: str = "f64"
    checkpoint_every: int = 1000
    # data generation
    n_train: int = 2048
    n_test: int = 128
    dynamic: float = 0.0
    # paths
    dataset: str = ""
    base_checkpoint: str = ""

    def model_config(self, variant: str | None = None) -> ModelConfig:
        return ModelConfig(
            blocks=self.blocks, latents=self.latents, dim=self.dim, heads=self.heads,
            patch_h=self.patch_h, patch_w=self.patch_w, frames=self.frames,
            height=self.height, width=self.width, channels=self.channels,
            self_attn_layers=self.self_attn_layers, ff_mult=self.ff_mult,
            conv_kernel=self.conv_kernel, vocab=self.vocab, sigma_freqs=self.sigma_freqs,
            variant=self.variant if variant is None else variant)

    def diffusion_config(self) -> DiffusionConfig:
        return DiffusionConfig(
            sigma_data=self.sigma_data, p_mean=self.p_mean, p_std=self.p_std,
            sigma_min=self.sigma_min, sigma_max=self.sigma_max, rho=self.rho,
            sampler_steps=self.sampler_steps)

    @property
    def np_dtype(self):
        if self.dtype not in ("f64", "f32"):
            raise ValueError(f"dtype must be 'f64' or 'f32', got {self.dtype!r}")
        return np.float64 if self.dtype == "f64" else np.float32

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.total_steps * self.warmup_frac)))

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for ln, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {ln}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"config line {ln}: unknown key {key!r}")
            ftype = fields[key].type
            if ftype in ("int", int):
                kwargs[key] = int(val)
            elif ftype in ("float", float):
                kwargs[key] = float(val)
            else:
                kwargs[key] = val
        return cls(**kwargs)


def save_run_config(cfg: RunConfig, path):
    Path(path).write_text(cfg.to_text())


def load_run_config(path) -> RunConfig:
    return RunConfig.from_text(Path(path).read_text())


def _arch_text(cfg: RunConfig) -> str:
    """The budget-relevant portion of a config, for resume compatibility checks."""
    skip = {"dataset", "base_checkpoint"}
    parts = [f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)
             if f.name not in skip]
    return ";".join(parts)


def batch_camera(variant: str, bundle: DatasetBundle, idx, dtype):
    """Variant-appropriate camera input for a batch of dataset rows."""
    if variant == "base":
        return None
    plucker = bundle.plucker[idx].astype(dtype, copy=False)
    feats = bundle.cam_feats[idx].astype(dtype, copy=False)
    h, w = bundle.videos.shape[2], bundle.videos.shape[3]
    return camera_input(variant, plucker, feats, h, w)


def train_run(cfg: RunConfig, out_dir, log=None) -> Path:
    """Train (or resume) one run; returns the final checkpoint path."""
    say = log or (lambda *_: None)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(cfg, out_dir / CONFIG_FILE)
    final_path = out_dir / FINAL_CKPT
    last_path = out_dir / LAST_CKPT

    bundle = load_dataset(cfg.dataset)
    if bundle.videos.shape[1:] != (cfg.frames, cfg.height, cfg.width, cfg.channels):
        raise ValueError(
            f"dataset sample shape {bundle.videos.shape[1:]} does not match the run config")
    n = len(bundle)
    if n == 0:
        raise ValueError("training dataset is empty")

    dtype = cfg.np_dtype
    model_cfg = cfg.model_config()
    dcfg = cfg.diffusion_config()

    extras = {
        "run_config": cfg.to_text(),
        "arch": _arch_text(cfg),
        "train_dataset": str(cfg.dataset),
        "train_scene_ids": [int(i) for i in bundle.scene_ids],
    }

    start_step = 0
    resume = None
    if final_path.exists():
        bundle_ck = load_checkpoint(final_path)
        if bundle_ck.extras.get("arch") != _arch_text(cfg):
            raise CheckpointError(f"{final_path}: existing run was trained with a different config")
        say(f"run already complete at step {bundle_ck.step}; reusing {final_path}")
        return final_path
    if last_path.exists():
        resume = load_checkpoint(last_path, expect_config=model_cfg)
        if resume.extras.get("arch") != _arch_text(cfg):
            raise CheckpointError(f"{last_path}: checkpoint config does not match this run")
        start_step = resume.step
        say(f"resuming from step {start_step}")

    if resume is not None:
        model = resume.model
    elif cfg.variant == "base":
        model = VideoModel.build(model_cfg, seed=cfg.seed, dtype=dtype)
        say(f"built base model from seed {cfg.seed}")
    else:
        if not cfg.base_checkpoint:
            raise CheckpointError(f"variant {cfg.variant!r} needs base_checkpoint to fine-tune from")
        base = load_checkpoint(cfg.base_checkpoint, expect_variant="base",
                               expect_config=cfg.model_config(variant="base"))
        model = VideoModel.from_base(base.model, cfg.variant, seed=cfg.seed)
        extras["base_checkpoint"] = str(cfg.base_checkpoint)
        say(f"extended base checkpoint into variant {cfg.variant!r}")

    if cfg.variant == "base":
        trainable = dict(model.params)
    else:
        new_names = set(model.new_param_names())
        for name, p in model.params.items():
            p.requires_grad = name in new_names
        trainable = {k: model.params[k] for k in sorted(new_names)}
        extras["base_checkpoint"] = str(cfg.base_checkpoint)
    say(f"{len(trainable)} trainable tensors "
        f"({sum(p.data.size for p in trainable.values())} scalars)")

    opt = make_optimizer(cfg.optimizer, trainable, lr=cfg.lr_peak, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    if resume is not None:
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state

    log_path = out_dir / LOSS_LOG
    log_mode = "w"
    if resume is not None and log_path.exists():
        # drop rows past the checkpoint so the log stays gap- and dup-free
        kept = [row for row in log_path.read_text().splitlines()
                if row and (row.startswith("step") or int(row.split(",")[0]) <= start_step)]
        log_path.write_text("\n".join(kept) + "\n")
        log_mode = "a"
    t0 = time.time()
    with open(log_path, log_mode, newline="") as logf:
        writer = csv.writer(logf)
        if log_mode == "w":
            writer.writerow(["step", "loss", "lr", "elapsed_s"])
        for step in range(start_step, cfg.total_steps):
            opt.lr = warmup_linear_lr(step + 1, cfg.total_steps, cfg.warmup_steps,
                                      cfg.lr_peak, cfg.lr_final)
            idx = rng.integers(0, n, size=cfg.batch_size)
            x = bundle.videos[idx].astype(dtype, copy=False)
            camera = batch_camera(cfg.variant, bundle, idx, dtype)
            mask = bundle.masks[idx]
            with Tape() as tape:
                loss = denoising_loss(model, x, bundle.descriptors[idx], camera, rng, dcfg,
                                      mask=mask)
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise FloatingPointError(f"non-finite loss at step {step + 1}")
            writer.writerow([step + 1, f"{loss_val:.6g}", f"{opt.lr:.6g}",
                             f"{time.time() - t0:.2f}"])
            done = step + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.total_steps:
                save_checkpoint(last_path, model, step=done, optimizer_state=opt.state_dict(),
                                rng_state=rng.bit_generator.state, extras=extras)
                say(f"step {done}/{cfg.total_steps} loss {loss_val:.4f}")

    save_checkpoint(final_path, model, step=cfg.total_steps, optimizer_state=opt.state_dict(),
                    rng_state=rng.bit_generator.state, extras=extras)

    if cfg.variant != "base":
        ok, bad = frozen_audit(cfg.base_checkpoint, final_path)
        if not ok:
            raise RuntimeError(f"frozen-base audit failed; drifted tensors: {bad[:5]}")
        say("frozen-base audit passed (base tensors bit-identical)")
    return final_path
