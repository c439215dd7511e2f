"""Command-line harness: dataset generation, training, sampling, evaluation,
and the variant-ablation study.

Every command is deterministic under (config, seed). Outputs land under
``--out`` when given, else ``$CAMDIFF_OUT_ROOT`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import normalize_trajectory
from .dataio import load_checkpoint, load_dataset, trajectory_from_records, parse_re10k
from .diffusion import DiffusionConfig, sample_video
from .evaluate import (
    ABLATION_VARIANTS,
    ablation_markdown,
    ablation_report,
    evaluate_model,
    trajectory_swap_divergence,
)
from .scenes import TRAJECTORY_KINDS, TrajectorySpec, build_dataset, make_trajectory
from .training import (
    FINAL_CKPT,
    RunConfig,
    load_run_config,
    save_run_config,
    train_run,
)

OUT_ROOT_ENV = "CAMDIFF_OUT_ROOT"


def _say(*parts):
    print(*parts, flush=True)


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / default_name


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "variant", None):
        cfg = replace(cfg, variant=args.variant)
    if getattr(args, "dataset", None):
        cfg = replace(cfg, dataset=args.dataset)
    if getattr(args, "base_checkpoint", None):
        cfg = replace(cfg, base_checkpoint=args.base_checkpoint)
    return cfg


def save_frame_strip(path, video, scale: int = 8):
    """Write a horizontal frame strip PNG from a [-1, 1] video array."""
    video = np.asarray(video)
    if video.ndim == 5:
        video = video[0]
    frames = np.clip((video + 1.0) / 2.0, 0.0, 1.0)
    frames = (frames * 255).astype(np.uint8)
    F, H, W, C = frames.shape
    up = frames.repeat(scale, axis=1).repeat(scale, axis=2)
    sep = 2
    strip = np.full((H * scale, F * (W * scale + sep) - sep, C), 255, dtype=np.uint8)
    for f in range(F):
        x0 = f * (W * scale + sep)
        strip[:, x0:x0 + W * scale] = up[f]
    Image.fromarray(strip).save(path)


def _parse_trajectory(arg: str, model_cfg, seed: int):
    """``spec:KIND[:DEGREES[:DISTANCE]]`` or ``re10k:PATH`` -> raw trajectory."""
    if arg.startswith("re10k:"):
        path = Path(arg[len("re10k:"):])
        url, records = parse_re10k(path.read_text())
        if len(records) < model_cfg.frames:
            raise SystemExit(f"camera file has {len(records)} frames, model needs {model_cfg.frames}")
        if len(records) > model_cfg.frames:
            _say(f"notice: using the first {model_cfg.frames} of {len(records)} camera frames")
        traj = trajectory_from_records(records[:model_cfg.frames],
                                       model_cfg.height, model_cfg.width)
        return traj
    if arg.startswith("spec:"):
        parts = arg.split(":")
        kind = parts[1]
        if kind not in TRAJECTORY_KINDS:
            raise SystemExit(f"unknown trajectory kind {kind!r}; choices: {TRAJECTORY_KINDS}")
        degrees = float(parts[2]) if len(parts) > 2 else (60.0 if kind in ("orbit", "rotate_only") else 0.0)
        distance = float(parts[3]) if len(parts) > 3 else (1.2 if kind.startswith(("zoom", "pan")) else 0.0)
        spec = TrajectorySpec(kind, degrees, distance, model_cfg.frames)
        return make_trajectory(spec, np.random.default_rng(seed),
                               H=model_cfg.height, W=model_cfg.width)
    raise SystemExit("trajectory must be 'spec:KIND[:DEG[:DIST]]' or 're10k:PATH'")


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, "data")
    summary = build_dataset(cfg.n_train, cfg.n_test, cfg.frames, cfg.height, cfg.width,
                            cfg.vocab, cfg.seed, out, dynamic=cfg.dynamic, log=_say)
    _say(f"wrote {summary['n_train']} train / {summary['n_test']} test samples "
         f"of shape {summary['shape']}")
    _say(f"train: {summary['train_path']}")
    _say(f"test:  {summary['test_path']}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not cfg.dataset:
        raise SystemExit("train needs a dataset (config key 'dataset' or --dataset)")
    out = _out_dir(args, f"train-{cfg.variant}-seed{cfg.seed}")
    final = train_run(cfg, out, log=_say)
    _say(f"final checkpoint: {final}")
    return 0


def cmd_sample(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model = bundle.model
    traj = _parse_trajectory(args.trajectory, model.cfg, args.seed)
    if not traj.normalized:
        _say("notice: trajectory is not first-frame normalized; normalizing now")
        traj = normalize_trajectory(traj)
    if "run_config" in bundle.extras:
        dcfg = RunConfig.from_text(bundle.extras["run_config"]).diffusion_config()
    else:
        dcfg = DiffusionConfig()
    mask = observed = None
    if args.mask:
        bits = [c == "1" for c in args.mask]
        if len(bits) != model.cfg.frames:
            raise SystemExit(f"--mask needs {model.cfg.frames} bits")
        if not args.observed:
            raise SystemExit("--mask requires --observed FRAMES.npy")
        mask = np.array(bits)[None]
        observed = np.load(args.observed)[None]
    rng = np.random.default_rng(args.seed)
    video = sample_video(model, traj, np.array([args.descriptor]), rng, dcfg,
                         mask=mask, observed=observed)
    out = _out_dir(args, "sample")
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "sample.npy", video[0])
    save_frame_strip(out / "strip.png", video[0])
    _say(f"wrote {out / 'sample.npy'} and {out / 'strip.png'}")
    return 0


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    test = load_dataset(args.dataset)
    train_ids = set(bundle.extras.get("train_scene_ids", []))
    overlap = train_ids & {int(i) for i in test.scene_ids}
    if overlap:
        raise SystemExit(f"refusing to evaluate: {len(overlap)} scene ids overlap the training set")
    dcfg = RunConfig.from_text(bundle.extras["run_config"]).diffusion_config()
    report = evaluate_model(bundle.model, test, dcfg, seed=args.seed,
                            limit=args.limit or None, log=_say)
    out = _out_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    _say(f"variant {report.variant}: PSNR {report.mean_psnr:.2f} +/- {report.std_psnr:.2f} dB "
         f"over {report.count} held-out samples")
    for kind, val in sorted(report.per_kind.items()):
        _say(f"  {kind:>14}: {val:.2f} dB")
    _say(f"report: {out / 'report.json'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise SystemExit("--seeds needs at least one seed")
    out = _out_dir(args, "ablation")
    out.mkdir(parents=True, exist_ok=True)

    data_dir = out / "data"
    train_path = data_dir / "train.camds"
    test_path = data_dir / "test.camds"
    if not (train_path.exists() and test_path.exists()):
        _say(f"generating dataset ({cfg.n_train} train / {cfg.n_test} test)")
        build_dataset(cfg.n_train, cfg.n_test, cfg.frames, cfg.height, cfg.width,
                      cfg.vocab, cfg.seed, data_dir, dynamic=cfg.dynamic, log=_say)

    base_cfg = replace(cfg, variant="base", dataset=str(train_path),
                       total_steps=args.base_steps, base_checkpoint="")
    _say(f"training base model ({base_cfg.total_steps} steps)")
    base_ckpt = train_run(base_cfg, out / "base", log=_say)

    test_bundle = load_dataset(test_path)
    dcfg = cfg.diffusion_config()
    per_variant = {}
    for variant in ABLATION_VARIANTS:
        per_variant[variant] = []
        for k, seed in enumerate(seeds):
            run_dir = out / variant / f"seed{seed}"
            ft_cfg = replace(cfg, variant=variant, dataset=str(train_path),
                             base_checkpoint=str(base_ckpt), seed=seed,
                             total_steps=args.finetune_steps)
            _say(f"fine-tuning {variant} seed {seed} ({ft_cfg.total_steps} steps)")
            ckpt = train_run(ft_cfg, run_dir, log=_say)
            eval_path = run_dir / "eval.json"
            if eval_path.exists():
                result = json.loads(eval_path.read_text())
            else:
                bundle = load_checkpoint(ckpt)
                report = evaluate_model(bundle.model, test_bundle, dcfg,
                                        seed=7_000_000 + k, limit=args.eval_limit or None)
                result = report.to_dict()
                eval_path.write_text(json.dumps(result, indent=2))
            per_variant[variant].append(result["mean_psnr"])
            _say(f"  {variant} seed {seed}: {result['mean_psnr']:.2f} dB")

    report = ablation_report(per_variant)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    md = ablation_markdown(report)
    (out / "report.md").write_text(md)
    _say("")
    _say(md)
    _say(f"reports: {out / 'report.json'}, {out / 'report.md'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="camdiff",
                                description="camera-controlled video diffusion, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=str, default="", help="run config file (key = value)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, default="", help=f"output dir (default under ${OUT_ROOT_ENV})")

    sp = sub.add_parser("gen-data", help="render a synthetic camera-annotated dataset")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train a base model or fine-tune a camera variant")
    common(sp)
    sp.add_argument("--variant", type=str, default="")
    sp.add_argument("--dataset", type=str, default="")
    sp.add_argument("--base-checkpoint", dest="base_checkpoint", type=str, default="")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="generate a video along a camera trajectory")
    sp.add_argument("--checkpoint", type=str, required=True)
    sp.add_argument("--trajectory", type=str, required=True,
                    help="'spec:KIND[:DEG[:DIST]]' or 're10k:PATH'")
    sp.add_argument("--descriptor", type=int, default=0)
    sp.add_argument("--mask", type=str, default="", help="per-frame observation bits, e.g. 10000000")
    sp.add_argument("--observed", type=str, default="", help=".npy observed frames for --mask")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=str, default="")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="held-out anchored-PSNR evaluation of a checkpoint")
    sp.add_argument("--checkpoint", type=str, required=True)
    sp.add_argument("--dataset", type=str, required=True, help="held-out dataset file")
    sp.add_argument("--limit", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=str, default="")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="train+evaluate all camera variants from one base")
    common(sp)
    sp.add_argument("--seeds", type=str, default="0,1,2")
    sp.add_argument("--base-steps", dest="base_steps", type=int, default=3000)
    sp.add_argument("--finetune-steps", dest="finetune_steps", type=int, default=2000)
    sp.add_argument("--eval-limit", dest="eval_limit", type=int, default=0)
    sp.set_defaults(fn=cmd_ablate)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
