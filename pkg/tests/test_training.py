"""End-to-end training behavior at toy scale: loss trend, freezing,
resume exactness, and config round trips."""

import csv
from dataclasses import replace

import numpy as np
import pytest

import camdiff.training as training
from camdiff.dataio import frozen_audit, load_checkpoint
from camdiff.scenes import build_dataset
from camdiff.training import (
    FINAL_CKPT,
    LAST_CKPT,
    LOSS_LOG,
    RunConfig,
    load_run_config,
    save_run_config,
    train_run,
)

TOY = dict(blocks=1, latents=8, dim=32, heads=2, patch_h=2, patch_w=2,
           frames=4, height=8, width=8, vocab=8, sigma_freqs=4,
           batch_size=8, n_train=24, n_test=4, lr_peak=0.004, lr_final=0.002,
           checkpoint_every=50, dtype="f32")


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    built = build_dataset(TOY["n_train"], TOY["n_test"], TOY["frames"], TOY["height"],
                          TOY["width"], TOY["vocab"], seed=11, out_dir=out)
    return built


def _cfg(toy_data, **over):
    args = dict(TOY)
    args.pop("n_train"), args.pop("n_test")
    args.update(over)
    return RunConfig(dataset=toy_data["train_path"], **args)


def test_run_config_text_roundtrip(tmp_path):
    cfg = RunConfig(variant="full", dim=48, lr_peak=0.003, dtype="f32",
                    dataset="/tmp/x.camds")
    path = tmp_path / "run.cfg"
    save_run_config(cfg, path)
    back = load_run_config(path)
    assert back == cfg


def test_run_config_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown key"):
        RunConfig.from_text("powerlevel = 9000\n")


def test_base_training_loss_decreases(tmp_path, toy_data):
    cfg = _cfg(toy_data, variant="base", total_steps=200, seed=3)
    final = train_run(cfg, tmp_path / "base")
    assert final.exists()
    rows = list(csv.DictReader(open(tmp_path / "base" / LOSS_LOG)))
    assert len(rows) == 200
    first = np.mean([float(r["loss"]) for r in rows[:10]])
    last = np.mean([float(r["loss"]) for r in rows[-10:]])
    assert last < first, f"loss did not decrease: {first:.4f} -> {last:.4f}"
    assert (tmp_path / "base" / "run.cfg").exists()


@pytest.fixture(scope="module")
def base_ckpt(tmp_path_factory, toy_data):
    out = tmp_path_factory.mktemp("basetrain")
    cfg = RunConfig(dataset=toy_data["train_path"],
                    **{k: v for k, v in TOY.items() if k not in ("n_train", "n_test")},
                    variant="base", total_steps=120, seed=5)
    return train_run(cfg, out)


def test_finetune_freezes_base_bitwise(tmp_path, toy_data, base_ckpt):
    cfg = _cfg(toy_data, variant="full", total_steps=30, seed=7,
               base_checkpoint=str(base_ckpt))
    final = train_run(cfg, tmp_path / "ft")
    ok, bad = frozen_audit(base_ckpt, final)
    assert ok, bad
    tuned = load_checkpoint(final)
    base = load_checkpoint(base_ckpt)
    new_names = set(tuned.model.params) - set(base.model.params)
    assert new_names == set(tuned.model.new_param_names())
    # the camera pathway actually moved
    moved = [n for n in new_names
             if not np.array_equal(tuned.model.params[n].data,
                                   np.zeros_like(tuned.model.params[n].data))]
    assert any(".conv_res." in n for n in moved)


def test_finetune_requires_base_checkpoint(tmp_path, toy_data):
    cfg = _cfg(toy_data, variant="full", total_steps=5, seed=1)
    with pytest.raises(Exception, match="base_checkpoint"):
        train_run(cfg, tmp_path / "nofb")


def test_wrong_arch_base_checkpoint_rejected(tmp_path, toy_data, base_ckpt):
    cfg = _cfg(toy_data, variant="full", total_steps=5, seed=1, dim=16,
               base_checkpoint=str(base_ckpt))
    with pytest.raises(Exception, match="config"):
        train_run(cfg, tmp_path / "badarch")


def test_resume_reproduces_straight_run(tmp_path, toy_data, monkeypatch):
    cfg = _cfg(toy_data, variant="base", total_steps=40, seed=9, checkpoint_every=10)
    straight = train_run(cfg, tmp_path / "straight")

    # interrupt an identical run after 25 steps
    calls = {"n": 0}
    real_loss = training.denoising_loss

    def bomb(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 25:
            raise KeyboardInterrupt("simulated crash")
        return real_loss(*args, **kwargs)

    monkeypatch.setattr(training, "denoising_loss", bomb)
    with pytest.raises(KeyboardInterrupt):
        train_run(cfg, tmp_path / "resumed")
    monkeypatch.setattr(training, "denoising_loss", real_loss)

    assert (tmp_path / "resumed" / LAST_CKPT).exists()
    assert not (tmp_path / "resumed" / FINAL_CKPT).exists()
    resumed = train_run(cfg, tmp_path / "resumed")

    a = load_checkpoint(straight)
    b = load_checkpoint(resumed)
    assert a.step == b.step == 40
    for name, p in a.model.params.items():
        assert p.data.tobytes() == b.model.params[name].data.tobytes(), name
    rows = list(csv.DictReader(open(tmp_path / "resumed" / LOSS_LOG)))
    assert [int(r["step"]) for r in rows] == list(range(1, 41))


def test_completed_run_is_reused(tmp_path, toy_data):
    cfg = _cfg(toy_data, variant="base", total_steps=10, seed=2)
    first = train_run(cfg, tmp_path / "done")
    stamp = first.stat().st_mtime_ns
    again = train_run(cfg, tmp_path / "done")
    assert again == first and first.stat().st_mtime_ns == stamp


def test_changed_budget_on_existing_run_refused(tmp_path, toy_data):
    cfg = _cfg(toy_data, variant="base", total_steps=10, seed=2)
    train_run(cfg, tmp_path / "fixed")
    bigger = replace(cfg, total_steps=20)
    with pytest.raises(Exception, match="config"):
        train_run(bigger, tmp_path / "fixed")


def test_dataset_shape_mismatch_refused(tmp_path, toy_data):
    cfg = _cfg(toy_data, variant="base", total_steps=5, seed=0, frames=8)
    with pytest.raises(ValueError, match="shape"):
        train_run(cfg, tmp_path / "shape")
