"""Transformer blocks: read/write attention, camera branch equivalences,
variant construction, gradient checks, and the trainable-parameter partition."""

import numpy as np
import pytest

from camdiff.gradcheck import max_rel_error
from camdiff.model import (
    BRANCH_VARIANTS,
    ModelConfig,
    VARIANTS,
    VideoModel,
    camera_input,
    fit_block_forward,
    init_base_params,
    init_camera_branch,
    read_camera,
    read_standard,
)
from camdiff.tensor import ShapeError, Tape, Tensor, tsum

TINY = ModelConfig(blocks=2, latents=8, dim=32, heads=2, patch_h=2, patch_w=2,
                   frames=2, height=4, width=8, vocab=4, sigma_freqs=4)


def _tensorize(params, dtype=np.float64):
    return {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True) for k, v in params.items()}


def _block_params(rng, cfg, variant="full"):
    from dataclasses import replace
    params = init_base_params(cfg, rng)
    init_camera_branch(params, replace(cfg, variant=variant), rng)
    return _tensorize(params)


def _trained_base(cfg, seed=0, dtype=np.float64):
    """A base model with a non-zero output head, as after training."""
    model = VideoModel.build(ModelConfig(**{**cfg.to_dict(), "variant": "base"}),
                             seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1)
    for name in ("final_proj.w", "final_proj.b"):
        model.params[name].data = rng.normal(0, 0.02, model.params[name].data.shape).astype(dtype)
    return model


def _rand_inputs(cfg, n, rng):
    x_in = rng.normal(size=(n, cfg.frames, cfg.height, cfg.width, cfg.channels + 1))
    desc = rng.integers(0, cfg.vocab, n)
    sig = np.exp(rng.normal(size=n))
    vol = rng.normal(size=(n, 6, cfg.frames, cfg.height, cfg.width))
    feats = rng.normal(size=(n, cfg.frames, 21))
    return x_in, desc, sig, vol, feats


def test_read_standard_zero_values_keeps_residual():
    rng = np.random.default_rng(0)
    p = _block_params(rng, TINY)
    z = Tensor(rng.normal(size=(4, TINY.dim)))
    v = Tensor(np.zeros((6, TINY.dim)))
    # zero the value/output projections: attention contributes nothing
    for k in ("attn.wv", "attn.bv", "attn.wo", "attn.bo", "ff.w2", "ff.b2"):
        p["blocks.0.read." + k].data = np.zeros_like(p["blocks.0.read." + k].data)
    out = read_standard(z, v, p, "blocks.0.read.", TINY.heads)
    assert np.allclose(out.data, z.data, atol=1e-14)


def test_read_standard_single_token_closed_form():
    # M = L = 1, one head: attention weight is exactly 1, so the output is
    # the value projection of the single source token plus residual/FF.
    rng = np.random.default_rng(1)
    d = 4
    cfg = ModelConfig(blocks=1, latents=1, dim=d, heads=1, patch_h=1, patch_w=1,
                      frames=1, height=1, width=1, vocab=2, sigma_freqs=2)
    p = _block_params(rng, cfg)
    z = Tensor(rng.normal(size=(1, d)))
    v = Tensor(rng.normal(size=(1, d)))

    def ln(x, g, b, eps=1e-5):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * g + b

    pre = "blocks.0.read."
    zn = ln(z.data, p[pre + "ln_q.g"].data, p[pre + "ln_q.b"].data)
    vn = ln(v.data, p[pre + "ln_kv.g"].data, p[pre + "ln_kv.b"].data)
    attn_out = (vn @ p[pre + "attn.wv"].data + p[pre + "attn.bv"].data) \
        @ p[pre + "attn.wo"].data + p[pre + "attn.bo"].data
    a = z.data + attn_out
    an = ln(a, p[pre + "ln_ff.g"].data, p[pre + "ln_ff.b"].data)
    h = an @ p[pre + "ff.w1"].data + p[pre + "ff.b1"].data
    from scipy.special import erf
    h = h * 0.5 * (1 + erf(h / np.sqrt(2)))
    expect = a + h @ p[pre + "ff.w2"].data + p[pre + "ff.b2"].data
    got = read_standard(z, v, p, pre, 1).data
    assert np.allclose(got, expect, atol=1e-12)


def test_read_standard_permutation_invariant_over_sources():
    rng = np.random.default_rng(2)
    p = _block_params(rng, TINY)
    z = Tensor(rng.normal(size=(4, TINY.dim)))
    v = rng.normal(size=(6, TINY.dim))
    perm = rng.permutation(6)
    a = read_standard(z, Tensor(v), p, "blocks.0.read.", TINY.heads).data
    b = read_standard(z, Tensor(v[perm]), p, "blocks.0.read.", TINY.heads).data
    assert np.allclose(a, b, atol=1e-12)


def test_read_camera_zero_conv_equals_standard_bitwise():
    rng = np.random.default_rng(3)
    p = _block_params(rng, TINY)
    z = Tensor(rng.normal(size=(4, TINY.dim)))
    v = Tensor(rng.normal(size=(6, TINY.dim)))
    ptok = Tensor(rng.normal(size=(6, TINY.dim)))
    cam = read_camera(z, v, ptok, p, "blocks.0.", TINY.heads).data
    std = read_standard(z, v, p, "blocks.0.read.", TINY.heads).data
    assert np.array_equal(cam, std)


def test_read_camera_zero_plucker_collapses_to_copied_branch():
    rng = np.random.default_rng(4)
    p = _block_params(rng, TINY)
    # make the conv non-zero so the branch output is visible
    p["blocks.0.conv_res.w"].data = rng.normal(size=p["blocks.0.conv_res.w"].data.shape) * 0.1
    p["blocks.0.conv_res.b"].data = rng.normal(size=p["blocks.0.conv_res.b"].data.shape) * 0.1
    z = Tensor(rng.normal(size=(4, TINY.dim)))
    v = Tensor(rng.normal(size=(6, TINY.dim)))
    zero_p = Tensor(np.zeros((6, TINY.dim)))
    got = read_camera(z, v, zero_p, p, "blocks.0.", TINY.heads).data
    # branch == standard read pushed through the conv (weights were copied)
    from camdiff.tensor import conv1d
    std = read_standard(z, v, p, "blocks.0.read.", TINY.heads)
    expect = (std + conv1d(std, p["blocks.0.conv_res.w"], p["blocks.0.conv_res.b"])).data
    assert np.allclose(got, expect, atol=1e-12)


def test_read_camera_token_count_mismatch():
    rng = np.random.default_rng(5)
    p = _block_params(rng, TINY)
    z = Tensor(rng.normal(size=(4, TINY.dim)))
    v = Tensor(rng.normal(size=(6, TINY.dim)))
    with pytest.raises(ShapeError):
        read_camera(z, v, Tensor(np.zeros((5, TINY.dim))), p, "blocks.0.", TINY.heads)


def test_fit_block_base_variant_ignores_camera_tokens():
    rng = np.random.default_rng(6)
    from dataclasses import replace
    cfg = replace(TINY, variant="base")
    p = _block_params(rng, TINY)
    v = Tensor(rng.normal(size=(6, TINY.dim)))
    z = Tensor(rng.normal(size=(4, TINY.dim)))
    out1 = fit_block_forward(v, None, z, p, "blocks.0.", cfg)
    out2 = fit_block_forward(v, Tensor(rng.normal(size=(6, TINY.dim))), z, p, "blocks.0.", cfg)
    assert np.array_equal(out1[0].data, out2[0].data)
    assert np.array_equal(out1[1].data, out2[1].data)


def test_fit_block_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    from dataclasses import replace
    cfg = replace(TINY, blocks=1, variant="full")
    p = _block_params(rng, cfg, variant="full")
    # non-zero conv so the camera branch carries gradient
    p["blocks.0.conv_res.w"].data = rng.normal(size=p["blocks.0.conv_res.w"].data.shape) * 0.05
    v = rng.normal(size=(6, cfg.dim))
    z = rng.normal(size=(4, cfg.dim))
    ptok = rng.normal(size=(6, cfg.dim))
    w_out = rng.normal(size=(6, cfg.dim))
    w_lat = rng.normal(size=(4, cfg.dim))

    check = ["blocks.0.read.attn.wq", "blocks.0.cam_read.ff.w1", "blocks.0.conv_res.w",
             "blocks.0.core.1.attn.wv", "blocks.0.write.ff.w2", "blocks.0.read.ln_q.g"]

    with Tape() as tape:
        vo, zo = fit_block_forward(Tensor(v), Tensor(ptok), Tensor(z), p, "blocks.0.", cfg)
        loss = tsum(vo * w_out) + tsum(zo * w_lat)
    tape.backward(loss)

    arrays = [p[name].data for name in check]

    def f(arrs):
        q = dict(p)
        for name, arr in zip(check, arrs):
            q[name] = Tensor(arr)
        vo, zo = fit_block_forward(Tensor(v), Tensor(ptok), Tensor(z), q, "blocks.0.", cfg)
        return float((vo.data * w_out).sum() + (zo.data * w_lat).sum())

    grads = [p[name].grad for name in check]
    err = max_rel_error(f, arrays, grads, rng=rng, coords_per_array=6)
    assert err < 1e-4, err


@pytest.mark.parametrize("variant", [v for v in VARIANTS if v != "base"])
def test_variant_init_equivalence_with_trained_base(variant):
    base = _trained_base(TINY, seed=11)
    model = VideoModel.from_base(base, variant, seed=123)
    rng = np.random.default_rng(12)
    x_in, desc, sig, vol, feats = _rand_inputs(TINY, 3, rng)
    ref = base.forward(x_in, None, desc, sig).data
    assert np.abs(ref).max() > 0  # meaningful comparison
    cam = camera_input(variant, vol, feats, TINY.height, TINY.width)
    out = model.forward(x_in, cam, desc, sig).data
    assert np.abs(out - ref).max() < 1e-12


def test_no_plucker_uses_21_raw_channels():
    rng = np.random.default_rng(13)
    feats = rng.normal(size=(2, TINY.frames, 21))
    vol = camera_input("no_plucker", None, feats, TINY.height, TINY.width)
    assert vol.shape == (2, 21, TINY.frames, TINY.height, TINY.width)
    # constant across the spatial grid, equal to the per-frame raw values
    assert np.array_equal(vol[1, :, 0, 2, 3], feats[1, 0])
    assert np.array_equal(vol[0, :, 1, 0, 0], vol[0, :, 1, 3, 3])


def test_trainable_partition_per_variant():
    base = _trained_base(TINY, seed=14)
    expected_prefixes = {
        "full": ("plucker_mlp.", ".cam_read.", ".conv_res."),
        "no_weight_copy": ("plucker_mlp.", ".cam_read.", ".conv_res."),
        "no_plucker": ("plucker_mlp.", ".cam_read.", ".conv_res."),
        "no_controlnet": ("plucker_mlp.", "add_proj."),
        "add_context": ("ctx_proj.",),
        "plucker_context": ("ctx_proj.",),
    }
    for variant, prefixes in expected_prefixes.items():
        model = VideoModel.from_base(base, variant, seed=5)
        new = set(model.new_param_names())
        assert new, variant
        for name in new:
            assert any(p in name for p in prefixes), (variant, name)
        for name in model.params:
            if any(p in name for p in prefixes):
                assert name in new, (variant, name)


def test_new_params_receive_gradients_and_frozen_do_not():
    from camdiff.diffusion import DiffusionConfig, denoising_loss
    base = _trained_base(TINY, seed=15)
    model = VideoModel.from_base(base, "full", seed=6)
    new = set(model.new_param_names())
    for name, p in model.params.items():
        p.requires_grad = name in new
    # a couple of steps so the zero conv becomes non-zero and gradient
    # reaches every camera parameter
    from camdiff.optim import LAMB
    opt = LAMB({k: model.params[k] for k in sorted(new)}, lr=0.05)
    rng = np.random.default_rng(16)
    dcfg = DiffusionConfig()
    x = rng.uniform(-1, 1, (4, TINY.frames, TINY.height, TINY.width, TINY.channels))
    vol = rng.normal(size=(4, 6, TINY.frames, TINY.height, TINY.width))
    feats = rng.normal(size=(4, TINY.frames, 21))
    cam = camera_input("full", vol, feats, TINY.height, TINY.width)
    desc = rng.integers(0, TINY.vocab, 4)
    for _ in range(2):
        with Tape() as tape:
            loss = denoising_loss(model, x, desc, cam, rng, dcfg)
        tape.backward(loss)
        opt.step()
    with Tape() as tape:
        loss = denoising_loss(model, x, desc, cam, rng, dcfg)
    tape.backward(loss)
    for name, p in model.params.items():
        if name in new:
            assert p.grad is not None and np.abs(p.grad).max() > 0, name
        else:
            assert p.grad is None, name


def test_weight_copy_vs_fresh_draw():
    base = _trained_base(TINY, seed=17)
    copied = VideoModel.from_base(base, "full", seed=1)
    fresh = VideoModel.from_base(base, "no_weight_copy", seed=1)
    for b in range(TINY.blocks):
        w_std = copied.params[f"blocks.{b}.read.attn.wq"].data
        assert np.array_equal(copied.params[f"blocks.{b}.cam_read.attn.wq"].data, w_std)
        assert not np.array_equal(fresh.params[f"blocks.{b}.cam_read.attn.wq"].data, w_std)
        for m in (copied, fresh):
            assert np.abs(m.params[f"blocks.{b}.conv_res.w"].data).max() == 0.0
            assert np.abs(m.params[f"blocks.{b}.conv_res.b"].data).max() == 0.0
    # seeded draw is reproducible
    fresh2 = VideoModel.from_base(base, "no_weight_copy", seed=1)
    assert np.array_equal(fresh.params["blocks.0.cam_read.attn.wq"].data,
                          fresh2.params["blocks.0.cam_read.attn.wq"].data)


def test_latent_propagation_between_blocks():
    base = _trained_base(TINY, seed=18)
    rng = np.random.default_rng(19)
    x_in, desc, sig, _, _ = _rand_inputs(TINY, 1, rng)
    ref = base.forward(x_in, None, desc, sig).data
    # perturb a parameter that only affects block 0's latent output
    base.params["blocks.0.core.3.ff.w2"].data = \
        base.params["blocks.0.core.3.ff.w2"].data + 0.05
    out = base.forward(x_in, None, desc, sig).data
    assert np.abs(out - ref).max() > 0.0


def test_forward_validates_inputs():
    base = _trained_base(TINY, seed=20)
    rng = np.random.default_rng(21)
    x_in, desc, sig, vol, feats = _rand_inputs(TINY, 2, rng)
    with pytest.raises(ShapeError):
        base.forward(x_in[:, :, :2], None, desc, sig)
    with pytest.raises(ValueError):
        base.forward(x_in, None, np.array([99, 0]), sig)
    full = VideoModel.from_base(base, "full", seed=0)
    with pytest.raises(ValueError):
        full.forward(x_in, None, desc, sig)  # camera required
    with pytest.raises(ShapeError):
        full.forward(x_in, vol[:, :4], desc, sig)  # wrong channel count


def test_model_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(height=15, patch_h=4)
    with pytest.raises(ValueError):
        ModelConfig(variant="mystery")
    assert ModelConfig().self_attn_layers == 4


def test_sigma_embedding_changes_output():
    base = _trained_base(TINY, seed=22)
    rng = np.random.default_rng(23)
    x_in, desc, _, _, _ = _rand_inputs(TINY, 1, rng)
    a = base.forward(x_in, None, desc, np.array([0.1])).data
    b = base.forward(x_in, None, desc, np.array([5.0])).data
    assert np.abs(a - b).max() > 0
