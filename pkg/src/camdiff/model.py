"""Spatiotemporal transformer blocks with a read/write latent bottleneck and
a zero-initialized camera-conditioning branch.

Each block reads the long video-token sequence into a short latent sequence
through cross-attention, runs a stack of self-attention layers on the
latents, and writes the result back to the video tokens. Latents propagate
from block to block. Camera information enters through a parallel read
branch whose output passes a zero-initialized 1-d convolution over the
latent axis before being added to the standard read — so every freshly
constructed variant computes exactly what the unconditioned model computes.

Parameters live in a flat ``{name: Tensor}`` dict; all forward functions
take the dict plus a key prefix, which keeps weight copying, freezing and
checkpointing trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import tokens as tok
from .tensor import (
    Tensor,
    ShapeError,
    concat,
    conv1d,
    embedding,
    layer_norm,
    matmul,
    reshape,
    softmax,
    swapaxes,
)
from .tensor import gelu as tgelu

VARIANTS = ("base", "full", "no_plucker", "no_controlnet", "no_weight_copy",
            "add_context", "plucker_context")

# Variants that route camera tokens through the parallel read branch.
BRANCH_VARIANTS = ("full", "no_weight_copy", "no_plucker")

PLUCKER_CHANNELS = 6
RAW_CAMERA_CHANNELS = 21  # 3x4 extrinsics row-major + 3x3 intrinsics row-major


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

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
    self_attn_layers: int = 4
    ff_mult: int = 4
    conv_kernel: int = 3
    vocab: int = 16
    sigma_freqs: int = 8
    variant: str = "base"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.height % self.patch_h or self.width % self.patch_w:
            raise ValueError("patch size must divide the frame resolution")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd for same-padding")

    @property
    def token_len(self) -> int:
        return tok.token_count(self.frames, self.height, self.width, self.patch_h, self.patch_w)

    @property
    def grid(self) -> tuple:
        return tok.token_grid(self.frames, self.height, self.width, self.patch_h, self.patch_w)

    @property
    def patch_dim(self) -> int:
        # +1 channel: the frame-observation mask plane is always an input.
        return self.patch_h * self.patch_w * (self.channels + 1)

    @property
    def out_patch_dim(self) -> int:
        return self.patch_h * self.patch_w * self.channels

    @property
    def camera_channels(self) -> int:
        return RAW_CAMERA_CHANNELS if self.variant == "no_plucker" else PLUCKER_CHANNELS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _sinusoid(pos: np.ndarray, dim: int) -> np.ndarray:
    """Classic sin/cos embedding of integer positions into ``dim`` (even)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = pos[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def build_pos_embedding(cfg: ModelConfig) -> np.ndarray:
    """Fixed sinusoidal (frame, row, col) embedding, shape ``[L, dim]``."""
    F, gh, gw = cfg.grid
    per = (cfg.dim // 3) // 2 * 2
    ff, ii, jj = np.meshgrid(np.arange(F), np.arange(gh), np.arange(gw), indexing="ij")
    parts = [
        _sinusoid(ff.reshape(-1).astype(np.float64), per),
        _sinusoid(ii.reshape(-1).astype(np.float64), per),
        _sinusoid(jj.reshape(-1).astype(np.float64), per),
    ]
    emb = np.concatenate(parts, axis=1)
    pad = cfg.dim - emb.shape[1]
    if pad:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], pad))], axis=1)
    return emb


def sigma_features(sigma: np.ndarray, n_freqs: int) -> np.ndarray:
    """Fourier features of ``ln(sigma)``, shape ``[N, 2*n_freqs]``."""
    ls = np.log(np.asarray(sigma, dtype=np.float64)).reshape(-1)
    freqs = 0.25 * (2.0 ** np.arange(n_freqs))
    ang = ls[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# parameter construction

def _normal(rng, d_in, d_out):
    # fan-in scaling keeps token streams at comparable magnitude, which the
    # additive camera conditioning depends on
    return rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out))


def _add_affine(params, rng, prefix, d_in, d_out, zero=False):
    if zero:
        params[prefix + "w"] = np.zeros((d_in, d_out))
        params[prefix + "b"] = np.zeros(d_out)
    else:
        params[prefix + "w"] = _normal(rng, d_in, d_out)
        params[prefix + "b"] = np.zeros(d_out)


def _add_ln(params, prefix, d):
    params[prefix + "g"] = np.ones(d)
    params[prefix + "b"] = np.zeros(d)


def _add_attention(params, rng, prefix, d):
    for name in ("wq", "wk", "wv", "wo"):
        params[prefix + name] = _normal(rng, d, d)
    for name in ("bq", "bk", "bv", "bo"):
        params[prefix + name] = np.zeros(d)


def _add_ff(params, rng, prefix, d, mult):
    params[prefix + "w1"] = _normal(rng, d, d * mult)
    params[prefix + "b1"] = np.zeros(d * mult)
    params[prefix + "w2"] = _normal(rng, d * mult, d)
    params[prefix + "b2"] = np.zeros(d)


def _add_read_block(params, rng, prefix, d, mult):
    _add_ln(params, prefix + "ln_q.", d)
    _add_ln(params, prefix + "ln_kv.", d)
    _add_attention(params, rng, prefix + "attn.", d)
    _add_ln(params, prefix + "ln_ff.", d)
    _add_ff(params, rng, prefix + "ff.", d, mult)


def init_base_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    """Draw the unconditioned network's parameters in a fixed order."""
    d, mult = cfg.dim, cfg.ff_mult
    params: dict = {}
    _add_affine(params, rng, "patch_embed.", cfg.patch_dim, d)
    params["latent_init"] = rng.normal(0.0, 1.0, size=(cfg.latents, d))
    _add_affine(params, rng, "sigma_embed.", 2 * cfg.sigma_freqs, d)
    params["cond_table"] = rng.normal(0.0, 1.0, size=(cfg.vocab, d))
    for b in range(cfg.blocks):
        pre = f"blocks.{b}."
        _add_read_block(params, rng, pre + "read.", d, mult)
        for i in range(cfg.self_attn_layers):
            core = pre + f"core.{i}."
            _add_ln(params, core + "ln_attn.", d)
            _add_attention(params, rng, core + "attn.", d)
            _add_ln(params, core + "ln_ff.", d)
            _add_ff(params, rng, core + "ff.", d, mult)
        _add_read_block(params, rng, pre + "write.", d, mult)
    _add_ln(params, "final_ln.", d)
    _add_affine(params, rng, "final_proj.", d, cfg.out_patch_dim, zero=True)
    return params


def init_camera_branch(params: dict, cfg: ModelConfig, rng: np.random.Generator):
    """Add the per-block camera read branch to an initialized base dict.

    The branch's attention/FF/norm weights are copied from the corresponding
    read-stage parameters (or drawn fresh for ``no_weight_copy``); the output
    convolution is always zero so the branch is silent at construction.
    """
    d = cfg.dim
    for b in range(cfg.blocks):
        pre = f"blocks.{b}."
        if cfg.variant == "no_weight_copy":
            _add_read_block(params, rng, pre + "cam_read.", d, cfg.ff_mult)
        else:
            read_keys = [k for k in params if k.startswith(pre + "read.")]
            for k in read_keys:
                params[pre + "cam_read." + k[len(pre + "read."):]] = params[k].copy()
        params[pre + "conv_res.w"] = np.zeros((d, d, cfg.conv_kernel))
        params[pre + "conv_res.b"] = np.zeros(d)


def extend_to_variant(params: dict, cfg: ModelConfig, rng: np.random.Generator):
    """Add the variant's camera pathway on top of base parameters."""
    d = cfg.dim
    if cfg.variant in BRANCH_VARIANTS:
        mlp_in = cfg.camera_channels * cfg.patch_h * cfg.patch_w
        _add_affine(params, rng, "plucker_mlp.l1.", mlp_in, d)
        _add_affine(params, rng, "plucker_mlp.l2.", d, d)
        init_camera_branch(params, cfg, rng)
    elif cfg.variant == "no_controlnet":
        mlp_in = PLUCKER_CHANNELS * cfg.patch_h * cfg.patch_w
        _add_affine(params, rng, "plucker_mlp.l1.", mlp_in, d)
        _add_affine(params, rng, "plucker_mlp.l2.", d, d)
        _add_affine(params, rng, "add_proj.", d, d, zero=True)
    elif cfg.variant == "add_context":
        _add_affine(params, rng, "ctx_proj.", cfg.frames * RAW_CAMERA_CHANNELS, d, zero=True)
    elif cfg.variant == "plucker_context":
        flat = PLUCKER_CHANNELS * cfg.frames * cfg.height * cfg.width
        _add_affine(params, rng, "ctx_proj.", flat, d, zero=True)


def new_param_names(cfg: ModelConfig, params: dict) -> list:
    """Names of the camera pathway's parameters (empty for the base variant)."""
    if cfg.variant == "base":
        return []
    prefixes = {
        "no_controlnet": ("plucker_mlp.", "add_proj."),
        "add_context": ("ctx_proj.",),
        "plucker_context": ("ctx_proj.",),
    }.get(cfg.variant, ("plucker_mlp.",))
    names = [k for k in params if k.startswith(prefixes)]
    if cfg.variant in BRANCH_VARIANTS:
        names += [k for k in params if ".cam_read." in k or ".conv_res." in k]
    return sorted(set(names))


# ---------------------------------------------------------------------------
# forward pieces

def _affine(x, params, prefix):
    return matmul(x, params[prefix + "w"]) + params[prefix + "b"]


def _ln(x, params, prefix):
    return layer_norm(x, params[prefix + "g"], params[prefix + "b"])


def _ff(x, params, prefix):
    h = tgelu(matmul(x, params[prefix + "w1"]) + params[prefix + "b1"])
    return matmul(h, params[prefix + "w2"]) + params[prefix + "b2"]


def _split_heads(x, heads):
    *lead, n, d = x.shape
    return swapaxes(reshape(x, tuple(lead) + (n, heads, d // heads)), -3, -2)


def _merge_heads(x):
    x = swapaxes(x, -3, -2)
    *lead, n, h, dh = x.shape
    return reshape(x, tuple(lead) + (n, h * dh))


def _attention(q_in, kv_in, params, prefix, heads):
    """Multi-head attention with queries from ``q_in``, keys/values from ``kv_in``."""
    d = q_in.shape[-1]
    q = _split_heads(matmul(q_in, params[prefix + "wq"]) + params[prefix + "bq"], heads)
    k = _split_heads(matmul(kv_in, params[prefix + "wk"]) + params[prefix + "bk"], heads)
    v = _split_heads(matmul(kv_in, params[prefix + "wv"]) + params[prefix + "bv"], heads)
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // heads))
    ctx = _merge_heads(matmul(softmax(scores, axis=-1), v))
    return matmul(ctx, params[prefix + "wo"]) + params[prefix + "bo"]


def read_standard(latents, video_tokens, params, prefix="", heads=1):
    """Pre-norm residual read: cross-attend latents over video tokens, then FF."""
    a = latents + _attention(
        _ln(latents, params, prefix + "ln_q."),
        _ln(video_tokens, params, prefix + "ln_kv."),
        params, prefix + "attn.", heads)
    return a + _ff(_ln(a, params, prefix + "ln_ff."), params, prefix + "ff.")


def read_camera(latents, video_tokens, plucker_tokens, params, block_prefix="", heads=1):
    """Standard read plus the camera branch.

    The branch runs the structurally identical read over the *sum* of camera
    and video tokens, then passes through the zero-initialized convolution
    over the latent axis before the residual add.
    """
    if plucker_tokens.shape != video_tokens.shape:
        raise ShapeError(
            f"camera tokens {plucker_tokens.shape} must match video tokens {video_tokens.shape}")
    base = read_standard(latents, video_tokens, params, block_prefix + "read.", heads)
    branch = read_standard(latents, plucker_tokens + video_tokens, params,
                           block_prefix + "cam_read.", heads)
    return base + conv1d(branch, params[block_prefix + "conv_res.w"],
                         params[block_prefix + "conv_res.b"])


def fit_block_forward(video_tokens, plucker_toks, latents, params, block_prefix, cfg: ModelConfig):
    """One block: read -> latent self-attention stack -> write back."""
    heads = cfg.heads
    if cfg.variant in BRANCH_VARIANTS and plucker_toks is not None:
        z = read_camera(latents, video_tokens, plucker_toks, params, block_prefix, heads)
    else:
        z = read_standard(latents, video_tokens, params, block_prefix + "read.", heads)
    for i in range(cfg.self_attn_layers):
        core = block_prefix + f"core.{i}."
        zn = _ln(z, params, core + "ln_attn.")
        z = z + _attention(zn, zn, params, core + "attn.", heads)
        z = z + _ff(_ln(z, params, core + "ln_ff."), params, core + "ff.")
    wpre = block_prefix + "write."
    v = video_tokens + _attention(
        _ln(video_tokens, params, wpre + "ln_q."),
        _ln(z, params, wpre + "ln_kv."),
        params, wpre + "attn.", heads)
    v = v + _ff(_ln(v, params, wpre + "ln_ff."), params, wpre + "ff.")
    return v, z


def camera_input(variant: str, plucker_vol, raw_feats, height: int, width: int):
    """Pick/shape the camera array a variant consumes.

    ``plucker_vol`` is ``[N, 6, F, H, W]``; ``raw_feats`` is ``[N, F, 21]``.
    ``no_plucker`` broadcasts the raw per-frame values over the spatial grid.
    """
    if variant == "base":
        return None
    if variant in ("full", "no_weight_copy", "no_controlnet", "plucker_context"):
        return plucker_vol
    if variant == "no_plucker":
        n, F, ch = raw_feats.shape
        vol = np.transpose(raw_feats, (0, 2, 1))[:, :, :, None, None]
        return np.broadcast_to(vol, (n, ch, F, height, width)).copy()
    if variant == "add_context":
        return raw_feats
    raise ValueError(f"unknown variant {variant!r}")


class VideoModel:
    """Denoiser network: patch tokens in, same-shape value prediction out."""

    def __init__(self, cfg: ModelConfig, params: dict, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = {
            k: v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=self.dtype), requires_grad=True)
            for k, v in params.items()
        }
        self._pos = Tensor(build_pos_embedding(cfg).astype(self.dtype))

    # -- construction --------------------------------------------------

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> "VideoModel":
        rng = np.random.default_rng(seed)
        params = init_base_params(cfg, rng)
        extend_to_variant(params, cfg, rng)
        return cls(cfg, {k: np.asarray(v, dtype=dtype) for k, v in params.items()}, dtype)

    @classmethod
    def from_base(cls, base: "VideoModel", variant: str, seed: int = 0) -> "VideoModel":
        """Extend a (possibly trained) base model into a camera variant."""
        if base.cfg.variant != "base":
            raise ValueError(f"fine-tune variants must start from a base model, got {base.cfg.variant!r}")
        cfg = replace(base.cfg, variant=variant)
        rng = np.random.default_rng(seed)
        params = {k: p.data.copy() for k, p in base.params.items()}
        extend_to_variant(params, cfg, rng)
        return cls(cfg, {k: np.asarray(v, dtype=base.dtype) for k, v in params.items()}, base.dtype)

    def new_param_names(self) -> list:
        return new_param_names(self.cfg, self.params)

    def param_arrays(self) -> dict:
        return {k: p.data for k, p in self.params.items()}

    # -- forward -------------------------------------------------------

    def forward(self, x_in, camera=None, descriptor=None, sigma=None) -> Tensor:
        """Run the denoiser.

        ``x_in``: ``[N, F, H, W, C+1]`` (scaled noisy video plus the frame
        mask plane). ``camera``: variant-specific array from
        :func:`camera_input`. ``descriptor``: int scene classes ``[N]``.
        ``sigma``: per-sample noise levels ``[N]``.
        """
        cfg = self.cfg
        x_in = np.asarray(x_in, dtype=self.dtype)
        n = x_in.shape[0]
        if x_in.shape[1:] != (cfg.frames, cfg.height, cfg.width, cfg.channels + 1):
            raise ShapeError(f"model input shape {x_in.shape[1:]} does not match config")
        descriptor = np.asarray(descriptor, dtype=np.int64).reshape(n)
        if np.any(descriptor < 0) or np.any(descriptor >= cfg.vocab):
            raise ValueError("descriptor id outside configured vocabulary")
        p = self.params

        v = tok.embed_video_patches(tok.patchify(Tensor(x_in), cfg.patch_h, cfg.patch_w),
                                    p["patch_embed.w"], p["patch_embed.b"])
        v = v + self._pos

        ptok = None
        cond_extra = None
        if cfg.variant != "base":
            if camera is None:
                raise ValueError(f"variant {cfg.variant!r} requires a camera input")
            cam = np.asarray(camera, dtype=self.dtype)
            if cfg.variant in BRANCH_VARIANTS:
                ptok = self._camera_tokens(cam, n)
            elif cfg.variant == "no_controlnet":
                v = v + _affine(self._camera_tokens(cam, n), p, "add_proj.")
            elif cfg.variant == "add_context":
                cond_extra = cam.reshape(n, -1)
            elif cfg.variant == "plucker_context":
                cond_extra = cam.reshape(n, -1)

        sig = np.asarray(sigma, dtype=np.float64).reshape(n)
        feats = sigma_features(sig, cfg.sigma_freqs).astype(self.dtype)
        z = p["latent_init"] + reshape(_affine(Tensor(feats), p, "sigma_embed."), (n, 1, cfg.dim))
        cond = embedding(p["cond_table"], descriptor)
        if cond_extra is not None:
            cond = cond + _affine(Tensor(cond_extra), p, "ctx_proj.")
        z = concat([z, reshape(cond, (n, 1, cfg.dim))], axis=1)

        for b in range(cfg.blocks):
            v, z = fit_block_forward(v, ptok, z, p, f"blocks.{b}.", cfg)

        out = _affine(_ln(v, p, "final_ln."), p, "final_proj.")
        return tok.unpatchify(out, cfg.grid, cfg.patch_h, cfg.patch_w, cfg.channels)

    def _camera_tokens(self, cam: np.ndarray, n: int) -> Tensor:
        cfg = self.cfg
        expect = (n, cfg.camera_channels, cfg.frames, cfg.height, cfg.width)
        if cam.shape != expect:
            raise ShapeError(f"camera volume shape {cam.shape}, expected {expect}")
        p = self.params
        return tok.plucker_tokens(Tensor(cam), p["plucker_mlp.l1.w"], p["plucker_mlp.l1.b"],
                                  p["plucker_mlp.l2.w"], p["plucker_mlp.l2.b"],
                                  cfg.patch_h, cfg.patch_w)
