"""Denoising-diffusion machinery: preconditioning, training objective,
noise-level sampling, the deterministic second-order sampler, and
masked-frame conditioning.

The denoiser is ``D(x_noisy; sigma) = c_out * net(c_in * x_noisy) + c_skip *
x_noisy`` with the standard variance-preserving scaling factors

    c_skip = sd^2 / (sigma^2 + sd^2)
    c_out  = sigma * sd / sqrt(sigma^2 + sd^2)
    c_in   = 1 / sqrt(sigma^2 + sd^2)

where ``sd`` is the data standard deviation. Training draws ``ln sigma ~
Normal(p_mean, p_std^2)`` and minimizes the weighted squared error between
``D`` and the clean video, weight ``1 / c_out^2``.

Sampling integrates the probability-flow ODE with Heun's method over the
polynomial noise schedule

    sigma_i = (smax^(1/rho) + i/(N-1) * (smin^(1/rho) - smax^(1/rho)))^rho

appended with a terminal zero. Frames marked as observed are overwritten
with freshly re-noised observed content at every step, which pins them to
the conditioning signal exactly as the schedule reaches zero.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .camera import CameraTrajectory, NotNormalizedError, camera_features, plucker_volume
from .model import VideoModel, camera_input
from .tensor import Tensor, tmean


@dataclass(frozen=True)
class DiffusionConfig:
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sampler_steps: int = 32

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if not self.sigma_min < self.sigma_max:
            raise ValueError("sigma_min must be below sigma_max")
        if self.sampler_steps < 1:
            raise ValueError("sampler_steps must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        return cls(**d)


def preconditioners(sigma, cfg: DiffusionConfig):
    """Scaling factors ``(c_in, c_out, c_skip)`` for noise level(s) sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    sd2 = cfg.sigma_data ** 2
    tot = sigma ** 2 + sd2
    c_in = 1.0 / np.sqrt(tot)
    c_out = sigma * cfg.sigma_data / np.sqrt(tot)
    c_skip = sd2 / tot
    return c_in, c_out, c_skip


def precondition(net_out, x_noisy, sigma, cfg: DiffusionConfig):
    """Denoised estimate from the raw network output.

    Accepts a Tensor (training, stays on the gradient path) or ndarray for
    ``net_out``; ``sigma`` may be a scalar or per-sample vector.
    """
    x_noisy = np.asarray(x_noisy)
    sigma = np.asarray(sigma, dtype=np.float64)
    c_in, c_out, c_skip = preconditioners(sigma, cfg)
    if sigma.ndim:
        expand = (slice(None),) + (None,) * (x_noisy.ndim - 1)
        c_out = c_out[expand]
        c_skip = c_skip[expand]
    c_out = c_out.astype(x_noisy.dtype) if hasattr(c_out, "astype") else c_out
    c_skip = c_skip.astype(x_noisy.dtype) if hasattr(c_skip, "astype") else c_skip
    if isinstance(net_out, Tensor):
        return net_out * c_out + c_skip * x_noisy
    return net_out * c_out + c_skip * x_noisy


def sample_sigma(rng: np.random.Generator, cfg: DiffusionConfig, size=None):
    """Draw noise level(s) with ``ln sigma ~ Normal(p_mean, p_std^2)``."""
    return np.exp(rng.normal(cfg.p_mean, cfg.p_std, size=size))


def loss_weight(sigma, cfg: DiffusionConfig):
    """Per-sample weight ``1 / c_out(sigma)^2``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma ** 2 + cfg.sigma_data ** 2) / (sigma * cfg.sigma_data) ** 2


def karras_schedule(cfg: DiffusionConfig) -> np.ndarray:
    """Strictly decreasing noise levels, terminated with an exact zero."""
    n = cfg.sampler_steps
    if n == 1:
        sig = np.array([cfg.sigma_max])
    else:
        ramp = np.arange(n) / (n - 1)
        inv = cfg.sigma_max ** (1 / cfg.rho) + ramp * (cfg.sigma_min ** (1 / cfg.rho) - cfg.sigma_max ** (1 / cfg.rho))
        sig = inv ** cfg.rho
    return np.concatenate([sig, [0.0]])


def mask_plane(mask, frames: int, height: int, width: int) -> np.ndarray:
    """Broadcast a per-frame observation mask to a ``[N, F, H, W, 1]`` plane."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None]
    if mask.shape[-1] != frames:
        raise ValueError(f"mask has {mask.shape[-1]} entries, expected {frames} frames")
    plane = mask[:, :, None, None, None].astype(np.float64)
    return np.broadcast_to(plane, (mask.shape[0], frames, height, width, 1)).copy()


def apply_frame_mask(x_noisy, observed, mask, sigma, rng: np.random.Generator):
    """Replace observed frames of ``x_noisy`` with freshly re-noised content.

    ``mask`` is per-frame, True = observed; unmasked frames pass through
    bit-identically. ``sigma`` is scalar or per-sample.
    """
    x_noisy = np.asarray(x_noisy)
    observed = np.asarray(observed)
    if observed.shape != x_noisy.shape:
        raise ValueError(f"observed shape {observed.shape} != noisy shape {x_noisy.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask[None], x_noisy.shape[:2])
    if mask.shape != x_noisy.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match batch/frames {x_noisy.shape[:2]}")
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim:
        sigma = sigma[(slice(None),) + (None,) * (x_noisy.ndim - 1)]
    noised = observed + (sigma * rng.standard_normal(x_noisy.shape)).astype(x_noisy.dtype)
    sel = mask[:, :, None, None, None]
    return np.where(sel, noised, x_noisy)


def build_model_input(x_noisy, sigma, mask, cfg: DiffusionConfig, observed=None) -> np.ndarray:
    """Scale by ``c_in`` and append the mask plane as an extra channel.

    Observed (conditioning) frames are presented at their own noise level
    zero: they enter clean, scaled by ``c_in(0) = 1/sigma_data``, regardless
    of the batch noise level. The mask plane tells the network which frames
    those are. Generated frames carry the usual ``c_in(sigma)`` scaling.
    """
    x_noisy = np.asarray(x_noisy)
    n, F, H, W, _ = x_noisy.shape
    c_in, _, _ = preconditioners(sigma, cfg)
    c_in = np.asarray(c_in)
    if c_in.ndim:
        c_in = c_in[:, None, None, None, None]
    scaled = (c_in * x_noisy).astype(x_noisy.dtype)
    if mask is None:
        plane = np.zeros((n, F, H, W, 1))
    else:
        plane = mask_plane(mask, F, H, W)
        if observed is not None:
            sel = np.asarray(mask, dtype=bool)
            if sel.ndim == 1:
                sel = np.broadcast_to(sel[None], (n, F))
            clean = (np.asarray(observed) / cfg.sigma_data).astype(x_noisy.dtype)
            scaled = np.where(sel[:, :, None, None, None], clean, scaled)
    return np.concatenate([scaled, plane.astype(x_noisy.dtype)], axis=-1)


def denoising_loss(model: VideoModel, x, descriptor, camera, rng: np.random.Generator,
                   cfg: DiffusionConfig, mask=None) -> Tensor:
    """Weighted squared-error denoising objective for one batch.

    ``x`` is the clean video batch ``[N, F, H, W, C]`` in ``[-1, 1]``;
    returns a scalar Tensor on the gradient path of the model parameters.
    Frames marked observed by ``mask`` act as conditioning at noise level
    zero; there their denoised estimate is the observed content itself
    (``c_skip(0) = 1``), so only generated frames contribute loss.
    """
    dt = model.dtype
    x = np.asarray(x, dtype=dt)
    n = x.shape[0]
    sigma = sample_sigma(rng, cfg, size=n)
    eps = rng.standard_normal(x.shape).astype(dt)
    sig_col = sigma[:, None, None, None, None]
    x_noisy = (x + sig_col * eps).astype(dt)
    net_in = build_model_input(x_noisy, sigma, mask, cfg, observed=x)
    net_out = model.forward(net_in, camera, descriptor, sigma)
    denoised = precondition(net_out, x_noisy, sigma, cfg)
    if mask is not None and np.any(mask):
        sel = np.asarray(mask, dtype=bool)[:, :, None, None, None]
        keep = (~np.broadcast_to(sel, x.shape)).astype(dt)
        diff = (denoised - x) * keep
        frac = np.maximum(keep.mean(axis=tuple(range(1, x.ndim))), 1e-9)
    else:
        diff = denoised - x
        frac = np.ones(n, dtype=dt)
    per_sample = tmean(diff * diff, axis=tuple(range(1, x.ndim)))
    weight = (loss_weight(sigma, cfg) / frac).astype(dt)
    return tmean(per_sample * weight)


def _denoise_batch(model, x, sigma_scalar, camera, descriptor, mask, cfg, observed=None):
    n = x.shape[0]
    sig = np.full(n, float(sigma_scalar))
    net_in = build_model_input(x, sig, mask, cfg, observed=observed)
    out = model.forward(net_in, camera, descriptor, sig).data
    return np.asarray(precondition(out, x, sig, cfg))


def sample_video(model: VideoModel, trajectories, descriptor, rng: np.random.Generator,
                 cfg: DiffusionConfig, mask=None, observed=None, ray_mode="geometric") -> np.ndarray:
    """Deterministic Heun sampling of a video batch along camera trajectories.

    ``trajectories``: one normalized :class:`CameraTrajectory` or a list
    (one per sample). With ``mask`` given, ``observed`` must supply content
    for the True frames; those frames are re-noised to the current level at
    every step and end exactly at the observed values. Output is clamped to
    ``[-1, 1]`` at the end only.
    """
    if isinstance(trajectories, CameraTrajectory):
        trajectories = [trajectories]
    for t in trajectories:
        if not t.normalized:
            raise NotNormalizedError("sample_video requires normalized trajectories")
    mc = model.cfg
    n = len(trajectories)
    descriptor = np.asarray(descriptor, dtype=np.int64).reshape(-1)
    if descriptor.size == 1 and n > 1:
        descriptor = np.full(n, descriptor[0])
    if descriptor.size != n:
        raise ValueError("descriptor count does not match trajectory count")

    camera = None
    if mc.variant != "base":
        vol = np.stack([plucker_volume(t, mc.height, mc.width, mode=ray_mode) for t in trajectories])
        feats = np.stack([camera_features(t) for t in trajectories])
        camera = camera_input(mc.variant, vol, feats, mc.height, mc.width)

    shape = (n, mc.frames, mc.height, mc.width, mc.channels)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = np.broadcast_to(mask[None], (n, mc.frames)).copy()
        if observed is None:
            raise ValueError("mask given without observed frames")
        observed = np.asarray(observed, dtype=np.float64)
        if observed.shape == shape[1:]:
            observed = np.broadcast_to(observed[None], shape).copy()
        if observed.shape != shape:
            raise ValueError(f"observed shape {observed.shape} does not match {shape}")

    sigmas = karras_schedule(cfg)
    x = sigmas[0] * rng.standard_normal(shape)
    if mask is not None:
        x = apply_frame_mask(x, observed, mask, sigmas[0], rng)

    for i in range(len(sigmas) - 1):
        s, s_next = sigmas[i], sigmas[i + 1]
        den = _denoise_batch(model, x, s, camera, descriptor, mask, cfg, observed=observed)
        d = (x - den) / s
        x_next = x + (s_next - s) * d
        if s_next > 0:
            den2 = _denoise_batch(model, x_next, s_next, camera, descriptor, mask, cfg,
                                  observed=observed)
            x_next = x + (s_next - s) * 0.5 * (d + (x_next - den2) / s_next)
        if mask is not None:
            x_next = apply_frame_mask(x_next, observed, mask, s_next, rng)
        x = x_next
    return np.clip(x, -1.0, 1.0)
