"""ViT-style patchification of videos and camera volumes into token rows.

Token order is canonical and fixed: frame-major, then row-major over the
patch grid. Within a patch, values are flattened ``(patch_row, patch_col,
channel)`` row-major. ``patchify``/``unpatchify`` are exact inverses.

All functions operate on :class:`~camdiff.tensor.Tensor` so they sit on the
gradient path when their inputs or weights are tracked.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ShapeError, gelu, matmul, reshape, transpose

PROVENANCE = ("video", "plucker", "latent")


def token_grid(F: int, H: int, W: int, h_p: int, w_p: int) -> tuple:
    """Patch-grid geometry ``(F, H/h_p, W/w_p)``; validates divisibility."""
    if H % h_p or W % w_p:
        raise ShapeError(f"patch size ({h_p},{w_p}) does not divide frame ({H},{W})")
    return F, H // h_p, W // w_p


def token_count(F: int, H: int, W: int, h_p: int, w_p: int) -> int:
    f, gh, gw = token_grid(F, H, W, h_p, w_p)
    return f * gh * gw


def patchify(video, h_p: int, w_p: int) -> Tensor:
    """``[..., F, H, W, C] -> [..., L, h_p*w_p*C]`` in canonical token order."""
    video = video if isinstance(video, Tensor) else Tensor(video)
    if video.ndim < 4:
        raise ShapeError(f"patchify expects [..., F, H, W, C], got {video.shape}")
    *lead, F, H, W, C = video.shape
    _, gh, gw = token_grid(F, H, W, h_p, w_p)
    n = len(lead)
    x = reshape(video, tuple(lead) + (F, gh, h_p, gw, w_p, C))
    x = transpose(x, tuple(range(n)) + (n, n + 1, n + 3, n + 2, n + 4, n + 5))
    return reshape(x, tuple(lead) + (F * gh * gw, h_p * w_p * C))


def unpatchify(patches, geometry: tuple, h_p: int, w_p: int, channels: int) -> Tensor:
    """Exact inverse of :func:`patchify` for the given patch-grid geometry."""
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    F, gh, gw = geometry
    L = F * gh * gw
    p = h_p * w_p * channels
    if patches.shape[-2:] != (L, p):
        raise ShapeError(f"patches {patches.shape} do not match geometry {geometry} with patch dim {p}")
    lead = patches.shape[:-2]
    n = len(lead)
    x = reshape(patches, lead + (F, gh, gw, h_p, w_p, channels))
    x = transpose(x, tuple(range(n)) + (n, n + 1, n + 3, n + 2, n + 4, n + 5))
    return reshape(x, lead + (F, gh * h_p, gw * w_p, channels))


def embed_video_patches(patches, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-token affine projection of patch rows into model width."""
    if patches.shape[-1] != weight.shape[0]:
        raise ShapeError(f"patch dim {patches.shape[-1]} does not match projection input {weight.shape[0]}")
    return matmul(patches, weight) + bias


def plucker_tokens(volume, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                   h_p: int, w_p: int) -> Tensor:
    """Camera volume ``[..., ch, F, H, W]`` -> token rows ``[..., L, d]``.

    The volume is patchified exactly like the video, then pushed through the
    learnable two-layer MLP (GELU between the affine layers).
    """
    volume = volume if isinstance(volume, Tensor) else Tensor(volume)
    if volume.ndim < 4:
        raise ShapeError(f"camera volume must be [..., ch, F, H, W], got {volume.shape}")
    n = volume.ndim - 4
    x = transpose(volume, tuple(range(n)) + (n + 1, n + 2, n + 3, n))
    patches = patchify(x, h_p, w_p)
    if patches.shape[-1] != w1.shape[0]:
        raise ShapeError(
            f"camera patch dim {patches.shape[-1]} does not match MLP input {w1.shape[0]}")
    hidden = gelu(matmul(patches, w1) + b1)
    return matmul(hidden, w2) + b2
