"""Pinhole camera poses, first-frame trajectory normalization, and per-pixel
ray-line embedding volumes.

Conventions used throughout the package:

* Extrinsics ``(R, t)`` are camera-to-world: a camera-space point ``x`` maps
  to the world point ``R @ x + t``, so ``t`` is the camera position.
* Camera space is x-right, y-down, z-forward; pixel ``(h, w)`` indexes row
  ``h`` (down) and column ``w`` (right).
* Intrinsics ``K`` are upper-triangular with zero skew, in pixel units.

Trajectory normalization re-expresses every frame relative to the first:
``R'_f = R_1^{-1} R_f`` and ``t'_f = t_f - t_1``, leaving frame one at the
identity pose.

Each pixel's viewing line is encoded as six numbers ``(m, d)`` with unit
direction ``d`` and moment ``m = t' x d``; the moment is orthogonal to the
direction by construction. Two ray formulas are supported:

* ``"geometric"`` (default): ``d ~ R' K^{-1} [w+0.5, h+0.5, 1]^T``, the
  standard back-projection through pixel centers.
* ``"literal"``: ``d ~ R' K [w, h, 1]^T + t'``, which applies K forward,
  uses integer pixel corners, and folds the translation into the direction
  before normalizing. Kept runnable behind this flag for comparison; it is
  not geometrically a pinhole back-projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ROTATION_TOL = 1e-9

RAY_MODES = ("geometric", "literal")


class CameraValidationError(ValueError):
    """A pose failed its structural invariants (rotation or intrinsics)."""


class NotNormalizedError(ValueError):
    """An operation that requires a first-frame-normalized trajectory got a raw one."""


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]], dtype=np.float64)


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rotation ``R``, position ``t``, and intrinsics ``K``.

    ``tol`` is the orthonormality budget the rotation is validated against.
    Poses built by this package use the strict default; poses parsed from
    external camera files carry the source format's documented tolerance
    instead of being silently re-orthonormalized.
    """

    R: np.ndarray
    t: np.ndarray
    K: np.ndarray
    tol: float = ROTATION_TOL

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        K = np.asarray(self.K, dtype=np.float64)
        if R.shape != (3, 3) or K.shape != (3, 3):
            raise CameraValidationError(f"R and K must be 3x3, got {R.shape} and {K.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > self.tol:
            raise CameraValidationError("rotation is not orthonormal within tolerance")
        if abs(np.linalg.det(R) - 1.0) > 3.0 * self.tol:
            raise CameraValidationError("rotation determinant is not +1 within tolerance")
        if K[2, 2] != 1.0 or K[0, 1] != 0.0 or np.any(K[np.tril_indices(3, -1)] != 0.0):
            raise CameraValidationError("K must be upper-triangular with zero skew and K[2,2]=1")
        if K[0, 0] == 0.0 or K[1, 1] == 0.0:
            raise CameraValidationError("K is singular (zero focal length)")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "K", K)

    def is_identity(self, tol: float = ROTATION_TOL) -> bool:
        return np.abs(self.R - np.eye(3)).max() <= tol and np.abs(self.t).max() <= tol


@dataclass(frozen=True)
class CameraTrajectory:
    """An ordered sequence of per-frame poses."""

    poses: tuple
    normalized: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) < 1:
            raise CameraValidationError("trajectory needs at least one frame")
        if self.normalized and not poses[0].is_identity():
            raise CameraValidationError("normalized trajectory must start at the identity pose")
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    def rotations(self) -> np.ndarray:
        return np.stack([p.R for p in self.poses])

    def translations(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses])

    def intrinsics_stack(self) -> np.ndarray:
        return np.stack([p.K for p in self.poses])


def normalize_trajectory(traj: CameraTrajectory) -> CameraTrajectory:
    """Re-express all poses relative to frame one.

    ``R'_f = R_1^{-1} R_f`` and ``t'_f = t_f - t_1``; intrinsics are kept.
    Idempotent: a normalized trajectory maps to itself (up to roundoff that
    the identity-first-frame construction removes exactly).
    """
    first = traj.poses[0]
    r1_inv = first.R.T
    t1 = first.t
    poses = []
    for f, p in enumerate(traj.poses):
        if f == 0:
            poses.append(CameraPose(np.eye(3), np.zeros(3), p.K, tol=p.tol))
        else:
            # the product of two eps-orthonormal rotations is ~2eps-orthonormal
            poses.append(CameraPose(r1_inv @ p.R, p.t - t1, p.K, tol=first.tol + p.tol))
    return CameraTrajectory(tuple(poses), normalized=True, meta=dict(traj.meta))


def camera_features(traj: CameraTrajectory) -> np.ndarray:
    """Flattened per-frame extrinsics and intrinsics, shape ``[F, 21]``.

    Layout per frame: the 3x4 ``[R | t]`` matrix row-major (12 values)
    followed by ``K`` row-major (9 values).
    """
    rows = []
    for p in traj.poses:
        ext = np.concatenate([p.R, p.t[:, None]], axis=1)
        rows.append(np.concatenate([ext.reshape(-1), p.K.reshape(-1)]))
    return np.stack(rows)


def _pixel_homogeneous(h, w, mode: str) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if mode == "geometric":
        return np.stack([w + 0.5, h + 0.5, np.ones_like(w)], axis=-1)
    return np.stack([w, h, np.ones_like(w)], axis=-1)


def ray_batch(R, t, K, h, w, mode: str = "geometric"):
    """Vectorized pixel rays: ``R [N,3,3]``, ``t [N,3]``, ``K [N,3,3]``,
    pixel rows/cols ``h, w [N]`` -> unit directions and moments ``[N,3]``.

    Poses are expected in the normalized-frame convention (R', t').
    """
    if mode not in RAY_MODES:
        raise ValueError(f"unknown ray mode {mode!r}, expected one of {RAY_MODES}")
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    pix = _pixel_homogeneous(h, w, mode)
    if mode == "geometric":
        if np.any(np.abs(np.linalg.det(K)) < 1e-12):
            raise CameraValidationError("singular intrinsics")
        cam = np.einsum("nij,nj->ni", np.linalg.inv(K), pix)
        d = np.einsum("nij,nj->ni", R, cam)
    else:
        d = np.einsum("nij,njk,nk->ni", R, K, pix) + t
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    dhat = d / norm
    m = np.cross(t, dhat)
    return dhat, m


def pixel_ray(pose: CameraPose, h: int, w: int, mode: str = "geometric"):
    """Single-pixel ray for a normalized-frame pose: returns ``(d_hat, m)``."""
    dhat, m = ray_batch(pose.R[None], pose.t[None], pose.K[None],
                        np.array([h]), np.array([w]), mode=mode)
    return dhat[0], m[0]


def frame_rays(pose: CameraPose, H: int, W: int, mode: str = "geometric"):
    """All pixel rays of one frame: directions and moments, each ``[H, W, 3]``."""
    hh, ww = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    dhat, m = ray_batch(
        np.broadcast_to(pose.R, (H * W, 3, 3)),
        np.broadcast_to(pose.t, (H * W, 3)),
        np.broadcast_to(pose.K, (H * W, 3, 3)),
        hh.reshape(-1), ww.reshape(-1), mode=mode)
    return dhat.reshape(H, W, 3), m.reshape(H, W, 3)


def plucker_volume(traj: CameraTrajectory, H: int, W: int, mode: str = "geometric") -> np.ndarray:
    """Per-pixel line embedding volume, shape ``[6, F, H, W]``.

    Channels 0..2 hold the moment, channels 3..5 the unit direction.
    Requires a normalized trajectory so the embedding is expressed in the
    first frame's coordinates.
    """
    if not traj.normalized:
        raise NotNormalizedError("plucker_volume requires a normalized trajectory")
    F = len(traj)
    vol = np.empty((6, F, H, W), dtype=np.float64)
    for f, pose in enumerate(traj.poses):
        dhat, m = frame_rays(pose, H, W, mode=mode)
        vol[0:3, f] = np.moveaxis(m, -1, 0)
        vol[3:6, f] = np.moveaxis(dhat, -1, 0)
    return vol


def look_at(eye, target, K) -> CameraPose:
    """Camera at ``eye`` looking toward ``target`` (world y is down)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise CameraValidationError("look_at eye and target coincide")
    z = fwd / n
    up = np.array([0.0, -1.0, 0.0])
    x = np.cross(z, up)
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        raise CameraValidationError("look_at viewing direction is parallel to the vertical")
    x = x / xn
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return CameraPose(R, eye, K)


def rotation_about(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    Kmat = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.eye(3) + s * Kmat + (1.0 - c) * (Kmat @ Kmat)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
