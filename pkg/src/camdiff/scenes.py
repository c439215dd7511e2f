"""Procedural raycast scenes and parametric camera trajectories.

Scenes are a few Lambert-shaded spheres over a checkerboard ground plane
with a flat background — enough geometric structure that camera motion has
an unambiguous, verifiable effect on pixels. The world's y axis points
down (matching the camera convention), so the ground plane sits at
positive y below the cameras.

Every render shares the ray convention of :mod:`camdiff.camera` geometric
mode: the color of a pixel depends only on its ray, not on the image
resolution.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field

import numpy as np

from .camera import (
    CameraPose,
    CameraTrajectory,
    frame_rays,
    intrinsics,
    look_at,
    rotation_about,
)

TRAJECTORY_KINDS = ("zoom_in", "zoom_out", "pan_h", "pan_v", "orbit",
                    "rotate_only", "random_smooth")

GROUND_HEIGHT = 1.0
LIGHT_DIR = np.array([-0.35, -0.8, -0.45]) / np.linalg.norm([-0.35, -0.8, -0.45])
AMBIENT = 0.45
EPS_T = 1e-6


@dataclass(frozen=True)
class SphereSpec:
    center: tuple
    radius: float
    albedo: tuple
    velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def center_at(self, frame: int) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + frame * np.asarray(self.velocity)


@dataclass(frozen=True)
class GroundSpec:
    height: float = GROUND_HEIGHT
    cell: float = 0.5
    albedo_a: tuple = (0.85, 0.85, 0.85)
    albedo_b: tuple = (0.15, 0.15, 0.15)
    phase: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class SceneSpec:
    descriptor: int
    spheres: tuple
    ground: GroundSpec | None
    background: tuple = (0.1, 0.12, 0.18)

    def __post_init__(self):
        if self.descriptor < 0:
            raise ValueError("descriptor id must be non-negative")


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str
    degrees: float = 0.0
    distance: float = 0.0
    frames: int = 8

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.kind == "rotate_only" and self.distance != 0.0:
            raise ValueError("rotate_only trajectories carry zero translation extent")
        if self.frames < 1:
            raise ValueError("frames must be positive")


def render_frame(scene: SceneSpec, pose: CameraPose, H: int, W: int, frame: int = 0) -> np.ndarray:
    """Raycast one frame; returns ``[H, W, 3]`` colors in ``[0, 1]``."""
    dirs, _ = frame_rays(pose, H, W, mode="geometric")
    d = dirs.reshape(-1, 3)
    o = pose.t
    npix = d.shape[0]
    best_t = np.full(npix, np.inf)
    color = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (npix, 3)).copy()

    def shade(normal, albedo):
        lam = np.maximum(0.0, -(normal @ LIGHT_DIR))
        return albedo * (AMBIENT + (1.0 - AMBIENT) * lam)[:, None]

    for sph in scene.spheres:
        c = sph.center_at(frame)
        oc = o - c
        b = d @ oc
        disc = b * b - (oc @ oc - sph.radius ** 2)
        hit = disc > 0
        if not np.any(hit):
            continue
        t = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
        valid = (t > EPS_T) & (t < best_t)
        if not np.any(valid):
            continue
        pts = o + t[valid, None] * d[valid]
        normal = (pts - c) / sph.radius
        color[valid] = shade(normal, np.asarray(sph.albedo))
        best_t[valid] = t[valid]

    if scene.ground is not None:
        g = scene.ground
        dy = d[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (g.height - o[1]) / dy
        valid = np.isfinite(t) & (t > EPS_T) & (t < best_t)
        if np.any(valid):
            pts = o + t[valid, None] * d[valid]
            cx = np.floor((pts[:, 0] - g.phase[0]) / g.cell).astype(np.int64)
            cz = np.floor((pts[:, 2] - g.phase[1]) / g.cell).astype(np.int64)
            checker = (cx + cz) % 2 == 0
            albedo = np.where(checker[:, None], np.asarray(g.albedo_a), np.asarray(g.albedo_b))
            normal = np.broadcast_to(np.array([0.0, -1.0, 0.0]), (valid.sum(), 3))
            color[valid] = albedo * (AMBIENT + (1.0 - AMBIENT)
                                     * np.maximum(0.0, -(normal @ LIGHT_DIR)))[:, None]
            best_t[valid] = t[valid]

    return np.clip(color.reshape(H, W, 3), 0.0, 1.0)


def render_video(scene: SceneSpec, traj: CameraTrajectory, H: int, W: int) -> np.ndarray:
    """Render every frame of a trajectory; ``[F, H, W, 3]`` in ``[0, 1]``."""
    return np.stack([render_frame(scene, pose, H, W, frame=f)
                     for f, pose in enumerate(traj.poses)])


def translate_scene(scene: SceneSpec, offset) -> SceneSpec:
    """Rigidly translate all scene content by ``offset`` (world units)."""
    off = np.asarray(offset, dtype=np.float64)
    spheres = tuple(
        SphereSpec(tuple(s.center_at(0) + off), s.radius, s.albedo, s.velocity)
        for s in scene.spheres)
    ground = scene.ground
    if ground is not None:
        ground = GroundSpec(ground.height + off[1], ground.cell, ground.albedo_a,
                            ground.albedo_b, (ground.phase[0] + off[0], ground.phase[1] + off[2]))
    return SceneSpec(scene.descriptor, spheres, ground, scene.background)


# ---------------------------------------------------------------------------
# scene and trajectory sampling

def palette(descriptor: int, vocab: int = 16) -> list:
    """Deterministic family of colors for a scene class."""
    base = (descriptor % vocab) / vocab
    cols = []
    for k in range(4):
        h = (base + 0.17 * k) % 1.0
        cols.append(colorsys.hsv_to_rgb(h, 0.55, 1.0))
    return cols

def sample_scene(descriptor: int, rng: np.random.Generator, dynamic: float = 0.0,
                 vocab: int = 16) -> SceneSpec:
    """Draw a random scene from a class.

    The class fixes everything about the ground and palette (so appearance is
    determined by rays plus the class id); per-scene randomness lives in the
    sphere placement, which the anchor frame reveals.
    """
    cols = palette(descriptor, vocab)
    n_spheres = 1 + descriptor % 3
    spheres = []
    for i in range(n_spheres):
        r = rng.uniform(0.3, 0.5)
        cx = rng.uniform(-0.7, 0.7)
        cz = rng.uniform(-0.7, 0.7)
        vel = (rng.uniform(-dynamic, dynamic), 0.0, rng.uniform(-dynamic, dynamic)) \
            if dynamic > 0 else (0.0, 0.0, 0.0)
        spheres.append(SphereSpec((cx, GROUND_HEIGHT - r, cz), r, cols[i % len(cols)], vel))
    bright = np.clip(np.asarray(cols[3]) * 0.95 + 0.05, 0, 1)
    ground = GroundSpec(
        height=GROUND_HEIGHT,
        cell=0.45 + 0.3 * ((descriptor * 7) % vocab) / max(vocab - 1, 1),
        albedo_a=tuple(bright),
        albedo_b=tuple(np.clip(np.asarray(cols[1]) * 0.4, 0, 1)),
        phase=(0.0, 0.0),
    )
    background = tuple(np.clip(0.45 + 0.4 * np.asarray(cols[2]), 0, 1))
    return SceneSpec(descriptor, tuple(spheres), ground, background)


def default_intrinsics(H: int, W: int) -> np.ndarray:
    return intrinsics(1.0 * W, 1.0 * W, W / 2.0, H / 2.0)


def _eye_on_sphere(target, dist, azimuth, tilt) -> np.ndarray:
    direction = np.array([
        math.cos(tilt) * math.cos(azimuth),
        -math.sin(tilt),
        math.cos(tilt) * math.sin(azimuth),
    ])
    return np.asarray(target) + dist * direction


def make_trajectory(spec: TrajectorySpec, rng: np.random.Generator,
                    H: int = 16, W: int = 16, target=(0.0, 0.55, 0.0)) -> CameraTrajectory:
    """Build a smooth world-space camera path of the requested kind.

    Randomness (start azimuth, tilt, axis choices) comes from ``rng``; the
    result records its kind in ``meta``.
    """
    F = spec.frames
    if F < 2 and spec.kind in ("zoom_in", "zoom_out", "pan_h", "pan_v", "orbit"):
        raise ValueError(f"{spec.kind} trajectories need at least 2 frames")
    K = default_intrinsics(H, W)
    target = np.asarray(target, dtype=np.float64)
    azim = rng.uniform(0.0, 2.0 * math.pi)
    tilt = rng.uniform(math.radians(8), math.radians(28))
    dist = rng.uniform(2.2, 3.2)
    ts = np.linspace(0.0, 1.0, F) if F > 1 else np.zeros(1)
    poses = []

    if spec.kind in ("zoom_in", "zoom_out"):
        span = min(spec.distance, dist - 1.2)
        d0, d1 = (dist, dist - span) if spec.kind == "zoom_in" else (dist - span, dist)
        for s in ts:
            poses.append(look_at(_eye_on_sphere(target, d0 + (d1 - d0) * s, azim, tilt), target, K))
    elif spec.kind in ("pan_h", "pan_v"):
        base = look_at(_eye_on_sphere(target, dist, azim, tilt), target, K)
        axis = base.R[:, 0] if spec.kind == "pan_h" else base.R[:, 1]
        for s in ts:
            offset = (s - 0.5) * spec.distance * axis
            poses.append(CameraPose(base.R, base.t + offset, K))
    elif spec.kind == "orbit":
        sweep = math.radians(spec.degrees) * rng.choice([-1.0, 1.0])
        for s in ts:
            poses.append(look_at(_eye_on_sphere(target, dist, azim + sweep * s, tilt), target, K))
    elif spec.kind == "rotate_only":
        base = look_at(_eye_on_sphere(target, dist, azim, tilt), target, K)
        axis_idx = rng.integers(0, 3)
        sweep = math.radians(spec.degrees) * rng.choice([-1.0, 1.0])
        for s in ts:
            local = rotation_about(np.eye(3)[axis_idx], sweep * s)
            poses.append(CameraPose(base.R @ local, base.t, K))
    elif spec.kind == "random_smooth":
        azim2 = azim + rng.uniform(-1.2, 1.2)
        tilt2 = np.clip(tilt + rng.uniform(-0.2, 0.2), math.radians(5), math.radians(35))
        dist2 = np.clip(dist + rng.uniform(-0.8, 0.8), 1.6, 3.6)
        wobble = rng.uniform(0.05, 0.25)
        for s in ts:
            ease = 0.5 - 0.5 * math.cos(math.pi * s)
            a = azim + (azim2 - azim) * ease
            ti = tilt + (tilt2 - tilt) * ease
            di = dist + (dist2 - dist) * ease
            off = np.array([0.0, wobble * math.sin(math.pi * s), 0.0])
            poses.append(look_at(_eye_on_sphere(target, di, a, ti) + off, target, K))
    else:
        raise ValueError(f"unknown trajectory kind {spec.kind!r}")

    return CameraTrajectory(tuple(poses), normalized=False, meta={"kind": spec.kind})


def random_spec(kind: str, frames: int, rng: np.random.Generator) -> TrajectorySpec:
    """Random extents for a trajectory kind (angles up to 120 degrees)."""
    if kind in ("zoom_in", "zoom_out"):
        return TrajectorySpec(kind, 0.0, rng.uniform(0.8, 1.6), frames)
    if kind in ("pan_h", "pan_v"):
        return TrajectorySpec(kind, 0.0, rng.uniform(0.8, 1.8), frames)
    if kind == "orbit":
        return TrajectorySpec(kind, rng.uniform(25.0, 120.0), 0.0, frames)
    if kind == "rotate_only":
        return TrajectorySpec(kind, rng.uniform(10.0, 45.0), 0.0, frames)
    if kind == "random_smooth":
        return TrajectorySpec(kind, 0.0, 0.0, frames)
    raise ValueError(f"unknown trajectory kind {kind!r}")


# ---------------------------------------------------------------------------
# dataset construction

def draw_mask(rng: np.random.Generator, frames: int) -> np.ndarray:
    """Per-sample frame-observation mask: most samples anchor frame 0, some
    observe a random subset, the rest condition on nothing. At least one
    frame is always left for generation."""
    u = rng.random()
    mask = np.zeros(frames, dtype=bool)
    if u < 0.65:
        mask[0] = True
    elif u < 0.85:
        mask = rng.random(frames) < 0.3
        if mask.all():
            mask[int(rng.integers(frames))] = False
    return mask


def make_sample(scene_id: int, seed_entropy, frames: int, height: int, width: int,
                vocab: int, kinds=TRAJECTORY_KINDS, dynamic: float = 0.0) -> dict:
    """Render one (video, trajectory, camera-volume, mask) sample deterministically."""
    from .camera import camera_features, normalize_trajectory, plucker_volume

    rng = np.random.default_rng(seed_entropy)
    descriptor = int(rng.integers(0, vocab))
    scene = sample_scene(descriptor, rng, dynamic=dynamic, vocab=vocab)
    kind = kinds[int(rng.integers(len(kinds)))]
    spec = random_spec(kind, frames, rng)
    traj = make_trajectory(spec, rng, H=height, W=width)
    video = render_video(scene, traj, height, width) * 2.0 - 1.0
    norm = normalize_trajectory(traj)
    return {
        "video": video.astype(np.float32),
        "plucker": plucker_volume(norm, height, width).astype(np.float32),
        "cam_feats": camera_features(norm).astype(np.float32),
        "rot": norm.rotations(),
        "trans": norm.translations(),
        "intr": norm.intrinsics_stack(),
        "descriptor": np.int64(descriptor),
        "mask": draw_mask(rng, frames),
        "kind": np.int64(TRAJECTORY_KINDS.index(kind)),
        "scene_id": np.int64(scene_id),
    }


def build_dataset(n_train: int, n_test: int, frames: int, height: int, width: int,
                  vocab: int, seed: int, out_dir, dynamic: float = 0.0,
                  kinds=TRAJECTORY_KINDS, log=None) -> dict:
    """Render and persist a train/test pair of dataset files.

    The split is by scene id: test scenes (and therefore their trajectories,
    drawn from each scene's private stream) are disjoint from training ones
    by construction. Identical seeds reproduce identical files byte for byte.
    """
    from pathlib import Path

    from .dataio import write_dataset

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_train + n_test)
    paths = {}
    for split, start, count in (("train", 0, n_train), ("test", n_train, n_test)):
        ids = list(range(start, start + count))
        meta = {
            "count": count,
            "split": split,
            "frames": frames,
            "height": height,
            "width": width,
            "channels": 3,
            "vocab": vocab,
            "seed": seed,
            "dynamic": dynamic,
            "kinds": list(kinds),
            "scene_ids": ids,
        }
        path = out_dir / f"{split}.camds"

        def samples(ids=ids):
            for i in ids:
                if log and (i - ids[0]) % 512 == 0 and i > ids[0]:
                    log(f"  {split}: {i - ids[0]}/{len(ids)} samples")
                yield make_sample(i, children[i], frames, height, width, vocab,
                                  kinds=kinds, dynamic=dynamic)

        write_dataset(path, samples(), meta)
        paths[split] = str(path)
    return {
        "train_path": paths["train"],
        "test_path": paths["test"],
        "n_train": n_train,
        "n_test": n_test,
        "shape": (frames, height, width, 3),
    }
