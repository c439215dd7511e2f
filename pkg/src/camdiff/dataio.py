"""Parsers and persistence: RealEstate10K-style camera files, the dataset
container, and model checkpoints.

All binary formats are little-endian with explicit manifests and a trailing
SHA-256 checksum, so files are portable across machines and corruption is
detected rather than silently read.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose, CameraTrajectory, intrinsics
from .model import ModelConfig, VideoModel

DATASET_MAGIC = b"CDDS"
CHECKPOINT_MAGIC = b"CDCK"
FORMAT_VERSION = 1

RE10K_FIELDS = 19
RE10K_ROT_TOL = 1e-4


class Re10kParseError(ValueError):
    """Malformed camera-trajectory file; message carries the line number."""


class DatasetFormatError(ValueError):
    """Dataset container is corrupt, truncated, or version-incompatible."""


class CheckpointError(ValueError):
    """Checkpoint is corrupt or does not match the requested model."""


# ---------------------------------------------------------------------------
# RealEstate10K camera files
#
# One header line holding the source URL, then one line per frame:
# timestamp (int microseconds), fx fy cx cy (intrinsics normalized by
# width/height), two reserved zeros, and the 3x4 world-to-camera pose
# row-major. 19 whitespace-separated fields in total.

@dataclass(frozen=True)
class Re10kRecord:
    timestamp: int
    fx: float
    fy: float
    cx: float
    cy: float
    reserved: tuple = (0.0, 0.0)
    pose_w2c: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))

    def __post_init__(self):
        P = np.asarray(self.pose_w2c, dtype=np.float64)
        if P.shape != (3, 4):
            raise ValueError(f"pose must be 3x4, got {P.shape}")
        object.__setattr__(self, "pose_w2c", P)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def parse_re10k(text: str):
    """Strict parse of a camera file; returns ``(url, records)``.

    Rejects (never repairs) wrong field counts, non-numeric tokens, and
    rotation parts that are not orthonormal within the source-data
    tolerance; every error names its 1-based line number.
    """
    lines = text.splitlines()
    if not lines:
        raise Re10kParseError("line 1: empty file, expected a URL header line")
    url = lines[0].strip()
    records = []
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        tokens = raw.split()
        if len(tokens) != RE10K_FIELDS:
            raise Re10kParseError(f"line {ln}: expected {RE10K_FIELDS} fields, got {len(tokens)}")
        try:
            ts = int(tokens[0])
        except ValueError:
            raise Re10kParseError(f"line {ln}: timestamp {tokens[0]!r} is not an integer") from None
        try:
            vals = [float(t) for t in tokens[1:]]
        except ValueError:
            raise Re10kParseError(f"line {ln}: non-numeric field") from None
        pose = np.array(vals[6:]).reshape(3, 4)
        R = pose[:, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > RE10K_ROT_TOL:
            raise Re10kParseError(f"line {ln}: rotation part is not orthonormal within {RE10K_ROT_TOL}")
        records.append(Re10kRecord(ts, vals[0], vals[1], vals[2], vals[3],
                                   (vals[4], vals[5]), pose))
    return url, records


def serialize_re10k(url: str, records) -> str:
    """Render records back to text: 19 fields per line, floats at 9
    significant digits, newline-terminated."""
    out = [url]
    for r in records:
        fields = [str(int(r.timestamp))]
        fields += [_fmt(v) for v in (r.fx, r.fy, r.cx, r.cy)]
        fields += [_fmt(v) for v in r.reserved]
        fields += [_fmt(v) for v in np.asarray(r.pose_w2c).reshape(-1)]
        out.append(" ".join(fields))
    return "\n".join(out) + "\n"


def w2c_to_c2w(pose_w2c: np.ndarray):
    """World-to-camera ``[R|t]`` -> camera-to-world ``(R, t)``."""
    P = np.asarray(pose_w2c, dtype=np.float64)
    R = P[:, :3].T
    t = -P[:, :3].T @ P[:, 3]
    return R, t


def c2w_to_w2c(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Camera-to-world ``(R, t)`` -> world-to-camera ``[R|t]``."""
    Rw = np.asarray(R).T
    tw = -np.asarray(R).T @ np.asarray(t)
    return np.hstack([Rw, tw[:, None]])


def record_to_pose(rec: Re10kRecord, H: int, W: int) -> CameraPose:
    """Convert one record to the package's camera-to-world convention with
    pixel-unit intrinsics for the given target resolution.

    The pose carries the source format's rotation tolerance rather than the
    package's strict one; data is validated at parse time, never repaired."""
    R, t = w2c_to_c2w(rec.pose_w2c)
    K = intrinsics(rec.fx * W, rec.fy * H, rec.cx * W, rec.cy * H)
    return CameraPose(R, t, K, tol=RE10K_ROT_TOL)


def trajectory_from_records(records, H: int, W: int) -> CameraTrajectory:
    if not records:
        raise Re10kParseError("camera file holds no pose records")
    return CameraTrajectory(tuple(record_to_pose(r, H, W) for r in records),
                            normalized=False, meta={"kind": "re10k"})


def pose_to_record(pose: CameraPose, H: int, W: int, timestamp: int = 0) -> Re10kRecord:
    K = pose.K
    return Re10kRecord(timestamp, K[0, 0] / W, K[1, 1] / H, K[0, 2] / W, K[1, 2] / H,
                       (0.0, 0.0), c2w_to_w2c(pose.R, pose.t))


# ---------------------------------------------------------------------------
# dataset container
#
# [magic][u32 version][u64 header_len][header json]
# then per sample: [u64 block_len][zlib-compressed field stream]
# Each field: [u16 name_len][name][u8 tag_len][dtype tag][u8 ndim][i64 dims...][payload]
# Encoding is fully deterministic so identical seeds produce identical bytes.

def _pack_sample(sample: dict) -> bytes:
    parts = []
    for name in sorted(sample):
        arr = np.ascontiguousarray(sample[name])
        if arr.dtype == bool:
            tag = "|b1"
        else:
            le = arr.dtype.newbyteorder("<")
            if arr.dtype != le:
                arr = arr.astype(le)
            tag = le.str
        nb = name.encode()
        tb = tag.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", len(tb)))
        parts.append(tb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        parts.append(arr.tobytes())
    return zlib.compress(b"".join(parts), 4)


def _unpack_sample(blob: bytes) -> dict:
    raw = zlib.decompress(blob)
    out = {}
    pos = 0
    while pos < len(raw):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (tlen,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        tag = raw[pos:pos + tlen].decode()
        pos += tlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}q", raw, pos)
        pos += 8 * ndim
        dt = np.dtype(tag)
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(shape).copy()
        pos += count * dt.itemsize
    return out


def write_dataset(path, samples, meta: dict):
    """Write samples (an iterable of array dicts) with a self-describing header.

    ``meta`` must include ``count``; shapes and ids are caller-supplied and
    stored verbatim for consumers to validate against.
    """
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    blob = json.dumps(header).encode()
    written = 0
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for sample in samples:
            payload = _pack_sample(sample)
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)
            written += 1
    if written != meta.get("count", written):
        raise DatasetFormatError(f"wrote {written} samples but header promised {meta.get('count')}")


def read_dataset_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: not a dataset container")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        return json.loads(f.read(hlen).decode())


def iter_dataset(path):
    """Stream ``(index, sample_dict)`` pairs without loading the whole file."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: not a dataset container")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        header = json.loads(f.read(hlen).decode())
        count = header.get("count", 0)
        for i in range(count):
            raw = f.read(8)
            if len(raw) < 8:
                raise DatasetFormatError(f"{path}: truncated at sample {i} (missing block header)")
            (blen,) = struct.unpack("<Q", raw)
            blob = f.read(blen)
            if len(blob) < blen:
                raise DatasetFormatError(f"{path}: truncated at sample {i} (short block)")
            yield i, _unpack_sample(blob)


@dataclass
class DatasetBundle:
    """A dataset loaded into memory as stacked arrays."""

    meta: dict
    videos: np.ndarray        # [n, F, H, W, C], float32 in [-1, 1]
    plucker: np.ndarray       # [n, 6, F, H, W], float32
    cam_feats: np.ndarray     # [n, F, 21], float32
    rotations: np.ndarray     # [n, F, 3, 3], float64 (normalized)
    translations: np.ndarray  # [n, F, 3], float64
    intrinsics: np.ndarray    # [n, F, 3, 3], float64
    descriptors: np.ndarray   # [n] int64
    masks: np.ndarray         # [n, F] bool
    kinds: np.ndarray         # [n] int64, index into scenes.TRAJECTORY_KINDS
    scene_ids: np.ndarray     # [n] int64

    def __len__(self):
        return len(self.videos)

    def trajectory(self, i: int) -> CameraTrajectory:
        poses = tuple(
            CameraPose(self.rotations[i, f], self.translations[i, f], self.intrinsics[i, f])
            for f in range(self.rotations.shape[1]))
        return CameraTrajectory(poses, normalized=True)


def load_dataset(path) -> DatasetBundle:
    header = read_dataset_header(path)
    cols = {k: [] for k in ("video", "plucker", "cam_feats", "rot", "trans", "intr",
                            "descriptor", "mask", "kind", "scene_id")}
    for _, s in iter_dataset(path):
        for k in cols:
            cols[k].append(s[k])
    n = len(cols["video"])
    if n == 0:
        f = header.get("frames", 0)
        h, w = header.get("height", 0), header.get("width", 0)
        return DatasetBundle(header, np.zeros((0, f, h, w, 3), np.float32),
                             np.zeros((0, 6, f, h, w), np.float32),
                             np.zeros((0, f, 21), np.float32),
                             np.zeros((0, f, 3, 3)), np.zeros((0, f, 3)),
                             np.zeros((0, f, 3, 3)), np.zeros(0, np.int64),
                             np.zeros((0, f), bool), np.zeros(0, np.int64),
                             np.zeros(0, np.int64))
    return DatasetBundle(
        header,
        np.stack(cols["video"]).astype(np.float32),
        np.stack(cols["plucker"]).astype(np.float32),
        np.stack(cols["cam_feats"]).astype(np.float32),
        np.stack(cols["rot"]),
        np.stack(cols["trans"]),
        np.stack(cols["intr"]),
        np.asarray(cols["descriptor"], np.int64).reshape(n),
        np.stack(cols["mask"]).astype(bool),
        np.asarray(cols["kind"], np.int64).reshape(n),
        np.asarray(cols["scene_id"], np.int64).reshape(n),
    )


# ---------------------------------------------------------------------------
# checkpoints
#
# [magic][u32 version][u64 header_len][header json][param payload]
# [optimizer payload][sha256 of everything before it]

def _dtype_tag(dt) -> str:
    return {"float64": "<f8", "float32": "<f4"}[np.dtype(dt).name]


def _tag_dtype(tag: str):
    return {"<f8": np.float64, "<f4": np.float32}[tag]


def save_checkpoint(path, model: VideoModel, step: int = 0, optimizer_state: dict | None = None,
                    rng_state: dict | None = None, extras: dict | None = None):
    """Serialize a model (plus optional optimizer/rng state) with a checksum."""
    names = sorted(model.params)
    manifest = [[n, _dtype_tag(model.params[n].data.dtype), list(model.params[n].data.shape)]
                for n in names]
    opt_manifest = []
    opt_payload = b""
    opt_meta = None
    if optimizer_state is not None:
        opt_meta = {"step_count": int(optimizer_state["step_count"])}
        for slot in ("m", "v"):
            for n in sorted(optimizer_state[slot]):
                arr = np.ascontiguousarray(optimizer_state[slot][n])
                opt_manifest.append([slot, n, _dtype_tag(arr.dtype), list(arr.shape)])
                opt_payload += arr.astype(_dtype_tag(arr.dtype)).tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "dtype": _dtype_tag(model.dtype),
        "step": int(step),
        "manifest": manifest,
        "opt_manifest": opt_manifest,
        "opt_meta": opt_meta,
        "rng_state": rng_state,
        "extras": extras or {},
    }
    blob = json.dumps(header).encode()
    payload = b"".join(model.params[n].data.astype(_dtype_tag(model.params[n].data.dtype)).tobytes()
                       for n in names)
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + payload + opt_payload
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as f:
        f.write(body)
        f.write(digest)


@dataclass
class CheckpointBundle:
    model: VideoModel
    step: int
    optimizer_state: dict | None
    rng_state: dict | None
    extras: dict


def load_checkpoint(path, expect_variant: str | None = None,
                    expect_config: ModelConfig | None = None) -> CheckpointBundle:
    """Load and verify a checkpoint; reconstruction is bit-exact.

    Raises :class:`CheckpointError` on checksum mismatch, version mismatch,
    or when the stored variant/config does not match expectations.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 + 12 + 32 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupt)")
    version, hlen = struct.unpack("<IQ", body[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(body[16:16 + hlen].decode())
    cfg = ModelConfig.from_dict(header["config"])
    if expect_variant is not None and cfg.variant != expect_variant:
        raise CheckpointError(
            f"{path}: stored variant {cfg.variant!r} does not match expected {expect_variant!r}")
    if expect_config is not None and cfg != expect_config:
        raise CheckpointError(f"{path}: stored model config does not match the requested config")
    offset = 16 + hlen
    params = {}
    for name, tag, shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(tag).itemsize
        arr = np.frombuffer(body, dtype=tag, count=count, offset=offset).reshape(shape).copy()
        params[name] = arr.astype(_tag_dtype(header["dtype"]))
        offset += nbytes
    opt_state = None
    if header["opt_meta"] is not None:
        opt_state = {"step_count": header["opt_meta"]["step_count"], "m": {}, "v": {}}
        for slot, name, tag, shape in header["opt_manifest"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(body, dtype=tag, count=count, offset=offset).reshape(shape).copy()
            opt_state[slot][name] = arr
            offset += count * np.dtype(tag).itemsize
    model = VideoModel(cfg, params, dtype=_tag_dtype(header["dtype"]))
    return CheckpointBundle(model, header["step"], opt_state, header["rng_state"], header["extras"])


def frozen_audit(base_path, tuned_path) -> tuple:
    """Bitwise comparison of base-parameter tensors across two checkpoints.

    Returns ``(ok, mismatched_names)``; names present only in the tuned
    checkpoint (the camera pathway) are ignored.
    """
    base = load_checkpoint(base_path)
    tuned = load_checkpoint(tuned_path)
    mismatched = []
    for name, p in base.model.params.items():
        q = tuned.model.params.get(name)
        if q is None:
            mismatched.append(name + " (missing)")
        elif p.data.tobytes() != q.data.tobytes():
            mismatched.append(name)
    return (not mismatched), mismatched
