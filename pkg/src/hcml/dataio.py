"""Synthetic motion-defined clips, dataset files and checkpoints.

Every clip shows one textured object over a static textured background.
The class is determined by how the object moves; texture, shape and
intensity are drawn from the same distribution for every class.

File layouts (all integers and floats little-endian):

dataset  ``b"HCML-DS1"`` | u32 spec-json length | spec json | u32 count |
         count x (u32 record length | record). A record is
         ``clip f32 (3,T,H,W) | label u32 | flow f32 (3,T-1,H,W)`` where
         flow channels are U, V and the validity mask.
checkpoint  ``b"HCML-CK1"`` | u32 version | u32 meta-json length | meta json |
         u32 tensor count | per tensor: u16 name length, name utf-8, u8 ndim,
         ndim x u32 extent, f32 payload.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "MOTIONS", "SyntheticSpec", "SyntheticSample", "SyntheticDataset", "generate",
    "generate_split", "save_dataset", "load_dataset", "Checkpoint", "save_checkpoint",
    "load_checkpoint", "FormatError",
]

DATASET_MAGIC = b"HCML-DS1"
CHECKPOINT_MAGIC = b"HCML-CK1"
CHECKPOINT_VERSION = 1

#: Motion programs; each pair is a motion and its time-reversed counterpart.
MOTIONS = ("translate_right", "translate_left", "translate_down", "translate_up",
           "orbit_cw", "orbit_ccw")
SHAPES = ("disk", "square", "diamond")


class FormatError(ValueError):
    """Malformed or incompatible dataset / checkpoint bytes."""


@dataclass(frozen=True)
class SyntheticSpec:
    height: int = 32
    width: int = 32
    frames: int = 8
    num_classes: int = 6
    speed: tuple[float, float] = (0.75, 1.0)
    radius: tuple[float, float] = (2.5, 4.0)
    orbit_radius: tuple[float, float] = (3.0, 5.0)
    background_sigma: float = 0.15
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(MOTIONS):
            raise ValueError(f"num_classes must be in [1, {len(MOTIONS)}]")
        if self.frames < 2:
            raise ValueError("clips need at least 2 frames")
        span = (self.frames - 1) * self.speed[1] + 2 * self.radius[1] + 2
        orbit = 2 * (self.orbit_radius[1] + self.radius[1] + 1) + 1
        if max(span, orbit) > min(self.height, self.width):
            raise ValueError(
                f"motion program needs {max(span, orbit):.1f}px but the image is "
                f"{self.height}x{self.width}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for k in ("speed", "radius", "orbit_radius"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SyntheticSample:
    clip: np.ndarray     # (3, T, H, W) in [0, 1]
    label: int
    flow: np.ndarray     # (2, T-1, H, W), pixels
    valid: np.ndarray    # (1, T-1, H, W), 1 on object pixels


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    clips: np.ndarray
    labels: np.ndarray
    flow: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> SyntheticSample:
        return SyntheticSample(self.clips[i], int(self.labels[i]), self.flow[i], self.valid[i])

    def subset(self, idx) -> "SyntheticDataset":
        return SyntheticDataset(self.spec, self.clips[idx], self.labels[idx], self.flow[idx], self.valid[idx])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.clips, self.labels, self.flow, self.valid):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# generation


def _trajectory(motion: str, rng: np.random.Generator, spec: SyntheticSpec, r: float) -> np.ndarray:
    """Object centres (T, 2) as (x, y) for one clip."""
    T, H, W = spec.frames, spec.height, spec.width
    t = np.arange(T, dtype=np.float64)
    if motion.startswith("translate"):
        v = rng.uniform(*spec.speed)
        direction = {"translate_right": (1, 0), "translate_left": (-1, 0),
                     "translate_down": (0, 1), "translate_up": (0, -1)}[motion]
        travel = v * (T - 1)
        lo = r + 1
        start = []
        for ext, dv in zip((W, H), direction):
            if dv > 0:
                start.append(rng.uniform(lo, ext - 1 - r - travel))
            elif dv < 0:
                start.append(rng.uniform(lo + travel, ext - 1 - r))
            else:
                start.append(rng.uniform(lo, ext - 1 - r))
        return np.stack([start[0] + direction[0] * v * t, start[1] + direction[1] * v * t], axis=1)
    R = rng.uniform(*spec.orbit_radius)
    v = rng.uniform(*spec.speed)
    omega = v / R * (1 if motion == "orbit_cw" else -1)   # image y points down: +omega is clockwise
    phase = rng.uniform(0, 2 * np.pi)
    m = R + r + 1
    cx, cy = rng.uniform(m, W - 1 - m), rng.uniform(m, H - 1 - m)
    ang = phase + omega * t
    return np.stack([cx + R * np.cos(ang), cy + R * np.sin(ang)], axis=1)


def _object_alpha(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "disk":
        d = np.sqrt(dx ** 2 + dy ** 2)
    elif shape == "square":
        d = np.maximum(np.abs(dx), np.abs(dy))
    else:
        d = (np.abs(dx) + np.abs(dy)) / np.sqrt(2)
    return np.clip(r + 0.5 - d, 0.0, 1.0)


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    n = rng.standard_normal(shape)
    # 3x3 box blur keeps the texture matchable at sub-pixel offsets
    p = np.pad(n, [(0, 0)] * (n.ndim - 2) + [(1, 1), (1, 1)], mode="wrap")
    acc = sum(p[..., i: i + shape[-2], j: j + shape[-1]] for i in range(3) for j in range(3)) / 3.0
    return sigma * acc


def _render_sample(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> SyntheticSample:
    T, H, W = spec.frames, spec.height, spec.width
    motion = MOTIONS[label]
    r = rng.uniform(*spec.radius)
    shape = SHAPES[rng.integers(len(SHAPES))]
    centres = _trajectory(motion, rng, spec, r)

    background = np.clip(rng.uniform(0.2, 0.8, (3, 1, 1)) + _smooth_noise(rng, (3, H, W), spec.background_sigma), 0, 1)
    base = rng.uniform(0.1, 0.9, 3)
    # object texture lives in object coordinates and moves rigidly
    tex_size = int(np.ceil(2 * r)) + 4
    texture = np.clip(base[:, None, None] + _smooth_noise(rng, (3, 2 * tex_size + 1, 2 * tex_size + 1), 0.2), 0, 1)

    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    clip = np.empty((3, T, H, W))
    alphas = np.empty((T, H, W))
    for t in range(T):
        dx, dy = xs - centres[t, 0], ys - centres[t, 1]
        a = _object_alpha(shape, dx, dy, r)
        tx = np.clip(dx + tex_size, 0, 2 * tex_size - 1e-9)
        ty = np.clip(dy + tex_size, 0, 2 * tex_size - 1e-9)
        x0, y0 = np.floor(tx).astype(int), np.floor(ty).astype(int)
        fx, fy = tx - x0, ty - y0
        obj = (texture[:, y0, x0] * (1 - fx) * (1 - fy) + texture[:, y0, x0 + 1] * fx * (1 - fy)
               + texture[:, y0 + 1, x0] * (1 - fx) * fy + texture[:, y0 + 1, x0 + 1] * fx * fy)
        clip[:, t] = background * (1 - a) + obj * a
        alphas[t] = a
    clip += spec.noise_sigma * rng.standard_normal(clip.shape)
    clip = np.clip(clip, 0, 1)

    vel = np.diff(centres, axis=0)                       # (T-1, 2)
    valid = (alphas[:-1] >= 1.0).astype(np.float32)[None]
    flow = np.zeros((2, T - 1, H, W))
    flow[0] = vel[:, 0, None, None] * valid[0]
    flow[1] = vel[:, 1, None, None] * valid[0]
    return SyntheticSample(clip.astype(np.float32), label, flow.astype(np.float32), valid)


def generate(spec: SyntheticSpec, count: int, stream: int = 0) -> SyntheticDataset:
    """``count`` class-balanced clips; ``stream`` selects an independent seed stream."""
    t0 = time.perf_counter()
    seeds = np.random.SeedSequence([spec.seed, stream]).spawn(count)
    samples = [_render_sample(spec, i % spec.num_classes, np.random.default_rng(s))
               for i, s in enumerate(seeds)]
    ds = SyntheticDataset(
        spec,
        np.stack([s.clip for s in samples]) if samples else np.zeros((0, 3, spec.frames, spec.height, spec.width), np.float32),
        np.array([s.label for s in samples], dtype=np.int64),
        np.stack([s.flow for s in samples]) if samples else np.zeros((0, 2, spec.frames - 1, spec.height, spec.width), np.float32),
        np.stack([s.valid for s in samples]) if samples else np.zeros((0, 1, spec.frames - 1, spec.height, spec.width), np.float32),
    )
    dt = time.perf_counter() - t0
    log.info("generated %d clips in %.2fs (%.1f clips/s), sha256 %s",
             count, dt, count / max(dt, 1e-9), ds.checksum()[:16])
    return ds


def generate_split(spec: SyntheticSpec, n_train: int, n_test: int) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Train and test sets from disjoint seed streams."""
    return generate(spec, n_train, stream=0), generate(spec, n_test, stream=1)


# --------------------------------------------------------------------------
# dataset files


def _read(buf: io.BytesIO, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise FormatError(f"truncated input: wanted {n} bytes, got {len(b)}")
    return b


def save_dataset(ds: SyntheticDataset) -> bytes:
    out = io.BytesIO()
    spec_json = json.dumps(asdict(ds.spec), sort_keys=True).encode()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<I", len(spec_json)))
    out.write(spec_json)
    out.write(struct.pack("<I", len(ds)))
    for i in range(len(ds)):
        flow = np.concatenate([ds.flow[i], ds.valid[i]], axis=0)
        rec = (ds.clips[i].astype("<f4").tobytes() + struct.pack("<I", int(ds.labels[i]))
               + flow.astype("<f4").tobytes())
        out.write(struct.pack("<I", len(rec)))
        out.write(rec)
    return out.getvalue()


def load_dataset(data: bytes) -> SyntheticDataset:
    buf = io.BytesIO(data)
    if _read(buf, 8) != DATASET_MAGIC:
        raise FormatError("bad dataset magic")
    (n,) = struct.unpack("<I", _read(buf, 4))
    try:
        spec = SyntheticSpec.from_dict(json.loads(_read(buf, n)))
    except (json.JSONDecodeError, TypeError) as e:
        raise FormatError(f"bad dataset header: {e}") from e
    (count,) = struct.unpack("<I", _read(buf, 4))
    T, H, W = spec.frames, spec.height, spec.width
    clip_n, flow_n = 3 * T * H * W, 3 * (T - 1) * H * W
    expect = 4 * (clip_n + 1 + flow_n)
    clips, labels, flows = [], [], []
    for _ in range(count):
        (length,) = struct.unpack("<I", _read(buf, 4))
        if length != expect:
            raise FormatError(f"record length {length}, expected {expect}")
        rec = _read(buf, length)
        clips.append(np.frombuffer(rec, "<f4", clip_n).reshape(3, T, H, W))
        labels.append(struct.unpack_from("<I", rec, 4 * clip_n)[0])
        flows.append(np.frombuffer(rec, "<f4", flow_n, 4 * (clip_n + 1)).reshape(3, T - 1, H, W))
    flows = np.stack(flows).astype(np.float32) if flows else np.zeros((0, 3, T - 1, H, W), np.float32)
    return SyntheticDataset(
        spec,
        np.stack(clips).astype(np.float32) if clips else np.zeros((0, 3, T, H, W), np.float32),
        np.array(labels, dtype=np.int64), np.ascontiguousarray(flows[:, :2]),
        np.ascontiguousarray(flows[:, 2:]))


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    stage: str = ""
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    meta = dict(ckpt.meta, stage=ckpt.stage)
    meta_json = json.dumps(meta, sort_keys=True).encode()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_json)))
    out.write(meta_json)
    out.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        nb = name.encode()
        arr = np.asarray(arr)
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.astype("<f4").tobytes())
    return out.getvalue()


def load_checkpoint(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)
    if _read(buf, 8) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, n = struct.unpack("<II", _read(buf, 8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        meta = json.loads(_read(buf, n))
    except json.JSONDecodeError as e:
        raise FormatError(f"bad checkpoint metadata: {e}") from e
    (count,) = struct.unpack("<I", _read(buf, 4))
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", _read(buf, 2))
        name = _read(buf, ln).decode()
        (ndim,) = struct.unpack("<B", _read(buf, 1))
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        size = int(np.prod(shape))
        params[name] = np.frombuffer(_read(buf, 4 * size), "<f4").reshape(shape).astype(np.float32)
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    return Checkpoint(params, stage=meta.pop("stage", ""), meta=meta)
