"""Synthetic motion-defined-class video dataset and the FVC container format.

Each video shows one sprite moving over a static textured background. The
class label is carried entirely by the motion pattern (trajectory shape +
speed profile); sprite shape, color, size, start position and the background
are randomized independently of the class.

FVC ("frame-volume container") layout, all integers little-endian:

    bytes 0..3    magic b"FVC1"
    bytes 4..23   uint32 N, T, H, W, C
    byte  24      dtype code 0x00 (= uint8)
    then          N*T*H*W*C raw pixel bytes, row-major (video, t, row, col, ch)
    then          N uint16 class labels

Total file length is 25 + N*T*H*W*C + 2*N bytes; the loader rejects any
other length or magic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"FVC1"
DTYPE_U8 = 0x00
HEADER_LEN = 25

# background drift in pixels per source frame (diagonal, shared by all videos)
BACKGROUND_DRIFT = 0.25

TRAJECTORIES = ("linear", "circular", "zigzag", "bounce")
SPEED_PROFILES = ("constant", "accelerating")

# Fixed heading per trajectory (radians); headings are not a class axis for
# the default 8-class set.
_HEADINGS = {"linear": 0.35, "circular": 0.0, "zigzag": 1.2, "bounce": 0.85}


@dataclass(frozen=True)
class MotionClassSpec:
    class_id: int
    trajectory: str
    speed_profile: str
    heading: float


def default_classes(n_classes: int = 8) -> list[MotionClassSpec]:
    """The default class set: trajectories x speed profiles."""
    specs = []
    for profile in SPEED_PROFILES:
        for traj in TRAJECTORIES:
            specs.append(
                MotionClassSpec(
                    class_id=len(specs),
                    trajectory=traj,
                    speed_profile=profile,
                    heading=_HEADINGS[traj],
                )
            )
    if n_classes > len(specs):
        raise ValueError(f"at most {len(specs)} distinct motion classes available")
    return specs[:n_classes]


def _speed_schedule(profile: str, n_frames: int) -> np.ndarray:
    """Per-frame displacement magnitude in pixels."""
    if profile == "constant":
        return np.full(n_frames, 2.4)
    # accelerating: ramps from near rest past the constant profile's speed.
    # The two profiles also differ in mean speed (2.4 vs ~1.65), so they are
    # separable from time-averaged motion statistics as well as from the
    # acceleration pattern itself.
    return np.linspace(0.1, 3.2, n_frames)


def _trajectory_positions(spec: MotionClassSpec, n_frames: int, h: int, w: int,
                          start: np.ndarray) -> np.ndarray:
    """Sprite center positions, shape (n_frames, 2) as (row, col) floats."""
    speeds = _speed_schedule(spec.speed_profile, n_frames)
    pos = np.empty((n_frames, 2))
    if spec.trajectory == "linear":
        d = np.array([np.sin(spec.heading), np.cos(spec.heading)])
        steps = np.concatenate([[0.0], np.cumsum(speeds[:-1])])
        pos = start[None, :] + steps[:, None] * d[None, :]
        pos[:, 0] %= h
        pos[:, 1] %= w
    elif spec.trajectory == "circular":
        radius = min(h, w) * 0.3
        center = np.array([h / 2.0, w / 2.0])
        # angular speed such that arc length per frame matches the schedule
        dtheta = speeds / radius
        theta = spec.heading + np.concatenate([[0.0], np.cumsum(dtheta[:-1])])
        phase = np.arctan2(start[0] - center[0], start[1] - center[1])
        pos[:, 0] = center[0] + radius * np.sin(theta + phase)
        pos[:, 1] = center[1] + radius * np.cos(theta + phase)
    elif spec.trajectory == "zigzag":
        d = np.array([np.sin(spec.heading), np.cos(spec.heading)])
        perp = np.array([-d[1], d[0]])
        steps = np.concatenate([[0.0], np.cumsum(speeds[:-1])])
        # square-wave lateral component flips every 8 travelled pixels
        lateral = 4.0 * np.sign(np.sin(steps * (np.pi / 8.0) + 1e-9))
        pos = start[None, :] + steps[:, None] * d[None, :] + lateral[:, None] * perp[None, :]
        pos[:, 0] %= h
        pos[:, 1] %= w
    elif spec.trajectory == "bounce":
        d = np.array([np.sin(spec.heading), np.cos(spec.heading)])
        p = start.astype(float).copy()
        v = d.copy()
        for t in range(n_frames):
            pos[t] = p
            p = p + v * speeds[t]
            for axis, size in ((0, h), (1, w)):
                if p[axis] < 0:
                    p[axis] = -p[axis]
                    v[axis] = -v[axis]
                elif p[axis] > size - 1:
                    p[axis] = 2 * (size - 1) - p[axis]
                    v[axis] = -v[axis]
    else:
        raise ValueError(f"unknown trajectory {spec.trajectory!r}")
    return pos


def _sprite_mask(shape: str, size: int) -> np.ndarray:
    """Boolean (size, size) footprint of the sprite."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    c = (size - 1) / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disc":
        return (yy - c) ** 2 + (xx - c) ** 2 <= c ** 2 + 0.5
    if shape == "diamond":
        return np.abs(yy - c) + np.abs(xx - c) <= c + 0.25
    if shape == "cross":
        third = max(1, size // 3)
        m = np.zeros((size, size), dtype=bool)
        m[third : size - third, :] = True
        m[:, third : size - third] = True
        return m
    raise ValueError(f"unknown sprite shape {shape!r}")


_SPRITE_SHAPES = ("square", "disc", "diamond", "cross")


def _background(rng: np.random.Generator, h: int, w: int, c: int) -> np.ndarray:
    """Static low-frequency texture, uint8."""
    coarse = rng.uniform(40, 180, size=(max(2, h // 8), max(2, w // 8), c))
    reps = (int(np.ceil(h / coarse.shape[0])), int(np.ceil(w / coarse.shape[1])), 1)
    tex = np.kron(coarse, np.ones((reps[0], reps[1], 1)))[:h, :w]
    # cheap smoothing to avoid hard tile edges
    tex = 0.5 * tex + 0.25 * np.roll(tex, 1, axis=0) + 0.25 * np.roll(tex, 1, axis=1)
    return tex.astype(np.uint8)


def render_video(rng: np.random.Generator, spec: MotionClassSpec, t: int, h: int, w: int,
                 c: int = 3) -> np.ndarray:
    """One (T, H, W, C) uint8 video; appearance is sampled independently of class."""
    max_sprite = min(h, w) // 3
    if max_sprite < 4:
        raise ValueError("sprite larger than frame")
    size = int(rng.integers(min(7, max_sprite), max_sprite + 1))
    shape = _SPRITE_SHAPES[int(rng.integers(len(_SPRITE_SHAPES)))]
    color = rng.integers(120, 256, size=c).astype(np.uint8)
    start = np.array([rng.uniform(size, h - size), rng.uniform(size, w - size)])

    bg = _background(rng, h, w, c)
    mask = _sprite_mask(shape, size)
    pos = _trajectory_positions(spec, t, h, w, start)

    # The background drifts diagonally at a fixed slow rate shared by every
    # video. This makes absolute time observable from texture phase, so
    # playback speed, direction and clip start offsets are recoverable from
    # pixels without being confounded with the class's intrinsic motion.
    video = np.empty((t, h, w, c), dtype=np.uint8)
    for frame_idx in range(t):
        shift = int(round(BACKGROUND_DRIFT * frame_idx))
        video[frame_idx] = np.roll(bg, (shift, shift), axis=(0, 1))
    half = size // 2
    for frame, (py, px) in zip(video, pos):
        top = int(round(py)) - half
        left = int(round(px)) - half
        y0, y1 = max(0, top), min(h, top + size)
        x0, x1 = max(0, left), min(w, left + size)
        if y0 >= y1 or x0 >= x1:
            continue
        sub = mask[y0 - top : y1 - top, x0 - left : x1 - left]
        frame[y0:y1, x0:x1][sub] = color
    return video


def generate_dataset(
    rng: np.random.Generator,
    n_classes: int = 8,
    n_per_class: int = 100,
    t: int = 128,
    h: int = 32,
    w: int = 32,
    c: int = 3,
) -> tuple[np.ndarray, np.ndarray]:
    """Generate (videos uint8 (N,T,H,W,C), labels uint16 (N,)), class balanced."""
    if t < 128:
        raise ValueError("need T >= 128 so all playback speeds are feasible")
    specs = default_classes(n_classes)
    videos = np.empty((n_classes * n_per_class, t, h, w, c), dtype=np.uint8)
    labels = np.empty(n_classes * n_per_class, dtype=np.uint16)
    i = 0
    for spec in specs:
        for _ in range(n_per_class):
            # per-video child seed so generation could be parallelized
            child = np.random.default_rng(rng.integers(2 ** 63))
            videos[i] = render_video(child, spec, t, h, w, c)
            labels[i] = spec.class_id
            i += 1
    return videos, labels


def write_fvc(path, videos: np.ndarray, labels: np.ndarray) -> None:
    """Write the bit-exact FVC container."""
    if videos.dtype != np.uint8 or videos.ndim != 5:
        raise ValueError("videos must be uint8 with shape (N, T, H, W, C)")
    n, t, h, w, c = videos.shape
    if labels.shape != (n,):
        raise ValueError("labels must have shape (N,)")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5I", n, t, h, w, c))
        f.write(bytes([DTYPE_U8]))
        f.write(np.ascontiguousarray(videos).tobytes())
        f.write(labels.astype("<u2").tobytes())


def load_fvc(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an FVC file back into (videos, labels); strict on magic and length."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < HEADER_LEN or data[:4] != MAGIC:
        raise ValueError("not an FVC file (bad magic)")
    n, t, h, w, c = struct.unpack("<5I", data[4:24])
    if data[24] != DTYPE_U8:
        raise ValueError("unsupported FVC dtype")
    expected = HEADER_LEN + n * t * h * w * c + 2 * n
    if len(data) != expected:
        raise ValueError(f"corrupt FVC file: expected {expected} bytes, got {len(data)}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=n * t * h * w * c, offset=HEADER_LEN)
    videos = pixels.reshape(n, t, h, w, c).copy()
    labels = np.frombuffer(data, dtype="<u2", count=n, offset=HEADER_LEN + pixels.size)
    return videos, labels.astype(np.uint16).copy()


def split_train_test(videos: np.ndarray, labels: np.ndarray, train_frac: float = 0.8):
    """Deterministic stratified split: first train_frac of each class is train."""
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        cut = int(round(len(idx) * train_frac))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    tr = np.array(train_idx, dtype=int)
    te = np.array(test_idx, dtype=int)
    return (videos[tr], labels[tr]), (videos[te], labels[te])
