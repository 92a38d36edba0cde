"""Temporal transformation algebra and spatial clip augmentations.

Temporal transforms are triples (speed exponent, playback direction, start
frame). Reversal is applied after speed subsampling, so the triple is a
canonical description of the clip. Spatial augmentations are sampled once per
clip and applied identically to every frame.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import cv2
import numpy as np

SPEED_EXPONENTS = (0, 1, 2, 3)  # playback factors 1x, 2x, 4x, 8x


class Direction(enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


class OverlapOrder(enum.IntEnum):
    P_BEFORE_Q = 0
    OVERLAPPING = 1
    P_AFTER_Q = 2


@dataclass(frozen=True)
class TemporalTransform:
    """One temporal clip transform: speed 2**speed_exponent, direction, start."""

    speed_exponent: int
    direction: Direction
    start_frame: int

    def __post_init__(self):
        if self.speed_exponent not in SPEED_EXPONENTS:
            raise ValueError(f"speed_exponent must be in {SPEED_EXPONENTS}")
        if self.start_frame < 0:
            raise ValueError("start_frame must be >= 0")

    @property
    def stride(self) -> int:
        return 2 ** self.speed_exponent

    def extent(self, clip_len: int) -> int:
        """Number of source frames the clip spans."""
        return clip_len * self.stride

    def span(self, clip_len: int) -> tuple[int, int]:
        """Half-open source-frame interval [start, start + extent)."""
        return self.start_frame, self.start_frame + self.extent(clip_len)


@dataclass(frozen=True)
class RelativeTransform:
    """Canonical descriptor of an ordered pair (tau_p, tau_q).

    delta_start is measured in source frames so it is comparable across
    speeds. Equality is exact component-wise tuple equality.
    """

    speed_pair: tuple[int, int]
    direction_pair: tuple[Direction, Direction]
    delta_start: int

    def swapped(self) -> "RelativeTransform":
        return RelativeTransform(
            speed_pair=self.speed_pair[::-1],
            direction_pair=self.direction_pair[::-1],
            delta_start=-self.delta_start,
        )


def relative_descriptor(tau_p: TemporalTransform, tau_q: TemporalTransform) -> RelativeTransform:
    """Descriptor of the relative transformation between two clips of one video."""
    return RelativeTransform(
        speed_pair=(tau_p.speed_exponent, tau_q.speed_exponent),
        direction_pair=(tau_p.direction, tau_q.direction),
        delta_start=tau_q.start_frame - tau_p.start_frame,
    )


def frame_indices(tau: TemporalTransform, clip_len: int) -> np.ndarray:
    """Source frame indices of the clip, descending when reversed."""
    if clip_len < 1:
        raise ValueError("clip_len must be >= 1")
    idx = tau.start_frame + tau.stride * np.arange(clip_len)
    if tau.direction is Direction.REVERSE:
        idx = idx[::-1]
    return idx.copy()


def apply_temporal(video: np.ndarray, tau: TemporalTransform, clip_len: int) -> np.ndarray:
    """Gather the clip frames selected by tau from a (T, H, W, C) video."""
    n_frames = video.shape[0]
    if tau.start_frame + tau.extent(clip_len) > n_frames:
        raise ValueError("transform exceeds video length")
    return video[frame_indices(tau, clip_len)]


def overlap_order_label(
    tau_p: TemporalTransform, tau_q: TemporalTransform, clip_len: int
) -> OverlapOrder:
    """Three-way label of the source-frame intervals of the two clips."""
    p_lo, p_hi = tau_p.span(clip_len)
    q_lo, q_hi = tau_q.span(clip_len)
    if p_hi <= q_lo:
        return OverlapOrder.P_BEFORE_Q
    if q_hi <= p_lo:
        return OverlapOrder.P_AFTER_Q
    return OverlapOrder.OVERLAPPING


def feasible_speeds(video_len: int, clip_len: int, allowed: tuple[int, ...]) -> tuple[int, ...]:
    """Allowed speed exponents whose extent fits into the video."""
    return tuple(k for k in allowed if clip_len * 2 ** k <= video_len)


def sample_temporal_transform(
    rng: np.random.Generator,
    video_len: int,
    clip_len: int,
    allowed_speeds: tuple[int, ...] = SPEED_EXPONENTS,
    allow_reverse: bool = True,
) -> TemporalTransform:
    """Sample a transform uniformly over (feasible speed, direction, start)."""
    if video_len < clip_len:
        raise ValueError("video too short")
    speeds = feasible_speeds(video_len, clip_len, allowed_speeds)
    if not speeds:
        raise ValueError("video too short")
    k = int(rng.choice(speeds))
    directions = (Direction.FORWARD, Direction.REVERSE) if allow_reverse else (Direction.FORWARD,)
    direction = directions[int(rng.integers(len(directions)))]
    start = int(rng.integers(0, video_len - clip_len * 2 ** k + 1))
    return TemporalTransform(speed_exponent=k, direction=direction, start_frame=start)


@dataclass(frozen=True)
class SpatialAugmentation:
    """Per-clip spatial/color augmentation, identical across frames."""

    crop_box: tuple[int, int, int, int]  # top, left, height, width
    horizontal_flip: bool
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0

    def __post_init__(self):
        top, left, height, width = self.crop_box
        if height < 1 or width < 1 or top < 0 or left < 0:
            raise ValueError("invalid crop box")


def apply_spatial(
    video: np.ndarray, sigma: SpatialAugmentation, out_size: int | None = None
) -> np.ndarray:
    """Crop, flip and color-jitter a (T, H, W, C) clip; values clamped to [0, 1].

    The crop is resized to out_size x out_size (defaults to the crop size when
    square). All parameters are applied identically to every frame.
    """
    t_len, height, width = video.shape[:3]
    top, left, ch, cw = sigma.crop_box
    if top + ch > height or left + cw > width:
        raise ValueError("crop box outside frame")
    clip = video[:, top : top + ch, left : left + cw]
    if out_size is None:
        if ch != cw:
            raise ValueError("out_size required for non-square crops")
        out_size = ch
    if (ch, cw) != (out_size, out_size):
        frames = [
            cv2.resize(f, (out_size, out_size), interpolation=cv2.INTER_LINEAR)
            for f in clip.astype(np.float32)
        ]
        clip = np.stack(frames)
        if clip.ndim == 3:  # cv2 drops singleton channel axes
            clip = clip[..., None]
    else:
        clip = clip.astype(np.float32)
    if sigma.horizontal_flip:
        clip = clip[:, :, ::-1]
    clip = (clip - 0.5) * sigma.contrast_scale + 0.5 + sigma.brightness_shift
    return np.clip(clip, 0.0, 1.0).astype(np.float32)


def sample_spatial_augmentation(
    rng: np.random.Generator,
    frame_hw: tuple[int, int],
    min_scale: float = 0.6,
    jitter: bool = True,
) -> SpatialAugmentation:
    """Random crop box (area scale >= min_scale), flip and color jitter."""
    height, width = frame_hw
    scale = float(rng.uniform(min_scale, 1.0))
    ch = max(8, int(round(height * scale)))
    cw = max(8, int(round(width * scale)))
    top = int(rng.integers(0, height - ch + 1))
    left = int(rng.integers(0, width - cw + 1))
    return SpatialAugmentation(
        crop_box=(top, left, ch, cw),
        horizontal_flip=bool(rng.integers(2)),
        brightness_shift=float(rng.uniform(-0.2, 0.2)) if jitter else 0.0,
        contrast_scale=float(rng.uniform(0.8, 1.25)) if jitter else 1.0,
    )


def relative_spatial_descriptor(
    sigma_p: SpatialAugmentation, sigma_q: SpatialAugmentation
) -> tuple:
    """Descriptor of the relative spatial transform (crop offset delta, flip pair)."""
    dp = (
        sigma_q.crop_box[0] - sigma_p.crop_box[0],
        sigma_q.crop_box[1] - sigma_p.crop_box[1],
    )
    return dp, (sigma_p.horizontal_flip, sigma_q.horizontal_flip)
