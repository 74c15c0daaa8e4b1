"""Generated motion dataset for the two-stream experiments.

Each motion video shows a randomly textured square translating at constant
speed in one of four directions over a flat background. The texture, speed
and perpendicular offset are drawn independently of the class, and the
trajectory is centered on the frame midpoint, so the set of positions a
video visits does not depend on its direction. Single frames therefore carry
no class information once scores are averaged over segments; only the
motion does.

Optional appearance classes show a static square whose dominant color is the
class signal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import shift as nd_shift

from .errors import ContractError
from .sampling import VideoClip

MOTION_CLASSES = ("right", "left", "down", "up")
_DIRECTIONS = {"right": (0.0, 1.0), "left": (0.0, -1.0), "down": (1.0, 0.0), "up": (-1.0, 0.0)}
STATIC_COLORS = ("red", "green", "blue")


@dataclass(frozen=True)
class SyntheticConfig:
    size: int = 32
    frames: int = 30
    square: int = 8
    speed: tuple[float, float] = (0.5, 0.7)
    jitter: int = 4
    fps: float = 25.0

    def __post_init__(self):
        travel = self.speed[1] * (self.frames - 1)
        if travel + self.square > self.size or self.square + 2 * self.jitter > self.size:
            raise ContractError("square would leave the frame; shrink speed, jitter or frames")


@dataclass
class SyntheticVideo:
    clip: VideoClip
    label: int
    class_name: str


def class_names(static_classes: int = 0) -> list[str]:
    if not 0 <= static_classes <= len(STATIC_COLORS):
        raise ContractError(f"at most {len(STATIC_COLORS)} static classes")
    return list(MOTION_CLASSES) + [f"static_{c}" for c in STATIC_COLORS[:static_classes]]


def _render(rng, cfg: SyntheticConfig, positions, color_bias=None) -> np.ndarray:
    """Frames of a textured square whose top-left corner follows ``positions``."""
    s, n = cfg.size, cfg.square
    background = rng.uniform(0.1, 0.3, size=(3, 1, 1))
    texture = rng.uniform(0.35, 1.0, size=(3, n, n))
    if color_bias is not None:
        texture *= 0.3
        texture[color_bias] = rng.uniform(0.7, 1.0, size=(n, n))
    frames = np.empty((len(positions), 3, s, s))
    for t, (y, x) in enumerate(positions):
        iy, ix = int(np.floor(y)), int(np.floor(x))
        sprite = np.zeros((4, s + 2, s + 2))  # rgb + alpha, one pixel margin
        top, left = iy + 1, ix + 1
        sprite[:3, top:top + n, left:left + n] = texture
        sprite[3, top:top + n, left:left + n] = 1.0
        sprite = nd_shift(sprite, (0.0, y - iy, x - ix), order=1, mode="constant")[:, 1:-1, 1:-1]
        alpha = sprite[3:]
        frames[t] = background * (1.0 - alpha) + sprite[:3]
    return np.clip(frames, 0.0, 1.0)


def make_video(label: int, rng, cfg: SyntheticConfig = SyntheticConfig(),
               static_classes: int = 0) -> SyntheticVideo:
    names = class_names(static_classes)
    if not 0 <= label < len(names):
        raise ContractError(f"label {label} outside [0, {len(names)})")
    name = names[label]
    mid = (cfg.size - cfg.square) / 2.0
    t = np.arange(cfg.frames) - (cfg.frames - 1) / 2.0
    offset = rng.uniform(-cfg.jitter, cfg.jitter)
    if name in _DIRECTIONS:
        dy, dx = _DIRECTIONS[name]
        speed = rng.uniform(*cfg.speed)
        ys = mid + dy * speed * t + (offset if dy == 0 else 0.0)
        xs = mid + dx * speed * t + (offset if dx == 0 else 0.0)
        frames = _render(rng, cfg, list(zip(ys, xs)))
    else:
        pos = (mid + offset, mid + rng.uniform(-cfg.jitter, cfg.jitter))
        frames = _render(rng, cfg, [pos] * cfg.frames, STATIC_COLORS.index(name[len("static_"):]))
    clip = VideoClip(frames, "rgb", cfg.fps, f"{name}_{label}")
    return SyntheticVideo(clip, label, name)


def make_dataset(per_class: int, seed: int = 0, cfg: SyntheticConfig = SyntheticConfig(),
                 static_classes: int = 0) -> list[SyntheticVideo]:
    """``per_class`` videos of every class, in label-interleaved order."""
    if per_class < 1:
        raise ContractError("per_class must be >= 1")
    n = len(class_names(static_classes))
    videos = []
    for i in range(per_class):
        for label in range(n):
            rng = np.random.default_rng([seed, label, i])
            v = make_video(label, rng, cfg, static_classes)
            v.clip.source_id = f"{v.class_name}_{i:04d}"
            videos.append(v)
    return videos


def to_uint8(clip: VideoClip) -> np.ndarray:
    return np.rint(clip.frames * 255.0).astype(np.uint8)
