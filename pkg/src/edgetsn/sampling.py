"""Segment partitioning, snippet sampling and spatial crops."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InsufficientFramesError, ShapeError
from .tensor import DTYPE

CROP_STRATEGIES = ("center1", "tencrop", "random1", "random10")
CROP_COUNTS = {"center1": 1, "tencrop": 10, "random1": 1, "random10": 10}


@dataclass
class VideoClip:
    """Frames ``T x C x H x W`` with values in ``[0, 1]``."""

    frames: np.ndarray
    modality: str = "rgb"
    fps: float = 25.0
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=DTYPE)
        if self.frames.ndim != 4:
            raise ShapeError(f"clip frames must be T x C x H x W, got {self.frames.shape}")
        if self.modality not in ("rgb", "flow"):
            raise ContractError(f"unknown modality {self.modality!r}")
        if self.frames.size and (self.frames.min() < 0.0 or self.frames.max() > 1.0):
            raise ContractError("clip values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return self.frames.shape[1:]


@dataclass(frozen=True)
class SegmentPlan:
    k: int
    bounds: tuple[tuple[int, int], ...]

    @property
    def num_frames(self) -> int:
        return self.bounds[-1][1]


@dataclass
class SnippetBatch:
    """K snippets stacked along the first axis, plus their frame indices."""

    snippets: np.ndarray
    indices: tuple[int, ...]
    label: int | None = None
    crop: str = "none"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.snippets) != len(self.indices):
            raise ShapeError("one index per snippet is required")

    @property
    def k(self) -> int:
        return len(self.indices)


def plan_segments(num_frames: int, k: int) -> SegmentPlan:
    """Split ``[0, T)`` into K contiguous intervals; leading ones take the remainder."""
    if k < 1:
        raise ContractError("K must be >= 1")
    if num_frames < k:
        raise InsufficientFramesError(f"{num_frames} frames cannot fill {k} segments")
    base, extra = divmod(num_frames, k)
    bounds = []
    lo = 0
    for i in range(k):
        hi = lo + base + (1 if i < extra else 0)
        bounds.append((lo, hi))
        lo = hi
    return SegmentPlan(k, tuple(bounds))


def gather_snippet(clip: VideoClip, index: int, length: int = 1, temporal: bool = False) -> np.ndarray:
    """Snippet starting at ``index``.

    ``length`` consecutive frames are stacked along channels (the usual flow
    stacking) or, with ``temporal=True``, along a new time axis
    (``C x L x H x W``). Indices past the clip end are clamped.
    """
    if length == 1 and not temporal:
        return clip.frames[index]
    idx = np.minimum(np.arange(index, index + length), len(clip) - 1)
    frames = clip.frames[idx]
    if temporal:
        return np.ascontiguousarray(frames.transpose(1, 0, 2, 3))
    return frames.reshape((-1,) + frames.shape[2:])


def sample_training(clip: VideoClip, plan: SegmentPlan, rng_seed, length: int = 1,
                    temporal: bool = False, label: int | None = None) -> SnippetBatch:
    """One uniformly random frame per segment, reproducible for a given seed."""
    if plan.num_frames != len(clip):
        raise ContractError(f"plan covers {plan.num_frames} frames, clip has {len(clip)}")
    rng = np.random.default_rng(rng_seed)
    indices = tuple(int(rng.integers(lo, hi)) for lo, hi in plan.bounds)
    snippets = np.stack([gather_snippet(clip, i, length, temporal) for i in indices])
    return SnippetBatch(snippets, indices, label, crop="none")


def center_indices(num_frames: int, k: int) -> tuple[int, ...]:
    plan = plan_segments(num_frames, k)
    return tuple((lo + hi - 1) // 2 for lo, hi in plan.bounds)


def sample_testing(clip: VideoClip, k: int = 25, length: int = 1, temporal: bool = False,
                   label: int | None = None) -> SnippetBatch:
    """Center frame of each of the K segments."""
    indices = center_indices(len(clip), k)
    snippets = np.stack([gather_snippet(clip, i, length, temporal) for i in indices])
    return SnippetBatch(snippets, indices, label, crop="none")


def crop_offsets(height: int, width: int, out_h: int, out_w: int, strategy: str,
                 seed=None) -> list[tuple[int, int, bool]]:
    """``(top, left, mirrored)`` for each crop of ``strategy``."""
    if strategy not in CROP_STRATEGIES:
        raise ContractError(f"unknown crop strategy {strategy!r}; expected one of {CROP_STRATEGIES}")
    if not (1 <= out_h <= height and 1 <= out_w <= width):
        raise ContractError(f"crop {out_h}x{out_w} does not fit frame {height}x{width}")
    dy, dx = height - out_h, width - out_w
    center = (dy // 2, dx // 2, False)
    if strategy == "center1":
        return [center]
    if strategy == "tencrop":
        base = [(0, 0), (0, dx), (dy, 0), (dy, dx), (dy // 2, dx // 2)]
        return [(t, l, False) for t, l in base] + [(t, l, True) for t, l in base]
    rng = np.random.default_rng(seed)
    n = CROP_COUNTS[strategy]
    return [(int(rng.integers(0, dy + 1)), int(rng.integers(0, dx + 1)), False) for _ in range(n)]


def crop(frame, strategy: str, out_h: int, out_w: int, seed=None) -> list[np.ndarray]:
    """Crops of a ``(..., H, W)`` frame.

    ``tencrop`` returns the four corners and the center (TL, TR, BL, BR, C),
    followed by their horizontal mirrors in the same order.
    """
    frame = np.asarray(frame, dtype=DTYPE)
    if frame.ndim < 2:
        raise ShapeError("frame must have at least two axes")
    height, width = frame.shape[-2:]
    crops = []
    for top, left, mirrored in crop_offsets(height, width, out_h, out_w, strategy, seed):
        c = frame[..., top:top + out_h, left:left + out_w]
        if mirrored:
            c = c[..., ::-1]
        crops.append(np.ascontiguousarray(c))
    return crops
