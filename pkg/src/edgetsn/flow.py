"""Dense single-scale Lucas-Kanade optical flow.

For every pixel the 2x2 normal equations

    [sum Ix*Ix  sum Ix*Iy] [vx]     [sum Ix*It]
    [sum Ix*Iy  sum Iy*Iy] [vy] = - [sum Iy*It]

are summed over a ``(2r+1) x (2r+1)`` window and solved in closed form.
Spatial gradients are central differences of the mean of the two frames,
``It`` is the forward difference ``frame_b - frame_a``. ``vx`` is the
displacement along columns and ``vy`` along rows, in pixels per frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ContractError, ShapeError
from .sampling import VideoClip
from .tensor import DTYPE

SINGULAR_EIGENVALUE = 1e-6
DEFAULT_VMAX = 8.0
DEFAULT_WINDOW_RADIUS = 3


@dataclass
class FlowField:
    vx: np.ndarray
    vy: np.ndarray
    window_radius: int
    vmax: float | None = None  # set once normalized

    def __post_init__(self):
        if self.vx.shape != self.vy.shape:
            raise ShapeError("vx and vy must have the same shape")

    @property
    def normalized(self) -> bool:
        return self.vmax is not None

    def stack(self) -> np.ndarray:
        """``2 x H x W`` array (x component first)."""
        return np.stack([self.vx, self.vy])


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # central differences inside, one-sided on the border
    gy, gx = np.gradient(img)
    return gx, gy


def _window_sum(a: np.ndarray, radius: int) -> np.ndarray:
    size = 2 * radius + 1
    return uniform_filter(a, size=size, mode="constant", cval=0.0) * (size * size)


def lucas_kanade(frame_a, frame_b, window_radius: int = DEFAULT_WINDOW_RADIUS) -> FlowField:
    """Per-pixel flow from ``frame_a`` to ``frame_b`` (both ``H x W`` grayscale)."""
    a = np.asarray(frame_a, dtype=DTYPE)
    b = np.asarray(frame_b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError(f"frames must be H x W grayscale, got {a.shape}")
    if window_radius < 1:
        raise ContractError("window_radius must be >= 1")

    ix, iy = _gradients(0.5 * (a + b))
    it = b - a
    sxx = _window_sum(ix * ix, window_radius)
    sxy = _window_sum(ix * iy, window_radius)
    syy = _window_sum(iy * iy, window_radius)
    sxt = _window_sum(ix * it, window_radius)
    syt = _window_sum(iy * it, window_radius)

    # smaller eigenvalue of the symmetric structure tensor
    half_tr = 0.5 * (sxx + syy)
    disc = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
    lam_min = half_tr - disc
    ok = lam_min >= SINGULAR_EIGENVALUE

    det = np.where(ok, sxx * syy - sxy * sxy, 1.0)
    vx = np.where(ok, (-syy * sxt + sxy * syt) / det, 0.0)
    vy = np.where(ok, (sxy * sxt - sxx * syt) / det, 0.0)
    # static scenes give It == 0 exactly; keep the zero exact (no -0.0 surprises)
    vx[vx == 0.0] = 0.0
    vy[vy == 0.0] = 0.0
    return FlowField(vx, vy, window_radius)


def normalize_flow(field: FlowField, vmax: float = DEFAULT_VMAX) -> FlowField:
    """Clamp each component to ``[-vmax, vmax]`` and map it affinely onto ``[0, 1]``."""
    if not vmax > 0:
        raise ContractError("vmax must be positive")
    if field.normalized:
        raise ContractError("field is already normalized")

    def norm(v):
        return (np.clip(v, -vmax, vmax) + vmax) / (2.0 * vmax)

    return FlowField(norm(field.vx), norm(field.vy), field.window_radius, float(vmax))


def denormalize(values, vmax: float) -> np.ndarray:
    return np.asarray(values, dtype=DTYPE) * (2.0 * vmax) - vmax


def to_gray(frame: np.ndarray) -> np.ndarray:
    """Unweighted channel mean of a ``C x H x W`` frame."""
    return frame.mean(axis=0)


def clip_to_flow(clip: VideoClip, window_radius: int = DEFAULT_WINDOW_RADIUS,
                 vmax: float = DEFAULT_VMAX) -> VideoClip:
    """Flow clip with ``T-1`` two-channel frames in ``[0, 1]``."""
    if clip.modality != "rgb":
        raise ContractError("clip_to_flow expects an rgb clip")
    if len(clip) < 2:
        raise ContractError("need at least two frames to compute flow")
    gray = [to_gray(f) for f in clip.frames]
    out = np.empty((len(clip) - 1, 2) + gray[0].shape, dtype=DTYPE)
    for t in range(len(clip) - 1):
        out[t] = normalize_flow(lucas_kanade(gray[t], gray[t + 1], window_radius), vmax).stack()
    return VideoClip(out, modality="flow", fps=clip.fps, source_id=clip.source_id)
