"""On-disk formats, ingestion, manifests and run configuration.

A video lives in a directory of ``frame_%06d.ppm`` files. RGB frames are
8-bit PPM. Flow frames are 16-bit PPM whose first two channels hold the
normalized ``vx`` and ``vy`` and whose third channel is zero.

Raw videos may also arrive as ``.edgv`` files::

    b"EDGV"  u32 T  u32 C  u32 H  u32 W  f32 fps   (little endian)
    T*C*H*W uint8 samples, planar (frame-major, then channel)
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError
from .sampling import CROP_STRATEGIES, VideoClip
from .tensor import DTYPE
from .tsn import CONSENSUS_KINDS, ConsensusSpec, OptimizerConfig, TrainSettings

log = logging.getLogger(__name__)

EDGV_MAGIC = b"EDGV"
_EDGV_HEADER = struct.Struct("<4s4If")
FRAME_PATTERN = "frame_%06d.ppm"
FLOW_MAXVAL = 65535


# --------------------------------------------------------------------------
# PPM / PGM
# --------------------------------------------------------------------------

def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace separated header tokens, skipping comments."""
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def decode_pnm(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode P2/P3/P5/P6 bytes into ``(H x W x C integer array, maxval)``."""
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DataError(f"unsupported magic {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    try:
        tokens, pos = _header_tokens(buf[2:], 3)
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataError(f"bad PNM header: {exc}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataError(f"bad PNM dimensions {width}x{height} maxval {maxval}")
    count = width * height * channels
    body = buf[2 + pos:]
    if magic in (b"P2", b"P3"):
        try:
            values = np.array(body.split(), dtype=np.int64)
        except ValueError:
            raise DataError("non-numeric sample in ASCII PNM") from None
        if values.size < count:
            raise DataError(f"expected {count} samples, found {values.size}")
        values = values[:count]
    else:
        body = body[1:]  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        if len(body) < count * dtype.itemsize:
            raise DataError(f"expected {count * dtype.itemsize} data bytes, found {len(body)}")
        values = np.frombuffer(body, dtype=dtype, count=count).astype(np.int64)
    if values.min(initial=0) < 0 or values.max(initial=0) > maxval:
        raise DataError("sample outside [0, maxval]")
    return values.reshape(height, width, channels), maxval


def encode_pnm(pixels: np.ndarray, maxval: int = 255) -> bytes:
    """Binary P5 (one channel) or P6 (three channels) encoding."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
        raise ContractError(f"PNM needs H x W x 1 or H x W x 3 samples, got {pixels.shape}")
    if not 0 < maxval < 65536:
        raise ContractError("maxval must be in [1, 65535]")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise ContractError("sample outside [0, maxval]")
    height, width, channels = pixels.shape
    magic = b"P6" if channels == 3 else b"P5"
    dtype = ">u2" if maxval > 255 else "u1"
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, maxval)
    return header + pixels.astype(dtype).tobytes()


def read_frame(path) -> np.ndarray:
    """Frame file as a ``C x H x W`` float array scaled to ``[0, 1]``."""
    path = Path(path)
    try:
        pixels, maxval = decode_pnm(path.read_bytes())
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None
    return (pixels.transpose(2, 0, 1) / maxval).astype(DTYPE)


def write_frame(path, frame: np.ndarray, maxval: int = 255) -> None:
    """Write a ``C x H x W`` frame in ``[0, 1]``; two-channel frames get a zero third channel."""
    frame = np.asarray(frame, dtype=DTYPE)
    if frame.ndim != 3 or frame.shape[0] not in (1, 2, 3):
        raise ContractError(f"frame must be C x H x W with C in 1..3, got {frame.shape}")
    if frame.shape[0] == 2:
        frame = np.concatenate([frame, np.zeros_like(frame[:1])])
    q = np.rint(np.clip(frame, 0.0, 1.0) * maxval).astype(np.int64)
    Path(path).write_bytes(encode_pnm(q.transpose(1, 2, 0), maxval))


# --------------------------------------------------------------------------
# EDGV raw video
# --------------------------------------------------------------------------

def read_edgv(path) -> tuple[np.ndarray, float]:
    """``(T x C x H x W uint8 frames, fps)``."""
    buf = Path(path).read_bytes()
    if len(buf) < _EDGV_HEADER.size:
        raise DataError(f"{path}: truncated EDGV header")
    magic, t, c, h, w, fps = _EDGV_HEADER.unpack_from(buf)
    if magic != EDGV_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if min(t, c, h, w) < 1 or not fps > 0:
        raise DataError(f"{path}: bad EDGV header T={t} C={c} H={h} W={w} fps={fps}")
    frame_bytes = c * h * w
    body = buf[_EDGV_HEADER.size:]
    if len(body) < t * frame_bytes:
        raise DataError(f"{path}: frame {len(body) // frame_bytes} is truncated")
    frames = np.frombuffer(body, dtype=np.uint8, count=t * frame_bytes)
    return frames.reshape(t, c, h, w), float(fps)


def write_edgv(path, frames: np.ndarray, fps: float) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.dtype != np.uint8:
        raise ContractError("EDGV frames must be a T x C x H x W uint8 array")
    Path(path).write_bytes(_EDGV_HEADER.pack(EDGV_MAGIC, *frames.shape, fps) + frames.tobytes())


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    video_dir: str
    label: int
    class_name: str
    frame_count: int
    modality: str = "rgb"
    fps: float = 25.0
    vmax: float | None = None
    window_radius: int | None = None

    def __post_init__(self):
        if self.modality not in ("rgb", "flow"):
            raise DataError(f"unknown modality {self.modality!r}")
        if self.frame_count < 1:
            raise DataError(f"{self.video_dir}: frame_count must be >= 1")
        if self.label < 0:
            raise DataError(f"{self.video_dir}: negative label")

    def to_json(self) -> str:
        d = asdict(self)
        if self.modality == "rgb":
            d.pop("vmax")
            d.pop("window_radius")
        return json.dumps(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DataError(f"unknown manifest fields {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(f"bad manifest record: {exc}") from None


def validate_manifest(records: Sequence[ManifestRecord]) -> None:
    """Check label range and the class_name <-> label mapping."""
    by_label, by_name = {}, {}
    for r in records:
        if by_label.setdefault(r.label, r.class_name) != r.class_name:
            raise DataError(f"label {r.label} is both {by_label[r.label]!r} and {r.class_name!r}")
        if by_name.setdefault(r.class_name, r.label) != r.label:
            raise DataError(f"class {r.class_name!r} has labels {by_name[r.class_name]} and {r.label}")
    if by_label and max(by_label) >= len(by_label):
        raise DataError(f"labels must be 0..C-1, got {sorted(by_label)}")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc.msg}") from None
            records.append(ManifestRecord.from_dict(d))
    validate_manifest(records)
    return records


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def append_manifest(path, record: ManifestRecord) -> None:
    with open(path, "a") as fh:
        fh.write(record.to_json() + "\n")


def num_classes(records: Sequence[ManifestRecord]) -> int:
    return len({r.label for r in records})


def _resolve(video_dir: str, base) -> Path:
    p = Path(video_dir)
    return p if p.is_absolute() or base is None else Path(base) / p


def frame_files(video_dir) -> list[Path]:
    return sorted(Path(video_dir).glob("frame_*.ppm"))


def load_clip(record: ManifestRecord, base_dir=None) -> VideoClip:
    """Read a manifest entry's frames into a :class:`VideoClip`."""
    vdir = _resolve(record.video_dir, base_dir)
    files = frame_files(vdir)
    if len(files) != record.frame_count:
        raise DataError(f"{vdir}: manifest says {record.frame_count} frames, found {len(files)}")
    frames = np.stack([read_frame(f) for f in files])
    if record.modality == "flow":
        frames = frames[:, :2]
    return VideoClip(frames, modality=record.modality, fps=record.fps, source_id=record.video_dir)


def load_dataset(records: Sequence[ManifestRecord], base_dir=None):
    """``([(clip, label)], [(video_dir, reason)])``; unreadable videos are skipped."""
    dataset, skipped = [], []
    for r in records:
        try:
            dataset.append((load_clip(r, base_dir), r.label))
        except DataError as exc:
            log.warning("skipping %s: %s", r.video_dir, exc)
            skipped.append((r.video_dir, str(exc)))
    return dataset, skipped


def write_clip(clip: VideoClip, out_dir) -> None:
    """Store a clip as frame files (16-bit for flow, 8-bit for rgb)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maxval = FLOW_MAXVAL if clip.modality == "flow" else 255
    for t, frame in enumerate(clip.frames):
        write_frame(out / (FRAME_PATTERN % t), frame, maxval)


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------

def resample_indices(num_frames: int, src_fps: float, dst_fps: float) -> list[int]:
    """Nearest source index for every output frame at ``dst_fps``."""
    if not (src_fps > 0 and dst_fps > 0):
        raise ContractError("fps must be positive")
    ratio = src_fps / dst_fps
    count = max(1, int(math.floor(num_frames / ratio + 1e-9)))
    return [min(num_frames - 1, int(math.floor(j * ratio + 0.5))) for j in range(count)]


def _read_source(src) -> tuple[list, float | None]:
    """Frames (lazy loaders for directories) and the stored fps if known."""
    src = Path(src)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
        if not files:
            raise DataError(f"{src}: no .ppm/.pgm frames")
        return files, None
    if src.suffix.lower() == ".edgv" or src.read_bytes()[:4] == EDGV_MAGIC:
        frames, fps = read_edgv(src)
        return list(frames), fps
    raise DataError(f"{src}: not a frame directory or EDGV file")


def ingest(src, out_dir, fps: float = 25.0, src_fps: float | None = None, label: int = 0,
           class_name: str = "", manifest_base=None) -> ManifestRecord:
    """Resample a raw video to ``fps`` and store it as normalized PPM frames.

    ``src_fps`` is needed for frame directories (they carry no rate) and
    overrides the header of EDGV files. ``video_dir`` in the returned record
    is relative to ``manifest_base`` when given.
    """
    items, stored_fps = _read_source(src)
    rate = src_fps if src_fps is not None else stored_fps
    if rate is None:
        rate = fps
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    indices = resample_indices(len(items), rate, fps)
    channels = None
    for t, i in enumerate(indices):
        item = items[i]
        if isinstance(item, Path):
            frame = read_frame(item)
        else:
            frame = item.astype(DTYPE) / 255.0
        if channels is None:
            channels = frame.shape[0]
        elif frame.shape[0] != channels:
            raise DataError(f"frame {i} has {frame.shape[0]} channels, expected {channels}")
        if frame.shape[0] == 1:
            frame = np.repeat(frame, 3, axis=0)
        write_frame(out / (FRAME_PATTERN % t), frame)
    video_dir = os.path.relpath(out, manifest_base) if manifest_base is not None else str(out)
    return ManifestRecord(video_dir, label, class_name or f"class{label}", len(indices), "rgb", float(fps))


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    k_train: int = 3
    k_test: int = 25
    crop_strategy: str = "center1"
    train_crop: str = "random1"
    crop_size: int | None = None
    consensus: str = "average"
    consensus_weights: list[float] | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    window_radius: int = 3
    vmax: float = 8.0
    stack: int = 1
    widths: list[int] = field(default_factory=lambda: [8, 16, 16, 32])
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            try:
                self.optimizer = OptimizerConfig(**self.optimizer)
            except TypeError as exc:
                raise ContractError(f"bad optimizer config: {exc}") from None
        if self.k_train < 1 or self.k_test < 1:
            raise ContractError("K must be >= 1")
        for name in ("crop_strategy", "train_crop"):
            if getattr(self, name) not in CROP_STRATEGIES:
                raise ContractError(f"{name} must be one of {CROP_STRATEGIES}")
        if self.consensus not in CONSENSUS_KINDS:
            raise ContractError(f"consensus must be one of {CONSENSUS_KINDS}")
        self.widths = [int(w) for w in self.widths]

    def consensus_spec(self) -> ConsensusSpec:
        weights = None if self.consensus_weights is None else tuple(self.consensus_weights)
        return ConsensusSpec(self.consensus, weights)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(k=self.k_train, crop_size=self.crop_size, train_crop=self.train_crop)

    def optimizer_config(self) -> OptimizerConfig:
        """Optimizer settings with the run seed applied."""
        return OptimizerConfig(**{**asdict(self.optimizer), "seed": self.seed})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: {exc}") from None
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def top1_accuracy(predictions, labels) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest index)."""
    predictions = np.asarray(predictions, dtype=DTYPE)
    labels = np.asarray(labels)
    if predictions.ndim != 2 or labels.ndim != 1 or len(predictions) != len(labels):
        raise ContractError(
            f"need N x C predictions and N labels, got {predictions.shape} and {labels.shape}"
        )
    if len(labels) == 0:
        raise ContractError("no predictions")
    return float(np.mean(np.argmax(predictions, axis=1) == labels))
