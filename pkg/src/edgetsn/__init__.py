"""Temporal segment networks for small devices, in numpy.

Modules:

- ``ops`` / ``graph``: float64 primitives and a reverse-mode op graph
- ``backbone``: the toy ConvNet, its 2D to 3D inflation
- ``flow``: dense Lucas-Kanade optical flow
- ``sampling``: segments, snippets and crops
- ``tsn``: consensus, loss, training and inference
- ``memory``: modeled and measured test-time memory
- ``data`` / ``synthetic`` / ``cli``: files, datasets and the command line
"""
from .backbone import (
    BackboneSpec, BackboneWeights, default_spec, inflate_backbone, inflate_kernel, init_weights,
)
from .errors import (
    ContractError, DataError, EdgeTSNError, InsufficientFramesError, InvariantError, ShapeError,
    StateError,
)
from .flow import FlowField, clip_to_flow, lucas_kanade, normalize_flow
from .graph import OpGraph, backward, finite_difference_check
from .memory import MemoryReport, Protocol, measure_runtime_peak, profile_inference
from .sampling import VideoClip, center_indices, crop, plan_segments, sample_testing, sample_training
from .tsn import (
    ConsensusSpec, OptimizerConfig, consensus, fuse_streams, predict_video, train, tsn_loss,
)

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec", "BackboneWeights", "ConsensusSpec", "ContractError", "DataError",
    "EdgeTSNError", "FlowField", "InsufficientFramesError", "InvariantError", "MemoryReport",
    "OpGraph", "OptimizerConfig", "Protocol", "ShapeError", "StateError", "VideoClip",
    "backward", "center_indices", "clip_to_flow", "consensus", "crop", "default_spec",
    "finite_difference_check", "fuse_streams", "inflate_backbone", "inflate_kernel",
    "init_weights", "lucas_kanade", "measure_runtime_peak", "normalize_flow", "plan_segments",
    "predict_video", "profile_inference", "sample_testing", "sample_training", "train",
    "tsn_loss",
]
