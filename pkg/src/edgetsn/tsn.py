"""Temporal segment network: consensus, loss, gradients, training and inference.

A video-level prediction is ``softmax(G)`` where ``G`` is the consensus of
the raw snippet scores ``F(T_k; W)``. All K snippets share ``W``, so the
parameter gradient is the sum over snippet paths of
``dL/dG * dG/dF_k * dF_k/dW``; :func:`tsn_forward_backward` computes it in
one batched pass and :func:`snippet_path_gradients` /
:func:`aggregate_path_gradients` recompute it path by path.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import backbone as bb
from . import ops
from .errors import ContractError, ShapeError
from .graph import backward
from .sampling import (
    CROP_COUNTS,
    VideoClip,
    center_indices,
    crop_offsets,
    gather_snippet,
    plan_segments,
    sample_training,
)
from .tensor import DTYPE, as_tensor

log = logging.getLogger(__name__)

CONSENSUS_KINDS = ("average", "max", "weighted_average")


@dataclass(frozen=True)
class ConsensusSpec:
    kind: str = "average"
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in CONSENSUS_KINDS:
            raise ContractError(f"unknown consensus kind {self.kind!r}")
        if self.kind == "weighted_average":
            if self.weights is None:
                raise ContractError("weighted_average needs weights")
            w = np.asarray(self.weights, dtype=DTYPE)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ContractError("consensus weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", tuple(float(v) for v in w))
        elif self.weights is not None:
            raise ContractError(f"{self.kind} consensus takes no weights")

    def check_k(self, k: int) -> None:
        if k < 1:
            raise ContractError("need at least one snippet")
        if self.kind == "weighted_average" and len(self.weights) != k:
            raise ContractError(f"{len(self.weights)} consensus weights for {k} snippets")


def consensus(scores, spec: ConsensusSpec = ConsensusSpec()) -> np.ndarray:
    """Aggregate ``K x C`` snippet scores into one ``C`` vector."""
    scores = as_tensor(scores)
    if scores.ndim != 2:
        raise ShapeError(f"consensus expects K x C scores, got {scores.shape}")
    spec.check_k(scores.shape[0])
    if spec.kind == "average":
        return scores.mean(axis=0)
    if spec.kind == "max":
        return scores.max(axis=0)
    return np.asarray(spec.weights) @ scores


def consensus_jacobian(scores, spec: ConsensusSpec = ConsensusSpec()) -> np.ndarray:
    """``dG_c / dF_kc`` as a ``K x C`` array (the consensus is elementwise in C)."""
    scores = as_tensor(scores)
    k, c = scores.shape
    spec.check_k(k)
    if spec.kind == "average":
        return np.full((k, c), 1.0 / k)
    if spec.kind == "weighted_average":
        return np.repeat(np.asarray(spec.weights)[:, None], c, axis=1)
    jac = np.zeros((k, c))
    jac[np.argmax(scores, axis=0), np.arange(c)] = 1.0
    return jac


def one_hot(label: int, num_classes: int) -> np.ndarray:
    if not 0 <= label < num_classes:
        raise ContractError(f"label {label} outside [0, {num_classes})")
    y = np.zeros(num_classes, dtype=DTYPE)
    y[label] = 1.0
    return y


def _check_one_hot(y: np.ndarray) -> None:
    if y.ndim != 1 or np.count_nonzero(y == 1.0) != 1 or np.count_nonzero(y) != 1:
        raise ContractError("target must be a one-hot vector")


def tsn_loss(G, y) -> float:
    """``-sum_i y_i (G_i - log sum_j exp G_j)`` with log-sum-exp stabilization."""
    G = as_tensor(G)
    y = as_tensor(y)
    if G.shape != y.shape:
        raise ShapeError(f"scores {G.shape} and target {y.shape} differ in shape")
    _check_one_hot(y)
    return float(-np.sum(y * (G - ops.logsumexp(G))))


@dataclass
class LabeledSample:
    snippets: np.ndarray  # K x (snippet shape)
    y: np.ndarray

    def __post_init__(self):
        self.snippets = as_tensor(self.snippets)
        self.y = as_tensor(self.y)
        _check_one_hot(self.y)

    @property
    def label(self) -> int:
        return int(np.argmax(self.y))

    @property
    def k(self) -> int:
        return self.snippets.shape[0]


def build_tsn_graph(weights: bb.BackboneWeights, k: int, spec: ConsensusSpec = ConsensusSpec()):
    """Graph over inputs ``x`` (``B*K`` snippets) and ``y`` (``B x C`` targets).

    Returns ``(graph, consensus_ref)``; the graph output is the mean loss.
    """
    spec.check_k(k)
    graph, scores = bb.build_graph(weights)
    scores = graph.reshape(scores, (-1, k, weights.spec.num_classes))
    G = graph.consensus(scores, spec.kind, spec.weights)
    y = graph.input("y")
    graph.cross_entropy(G, y)
    return graph, G


def tsn_forward_backward(weights: bb.BackboneWeights, sample: LabeledSample,
                         spec: ConsensusSpec = ConsensusSpec()):
    """Loss and its gradient w.r.t. every backbone parameter for one video."""
    if sample.y.shape != (weights.spec.num_classes,):
        raise ShapeError("target length does not match the number of classes")
    bb.check_snippet(weights.spec, sample.snippets)
    graph, _ = build_tsn_graph(weights, sample.k, spec)
    loss = graph.forward(x=sample.snippets, y=sample.y[None])
    return float(loss), backward(graph)


def snippet_path_gradients(weights: bb.BackboneWeights, sample: LabeledSample,
                           spec: ConsensusSpec = ConsensusSpec()):
    """Backpropagate ``dL/dG`` separately through each snippet's copy of the backbone.

    Returns ``(upstream, jacobian, per_path)`` where ``per_path[k]`` maps each
    parameter to ``(dF(T_k)/dW)^T (dL/dG * dG/dF_k)``.
    """
    scores = bb.forward(weights, sample.snippets)
    G = consensus(scores, spec)
    upstream = ops.softmax(G) - sample.y  # dL/dG for one-hot y
    jac = consensus_jacobian(scores, spec)
    graph, _ = bb.build_graph(weights)
    per_path = []
    for k in range(sample.k):
        graph.forward(x=sample.snippets[k])
        per_path.append(backward(graph, upstream * jac[k]))
    return upstream, jac, per_path


def unweighted_path_gradients(weights: bb.BackboneWeights, sample: LabeledSample,
                              spec: ConsensusSpec = ConsensusSpec()):
    """Per-snippet gradients of ``dL/dG`` pushed through ``F(T_k)`` without the consensus factor."""
    scores = bb.forward(weights, sample.snippets)
    upstream = ops.softmax(consensus(scores, spec)) - sample.y
    graph, _ = bb.build_graph(weights)
    grads = []
    for k in range(sample.k):
        graph.forward(x=sample.snippets[k])
        grads.append(backward(graph, upstream))
    return grads


def aggregate_path_gradients(per_path: Sequence[dict]) -> dict[str, np.ndarray]:
    out = {name: np.zeros_like(g) for name, g in per_path[0].items()}
    for grads in per_path:
        for name, g in grads.items():
            out[name] += g
    return out


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.002
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ContractError("lr must be >= 0, batch_size >= 1, epochs >= 0")

    def make(self):
        if self.kind == "sgd":
            return SGD(self.lr, self.momentum)
        return Adam(self.lr, self.beta1, self.beta2, self.eps)


class SGD:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= self.lr * v


class Adam:
    def __init__(self, lr: float = 0.002, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainSettings:
    k: int = 3
    crop_size: int | None = None
    train_crop: str = "random1"
    record_wall_time: bool = False


def _snippet_layout(spec: bb.BackboneSpec, length: int | None = None) -> tuple[int, bool]:
    if spec.dims == 3:
        return (length or bb.min_clip_length(spec)), True
    return spec.stack, False


def _mirror_flow(c: np.ndarray, spec: bb.BackboneSpec) -> np.ndarray:
    # mirroring a flow field reverses its horizontal component: v -> 1 - v in [0,1] units
    c = c.copy()
    if spec.dims == 2:
        c[..., 0::2, :, :] = 1.0 - c[..., 0::2, :, :]
    else:
        c[..., 0, :, :, :] = 1.0 - c[..., 0, :, :, :]
    return c


def snippet_crops(spec: bb.BackboneSpec, snippet: np.ndarray, strategy: str,
                  size: tuple[int, int] | None, seed=None) -> np.ndarray:
    """Crops of one snippet stacked into an ``n x ...`` batch."""
    h, w = snippet.shape[-2:]
    out_h, out_w = size if size is not None else (h, w)
    crops = []
    for top, left, mirrored in crop_offsets(h, w, out_h, out_w, strategy, seed):
        c = snippet[..., top:top + out_h, left:left + out_w]
        if mirrored:
            c = c[..., ::-1]
            if spec.modality == "flow":
                c = _mirror_flow(c, spec)
        crops.append(c)
    return np.stack(crops)


def train(dataset: Sequence[tuple[VideoClip, int]], spec: bb.BackboneSpec,
          consensus_spec: ConsensusSpec = ConsensusSpec(),
          config: OptimizerConfig = OptimizerConfig(),
          settings: TrainSettings = TrainSettings(),
          log_path=None, weights: bb.BackboneWeights | None = None,
          skipped: Iterable[tuple[str, str]] = ()):
    """Train a TSN on ``(clip, label)`` pairs.

    Every epoch visits the videos in a seeded random order; each video
    contributes one random snippet per segment. Returns the trained weights
    and the list of per-epoch metric records (also appended to ``log_path``
    as JSON lines when given).
    """
    if not dataset:
        raise ContractError("empty training set")
    k = settings.k
    for clip, label in dataset:
        if len(clip) < k:
            raise ContractError(f"{clip.source_id or 'clip'} has {len(clip)} frames, fewer than K={k}")
        if not 0 <= label < spec.num_classes:
            raise ContractError(f"label {label} outside [0, {spec.num_classes})")
    consensus_spec.check_k(k)

    weights = bb.init_weights(spec, config.seed) if weights is None else weights.copy()
    graph, g_ref = build_tsn_graph(weights, k, consensus_spec)
    optimizer = config.make()
    length, temporal = _snippet_layout(spec)
    size = None if settings.crop_size is None else (settings.crop_size,) * 2

    log_fh = open(log_path, "a") if log_path is not None else None
    metrics = []
    try:
        for source, reason in skipped:
            log.warning("skipped %s: %s", source, reason)
            if log_fh:
                log_fh.write(json.dumps({"skipped": source, "reason": reason}) + "\n")
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
            total_loss = 0.0
            correct = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                xs, ys = [], []
                for i in idx:
                    clip, label = dataset[i]
                    seed = [config.seed, epoch, int(i)]
                    batch = sample_training(clip, plan_segments(len(clip), k), seed, length, temporal)
                    snippets = batch.snippets
                    if size is not None:
                        snippets = np.stack([
                            snippet_crops(spec, s, settings.train_crop, size, seed + [j])[0]
                            for j, s in enumerate(snippets)
                        ])
                    xs.append(snippets)
                    ys.append(one_hot(label, spec.num_classes))
                x = np.concatenate(xs)
                y = np.stack(ys)
                loss = float(graph.forward(x=x, y=y))
                G = graph.value(g_ref)
                correct += int(np.sum(np.argmax(G, axis=1) == np.argmax(y, axis=1)))
                total_loss += loss * len(idx)
                grads = backward(graph)
                optimizer.step(weights.params, grads)
            record = {
                "epoch": epoch,
                "mean_loss": total_loss / len(dataset),
                "train_top1": correct / len(dataset),
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if settings.record_wall_time else None,
                "seed": config.seed,
            }
            metrics.append(record)
            log.info("epoch %d loss %.4f top1 %.3f", epoch, record["mean_loss"], record["train_top1"])
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return weights, metrics


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def video_probabilities(snippet_scores, spec: ConsensusSpec = ConsensusSpec()) -> np.ndarray:
    """``softmax(consensus(scores))``: softmax is applied once, after consensus."""
    return ops.softmax(consensus(snippet_scores, spec))


def snippet_scores(weights: bb.BackboneWeights, clip: VideoClip, k: int = 25,
                   crop_strategy: str = "center1", crop_size: int | None = None,
                   seed=0) -> np.ndarray:
    """``K x C`` raw scores, each averaged over that snippet's crops.

    ``seed`` (an int or a sequence of ints) only matters for random crops.

    Snippets are processed one at a time; the crops of a snippet go through
    the backbone as one batch.
    """
    spec = weights.spec
    if clip.modality != spec.modality:
        raise ContractError(f"{spec.modality} backbone given a {clip.modality} clip")
    length, temporal = _snippet_layout(spec)
    size = None if crop_size is None else (crop_size, crop_size)
    entropy = [int(v) for v in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    out = np.empty((k, spec.num_classes), dtype=DTYPE)
    # gather lazily: only one snippet's crops are resident at a time
    for j, index in enumerate(center_indices(len(clip), k)):
        snippet = gather_snippet(clip, index, length, temporal)
        crops = snippet_crops(spec, snippet, crop_strategy, size, seed=entropy + [j])
        out[j] = bb.forward(weights, crops).mean(axis=0)
    return out


def predict_video(weights: bb.BackboneWeights, clip: VideoClip, k: int = 25,
                  crop_strategy: str = "center1", consensus_spec: ConsensusSpec = ConsensusSpec(),
                  crop_size: int | None = None, seed=0) -> np.ndarray:
    """Class probabilities for one video."""
    scores = snippet_scores(weights, clip, k, crop_strategy, crop_size, seed)
    return video_probabilities(scores, consensus_spec)


def fuse_streams(p_rgb, p_flow, w_rgb: float = 0.5) -> np.ndarray:
    """Convex combination of the two streams' probability vectors."""
    p_rgb = as_tensor(p_rgb)
    p_flow = as_tensor(p_flow)
    if p_rgb.shape != p_flow.shape:
        raise ShapeError(f"stream outputs differ in shape: {p_rgb.shape} vs {p_flow.shape}")
    if not 0.0 <= w_rgb <= 1.0:
        raise ContractError("w_rgb must lie in [0, 1]")
    return w_rgb * p_rgb + (1.0 - w_rgb) * p_flow


def crop_count(strategy: str) -> int:
    return CROP_COUNTS[strategy]
