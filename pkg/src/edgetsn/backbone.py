"""Snippet-level ConvNet in 2D and inflated-3D form.

A backbone is a plain chain of layers (conv, relu, maxpool, gap, affine)
described by a :class:`BackboneSpec`. The same spec drives three things:
direct inference (:func:`forward`), a trainable :class:`~edgetsn.graph.OpGraph`
(:func:`build_graph`) and symbolic memory accounting
(:mod:`edgetsn.memory`).

Inflation turns every ``N x N`` kernel into an ``Nt x N x N`` kernel by
repeating it along time and dividing by ``Nt``, so a clip whose frames are
all identical produces the same response as the 2D network on one frame.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .errors import ContractError, DataError, ShapeError
from .graph import OpGraph
from .tensor import DTYPE, as_tensor, load_tensor, save_tensor

LAYER_KINDS = ("conv", "relu", "maxpool", "gap", "affine")
MODALITY_CHANNELS = {"rgb": 3, "flow": 2}


@dataclass(frozen=True)
class Layer:
    """One layer of the chain.

    For ``conv``, ``kernel`` is the spatial size N and ``out_channels`` the
    number of filters. For ``maxpool``, ``kernel`` is the window. The ``t_*``
    fields only matter for 3D specs.
    """

    kind: str
    name: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    t_kernel: int = 1
    t_stride: int = 1
    t_padding: int = 0


@dataclass(frozen=True)
class BackboneSpec:
    layers: tuple[Layer, ...]
    num_classes: int
    modality: str = "rgb"
    dims: int = 2
    stack: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    @property
    def in_channels(self) -> int:
        base = MODALITY_CHANNELS[self.modality]
        # 2D flow snippets stack consecutive fields along channels
        return base * self.stack if self.dims == 2 else base

    def validate(self) -> None:
        if self.modality not in MODALITY_CHANNELS:
            raise ContractError(f"unknown modality {self.modality!r}")
        if self.dims not in (2, 3):
            raise ContractError("dims must be 2 or 3")
        if self.num_classes < 1 or self.stack < 1:
            raise ContractError("num_classes and stack must be positive")
        if not self.layers:
            raise ContractError("spec has no layers")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ContractError("layer names must be unique")
        pooled = False
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ContractError(f"unknown layer kind {layer.kind!r}")
            if layer.kind in ("conv", "maxpool"):
                if pooled:
                    raise ContractError(f"{layer.name}: spatial layer after global pooling")
                if layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
                    raise ContractError(f"{layer.name}: bad kernel/stride/padding")
                if self.dims == 3 and (layer.t_kernel < 1 or layer.t_stride < 1 or layer.t_padding < 0):
                    raise ContractError(f"{layer.name}: bad temporal kernel/stride/padding")
            if layer.kind in ("conv", "affine") and layer.out_channels < 1:
                raise ContractError(f"{layer.name}: out_channels must be positive")
            if layer.kind == "gap":
                pooled = True
            if layer.kind == "affine":
                if not pooled:
                    raise ContractError(f"{layer.name}: affine head needs a preceding gap layer")
                if i != len(self.layers) - 1:
                    raise ContractError("affine must be the final layer")
        last = self.layers[-1]
        if last.kind != "affine" or last.out_channels != self.num_classes:
            raise ContractError("final layer must be an affine head emitting num_classes scores")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        ch = self.in_channels
        for layer in self.layers:
            if layer.kind == "conv":
                k = (layer.kernel, layer.kernel)
                if self.dims == 3:
                    k = (layer.t_kernel,) + k
                shapes[f"{layer.name}.weight"] = (layer.out_channels, ch) + k
                shapes[f"{layer.name}.bias"] = (layer.out_channels,)
                ch = layer.out_channels
            elif layer.kind == "affine":
                shapes[f"{layer.name}.weight"] = (layer.out_channels, ch)
                shapes[f"{layer.name}.bias"] = (layer.out_channels,)
                ch = layer.out_channels
        return shapes

    def input_shape(self, height: int, width: int, frames: int | None = None) -> tuple[int, ...]:
        if self.dims == 2:
            return (self.in_channels, height, width)
        if frames is None:
            frames = min_clip_length(self)
        return (self.in_channels, frames, height, width)

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "num_classes": self.num_classes,
            "dims": self.dims,
            "stack": self.stack,
            "layers": [dataclasses.asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        try:
            layers = tuple(Layer(**layer) for layer in d["layers"])
            return cls(
                layers=layers,
                num_classes=int(d["num_classes"]),
                modality=d.get("modality", "rgb"),
                dims=int(d.get("dims", 2)),
                stack=int(d.get("stack", 1)),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed backbone spec: {exc}") from exc

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "BackboneSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc


def default_spec(num_classes: int, modality: str = "rgb", stack: int = 1,
                 widths=(8, 16, 16, 32)) -> BackboneSpec:
    """Four conv blocks (3x3 conv, relu, 2x2 max-pool except the last), gap, affine."""
    layers = []
    for i, w in enumerate(widths, start=1):
        layers.append(Layer("conv", f"conv{i}", out_channels=w, kernel=3, padding=1))
        layers.append(Layer("relu", f"relu{i}"))
        if i < len(widths):
            layers.append(Layer("maxpool", f"pool{i}", kernel=2, stride=2))
    layers.append(Layer("gap", "gap"))
    layers.append(Layer("affine", "fc", out_channels=num_classes))
    return BackboneSpec(tuple(layers), num_classes=num_classes, modality=modality, stack=stack)


@dataclass
class BackboneWeights:
    """Shared parameters ``W``: ``<layer>.weight`` / ``<layer>.bias`` arrays."""

    spec: BackboneSpec
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(expected) != set(self.params):
            raise ShapeError(
                f"weights do not match spec: missing {sorted(set(expected) - set(self.params))}, "
                f"unexpected {sorted(set(self.params) - set(expected))}"
            )
        for name, shape in expected.items():
            self.params[name] = as_tensor(self.params[name])
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @property
    def fingerprint(self) -> str:
        return self.spec.fingerprint()

    def __getitem__(self, layer: str) -> tuple[np.ndarray, np.ndarray]:
        return self.params[f"{layer}.weight"], self.params[f"{layer}.bias"]

    def copy(self) -> "BackboneWeights":
        return BackboneWeights(self.spec, {k: v.copy() for k, v in self.params.items()})

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.spec.save(directory / "spec.json")
        index = {"spec_fingerprint": self.fingerprint, "layers": {}}
        for name, arr in self.params.items():
            layer, kind = name.rsplit(".", 1)
            fname = f"{name}.ten"
            save_tensor(directory / fname, arr)
            index["layers"].setdefault(layer, {})[kind] = fname
        (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "BackboneWeights":
        directory = Path(directory)
        try:
            spec = BackboneSpec.load(directory / "spec.json")
            index = json.loads((directory / "index.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read weights directory {directory}: {exc}") from exc
        if index.get("spec_fingerprint") != spec.fingerprint():
            raise DataError(f"{directory}: weights were built for a different spec")
        params = {}
        for layer, files in index["layers"].items():
            for kind, fname in files.items():
                params[f"{layer}.{kind}"] = load_tensor(directory / fname)
        return cls(spec, params)


def init_weights(spec: BackboneSpec, seed: int = 0) -> BackboneWeights:
    """He-normal kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return BackboneWeights(spec, params)


def zero_weights(spec: BackboneSpec) -> BackboneWeights:
    return BackboneWeights(spec, {n: np.zeros(s) for n, s in spec.param_shapes().items()})


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

def _conv_geometry(spec: BackboneSpec, layer: Layer):
    if spec.dims == 2:
        return (layer.stride,) * 2, (layer.padding,) * 2
    return ((layer.t_stride, layer.stride, layer.stride),
            (layer.t_padding, layer.padding, layer.padding))


def _pool_geometry(spec: BackboneSpec, layer: Layer):
    if spec.dims == 2:
        return (layer.kernel,) * 2, (layer.stride,) * 2
    return ((layer.t_kernel, layer.kernel, layer.kernel),
            (layer.t_stride, layer.stride, layer.stride))


def check_snippet(spec: BackboneSpec, x: np.ndarray) -> None:
    rank = spec.dims + 1
    if x.ndim < rank:
        raise ShapeError(f"{spec.dims}d backbone needs inputs of rank >= {rank}, got {x.shape}")
    if x.shape[x.ndim - rank] != spec.in_channels:
        raise ShapeError(
            f"{spec.modality} backbone expects {spec.in_channels} channels, "
            f"got {x.shape[x.ndim - rank]} (shape {x.shape})"
        )


def _apply(spec: BackboneSpec, weights: BackboneWeights, layer: Layer, x):
    if layer.kind == "conv":
        w, b = weights[layer.name]
        stride, pad = _conv_geometry(spec, layer)
        y = ops.conv_nd(x, w, stride, pad)
        return y + b.reshape(b.shape + (1,) * spec.dims)
    if layer.kind == "relu":
        return ops.relu(x)
    if layer.kind == "maxpool":
        window, stride = _pool_geometry(spec, layer)
        return ops.max_pool_nd(x, window, stride)
    if layer.kind == "gap":
        return ops.global_avg_pool(x, spec.dims)
    w, b = weights[layer.name]
    return ops.affine(x, w, b)


def forward(weights: BackboneWeights, snippet) -> np.ndarray:
    """Raw class scores ``F(T; W)`` for one snippet (or a leading batch of them)."""
    spec = weights.spec
    x = as_tensor(snippet)
    check_snippet(spec, x)
    for layer in spec.layers:
        x = _apply(spec, weights, layer, x)
    return x


def forward_activations(weights: BackboneWeights, snippet) -> list[tuple[str, np.ndarray]]:
    """Like :func:`forward` but returns every layer's output."""
    spec = weights.spec
    x = as_tensor(snippet)
    check_snippet(spec, x)
    acts = []
    for layer in spec.layers:
        x = _apply(spec, weights, layer, x)
        acts.append((layer.name, x))
    return acts


def build_graph(weights: BackboneWeights, graph: OpGraph | None = None, x: int | None = None):
    """Append the backbone to ``graph`` (a new one by default).

    Parameters are registered under their ``<layer>.weight`` names and hold
    references to the arrays in ``weights``, so in-place optimizer updates
    are seen by the graph. Returns ``(graph, scores_ref)``.
    """
    spec = weights.spec
    if graph is None:
        graph = OpGraph()
    if x is None:
        x = graph.input("x")
    for layer in spec.layers:
        if layer.kind == "conv":
            w = graph.parameter(f"{layer.name}.weight")
            b = graph.parameter(f"{layer.name}.bias")
            stride, pad = _conv_geometry(spec, layer)
            x = graph.bias(graph.apply("conv", x, w, stride=stride, padding=pad), b, spec.dims)
        elif layer.kind == "relu":
            x = graph.relu(x)
        elif layer.kind == "maxpool":
            window, stride = _pool_geometry(spec, layer)
            x = graph.max_pool(x, window, stride)
        elif layer.kind == "gap":
            x = graph.global_avg_pool(x, spec.dims)
        else:
            w = graph.parameter(f"{layer.name}.weight")
            b = graph.parameter(f"{layer.name}.bias")
            x = graph.affine(x, w, b)
    graph.params.update(weights.params)
    return graph, x


def layer_output_shapes(spec: BackboneSpec, input_shape) -> list[tuple[str, tuple[int, ...]]]:
    """Per-sample output shape of every layer, computed without running anything."""
    shape = tuple(int(s) for s in input_shape)
    if len(shape) != spec.dims + 1 or shape[0] != spec.in_channels:
        raise ShapeError(f"input shape {shape} does not match {spec.dims}d {spec.modality} spec")
    out = []
    for layer in spec.layers:
        if layer.kind in ("conv", "maxpool"):
            if layer.kind == "conv":
                stride, pad = _conv_geometry(spec, layer)
                ksize = (layer.kernel,) * 2 if spec.dims == 2 else (layer.t_kernel, layer.kernel, layer.kernel)
                ch = layer.out_channels
            else:
                ksize, stride = _pool_geometry(spec, layer)
                pad = (0,) * spec.dims
                ch = shape[0]
            sp = []
            for n, k, s, p in zip(shape[1:], ksize, stride, pad):
                if k > n + 2 * p:
                    raise ShapeError(f"{layer.name}: window {ksize} does not fit {shape[1:]}")
                sp.append(ops._out_size(n, k, s, p))
            shape = (ch,) + tuple(sp)
        elif layer.kind == "gap":
            shape = (shape[0],)
        elif layer.kind == "affine":
            shape = (layer.out_channels,)
        out.append((layer.name, shape))
    return out


def min_clip_length(spec: BackboneSpec) -> int:
    """Fewest frames a 3D spec needs to yield at least one temporal output."""
    if spec.dims != 3:
        return 1
    t = 1
    for layer in reversed(spec.layers):
        if layer.kind in ("conv", "maxpool"):
            pad = layer.t_padding if layer.kind == "conv" else 0
            t = max(1, (t - 1) * layer.t_stride + layer.t_kernel - 2 * pad)
    return t


# --------------------------------------------------------------------------
# inflation
# --------------------------------------------------------------------------

def inflate_kernel(kernel2d, temporal_size: int) -> np.ndarray:
    """``O x C x N x N`` -> ``O x C x Nt x N x N``: repeat along time, divide by ``Nt``."""
    kernel2d = as_tensor(kernel2d)
    if kernel2d.ndim != 4:
        raise ShapeError(f"expected an O x C x N x N kernel, got {kernel2d.shape}")
    if int(temporal_size) < 1:
        raise ContractError("temporal size must be >= 1")
    nt = int(temporal_size)
    slice_ = kernel2d / nt
    return np.ascontiguousarray(np.repeat(slice_[:, :, None], nt, axis=2))


def inflate_backbone(spec2d: BackboneSpec, weights2d: BackboneWeights, temporal_sizes: dict,
                     temporal_padding: dict | None = None,
                     temporal_strides: dict | None = None):
    """Turn a 2D backbone into a 3D one.

    ``temporal_sizes`` maps every conv and maxpool layer name to its temporal
    extent. Conv layers default to temporal stride 1 and no temporal padding;
    pooling layers default to a temporal stride equal to their temporal window.
    """
    if spec2d.dims != 2:
        raise ContractError("inflate_backbone expects a 2D spec")
    if weights2d.spec != spec2d:
        raise ContractError("weights were built for a different spec")
    if spec2d.modality == "flow" and spec2d.stack != 1:
        raise ContractError("only single-field flow backbones can be inflated")
    temporal_padding = temporal_padding or {}
    temporal_strides = temporal_strides or {}
    layers = []
    params = {}
    for layer in spec2d.layers:
        if layer.kind in ("conv", "maxpool"):
            if layer.name not in temporal_sizes:
                raise ContractError(f"missing temporal size for layer {layer.name!r}")
            nt = int(temporal_sizes[layer.name])
            if nt < 1:
                raise ContractError(f"{layer.name}: temporal size must be >= 1")
            default_stride = 1 if layer.kind == "conv" else nt
            layers.append(dataclasses.replace(
                layer,
                t_kernel=nt,
                t_stride=int(temporal_strides.get(layer.name, default_stride)),
                t_padding=int(temporal_padding.get(layer.name, 0)) if layer.kind == "conv" else 0,
            ))
            if layer.kind == "conv":
                w, b = weights2d[layer.name]
                params[f"{layer.name}.weight"] = inflate_kernel(w, nt)
                params[f"{layer.name}.bias"] = b.copy()
        else:
            layers.append(layer)
            if layer.kind == "affine":
                w, b = weights2d[layer.name]
                params[f"{layer.name}.weight"] = w.copy()
                params[f"{layer.name}.bias"] = b.copy()
    spec3d = BackboneSpec(tuple(layers), num_classes=spec2d.num_classes,
                          modality=spec2d.modality, dims=3, stack=1)
    return spec3d, BackboneWeights(spec3d, params)


def default_temporal_sizes(spec2d: BackboneSpec) -> dict[str, int]:
    """Temporal extent equal to the spatial one for every conv and pool layer."""
    return {layer.name: layer.kernel for layer in spec2d.layers if layer.kind in ("conv", "maxpool")}


def load_temporal_sizes(path: str | os.PathLike) -> dict[str, int]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read temporal sizes from {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"{path}: expected a JSON object mapping layer names to ints")
    return {k: int(v) for k, v in data.items()}


def kink_margin(weights: BackboneWeights, snippet) -> float:
    """Distance of a forward pass from the nearest non-differentiable point.

    The minimum over every ReLU input of ``|a|`` and over every max-pool
    window with a positive maximum of the gap between its two largest
    entries. Finite-difference checks are only meaningful when perturbations
    stay well inside this margin.
    """
    spec = weights.spec
    x = as_tensor(snippet)
    check_snippet(spec, x)
    margin = np.inf
    for layer in spec.layers:
        if layer.kind == "relu":
            margin = min(margin, float(np.min(np.abs(x))))
        elif layer.kind == "maxpool":
            window, stride = _pool_geometry(spec, layer)
            d = len(window)
            win = np.lib.stride_tricks.sliding_window_view(x, window, axis=tuple(range(x.ndim - d, x.ndim)))
            win = win[(Ellipsis,) + tuple(slice(None, None, s) for s in stride) + (slice(None),) * d]
            flat = np.sort(win.reshape(win.shape[:x.ndim] + (-1,)), axis=-1)
            if flat.shape[-1] > 1:
                live = flat[..., -1] > 0
                if np.any(live):
                    margin = min(margin, float(np.min((flat[..., -1] - flat[..., -2])[live])))
        x = _apply(spec, weights, layer, x)
    return margin
