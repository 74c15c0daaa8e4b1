"""Byte-level memory accounting for the test-time protocol.

The executor model matches :func:`edgetsn.tsn.snippet_scores`: the K snippets
of a video are processed one after another, and the crops of one snippet
travel through the backbone as a single batch. An activation is live from
the step that produces it until its last consumer has run; in a layer chain
that means step ``i`` holds layer ``i``'s input and output.
"""
from __future__ import annotations

import gc
import json
import os
import tracemalloc
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .backbone import BackboneSpec, layer_output_shapes
from .errors import ContractError, InvariantError
from .sampling import CROP_COUNTS

BYTES_PER_ELEMENT = 8


@dataclass(frozen=True)
class Protocol:
    k: int = 25
    crop_strategy: str = "center1"
    batch_size: int = 1

    def __post_init__(self):
        if self.k < 1 or self.batch_size < 1:
            raise ContractError("K and batch size must be >= 1")
        if self.crop_strategy not in CROP_COUNTS:
            raise ContractError(f"unknown crop strategy {self.crop_strategy!r}")

    @property
    def crops(self) -> int:
        return CROP_COUNTS[self.crop_strategy]


@dataclass
class MemoryReport:
    architecture: str
    k: int
    crop_strategy: str
    crops: int
    batch_size: int
    input_shape: list[int]
    parameter_bytes: int
    peak_activation_bytes: int
    total_peak_bytes: int
    peak_step: str
    layers: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.total_peak_bytes != self.parameter_bytes + self.peak_activation_bytes:
            raise InvariantError("total_peak_bytes must equal parameter + activation bytes")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MemoryReport":
        return cls(**json.loads(text))


def parameter_bytes(spec: BackboneSpec) -> int:
    return sum(int(np.prod(s)) for s in spec.param_shapes().values()) * BYTES_PER_ELEMENT


def _live_steps(spec: BackboneSpec, input_shape, multiplier: int):
    """``(step name, live bytes, output bytes)`` for every execution step."""
    shapes = layer_output_shapes(spec, input_shape)
    in_bytes = int(np.prod(input_shape)) * BYTES_PER_ELEMENT * multiplier
    steps = [("input", in_bytes, in_bytes)]
    prev = in_bytes
    for name, shape in shapes:
        out = int(np.prod(shape)) * BYTES_PER_ELEMENT * multiplier
        steps.append((name, prev + out, out))
        prev = out
    return steps, shapes


def profile_inference(spec: BackboneSpec, protocol: Protocol, input_shape,
                      architecture: str = "toy") -> MemoryReport:
    """Modeled peak memory for running ``protocol`` on snippets of ``input_shape``.

    ``input_shape`` is the per-crop snippet shape the backbone consumes
    (``C x h x w`` or ``C x T x h x w``).
    """
    input_shape = tuple(int(s) for s in input_shape)
    crops = protocol.crops
    per_video = crops * protocol.batch_size
    steps, shapes = _live_steps(spec, input_shape, per_video)
    unit, _ = _live_steps(spec, input_shape, 1)
    peak_name, peak, _ = max(steps, key=lambda s: s[1])
    unit_peak = max(s[1] for s in unit)
    # the activation model must stay linear in crops x batch
    if peak != unit_peak * per_video:
        raise InvariantError("activation bytes are not linear in the number of crops")

    table = [{"layer": "input", "shape": list(input_shape),
              "bytes_per_crop": unit[0][2], "live_bytes": steps[0][1]}]
    for (name, shape), (_, live, _), (_, _, per_crop) in zip(shapes, steps[1:], unit[1:]):
        table.append({"layer": name, "shape": list(shape),
                      "bytes_per_crop": per_crop, "live_bytes": live})
    pbytes = parameter_bytes(spec)
    return MemoryReport(
        architecture=architecture,
        k=protocol.k,
        crop_strategy=protocol.crop_strategy,
        crops=crops,
        batch_size=protocol.batch_size,
        input_shape=list(input_shape),
        parameter_bytes=pbytes,
        peak_activation_bytes=peak,
        total_peak_bytes=pbytes + peak,
        peak_step=peak_name,
        layers=table,
    )


def _measure_here(run: Callable[[], object], warmup: bool) -> int:
    # A full collection empties CPython's object freelists; refilling them
    # during the measured call would be charged to it. Collect first, let the
    # warmup call refill them, and keep the collector off while measuring.
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    started = False
    try:
        started = not tracemalloc.is_tracing()
        if started:
            tracemalloc.start()
        if warmup:
            run()
        base, _ = tracemalloc.get_traced_memory()
        tracemalloc.reset_peak()
        run()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if started:
            tracemalloc.stop()
        if gc_was_enabled:
            gc.enable()
    return peak - base


def measure_runtime_peak(run: Callable[[], object], warmup: bool = True,
                         isolate: bool = True) -> int:
    """High-water mark, in bytes, of allocations made while ``run()`` executes.

    Uses :mod:`tracemalloc`, which sees numpy buffers. Memory allocated before
    the call (weights, the input clip) is not counted.

    With ``isolate=True`` (and where ``os.fork`` exists) the measurement runs
    in a forked child, so it is the only allocating activity in its process
    and always starts from the same interpreter state. In-process measurements
    can drift by a few hundred bytes as CPython's small-object caches fill.
    """
    if not (isolate and hasattr(os, "fork")):
        return _measure_here(run, warmup)
    read_fd, write_fd = os.pipe()
    pid = os.fork()
    if pid == 0:  # pragma: no cover - runs in the child
        os.close(read_fd)
        status = 1
        try:
            os.write(write_fd, str(_measure_here(run, warmup)).encode())
            status = 0
        finally:
            os._exit(status)
    os.close(write_fd)
    with os.fdopen(read_fd, "rb") as fh:
        data = fh.read()
    _, status = os.waitpid(pid, 0)
    if status != 0 or not data:
        raise InvariantError("memory measurement child failed")
    return int(data)


def format_table(reports, accuracies=None) -> str:
    """Plain-text table: architecture, batch, crops, top-1, memory bytes."""
    accuracies = accuracies or {}
    rows = [("Architecture", "Batch", "# Crops", "top-1", "Memory (bytes)")]
    for r in reports:
        acc = accuracies.get(r.crop_strategy)
        rows.append((r.architecture, str(r.batch_size), str(r.crops),
                     "-" if acc is None else f"{100 * acc:.2f}%", str(r.total_peak_bytes)))
    widths = [max(len(row[i]) for row in rows) for i in range(5)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows)
