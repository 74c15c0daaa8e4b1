import numpy as np
import pytest

from edgetsn import backbone as bb
from edgetsn import memory, tsn
from edgetsn.errors import ContractError, InvariantError
from edgetsn.sampling import VideoClip


def two_conv_spec():
    return bb.BackboneSpec(
        (
            bb.Layer("conv", "c1", out_channels=2, kernel=3, padding=1),
            bb.Layer("relu", "r1"),
            bb.Layer("conv", "c2", out_channels=3, kernel=3),
            bb.Layer("gap", "gap"),
            bb.Layer("affine", "fc", out_channels=2),
        ),
        num_classes=2,
    )


def test_hand_computed_liveness():
    # input 3x4x4 = 48 values; c1 -> 2x4x4 = 32; r1 -> 32; c2 -> 3x2x2 = 12; gap -> 3; fc -> 2
    # live per step: 48 | 48+32 | 32+32 | 32+12 | 12+3 | 3+2  -> peak 80 values at c1
    # parameters: c1 54+2, c2 54+3, fc 6+2 = 121 values
    r = memory.profile_inference(two_conv_spec(), memory.Protocol(25, "center1", 1), (3, 4, 4))
    assert r.peak_activation_bytes == 80 * 8
    assert r.peak_step == "c1"
    assert r.parameter_bytes == 121 * 8
    assert r.total_peak_bytes == 201 * 8
    assert [row["live_bytes"] for row in r.layers] == [v * 8 for v in (48, 80, 64, 44, 15, 5)]


def test_tencrop_is_exactly_ten_times_center1():
    spec = bb.default_spec(4)
    shape = spec.input_shape(28, 28)
    one = memory.profile_inference(spec, memory.Protocol(25, "center1"), shape)
    ten = memory.profile_inference(spec, memory.Protocol(25, "tencrop"), shape)
    assert ten.peak_activation_bytes == 10 * one.peak_activation_bytes
    assert ten.parameter_bytes == one.parameter_bytes > 0
    assert ten.total_peak_bytes / one.total_peak_bytes < 10


def test_batch_scales_activations_only():
    spec = bb.default_spec(4, "flow")
    shape = spec.input_shape(32, 32)
    a = memory.profile_inference(spec, memory.Protocol(25, "tencrop", 1), shape)
    b = memory.profile_inference(spec, memory.Protocol(25, "tencrop", 2), shape)
    assert b.peak_activation_bytes == 2 * a.peak_activation_bytes
    assert b.parameter_bytes == a.parameter_bytes


def test_snippet_count_does_not_change_peak():
    spec = bb.default_spec(4)
    shape = spec.input_shape(28, 28)
    a = memory.profile_inference(spec, memory.Protocol(3, "center1"), shape)
    b = memory.profile_inference(spec, memory.Protocol(25, "center1"), shape)
    assert a.peak_activation_bytes == b.peak_activation_bytes


def test_3d_spec_is_profiled():
    spec2 = bb.default_spec(4)
    spec3, _ = bb.inflate_backbone(spec2, bb.init_weights(spec2, 0), bb.default_temporal_sizes(spec2))
    t = bb.min_clip_length(spec3)
    r = memory.profile_inference(spec3, memory.Protocol(25, "center1"), spec3.input_shape(16, 16, t))
    assert r.layers[0]["shape"] == [3, t, 16, 16]
    assert r.peak_activation_bytes > 0


def test_report_json_round_trip():
    r = memory.profile_inference(bb.default_spec(4), memory.Protocol(25, "tencrop", 4), (3, 28, 28))
    again = memory.MemoryReport.from_json(r.to_json())
    assert again == r
    assert again.to_json() == r.to_json()


def test_report_total_invariant():
    r = memory.profile_inference(two_conv_spec(), memory.Protocol(), (3, 4, 4))
    d = r.to_dict()
    d["total_peak_bytes"] += 1
    with pytest.raises(InvariantError):
        memory.MemoryReport(**d)


def test_invalid_protocols():
    with pytest.raises(ContractError):
        memory.Protocol(0, "center1")
    with pytest.raises(ContractError):
        memory.Protocol(25, "center1", 0)
    with pytest.raises(ContractError):
        memory.Protocol(25, "threecrop")


def test_table_columns():
    spec = bb.default_spec(4)
    reports = [memory.profile_inference(spec, memory.Protocol(25, s), (3, 28, 28))
               for s in ("center1", "tencrop")]
    text = memory.format_table(reports, {"center1": 0.5})
    header, first, second = text.splitlines()
    assert header.split() == ["Architecture", "Batch", "#", "Crops", "top-1", "Memory", "(bytes)"]
    assert "50.00%" in first and str(reports[0].total_peak_bytes) in first
    assert second.split()[3] == "-"


@pytest.fixture(scope="module")
def runtime_setup():
    spec = bb.default_spec(4)
    w = bb.init_weights(spec, 1)
    clip = VideoClip(np.random.default_rng(0).uniform(size=(30, 3, 32, 32)))
    return spec, w, clip


def test_measured_peak_bounds_the_model(runtime_setup):
    spec, w, clip = runtime_setup
    modeled = memory.profile_inference(spec, memory.Protocol(25, "center1"), spec.input_shape(28, 28))
    measured = memory.measure_runtime_peak(lambda: tsn.predict_video(w, clip, 25, crop_size=28))
    assert measured >= modeled.peak_activation_bytes


def test_measurement_is_repeatable(runtime_setup):
    _, w, clip = runtime_setup
    run = lambda: tsn.predict_video(w, clip, 25, "center1", crop_size=28)  # noqa: E731
    assert memory.measure_runtime_peak(run) == memory.measure_runtime_peak(run)


def test_in_process_measurement_sees_allocations():
    peak = memory.measure_runtime_peak(lambda: np.ones(100_000), isolate=False)
    assert peak >= 800_000
