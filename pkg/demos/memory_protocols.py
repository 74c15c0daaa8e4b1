"""Compare the memory cost of one center crop against ten crops per snippet."""
import numpy as np

from edgetsn import backbone as bb
from edgetsn import memory, tsn
from edgetsn.sampling import VideoClip

spec = bb.default_spec(4)
weights = bb.init_weights(spec, 0)
clip = VideoClip(np.random.default_rng(0).uniform(size=(30, 3, 32, 32)))

reports = []
for strategy in ("center1", "tencrop"):
    r = memory.profile_inference(spec, memory.Protocol(25, strategy), spec.input_shape(28, 28))
    measured = memory.measure_runtime_peak(
        lambda: tsn.predict_video(weights, clip, 25, strategy, crop_size=28))
    print(f"{strategy:8s} modeled activations {r.peak_activation_bytes:>9d} B at {r.peak_step}, "
          f"measured {measured:>9d} B")
    reports.append(r)
print()
print(memory.format_table(reports))
