"""Estimate the motion of a shifted texture with Lucas-Kanade."""
import numpy as np

from edgetsn.flow import lucas_kanade, normalize_flow


def texture(dx, dy, size=64):
    y, x = np.mgrid[0:size, 0:size].astype(float)
    x, y = x - dx, y - dy
    return 0.5 + 0.2 * np.sin(0.11 * x) * np.cos(0.09 * y) + 0.15 * np.sin(0.05 * (x + y))


for dx, dy in [(1.0, 0.0), (0.0, -2.0), (1.5, 1.5)]:
    field = lucas_kanade(texture(0, 0), texture(dx, dy), window_radius=3)
    inner = (slice(12, -12), slice(12, -12))
    print(f"true ({dx:+.1f}, {dy:+.1f})  estimated "
          f"({field.vx[inner].mean():+.3f}, {field.vy[inner].mean():+.3f})")

still = lucas_kanade(texture(0, 0), texture(0, 0))
print("static pair, normalized:", np.unique(normalize_flow(still, vmax=8.0).vx))
