import os
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from granite.cednet.layers import LayerSpec


def tiny_specs():
    """Reduced stack with every layer kind: 16 -> 4 -> 3 -> 2 -> 1 -> 2 -> 4 -> 8."""
    return [
        LayerSpec("conv", 4, 4, 3, "relu"),
        LayerSpec("maxpool", 2, 1),
        LayerSpec("conv", 2, 1, 3, "relu"),
        LayerSpec("maxpool", 2, 1),
        LayerSpec("tconv", 2, 2, 3, "relu"),
        LayerSpec("tconv", 3, 1, 2, "relu"),
        LayerSpec("tconv", 2, 2, 1, "tanh"),
    ]


def cache_dir():
    return Path(os.environ.get("GRANITE_CACHE", Path.home() / ".cache" / "granite"))


def raster_ellipse(size, a, b, theta_deg, center=None):
    """Filled ellipse mask; semi-axes ``a`` (along theta) and ``b``, X = column, Y = row."""
    cy, cx = (size / 2 - 0.5, size / 2 - 0.5) if center is None else center
    yy, xx = np.mgrid[:size, :size]
    t = np.radians(theta_deg)
    u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
    v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def gaussian_bumps(size, bumps, width=3.0):
    """Sum of isotropic Gaussians given as ``(row, col, height)`` triples."""
    yy, xx = np.mgrid[:size, :size]
    f = np.zeros((size, size))
    for r, c, h in bumps:
        f += h * np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * width ** 2))
    return f


def angle_diff_deg(a, b):
    """Distance between two orientations modulo 180 degrees."""
    d = abs(a - b) % 180.0
    return min(d, 180.0 - d)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
