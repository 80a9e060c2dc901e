"""Peak-stress cluster detection and ellipse characterisation on 2D fields.

Pixel coordinates follow image convention: X is the column index, Y the row
index, and orientations are measured from +X towards +Y in [0, pi).
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import label_components, local_maxima

THRESHOLDS = (0.5, 0.7, 0.8, 0.9)


class EllipseFitError(ValueError):
    """Too few points for the five-coefficient conic fit."""


@dataclass(frozen=True)
class Peak:
    row: int
    col: int
    value: float
    rank: int


@dataclass
class EllipseFit:
    z: np.ndarray
    theta: float            # radians, [0, pi)
    aspect_ratio: float     # major / minor semi-axis, >= 1
    conic_ratio: float      # raw eigenvalue ratio of the quadratic part
    isotropic: bool = False
    degenerate: bool = False


@dataclass
class Cluster:
    peak: Peak
    threshold: float
    mask: np.ndarray
    fit: EllipseFit = None
    flags: list = field(default_factory=list)

    @property
    def area(self):
        return int(self.mask.sum())

    @property
    def area_fraction(self):
        return self.area / self.mask.size


# --- smoothing ----------------------------------------------------------------

def gaussian_kernel(sigma, truncate=3.0):
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _conv_axis(a, k, axis):
    r = (len(k) - 1) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    p = np.pad(a, pad, mode="symmetric")
    out = np.zeros_like(a)
    n = a.shape[axis]
    for i, w in enumerate(k):
        out += w * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def smooth(field, sigma=1.0):
    """Separable Gaussian blur, kernel cut at 3 sigma, mirror boundary."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = gaussian_kernel(sigma)
    f = np.asarray(field, dtype=np.float64)
    return _conv_axis(_conv_axis(f, k, 0), k, 1)


# --- peaks and clusters -------------------------------------------------------

def find_peaks(field, k=3):
    """Top-``k`` strict local maxima, largest first.

    Equal values are ordered by row-major position.  Fewer than ``k`` peaks
    are returned when the field does not have that many.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    f = np.asarray(field, dtype=np.float64)
    rows, cols = np.nonzero(local_maxima(f))
    vals = f[rows, cols]
    order = np.lexsort((rows * f.shape[1] + cols, -vals))[:k]
    return [Peak(int(rows[o]), int(cols[o]), float(vals[o]), rank + 1)
            for rank, o in enumerate(order)]


def extract_cluster(field, peak, t):
    """Mask of the 8-connected component of ``field >= t * peak.value`` at the peak."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {t}")
    f = np.asarray(field, dtype=np.float64)
    above = f >= t * peak.value
    above[peak.row, peak.col] = True
    labels, _ = label_components(above)
    return labels == labels[peak.row, peak.col]


def fit_ellipse_points(x, y):
    """Least-squares conic through centred points with unit right-hand side."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size < 5:
        raise EllipseFitError(f"need at least 5 points, got {x.size}")
    x = x - x.mean()
    y = y - y.mean()
    A = np.column_stack([x * x, x * y, y * y, x, y])
    z, _, rank, _ = np.linalg.lstsq(A, np.ones(x.size), rcond=None)
    z1, z2, z3 = z[0], z[1], z[2]
    s = math.sqrt((z1 - z3) ** 2 + z2 ** 2)
    if z2 != 0.0:
        theta = math.atan((z3 - z1 - s) / z2)
    else:
        theta = 0.0 if z1 <= z3 else math.pi / 2
    num, den = z1 + z3 + s, z1 + z3 - s
    if rank < 5 or num * den <= 0.0:
        # collinear points or a non-elliptic conic
        return EllipseFit(z=z, theta=theta % math.pi, aspect_ratio=math.inf,
                          conic_ratio=math.inf, degenerate=True)
    ratio = num / den
    if ratio < 1.0:
        ratio = 1.0 / ratio
        theta += math.pi / 2
    ar = math.sqrt(ratio)
    return EllipseFit(z=z, theta=theta % math.pi, aspect_ratio=ar, conic_ratio=ratio,
                      isotropic=abs(ar - 1.0) < 0.05)


def fit_ellipse(mask):
    rows, cols = np.nonzero(np.asarray(mask))
    return fit_ellipse_points(cols, rows)


def characterize(field, peak, t):
    mask = extract_cluster(field, peak, t)
    cl = Cluster(peak=peak, threshold=t, mask=mask)
    try:
        cl.fit = fit_ellipse(mask)
        if cl.fit.degenerate:
            cl.flags.append("degenerate")
        if cl.fit.isotropic:
            cl.flags.append("isotropic")
    except EllipseFitError:
        cl.flags.append("underdetermined")
    return cl


def detect(field, k=3, thresholds=THRESHOLDS, sigma=1.0):
    """Smooth, find the top-``k`` peaks and characterise a cluster per threshold."""
    f = np.asarray(field, dtype=np.float64)
    if f.ndim == 3:
        f = f[..., 0]
    sm = smooth(f, sigma)
    peaks = find_peaks(sm, k)
    return [characterize(sm, p, t) for p in peaks for t in thresholds]


# --- serialisation ------------------------------------------------------------

def rle_encode(mask):
    """Row-major runs of ones as ``[start, length]`` pairs."""
    flat = np.concatenate([[0], np.asarray(mask, dtype=np.int8).ravel(), [0]])
    d = np.diff(flat)
    starts = np.nonzero(d == 1)[0]
    ends = np.nonzero(d == -1)[0]
    return [[int(s), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode(runs, shape):
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    for s, n in runs:
        flat[s:s + n] = True
    return flat.reshape(shape)


def cluster_record(sample, cl):
    fit = cl.fit
    finite = fit is not None and math.isfinite(fit.aspect_ratio)
    return {
        "id": sample,
        "rank": cl.peak.rank,
        "threshold": cl.threshold,
        "row": cl.peak.row,
        "col": cl.peak.col,
        "peak_value": cl.peak.value,
        "area": cl.area,
        "area_fraction": cl.area_fraction,
        "theta_deg": math.degrees(fit.theta) if fit is not None else None,
        "ar": fit.aspect_ratio if finite else None,
        "flags": list(cl.flags),
        "shape": list(cl.mask.shape),
        "rle": rle_encode(cl.mask),
    }


def write_records(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_records(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
