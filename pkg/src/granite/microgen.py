"""Periodic synthetic polycrystals from a power-weighted Voronoi tessellation.

Grain target diameters (pixels) follow a truncated lognormal.  Seeds are
placed by dart throwing, then every pixel is given to the seed minimising
``periodic_dist**2 - (d/2)**2``.  Orientations are uniform Bunge Euler
triples in radians, stored in channel order (Phi, Psi1, Psi2).
"""
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

from . import tensorio
from .kernels import laguerre_assign

TWO_PI = 2.0 * np.pi


class PlacementError(RuntimeError):
    pass


@dataclass
class GeneratorConfig:
    size: int = 128
    mu: float = 2.3
    sigma: float = 0.4
    cutoff: float = 4.0
    seed: int = 0
    max_tries: int = 2000
    # minimum seed spacing as a fraction of the summed target radii
    spacing: float = 0.5

    def __post_init__(self):
        if self.size < 16:
            raise ValueError(f"grid size must be >= 16, got {self.size}")
        if self.sigma <= 0 or self.cutoff <= 0:
            raise ValueError("sigma and cutoff must be positive")

    @property
    def bounds(self):
        return (math.exp(self.mu - self.cutoff * self.sigma),
                math.exp(self.mu + self.cutoff * self.sigma))


@dataclass
class Microstructure:
    euler: np.ndarray            # (H, W, 3) radians
    gb: np.ndarray               # (H, W, 1)
    labels: np.ndarray           # (H, W) int32, 0..n_grains-1
    target_diameters: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def size(self):
        return self.labels.shape[0]

    @property
    def n_grains(self):
        return int(self.labels.max()) + 1

    def stacked(self):
        """(H, W, 4) array of Euler channels followed by the gb channel."""
        return np.concatenate([self.euler, self.gb], axis=-1)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tensorio.write_tensor(d / "euler.gtns", self.euler.astype(np.float32))
        tensorio.write_tensor(d / "gb.gtns", self.gb.astype(np.float32))
        tensorio.write_tensor(d / "labels.gtns", self.labels[..., None].astype(np.float32))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        euler = tensorio.read_tensor(d / "euler.gtns").astype(np.float64)
        gb = tensorio.read_tensor(d / "gb.gtns").astype(np.float64)
        labels = tensorio.read_tensor(d / "labels.gtns")[..., 0].astype(np.int32)
        return cls(euler=euler, gb=gb, labels=labels)


def sample_diameters(rng, cfg, n):
    """``n`` draws from the truncated lognormal by inverse-CDF sampling."""
    lo, hi = (cfg.mu - cfg.cutoff * cfg.sigma, cfg.mu + cfg.cutoff * cfg.sigma)
    plo, phi = ndtr((lo - cfg.mu) / cfg.sigma), ndtr((hi - cfg.mu) / cfg.sigma)
    u = plo + (phi - plo) * rng.random(n)
    return np.exp(cfg.mu + cfg.sigma * ndtri(u))


def truncated_lognormal_cdf(d, cfg):
    """CDF of the target-diameter distribution (used by the KS check)."""
    z = (np.log(np.asarray(d, dtype=float)) - cfg.mu) / cfg.sigma
    zlo, zhi = -cfg.cutoff, cfg.cutoff
    c = (ndtr(z) - ndtr(zlo)) / (ndtr(zhi) - ndtr(zlo))
    return np.clip(c, 0.0, 1.0)


def _periodic_d2(p, pts, size):
    d = np.abs(pts - p)
    d = np.minimum(d, size - d)
    return (d * d).sum(axis=-1)


def generate(cfg):
    """Synthesize one periodic microstructure from ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    size = cfg.size
    area = float(size * size)

    diam = []
    filled = 0.0
    while filled < area:
        d = float(sample_diameters(rng, cfg, 1)[0])
        diam.append(d)
        filled += math.pi * d * d / 4.0
    diam = np.sort(np.asarray(diam))[::-1]
    radii = diam / 2.0

    seeds = np.empty((len(diam), 2))
    for m, r in enumerate(radii):
        for _ in range(cfg.max_tries):
            p = rng.random(2) * size
            if m == 0:
                break
            d2 = _periodic_d2(p, seeds[:m], size)
            lim = cfg.spacing * (radii[:m] + r)
            if np.all(d2 >= lim * lim):
                break
        else:
            raise PlacementError(
                f"could not place grain {m} of {len(diam)} after {cfg.max_tries} tries; "
                f"use a larger grid for mu={cfg.mu}, sigma={cfg.sigma}")
        seeds[m] = p
    angles = rng.random((len(diam), 3)) * TWO_PI

    raw = laguerre_assign(size, size, seeds, radii)
    used, labels = np.unique(raw, return_inverse=True)
    labels = labels.reshape(size, size).astype(np.int32)
    euler = angles[used][labels]
    return Microstructure(euler=euler, gb=compute_gb(euler), labels=labels,
                          target_diameters=diam)


def compute_gb(euler):
    """L2 norm of the periodic central-difference gradient of the Euler channels."""
    e = np.asarray(euler, dtype=np.float64)
    dy = (np.roll(e, -1, axis=0) - np.roll(e, 1, axis=0)) / 2.0
    dx = (np.roll(e, -1, axis=1) - np.roll(e, 1, axis=1)) / 2.0
    return np.sqrt((dx * dx + dy * dy).sum(axis=-1, keepdims=True))


# --- grain statistics --------------------------------------------------------

@dataclass
class GrainStats:
    diameters: np.ndarray        # normalised by grid size
    aspect_ratios: np.ndarray
    mean_euler: np.ndarray       # (n_grains, 3)
    areas: np.ndarray
    underdetermined: np.ndarray  # grains too small for an ellipse fit

    @property
    def mean_diameter(self):
        return float(self.diameters.mean())

    @property
    def mean_aspect_ratio(self):
        ar = self.aspect_ratios[np.isfinite(self.aspect_ratios)]
        return float(ar.mean()) if ar.size else 1.0

    @property
    def mean_euler_angles(self):
        return self.mean_euler.mean(axis=0)


def _unwrap(idx, size):
    """Shift periodic indices so the occupied set avoids the wrap seam.

    The longest circular run of unoccupied indices is moved to the end.
    """
    occ = np.zeros(size, dtype=bool)
    occ[idx] = True
    if occ.all():
        return idx.astype(float)
    free = ~np.concatenate([occ, occ])
    best_len, best_end, run = 0, 0, 0
    for k in range(2 * size):
        run = run + 1 if free[k] else 0
        if run > best_len:
            best_len, best_end = run, k
    start = (best_end + 1) % size       # first occupied index after the gap
    return ((idx - start) % size).astype(float)


def grain_stats(ms, min_pixels=5):
    from .clusterlab import EllipseFitError, fit_ellipse_points

    labels = ms.labels
    size = labels.shape[0]
    n = int(labels.max()) + 1
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=n).astype(float)
    rows, cols = np.indices(labels.shape)
    order = np.argsort(flat, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(areas.astype(int))])
    r_sorted, c_sorted = rows.ravel()[order], cols.ravel()[order]
    euler_flat = ms.euler.reshape(-1, 3)[order]

    ars = np.ones(n)
    flags = np.zeros(n, dtype=bool)
    mean_euler = np.zeros((n, 3))
    for g in range(n):
        sl = slice(bounds[g], bounds[g + 1])
        mean_euler[g] = euler_flat[sl].mean(axis=0)
        if areas[g] < min_pixels:
            flags[g] = True
            continue
        y = _unwrap(r_sorted[sl], size)
        x = _unwrap(c_sorted[sl], labels.shape[1])
        try:
            fit = fit_ellipse_points(x, y)
        except EllipseFitError:
            flags[g] = True
            continue
        ars[g] = fit.aspect_ratio
    diam = 2.0 * np.sqrt(areas / np.pi) / size
    return GrainStats(diameters=diam, aspect_ratios=ars, mean_euler=mean_euler,
                      areas=areas, underdetermined=flags)
