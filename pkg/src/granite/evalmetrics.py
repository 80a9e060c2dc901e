"""Prediction-quality metrics, cluster comparisons, binning and filter analysis."""
import math
from dataclasses import dataclass, field

import numpy as np

from .cednet.model import evaluate_mse, forward
from .microgen import compute_gb
from .preprocess import scale_unit


class MetricUndefined(ValueError):
    pass


# --- field metrics ----------------------------------------------------------------

def rescale_pm1(a):
    """Min-max rescale to [-1, 1]; raises for constant input."""
    a = np.asarray(a, dtype=np.float64).ravel()
    lo, hi = a.min(), a.max()
    if hi <= lo:
        raise MetricUndefined("constant field cannot be rescaled")
    return 2.0 * (a - lo) / (hi - lo) - 1.0


def cosine_similarity(a, b):
    """Cosine of the angle between the [-1, 1]-rescaled, flattened fields."""
    A, B = rescale_pm1(a), rescale_pm1(b)
    na, nb = np.linalg.norm(A), np.linalg.norm(B)
    if na == 0 or nb == 0:
        raise MetricUndefined("zero norm after rescaling")
    return float(np.clip(A @ B / (na * nb), -1.0, 1.0))


@dataclass
class FieldMetrics:
    mse: float          # sum over pixels
    mse_pixel: float
    cosine: float       # nan when undefined


def field_metrics(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    mse = float(((p - t) ** 2).sum())
    try:
        cos = cosine_similarity(p, t)
    except MetricUndefined:
        cos = math.nan
    return FieldMetrics(mse=mse, mse_pixel=mse / t.size, cosine=cos)


def high_mse_mask(mses, n_sigma=2.0):
    """True for samples kept in cluster analysis (MSE <= mean + n_sigma * std)."""
    m = np.asarray(mses, dtype=np.float64)
    return m <= m.mean() + n_sigma * m.std()


# --- cluster comparisons --------------------------------------------------------------

def fold_angle(d_deg):
    """Fold an orientation difference into [0, 90] degrees (orientations are pi-periodic)."""
    d = abs(float(d_deg)) % 180.0
    return min(d, 180.0 - d)


def area_error(area_truth, area_pred):
    return abs((area_truth - area_pred) / area_truth)


@dataclass
class ClusterError:
    id: str
    rank: int
    threshold: float
    distance: float
    delta_a: float
    delta_theta: float            # folded, degrees
    delta_theta_raw: float        # unfolded absolute difference
    delta_ar: float
    flags: list = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)


def cluster_errors(pred_records, truth_records):
    """Compare cluster records with equal (id, rank, threshold) keys.

    Returns the errors and the list of keys skipped because one side lacks them.
    """
    key = lambda r: (r["id"], int(r["rank"]), float(r["threshold"]))
    pred = {key(r): r for r in pred_records}
    truth = {key(r): r for r in truth_records}
    out, skipped = [], []
    for k in sorted(set(pred) | set(truth)):
        if k not in pred or k not in truth:
            skipped.append(k)
            continue
        p, t = pred[k], truth[k]
        flags = []
        dist = math.hypot(p["row"] - t["row"], p["col"] - t["col"])
        da = area_error(t["area"], p["area"])
        if p.get("theta_deg") is None or t.get("theta_deg") is None:
            raw, dth = math.nan, math.nan
            flags.append("theta_missing")
        else:
            raw = abs(t["theta_deg"] - p["theta_deg"])
            dth = fold_angle(raw)
        if p.get("ar") is None or t.get("ar") is None:
            dar = math.nan
            flags.append("ar_missing")
        else:
            dar = abs(t["ar"] - p["ar"]) / t["ar"]
        out.append(ClusterError(k[0], k[1], k[2], dist, da, dth, raw, dar, flags))
    return out, skipped


# --- binning ------------------------------------------------------------------------------

@dataclass
class BinnedCurve:
    edges: np.ndarray
    centers: np.ndarray       # bin centre of the statistic
    stat_mean: np.ndarray     # mean statistic per bin (nan if empty)
    mse_mean: np.ndarray
    counts: np.ndarray

    def rows(self):
        return [(float(c), float(s), float(m), int(n)) for c, s, m, n in
                zip(self.centers, self.stat_mean, self.mse_mean, self.counts)]


def bin_mse_by_stat(stats, mses, bins=10):
    """Equal-width bins over the observed range of ``stats``; per-bin means."""
    s = np.asarray(stats, dtype=np.float64)
    m = np.asarray(mses, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty input")
    if s.shape != m.shape:
        raise ValueError("stats and mses differ in length")
    lo, hi = s.min(), s.max()
    if hi == lo:
        edges = np.array([lo - 0.5, lo + 0.5])
    else:
        edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, len(edges) - 2)
    nb = len(edges) - 1
    counts = np.bincount(idx, minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        stat_mean = np.bincount(idx, s, nb) / counts
        mse_mean = np.bincount(idx, m, nb) / counts
    return BinnedCurve(edges, 0.5 * (edges[:-1] + edges[1:]), stat_mean, mse_mean, counts)


def per_grain_errors(labels, pred, truth):
    """Mean squared error of each grain, with coarse pixels replicated to full size."""
    labels = np.asarray(labels)
    f = labels.shape[0] // np.asarray(truth).shape[0]
    err = (np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)) ** 2
    err = err.reshape(err.shape[0], err.shape[1])
    fine = np.kron(err, np.ones((f, f)))
    n = labels.max() + 1
    return np.bincount(labels.ravel(), fine.ravel(), n) / np.bincount(labels.ravel(), minlength=n)


# --- first-layer filter analysis -------------------------------------------------------

FILTER_TYPES = {1: "always active", 2: "active at high Euler values",
                3: "active at low Euler values", 4: "boundary selective", 5: "never active"}


def first_layer_response(model, probes):
    """Post-relu output of every first-layer filter for (P, n, n, 4) probes.

    Probes are sized so the first layer produces one value per filter.
    """
    spec = model.specs[0]
    w, b = model.params[0]
    from .cednet.layers import conv_forward
    out = conv_forward(np.asarray(probes, dtype=model.dtype), spec, w, b)
    return out.reshape(len(probes), -1)


def single_crystal_probes(values, size=8):
    v = np.asarray(values, dtype=np.float64)
    p = np.zeros((len(v), size, size, 4))
    p[..., :3] = v[:, None, None, None]
    return p


def bicrystal_probes(angles_deg, low=0.25, high=0.75, size=8):
    """Two grains split by a line through the centre at each angle.

    The gb channel is computed from the Euler channels and scaled to [0, 1].
    """
    r, c = np.indices((size, size)) - (size - 1) / 2.0
    out = []
    for ang in np.radians(np.asarray(angles_deg, dtype=np.float64)):
        side = (c * np.sin(ang) - r * np.cos(ang)) >= 0
        e = np.where(side[..., None], high, low) * np.ones(3)
        gb = scale_unit(compute_gb(e))
        out.append(np.concatenate([e, gb], axis=-1))
    return np.stack(out)


def classify_filters(single_resp, bicrystal_resp, values):
    """Assign one type per filter from responses to the probe sweeps.

    ``single_resp`` is (len(values), F); ``bicrystal_resp`` is (B, F).
    """
    values = np.asarray(values, dtype=np.float64)
    s_on = single_resp > 0
    b_on = bicrystal_resp > 0
    types = np.zeros(single_resp.shape[1], dtype=int)
    for f in range(single_resp.shape[1]):
        if not s_on[:, f].any() and not b_on[:, f].any():
            types[f] = 5
        elif s_on[:, f].all() and b_on[:, f].all():
            types[f] = 1
        elif not s_on[:, f].any():
            types[f] = 4
        else:
            # trend of the single-crystal response with the Euler value
            slope = np.polyfit(values, single_resp[:, f], 1)[0]
            types[f] = 2 if slope >= 0 else 3
    return types


def filter_probe(model, values=None, angles=None):
    values = np.linspace(0.0, 1.0, 21) if values is None else values
    angles = np.arange(0, 180, 15) if angles is None else angles
    size = model.specs[0].kernel
    single = first_layer_response(model, single_crystal_probes(values, size))
    bi = first_layer_response(model, bicrystal_probes(angles, size=size))
    return {"values": np.asarray(values), "angles": np.asarray(angles), "single": single,
            "bicrystal": bi, "types": classify_filters(single, bi, values)}


def ablated(model, filters):
    """Copy of ``model`` with the given first-layer filters zeroed (weights and bias)."""
    n_filters = model.specs[0].filters
    idx = np.atleast_1d(filters)
    if idx.size and (idx.min() < 0 or idx.max() >= n_filters):
        raise IndexError(f"filter index out of range [0, {n_filters})")
    m = model.copy()
    w, b = m.params[0]
    w[..., idx] = 0
    b[idx] = 0
    return m


def ablate_filter(model, x, y, index, base=None):
    """Percent change in test MSE when first-layer filter(s) ``index`` are zeroed."""
    base = evaluate_mse(model, x, y) if base is None else base
    mse = evaluate_mse(ablated(model, index), x, y)
    return 100.0 * (mse - base) / base


def ablation_table(model, x, y):
    base = evaluate_mse(model, x, y)
    return base, [ablate_filter(model, x, y, k, base) for k in range(model.specs[0].filters)]


def constant_output(model, shape):
    """The input-independent prediction left after zeroing every first-layer filter."""
    m = ablated(model, np.arange(model.specs[0].filters))
    return forward(m, np.zeros(shape, dtype=model.dtype))
