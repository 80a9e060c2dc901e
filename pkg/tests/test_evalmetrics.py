import math

import numpy as np
import pytest

from granite import evalmetrics as em
from granite.cednet import model as M


def test_cosine_self_and_complement():
    a = np.random.default_rng(0).random((32, 32))
    assert em.cosine_similarity(a, a) == pytest.approx(1.0)
    assert em.cosine_similarity(a, 1 - a) < 0


@pytest.mark.parametrize("s,c", [(2.0, 0.0), (1e-3, 5.0), (40.0, -3.0)])
def test_cosine_affine_invariant(s, c):
    rng = np.random.default_rng(1)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert abs(em.cosine_similarity(s * a + c, b) - em.cosine_similarity(a, b)) < 1e-6


def test_cosine_constant_undefined():
    with pytest.raises(em.MetricUndefined):
        em.cosine_similarity(np.ones(10), np.arange(10.0))
    assert math.isnan(em.field_metrics(np.ones((4, 4)), np.eye(4)).cosine)


def test_field_metrics():
    t = np.zeros((32, 32, 1))
    m = em.field_metrics(t + 0.5, t)
    assert m.mse == pytest.approx(256.0) and m.mse_pixel == pytest.approx(0.25)


def test_high_mse_mask():
    m = np.r_[np.ones(50), 100.0]
    keep = em.high_mse_mask(m)
    assert keep[:50].all() and not keep[50]


def test_fold_angle():
    assert em.fold_angle(175 - 5) == 10
    assert em.fold_angle(-170) == 10
    assert em.fold_angle(90) == 90
    rng = np.random.default_rng(2)
    for d in rng.uniform(-1000, 1000, 500):
        assert 0 <= em.fold_angle(d) <= 90
    for d in [0, 180, 360, 89.999, 90.001, 270, -90]:
        assert 0 <= em.fold_angle(d) <= 90


def test_area_error():
    assert em.area_error(10, 8) == 0.2
    assert em.area_error(10, 12) == 0.2


def _rec(sid="s00000", rank=1, t=0.5, **kw):
    r = {"id": sid, "rank": rank, "threshold": t, "row": 4, "col": 5, "area": 10,
         "theta_deg": 5.0, "ar": 2.0}
    r.update(kw)
    return r


def test_cluster_errors():
    truth = [_rec(), _rec(rank=2)]
    errs, skipped = em.cluster_errors(truth, truth)
    assert not skipped
    assert all(e.distance == 0 and e.delta_a == 0 and e.delta_theta == 0 and e.delta_ar == 0 for e in errs)
    pred = [_rec(area=8, theta_deg=175.0, ar=1.0, row=7, col=9), _rec(rank=3)]
    errs, skipped = em.cluster_errors(pred, truth)
    assert len(errs) == 1 and len(skipped) == 2
    e = errs[0]
    assert e.delta_a == pytest.approx(0.2) and e.delta_theta == pytest.approx(10.0)
    assert e.delta_theta_raw == pytest.approx(170.0)
    assert e.distance == 5.0 and e.delta_ar == 0.5


def test_cluster_errors_missing_fit():
    errs, _ = em.cluster_errors([_rec(theta_deg=None, ar=None)], [_rec()])
    assert math.isnan(errs[0].delta_theta) and "theta_missing" in errs[0].flags


def test_binning():
    c = em.bin_mse_by_stat(np.full(5, 0.3), np.arange(5.0))
    assert (c.counts > 0).sum() == 1 and c.mse_mean[0] == 2.0
    stats = np.r_[np.full(4, 0.1), np.full(6, 0.9)]
    mses = np.r_[np.full(4, 1.0), np.full(6, 3.0)]
    c = em.bin_mse_by_stat(stats, mses, bins=10)
    full = c.counts > 0
    assert full.sum() == 2 and c.counts.sum() == 10
    np.testing.assert_allclose(c.mse_mean[full], [1.0, 3.0])
    np.testing.assert_allclose(c.stat_mean[full], [0.1, 0.9])
    s = np.random.default_rng(3).random(100)
    assert em.bin_mse_by_stat(s, s).counts.sum() == 100


def test_per_grain_errors():
    labels = np.zeros((8, 8), dtype=int)
    labels[:, 4:] = 1
    pred = np.zeros((2, 2, 1))
    truth = np.array([[1.0, 2.0], [1.0, 2.0]])[..., None]
    np.testing.assert_allclose(em.per_grain_errors(labels, pred, truth), [1.0, 4.0])


# --- filters and ablation ---------------------------------------------------------------

@pytest.fixture
def model():
    m = M.CedModel(seed=3)
    w, b = m.params[0]
    w[..., 0] = -np.abs(w[..., 0])    # dead filter
    b[0] = -0.1
    w[..., 1] = 0.0                   # constant positive response
    b[1] = 0.5
    return m


def test_filter_types(model):
    probe = em.filter_probe(model)
    types = probe["types"]
    assert types[0] == 5 and types[1] == 1
    assert set(types) <= set(em.FILTER_TYPES)
    assert len(types) == 64


def test_classify_rules():
    values = np.linspace(0, 1, 5)
    single = np.stack([values, 1 - values, np.zeros(5), np.zeros(5)], axis=1)
    bi = np.array([[0.5, 0.5, 0.0, 1.0]])
    np.testing.assert_array_equal(em.classify_filters(single, bi, values), [2, 3, 5, 4])


def test_ablation_dead_filter_exact(model):
    rng = np.random.default_rng(0)
    x, y = rng.random((6, 128, 128, 4)), rng.random((6, 32, 32, 1))
    assert em.ablate_filter(model, x, y, 0) == 0.0
    base, table = em.ablation_table(model, x, y)
    assert table[0] == 0.0 and len(table) == 64
    k = int(np.argmax(table))
    assert all(table[k] >= t for t in table)


def test_ablate_all_is_constant(model):
    rng = np.random.default_rng(1)
    x, y = rng.random((4, 128, 128, 4)), rng.random((4, 32, 32, 1))
    m = em.ablated(model, np.arange(64))
    out = M.forward(m, x)
    const = em.constant_output(model, (1, 128, 128, 4))
    np.testing.assert_array_equal(out, np.broadcast_to(const, out.shape))
    base = M.evaluate_mse(model, x, y)
    expect = 100 * (M.loss_mse(np.broadcast_to(const, y.shape), y) - base) / base
    assert em.ablate_filter(model, x, y, np.arange(64)) == pytest.approx(expect, rel=1e-9)


def test_ablation_index_checked(model):
    with pytest.raises(IndexError):
        em.ablated(model, [64])
    # the original model is untouched
    assert model.params[0][1][1] == np.float32(0.5)
    em.ablated(model, [1])
    assert model.params[0][1][1] == np.float32(0.5)
