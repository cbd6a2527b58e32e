import math

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdcnet.errors import MetricError
from tdcnet.metrics import (
    MetricsAccumulator, compute_metrics, error_map, relative_error, save_error_map,
)


def scalar_oracle(pred, gt, region):
    """Plain loop over pooled pixels."""
    d_list = [(float(p), float(g)) for p, g, r in zip(np.ravel(pred), np.ravel(gt), np.ravel(region)) if r]
    n = len(d_list)
    sq = rel = ab = 0.0
    hits = [0, 0, 0]
    for d, ds in d_list:
        sq += (d - ds) ** 2
        rel += abs(d - ds) / ds
        ab += abs(d - ds)
        ratio = max(d / ds, ds / d)
        for k, t in enumerate((1.05, 1.10, 1.25)):
            hits[k] += ratio < t
    return [math.sqrt(sq / n), rel / n, ab / n] + [100.0 * h / n for h in hits]


def as_list(rep):
    return [rep.rmse, rep.rel, rep.mae, rep.delta_105, rep.delta_110, rep.delta_125]


def test_perfect_prediction():
    gt = np.random.default_rng(0).uniform(0.5, 2, (4, 4))
    assert as_list(compute_metrics(gt, gt, np.ones_like(gt))) == [0, 0, 0, 100, 100, 100]


def test_three_pixel_case():
    rep = compute_metrics(np.array([1.0, 2.0, 3.0]).reshape(1, 3), np.array([1.0, 2.0, 4.0]).reshape(1, 3),
                          np.ones((1, 3)))
    assert rep.rmse == pytest.approx(0.5774, abs=5e-5)
    assert rep.rel == pytest.approx(0.0833, abs=5e-5)
    assert rep.mae == pytest.approx(0.3333, abs=5e-5)
    assert [rep.delta_105, rep.delta_110, rep.delta_125] == pytest.approx([66.67] * 3, abs=5e-3)


def test_two_pixel_delta_case():
    rep = compute_metrics(np.array([[1.0, 1.2]]), np.array([[1.0, 1.0]]), np.ones((1, 2)))
    assert [rep.delta_105, rep.delta_110, rep.delta_125] == [50, 50, 100]


@pytest.mark.parametrize("seed", range(100))
def test_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(2, 9)))
    gt = rng.uniform(0.2, 3.0, shape)
    pred = gt * rng.uniform(0.7, 1.3, shape)
    region = rng.random(shape) > 0.3
    region[:, 0, 0] = True
    got = as_list(compute_metrics(pred, gt, region))
    np.testing.assert_allclose(got, scalar_oracle(pred, gt, region), rtol=1e-9, atol=0)


def test_pooled_vs_per_image():
    pred = np.array([[[1.0, 1.0]], [[2.0, 2.0]]])
    gt = np.ones_like(pred)
    region = np.array([[[1, 1]], [[1, 0]]])
    pooled = compute_metrics(pred, gt, region)
    per = compute_metrics(pred, gt, region, aggregation="per_image")
    assert pooled.mae == pytest.approx(1 / 3)
    assert per.mae == pytest.approx(0.5)
    assert pooled.n_pixels == 3 and pooled.n_samples == 2


def test_accumulator_merge_is_associative():
    rng = np.random.default_rng(1)
    parts = [(rng.uniform(1, 2, (4, 4)), rng.uniform(1, 2, (4, 4))) for _ in range(3)]
    accs = [MetricsAccumulator().add(p, g, np.ones((4, 4))) for p, g in parts]
    a = accs[0].merge(accs[1]).merge(accs[2]).report()
    b = accs[0].merge(accs[1].merge(accs[2])).report()
    np.testing.assert_allclose(as_list(a), as_list(b), rtol=1e-12)


def test_nonpositive_gt_names_sample():
    gt = np.ones((2, 2, 2))
    gt[1, 0, 0] = 0
    with pytest.raises(MetricError, match="s1"):
        compute_metrics(np.ones_like(gt), gt, np.ones_like(gt), sample_ids=["s0", "s1"])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_metric_properties(seed, s):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.1, 5, (2, 5, 5))
    pred = rng.uniform(0.1, 5, (2, 5, 5))
    region = np.ones_like(gt)
    rep = compute_metrics(pred, gt, region)
    assert 0 <= rep.delta_105 <= rep.delta_110 <= rep.delta_125 <= 100
    # permutation invariance
    perm = rng.permutation(gt.size)
    rp = compute_metrics(pred.ravel()[perm].reshape(1, -1), gt.ravel()[perm].reshape(1, -1), np.ones((1, gt.size)))
    np.testing.assert_allclose(as_list(rp), as_list(rep), rtol=1e-9)
    # joint scaling
    sc = compute_metrics(pred * s, gt * s, region)
    assert sc.rel == pytest.approx(rep.rel, rel=1e-9)
    assert [sc.delta_105, sc.delta_110, sc.delta_125] == [rep.delta_105, rep.delta_110, rep.delta_125] or \
        np.allclose([sc.delta_105, sc.delta_110, sc.delta_125], [rep.delta_105, rep.delta_110, rep.delta_125],
                    atol=100 / gt.size + 1e-9)
    assert sc.rmse == pytest.approx(s * rep.rmse, rel=1e-9)
    assert sc.mae == pytest.approx(s * rep.mae, rel=1e-9)


def test_report_json_has_header():
    rep = compute_metrics(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)))
    text = rep.to_json(config_hash="abc")
    assert '"aggregation": "pooled"' in text and '"config_hash": "abc"' in text


# --- error maps --------------------------------------------------------------


def test_error_map_zero_error_uniform():
    gt = np.full((8, 8), 1.5)
    region = np.zeros((8, 8), bool)
    region[2:6, 2:6] = True
    img = error_map(gt, gt, region)
    inside = img[region]
    assert img.dtype == np.uint8 and img.shape == (8, 8, 3)
    assert (inside == inside[0]).all()
    jet0 = cv2.cvtColor(cv2.applyColorMap(np.zeros((1, 1), np.uint8), cv2.COLORMAP_JET), cv2.COLOR_BGR2RGB)[0, 0]
    assert (inside[0] == jet0).all()


def test_error_map_ten_percent_is_midscale():
    gt = np.full((4, 4), 2.0)
    img = error_map(gt * 1.1, gt, np.ones((4, 4)))
    mid = cv2.cvtColor(cv2.applyColorMap(np.full((1, 1), 128, np.uint8), cv2.COLORMAP_JET), cv2.COLOR_BGR2RGB)[0, 0]
    assert (img.reshape(-1, 3) == mid).all()


def test_error_map_outside_gray():
    gt = np.full((4, 4), 1.0)
    region = np.eye(4, dtype=bool)
    img = error_map(gt * 1.3, gt, region)
    assert (img[~region] == 128).all()


def test_relative_error_values():
    rel = relative_error(np.array([1.0, 2.2]), np.array([1.0, 2.0]), np.array([1, 1]))
    np.testing.assert_allclose(rel, [0.0, 0.1])


def test_save_error_map(tmp_path):
    gt = np.full((4, 4), 1.0)
    p = save_error_map(tmp_path / "m" / "x.png", gt, gt, np.ones((4, 4)))
    assert cv2.imread(str(p)).shape == (4, 4, 3)
