import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from topodepth import metrics
from topodepth.errors import LengthMismatch, NoValidPixels


def test_identical_maps():
    g = np.array([[1.0, 2.0], [3.0, 4.0]])
    r = metrics.depth_metrics(g, g)
    for k in ("rmse", "log_rmse", "abs_rel", "sq_rel"):
        assert r[k] == 0.0
    assert r["delta1"] == r["delta2"] == r["delta3"] == 1.0


def test_single_pixel_hand_values():
    r = metrics.depth_metrics(np.array([1.0]), np.array([2.0]))
    assert r["abs_rel"] == 0.5
    assert r["sq_rel"] == 0.5
    assert r["rmse"] == 1.0
    assert abs(r["log_rmse"] - math.log(2.0)) < 1e-15
    # ratio 2 exceeds 1.25**3 = 1.953125
    assert r["delta1"] == r["delta2"] == r["delta3"] == 0.0


def test_two_pixel_hand_values():
    r = metrics.depth_metrics(np.array([2.0, 3.0]), np.array([1.0, 3.0]))
    assert abs(r["rmse"] - math.sqrt(0.5)) < 1e-12
    assert r["delta1"] == 0.5
    assert r["abs_rel"] == 0.5  # (1/1 + 0) / 2
    assert r["mean_gt_depth"] == 2.0


def test_holes_and_mask_excluded():
    g = np.array([1.0, np.nan, 0.0, 2.0])
    e = np.array([1.0, 5.0, 5.0, 4.0])
    r = metrics.depth_metrics(e, g, mask=np.array([True, True, True, False]))
    assert r["pixel_count"] == 1 and r["rmse"] == 0.0


def test_no_valid_pixels():
    with pytest.raises(NoValidPixels):
        metrics.depth_metrics(np.array([1.0]), np.array([np.nan]))


def test_non_positive_estimates_are_floored():
    r = metrics.depth_metrics(np.array([0.0, -1.0]), np.array([1.0, 1.0]))
    assert math.isfinite(r["log_rmse"]) and r["delta3"] == 0.0


depth_pairs = st.integers(1, 40).flatmap(
    lambda n: st.tuples(
        hnp.arrays(np.float64, n, elements=st.floats(0.05, 20.0)),
        hnp.arrays(np.float64, n, elements=st.floats(0.05, 20.0)),
    )
)


@given(depth_pairs)
def test_delta_monotone(pair):
    e, g = pair
    r = metrics.depth_metrics(e, g)
    assert 0 <= r["delta1"] <= r["delta2"] <= r["delta3"] <= 1


@settings(max_examples=80)
@given(depth_pairs, st.sampled_from([0.5, 2.0, 4.0, 0.25]))
def test_scale_equivariance(pair, s):
    # powers of two keep the scaling exact in floating point
    e, g = pair
    a = metrics.depth_metrics(e, g)
    b = metrics.depth_metrics(s * e, s * g)
    for k in ("log_rmse", "abs_rel"):
        assert abs(b[k] - a[k]) <= 1e-12 * max(1.0, abs(a[k]))
    for k in ("delta1", "delta2", "delta3"):
        assert b[k] == a[k]
    assert abs(b["rmse"] - s * a["rmse"]) <= 1e-12 * max(1.0, s * a["rmse"])
    assert abs(b["sq_rel"] - s * a["sq_rel"]) <= 1e-12 * max(1.0, s * a["sq_rel"])


@settings(max_examples=40)
@given(depth_pairs, st.floats(0.3, 3.0))
def test_scale_equivariance_arbitrary_factor(pair, s):
    e, g = pair
    a = metrics.depth_metrics(e, g)
    b = metrics.depth_metrics(s * e, s * g)
    assert abs(b["abs_rel"] - a["abs_rel"]) <= 1e-12 * max(1.0, a["abs_rel"])
    assert abs(b["rmse"] - s * a["rmse"]) <= 1e-12 * max(1.0, s * a["rmse"])


@given(depth_pairs, st.randoms(use_true_random=False))
def test_order_invariance(pair, rnd):
    e, g = pair
    perm = list(range(len(e)))
    rnd.shuffle(perm)
    a = metrics.depth_metrics(e, g)
    b = metrics.depth_metrics(e[perm], g[perm])
    for k in a:
        assert abs(a[k] - b[k]) <= 1e-12 * max(1.0, abs(a[k]))


def test_accumulator_pools_pixels():
    e1, g1 = np.array([2.0, 3.0]), np.array([1.0, 3.0])
    e2, g2 = np.array([1.0]), np.array([2.0])
    acc = metrics.DepthAccumulator()
    acc.add(e1, g1)
    acc.add(e2, g2)
    pooled = metrics.depth_metrics(np.concatenate([e1, e2]), np.concatenate([g1, g2]))
    assert acc.result() == pooled


def test_topo_identity():
    assert metrics.topo_metrics([0, 3, 2], [0, 3, 2], 4) == (1.0, 1.0)


def test_topo_off_by_one_loop():
    acc, off = metrics.topo_metrics([0, 1, 2], [1, 1, 1], 4)
    assert acc == 1 / 3 and off == 1.0


def test_topo_distance_two():
    assert metrics.topo_metrics([2], [0], 4) == (0.0, 0.0)


def test_topo_seam_adjacency():
    assert metrics.topo_metrics([3], [0], 4) == (0.0, 1.0)
    assert metrics.topo_metrics([3], [0], 4, loop=False) == (0.0, 0.0)


def test_topo_length_mismatch():
    with pytest.raises(LengthMismatch):
        metrics.topo_metrics([0, 1], [0], 4)


def test_report_serialisation_round_trip():
    rep = metrics.MetricsReport(1.0, 0.1, 0.05, 0.04, 0.002, 0.97, 0.99, 1.0, 0.94, 1.0, 100, 3,
                                oracle_node={"rmse": 0.09})
    assert metrics.MetricsReport.from_json(rep.to_json()) == rep
    kv = rep.to_kv()
    assert "rmse=0.1\n" in kv and "oracle_node.rmse=0.09" in kv
    assert "d<1.25 0.970" in rep.table_row()
