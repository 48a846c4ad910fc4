# Copyright 2026 sparse-fuse contributors

import numpy as np
import pytest

from sparse_fuse import aggregation as agg
from sparse_fuse import geometry as geo
from sparse_fuse.checks import random_request
from sparse_fuse.errors import ShapeError
from sparse_fuse.numerics import bilinear_sample, finite_diff_check


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def nested_loop_aggregate(pyr, req):
    """Scalar oracle: keypoints, views, scales, groups, channels."""
    width, height = pyr.image_size
    channels = pyr.channels
    groups = req.weights.shape[-1]
    per_group = channels // groups
    out = np.zeros(channels)
    for k in range(req.points.shape[0]):
        for n in range(req.points.shape[1]):
            if not req.visible[k, n]:
                continue
            for s, fmap in enumerate(pyr.maps):
                h, w = fmap.shape[2:]
                u = (req.points[k, n, 0] + 0.5) * w / width - 0.5
                v = (req.points[k, n, 1] + 0.5) * h / height - 0.5
                sample = bilinear_sample(fmap[n], (u, v))
                for g in range(groups):
                    for c in range(g * per_group, (g + 1) * per_group):
                        out[c] += req.weights[k, n, s, g] * sample[c]
    return out


def single_point(fmap, point, weight=1.0):
    pyr = agg.FeaturePyramid((fmap[None],))
    req = agg.AggregationRequest(
        np.array([[point]], dtype=float), np.ones((1, 1), bool), np.full((1, 1, 1, 1), weight)
    )
    return pyr, req


def test_single_sample_at_grid_node(rng):
    fmap = rng.standard_normal((4, 5, 6))
    pyr, req = single_point(fmap, (2.0, 3.0))
    np.testing.assert_allclose(agg.basic_aggregate(pyr, req), fmap[:, 3, 2])
    np.testing.assert_allclose(agg.efficient_aggregate(pyr, req), fmap[:, 3, 2])


def test_zero_weights_give_zero(rng):
    pyr, req = random_request(rng, max_k=4, max_n=3, max_s=2)
    zero = agg.AggregationRequest(req.points, req.visible, np.zeros_like(req.weights))
    assert not agg.basic_aggregate(pyr, zero).any()
    assert not agg.efficient_aggregate(pyr, zero).any()


def test_basic_matches_nested_loops(rng):
    maps = (rng.standard_normal((2, 4, 8, 10)), rng.standard_normal((2, 4, 4, 5)))
    pyr = agg.FeaturePyramid(maps)
    points = rng.uniform(0, 7, (2, 2, 2))
    visible = np.array([[True, True], [True, False]])
    weights = agg.normalize_weights(rng.standard_normal((2, 2, 2, 2)), visible)
    req = agg.AggregationRequest(points, visible, weights)
    expected = nested_loop_aggregate(pyr, req)
    assert np.max(np.abs(agg.basic_aggregate(pyr, req) - expected)) < 1e-12
    assert np.max(np.abs(agg.efficient_aggregate(pyr, req) - expected)) < 1e-12


def test_fused_matches_reference_sweep(rng):
    for _ in range(25):
        pyr, req = random_request(rng)
        diff = np.abs(agg.efficient_aggregate(pyr, req) - agg.basic_aggregate(pyr, req))
        assert diff.max() < 1e-10


def test_per_keypoint_sums_to_total(rng):
    pyr, req = random_request(rng, max_k=6)
    per_kp = agg.efficient_aggregate(pyr, req, per_keypoint=True)
    assert per_kp.shape == (req.points.shape[0], pyr.channels)
    np.testing.assert_allclose(per_kp.sum(axis=0), agg.efficient_aggregate(pyr, req),
                               atol=1e-12)
    np.testing.assert_allclose(per_kp, agg.basic_aggregate(pyr, req, per_keypoint=True),
                               atol=1e-10)


def test_all_out_of_view(rng):
    pyr, req = random_request(rng)
    hidden = agg.AggregationRequest(
        np.full_like(req.points, -1.0), np.zeros_like(req.visible), req.weights
    )
    ledger = agg.TrafficLedger()
    assert not agg.efficient_aggregate(pyr, hidden, ledger).any()
    assert ledger.samples == 0


def test_ledger_contracts(rng):
    pyr, req = random_request(rng, all_visible=True)
    basic, fused = agg.TrafficLedger(), agg.TrafficLedger()
    agg.basic_aggregate(pyr, req, basic)
    agg.efficient_aggregate(pyr, req, fused)
    k, n = req.visible.shape
    s, c = pyr.num_scales, pyr.channels
    assert basic.peak_intermediate_bytes >= k * n * s * c * 8
    assert fused.peak_intermediate_bytes == c * 8
    assert fused.peak_intermediate_bytes / basic.peak_intermediate_bytes <= 2 / (n * s)
    assert basic.calls == fused.calls == 1
    assert fused.live_bytes == basic.live_bytes == 0


def test_ledger_hold_raises_peak():
    ledger = agg.TrafficLedger()
    ledger.hold(100)
    ledger.store(10)
    ledger.free(10)
    assert ledger.peak_intermediate_bytes == 110
    assert ledger.snapshot()["bytes_written"] == 10


def test_channel_partition_is_exact(rng):
    pyr, req = random_request(rng)
    full = agg.efficient_aggregate(pyr, req)
    halves = np.array_split(np.arange(pyr.channels), 2)
    parts = [agg.efficient_aggregate(pyr, req, channels=h) for h in halves]
    for part, other in zip(parts, reversed(halves)):
        assert not part[other].any()
    np.testing.assert_array_equal(parts[0] + parts[1], full)


def test_channel_items_out_of_range(rng):
    pyr, req = random_request(rng)
    with pytest.raises(ShapeError):
        agg.efficient_aggregate(pyr, req, channels=[pyr.channels])


def test_many_matches_single(rng):
    pyr, req = random_request(rng, max_k=5)
    batch = agg.efficient_aggregate_many(
        pyr,
        np.stack([req.points, req.points]),
        np.stack([req.visible, req.visible]),
        np.stack([req.weights, req.weights]),
    )
    np.testing.assert_array_equal(batch[0], batch[1])
    np.testing.assert_allclose(batch[0], agg.efficient_aggregate(pyr, req))


@pytest.mark.parametrize(
    "change",
    [
        {"points": np.zeros((2, 3, 2))},
        {"visible": np.ones((3, 1), bool)},
        {"weights": np.ones((2, 1, 1, 3))},
        {"weights": -np.ones((2, 1, 1, 1))},
        {"weights": np.full((2, 1, 1, 1), np.nan)},
    ],
)
def test_rejects_bad_requests(change):
    pyr = agg.FeaturePyramid((np.ones((1, 4, 3, 3)),))
    fields = {
        "points": np.ones((2, 1, 2)),
        "visible": np.ones((2, 1), bool),
        "weights": np.full((2, 1, 1, 1), 0.5),
    }
    fields.update(change)
    with pytest.raises(ShapeError):
        agg.efficient_aggregate(pyr, agg.AggregationRequest(**fields))


def test_pyramid_validation():
    with pytest.raises(ShapeError):
        agg.FeaturePyramid(())
    with pytest.raises(ShapeError):
        agg.FeaturePyramid((np.ones((1, 2, 4, 4)), np.ones((1, 3, 2, 2))))
    with pytest.raises(ShapeError):
        agg.FeaturePyramid((np.ones((1, 2, 1, 4)),))


def test_pack_round_trip(rng):
    maps = (rng.standard_normal((2, 3, 4, 6)), rng.standard_normal((2, 3, 2, 3)))
    pyr = agg.FeaturePyramid(maps)
    assert pyr.image_size == (6, 4)
    np.testing.assert_array_equal(pyr.packed.level_start_index, [0, 24])
    for got, want in zip(pyr.unpack(pyr.packed.values), maps):
        np.testing.assert_array_equal(got, want)


def test_backward_zero_upstream(rng):
    pyr, req = random_request(rng, max_k=3, max_n=2)
    grads = agg.efficient_aggregate_backward(pyr, req, np.zeros(pyr.channels))
    assert not any(g.any() for g in grads.maps)
    assert not grads.points.any()
    assert not grads.weights.any()


def test_weight_grad_by_hand(rng):
    fmap = rng.standard_normal((4, 5, 5))
    pyr, req = single_point(fmap, (1.4, 2.7), weight=0.3)
    wide = agg.AggregationRequest(req.points, req.visible, np.full((1, 1, 1, 2), 0.3))
    upstream = rng.standard_normal(4)
    grads = agg.efficient_aggregate_backward(pyr, wide, upstream)
    sample = bilinear_sample(fmap, (1.4, 2.7))
    assert grads.weights[0, 0, 0, 0] == pytest.approx(upstream[:2] @ sample[:2])
    assert grads.weights[0, 0, 0, 1] == pytest.approx(upstream[2:] @ sample[2:])


def test_backward_matches_finite_differences(rng):
    pyr, req = random_request(rng, max_k=3, max_n=2, max_s=2, max_g=2, max_c=4, max_hw=6)
    upstream = rng.standard_normal(pyr.channels)
    grads = agg.efficient_aggregate_backward(pyr, req, upstream)
    flat = np.concatenate([m.reshape(-1) for m in pyr.maps])
    sizes = np.cumsum([m.size for m in pyr.maps])[:-1]

    def f_maps(x):
        maps = [p.reshape(m.shape) for p, m in zip(np.split(x, sizes), pyr.maps)]
        return float(upstream @ agg.efficient_aggregate(pyr.with_maps(maps), req))

    def f_weights(x):
        request = agg.AggregationRequest(req.points, req.visible, x)
        return float(upstream @ agg.efficient_aggregate(pyr, request))

    grad_maps = np.concatenate([g.reshape(-1) for g in grads.maps])
    assert finite_diff_check(f_maps, flat, grad_maps) < 1e-5
    # Zero weights cannot be perturbed: a negative weight is rejected.
    positive = np.flatnonzero(req.weights > 1e-4)
    weights = np.array(req.weights)
    assert finite_diff_check(f_weights, weights, grads.weights, indices=positive) < 1e-5


def test_point_grad_matches_finite_differences(rng):
    fmap = rng.standard_normal((3, 6, 7))
    pyr, req = single_point(fmap, (2.31, 3.46))
    upstream = rng.standard_normal(3)
    grads = agg.efficient_aggregate_backward(pyr, req, upstream)

    def f_points(x):
        request = agg.AggregationRequest(x, req.visible, req.weights)
        return float(upstream @ agg.efficient_aggregate(pyr, request))

    assert finite_diff_check(f_points, np.array(req.points), grads.points) < 1e-5


def test_backward_does_not_count_calls(rng):
    pyr, req = random_request(rng, max_k=3)
    ledger = agg.TrafficLedger()
    agg.efficient_aggregate(pyr, req, ledger)
    agg.efficient_aggregate_backward(pyr, req, np.ones(pyr.channels), ledger)
    assert ledger.calls == 1


def test_normalize_uniform():
    weights = agg.normalize_weights(np.zeros((2, 3, 2, 4)), np.ones((2, 3), bool))
    np.testing.assert_allclose(weights, 1 / 24)


def test_normalize_masked_view(rng):
    visible = np.array([[True, False, True]])
    weights = agg.normalize_weights(rng.standard_normal((1, 3, 2, 2)), visible)
    assert not weights[0, 1].any()
    assert weights[0].sum() == pytest.approx(1.0)


def test_normalize_all_masked_is_zero(rng):
    weights = agg.normalize_weights(rng.standard_normal((2, 2, 1, 1)), np.zeros((2, 2), bool))
    assert not weights.any()


def test_normalize_formula(rng):
    raw = rng.standard_normal((1, 2, 2, 2))
    visible = np.array([[True, True]])
    expected = np.exp(raw) / np.exp(raw).sum()
    np.testing.assert_allclose(agg.normalize_weights(raw, visible), expected)


def test_normalize_backward(rng):
    raw = rng.standard_normal((2, 3, 2, 2))
    visible = np.array([[True, False, True], [True, True, True]])
    dweights = rng.standard_normal(raw.shape)
    weights = agg.normalize_weights(raw, visible)
    analytic = agg.normalize_weights_backward(weights, dweights)
    assert not analytic[0, 1].any()

    def objective(x):
        return float(np.sum(dweights * agg.normalize_weights(x, visible)))

    assert finite_diff_check(objective, raw, analytic) < 1e-7


def test_set_worker_threads_is_clamped():
    assert agg.set_worker_threads(0) == 1
    assert agg.set_worker_threads(10_000) >= 1
    agg.set_worker_threads(1)


def test_aggregate_is_linear_in_features(rng):
    for _ in range(10):
        pyr, req = random_request(rng)
        other = pyr.with_maps(rng.standard_normal(m.shape) for m in pyr.maps)
        mixed = pyr.with_maps(2.5 * a - 1.5 * b for a, b in zip(pyr.maps, other.maps))
        expected = (2.5 * agg.efficient_aggregate(pyr, req)
                    - 1.5 * agg.efficient_aggregate(other, req))
        assert np.abs(agg.efficient_aggregate(mixed, req) - expected).max() < 1e-9


def keypoint_samples(pyr, req, k):
    """Every bilinear sample feeding keypoint `k`, one row per visible (view, scale)."""
    width, height = pyr.image_size
    rows = []
    for n in np.nonzero(req.visible[k])[0]:
        for fmap in pyr.maps:
            h, w = fmap.shape[2:]
            u = (req.points[k, n, 0] + 0.5) * w / width - 0.5
            v = (req.points[k, n, 1] + 0.5) * h / height - 0.5
            rows.append(bilinear_sample(fmap[n], (u, v)))
    return np.array(rows)


def test_single_group_output_is_convex(rng):
    for _ in range(10):
        pyr, req = random_request(rng, max_g=1)
        per_kp = agg.efficient_aggregate(pyr, req, per_keypoint=True)
        for k in range(len(per_kp)):
            samples = keypoint_samples(pyr, req, k)
            if not len(samples):
                assert not per_kp[k].any()
                continue
            assert np.all(per_kp[k] >= samples.min(axis=0) - 1e-9)
            assert np.all(per_kp[k] <= samples.max(axis=0) + 1e-9)


def test_outward_rig_samples_at_most_two_views(rng):
    rig = geo.outward_rig()
    count = 200
    bearing = rng.uniform(-np.pi, np.pi, count)
    radius = rng.uniform(3.0, 30.0, count)
    points = np.stack(
        [radius * np.cos(bearing), radius * np.sin(bearing), rng.uniform(0.0, 3.0, count)],
        axis=-1,
    ).reshape(20, 10, 3)
    pixels, visible, _ = geo.project_points(points, rig)
    assert visible.sum(axis=-1).max() <= 2
    maps = (rng.standard_normal((6, 4, 16, 32)), rng.standard_normal((6, 4, 8, 16)))
    pyr = agg.FeaturePyramid(maps, (64, 32))
    weights = agg.normalize_weights(rng.standard_normal((20, 10, 6, 2, 2)), visible)
    ledger = agg.TrafficLedger()
    agg.efficient_aggregate_many(pyr, pixels, visible, weights, ledger)
    assert 0 < ledger.max_item_samples <= 2 * pyr.num_scales
    assert ledger.calls == 20


def test_request_normalization_predicate(rng):
    pyr, req = random_request(rng, max_k=6)
    assert req.is_normalized()
    doubled = agg.AggregationRequest(req.points, req.visible, 2.0 * req.weights)
    assert not doubled.is_normalized()
    hidden = np.array(req.visible)
    hidden[0] = False
    weights = agg.normalize_weights(rng.standard_normal(req.weights.shape), hidden)
    assert not weights[0].any()
    assert agg.AggregationRequest(req.points, hidden, weights).is_normalized()
    leaked = np.array(weights)
    leaked[0, 0, 0, 0] = 1.0
    assert not agg.AggregationRequest(req.points, hidden, leaked).is_normalized()
