# Copyright 2026 sparse-fuse contributors

import json
from unittest.mock import patch

import numpy as np
import pytest

from sparse_fuse import checks
from sparse_fuse.aggregation import basic_aggregate, efficient_aggregate
from sparse_fuse.config import DecoderConfig, SceneConfig, Settings, VerifyConfig
from sparse_fuse.errors import PropertyFailure


@pytest.fixture
def settings():
    return Settings(
        seed=2,
        scene=SceneConfig(num_cameras=3, camera_spacing_deg=120.0, channels=8, num_objects=4,
                          frames=3, surface_samples=4),
        decoder=DecoderConfig(
            num_single_frame_layers=1,
            num_multi_frame_layers=1,
            total_instances=8,
            temporal_instances=5,
            feature_dim=8,
            heads=2,
            num_learnable_keypoints=2,
            groups=2,
            equivalent_focal=32.0,
        ),
        verify=VerifyConfig(
            aggregation_cases=6,
            gradient_cases=3,
            geometry_cases=200,
            permutation_cases=1,
        ),
    )


def test_random_request_is_well_formed():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pyr, req = checks.random_request(rng)
        k, n = req.visible.shape
        assert pyr.channels % req.weights.shape[-1] == 0
        assert req.weights.shape == (k, n, pyr.num_scales, req.weights.shape[-1])
        for s in range(1, pyr.num_scales):
            assert pyr.maps[s].shape[2] == max(2, pyr.maps[s - 1].shape[2] // 2)
        np.testing.assert_allclose(req.weights.sum(axis=(1, 2, 3)), req.visible.any(axis=1))


def test_random_request_all_visible():
    pyr, req = checks.random_request(np.random.default_rng(1), all_visible=True)
    assert req.visible.all()
    width, height = pyr.image_size
    assert (req.points[..., 0] <= width - 1).all()
    assert (req.points[..., 1] <= height - 1).all()


def test_random_request_paths_agree():
    pyr, req = checks.random_request(np.random.default_rng(5), all_visible=True)
    np.testing.assert_allclose(efficient_aggregate(pyr, req), basic_aggregate(pyr, req),
                               atol=1e-10)


@pytest.mark.parametrize(
    "check",
    [
        checks.check_equivalence,
        checks.check_ledger_ratio,
        checks.check_aggregation_gradients,
        checks.check_partitioning,
        checks.check_geometry,
        checks.check_propagation,
        checks.check_selection,
    ],
)
def test_check_passes(settings, check):
    result = check(settings)
    assert result.passed, result
    assert result.value <= result.threshold


def test_decoder_gradients_pass(settings):
    result = checks.check_decoder_gradients(settings)
    assert result.passed, result.value


@pytest.mark.slow
def test_camera_permutation_passes(settings):
    assert checks.check_permutation(settings).passed


def test_micro_decoder_sees_every_keypoint():
    model, inputs = checks.micro_decoder(0)
    frame = model.forward_frame(inputs["state"], inputs["pyr"], inputs["cams"],
                                inputs["motion"])
    assert all(t.visible.all() for t in frame.all_layers)
    assert len(frame.selection.temporal_index) == 1


def test_perturbed_equivalence_fails(settings):
    result = checks.check_equivalence(settings, perturb=True)
    assert not result.passed
    assert result.value > settings.verify.equivalence_tol
    assert {"points", "visible", "weights"} <= set(result.case)


def test_equivalence_rejects_unnormalised_requests(settings):
    pyr, req = checks.random_request(np.random.default_rng(0), all_visible=True)
    doubled = checks.AggregationRequest(req.points, req.visible, 2.0 * req.weights)
    with patch("sparse_fuse.checks.random_request", return_value=(pyr, doubled)):
        result = checks.check_equivalence(settings)
    assert not result.passed
    assert "weights" in result.case


def test_failure_raises_inside_check_are_reported(settings):
    def broken():
        raise PropertyFailure("demo", "broken", {"x": np.zeros(2)})

    result = checks._timed("demo", 1.0, broken)
    assert not result.passed
    assert result.value == float("inf")
    assert "x" in result.case


def test_run_all_writes_failures(settings, tmp_path):
    cheap = settings.model_copy(update={"verify": settings.verify.model_copy(
        update={"geometry_cases": 100}
    )})
    results = checks.run_all(cheap, tmp_path, perturb=True)
    assert [r.name for r in results][0] == "aggregation_equivalence"
    assert len(results) == len(checks.CHECKS)
    assert (tmp_path / "failure-aggregation_equivalence.npz").exists()
    doc = checks.report(results)
    assert doc["passed"] is False
    json.dumps(doc)
    assert all("elapsed_s" not in c for c in doc["checks"])
