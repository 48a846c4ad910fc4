# Copyright 2026 sparse-fuse contributors

import json

import numpy as np
import pytest

from sparse_fuse import geometry as geo
from sparse_fuse import harness
from sparse_fuse.config import (
    BenchConfig,
    DecoderConfig,
    EvalConfig,
    SceneConfig,
    Settings,
    TrainConfig,
)
from sparse_fuse.errors import DivergenceError
from sparse_fuse.model import InstanceSet


@pytest.fixture
def settings():
    return Settings(
        seed=3,
        scene=SceneConfig(
            num_cameras=4,
            camera_spacing_deg=90.0,
            channels=8,
            num_objects=3,
            frames=4,
            surface_samples=4,
        ),
        decoder=DecoderConfig(
            num_single_frame_layers=1,
            num_multi_frame_layers=1,
            total_instances=6,
            temporal_instances=4,
            feature_dim=8,
            heads=2,
            num_learnable_keypoints=1,
            groups=2,
            equivalent_focal=32.0,
        ),
        train=TrainConfig(num_scenes=1, frames_per_scene=2),
        bench=BenchConfig(t_values=[1, 2, 3], warmup=0),
    )


@pytest.fixture
def scene(settings):
    return harness.generate_scene(settings.scene, settings.seed)


def test_scene_is_seeded(settings):
    a = harness.generate_scene(settings.scene, 11)
    b = harness.generate_scene(settings.scene, 11)
    np.testing.assert_array_equal(a.objects, b.objects)
    np.testing.assert_array_equal(a.ego_poses, b.ego_poses)
    c = harness.generate_scene(settings.scene, 12)
    assert not np.array_equal(a.objects, c.objects)


def test_first_ego_motion_is_identity(scene):
    motion = scene.ego_motion(0)
    np.testing.assert_array_equal(motion.rotation, np.eye(3))
    assert motion.dt == pytest.approx(0.5)


def test_ground_truth_follows_ego_motion(scene):
    # Ground truth of frame f+1 is frame f projected with the ego motion.
    moved = geo.project_anchors(scene.ground_truth(1), scene.ego_motion(2))
    np.testing.assert_allclose(moved, scene.ground_truth(2), atol=1e-9)


def test_render_is_deterministic(scene):
    first, cloud = harness.render_features(scene, 1)
    second, _ = harness.render_features(scene, 1)
    assert first.num_scales == 2
    assert first.maps[0].shape == (4, 8, 16, 32)
    assert first.maps[1].shape == (4, 8, 8, 16)
    for a, b in zip(first.maps, second.maps):
        np.testing.assert_array_equal(a, b)
    assert cloud.shape == (3 * 4, 3)


def test_render_without_noise_is_blank_off_objects(settings):
    empty = harness.generate_scene(settings.scene.model_copy(update={"num_objects": 0}), 0)
    pyr, cloud = harness.render_features(empty, 0, noise_level=0.0)
    assert not any(fmap.any() for fmap in pyr.maps)
    assert cloud.shape == (0, 3)


def test_render_rejects_frame_outside_scene(scene):
    with pytest.raises(IndexError):
        harness.render_features(scene, scene.frames)


def test_build_decoder_applies_changes(settings):
    model = harness.build_decoder(settings, temporal=False)
    assert model.cfg.temporal is False
    assert model.num_views == 4
    assert model.channels == 8


def test_recurrent_calls_per_frame_constant(settings, scene):
    report, detections = harness.run_recurrent(scene, harness.build_decoder(settings))
    calls = report.calls_per_frame()
    assert len(calls) == scene.frames
    assert len(set(calls)) == 1
    assert calls[0] == settings.decoder.num_layers * settings.decoder.total_instances
    assert all(len(d) == settings.decoder.total_instances for d in detections)
    peaks = [row.peak_intermediate_bytes for row in report.rows]
    assert peaks[0] > 0
    assert len(set(peaks)) == 1


def test_multiframe_calls_scale_with_t(settings, scene):
    model = harness.build_decoder(settings)
    base = settings.decoder.num_layers * settings.decoder.total_instances
    for t in (1, 3):
        report = harness.run_multiframe_baseline(scene, model, t)
        assert set(report.calls_per_frame()) == {base * t}


def test_multiframe_t1_matches_recurrent_calls(settings, scene):
    model = harness.build_decoder(settings)
    recurrent, _ = harness.run_recurrent(scene, model)
    single = harness.run_multiframe_baseline(scene, model, 1)
    np.testing.assert_array_equal(recurrent.calls_per_frame(), single.calls_per_frame())


def test_multiframe_rejects_zero_t(settings, scene):
    with pytest.raises(ValueError):
        harness.run_multiframe_baseline(scene, harness.build_decoder(settings), 0)


def test_bench_csv(settings, tmp_path):
    reports = harness.run_bench(settings.model_copy(update={"bench": BenchConfig(
        t_values=[1, 2], frames=2
    )}))
    assert [(r.mode, r.T) for r in reports] == [("recurrent", 1), ("multiframe", 1),
                                                 ("multiframe", 2)]
    path = tmp_path / "bench.csv"
    harness.write_bench_csv(reports, path)
    lines = path.read_text().splitlines()
    assert lines[0] == harness.BENCH_HEADER
    assert lines[1] == ",".join(harness.BENCH_COLUMNS)
    rows = harness.read_bench_csv(path)
    assert len(rows) == 6
    assert rows[0]["mode"] == "recurrent"
    assert rows[-1]["T"] == 2
    slope, intercept = harness.fit_calls_vs_t(reports)
    assert slope == pytest.approx(settings.decoder.num_layers * settings.decoder.total_instances)
    assert intercept == pytest.approx(0.0, abs=1e-6)


def test_read_bench_csv_rejects_foreign_file(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        harness.read_bench_csv(path)


def test_coefficient_of_variation():
    assert harness.coefficient_of_variation([5, 5, 5]) == 0.0
    assert harness.coefficient_of_variation([1, 3]) == pytest.approx(0.5)
    assert harness.coefficient_of_variation([0, 0]) == 0.0


def _as_detections(gt: np.ndarray, dim: int = 4) -> InstanceSet:
    count = len(gt)
    return InstanceSet(gt, np.zeros((count, dim)), np.zeros((count, dim)), np.ones(count))


def test_evaluate_perfect_detections(scene):
    detections = [
        _as_detections(scene.ground_truth(f)[scene.observable(f)]) for f in range(scene.frames)
    ]
    metrics = harness.evaluate(detections, scene, EvalConfig())
    assert metrics.num_gt > 0
    assert metrics.recall == 1.0
    assert metrics.center_mae == 0.0
    assert metrics.velocity_mae == 0.0


def test_evaluate_shifted_detections(scene):
    detections = []
    for f in range(scene.frames):
        gt = scene.ground_truth(f)[scene.observable(f)].copy()
        gt[:, geo.X] += 1.0
        detections.append(_as_detections(gt))
    metrics = harness.evaluate(detections, scene, EvalConfig())
    assert metrics.center_mae == pytest.approx(1.0)
    assert metrics.recall == 1.0


def test_evaluate_nothing_detected(scene):
    detections = [InstanceSet.empty(4) for _ in range(scene.frames)]
    metrics = harness.evaluate(detections, scene, EvalConfig())
    assert metrics.recall == 0.0
    assert metrics.center_mae is None
    assert metrics.as_dict()["velocity_mae"] is None


def test_evaluate_ignores_low_confidence(scene):
    gt = scene.ground_truth(0)[scene.observable(0)]
    dets = _as_detections(gt)
    dets = InstanceSet(dets.anchors, dets.features, dets.embeddings, np.zeros(len(gt)))
    metrics = harness.evaluate([dets], scene, EvalConfig(score_threshold=0.5))
    assert metrics.matched == 0


def _observed(scene):
    f = next(f for f in range(scene.frames) if scene.observable(f).any())
    return f, scene.ground_truth(f)[scene.observable(f)]


def test_evaluate_top_k_ignores_threshold(scene):
    f, gt = _observed(scene)
    dets = _as_detections(gt)
    dets = InstanceSet(dets.anchors, dets.features, dets.embeddings, np.zeros(len(gt)))
    cfg = EvalConfig(score_threshold=0.5, top_k=len(gt))
    metrics = harness.evaluate([InstanceSet.empty(4)] * f + [dets], scene, cfg)
    assert metrics.matched == len(gt)
    assert metrics.velocity_mae == 0.0


def test_evaluate_top_k_keeps_most_confident(scene):
    f, gt = _observed(scene)
    far = gt.copy()
    far[:, geo.X] += 100.0
    anchors = np.concatenate([far, gt])
    count = len(anchors)
    confidences = np.r_[np.full(len(gt), 0.2), np.full(len(gt), 0.1)]
    dets = InstanceSet(anchors, np.zeros((count, 4)), np.zeros((count, 4)), confidences)
    frames = [InstanceSet.empty(4)] * f + [dets]
    metrics = harness.evaluate(frames, scene, EvalConfig(top_k=len(gt)))
    assert metrics.matched == 0


def test_simulate_records(settings):
    model = harness.build_decoder(settings)
    records = harness.simulate(settings, model.params, num_scenes=2)
    assert [r["scene"] for r in records] == [3, 4]
    for record in records:
        assert set(record) >= {"schema", "center_mae", "velocity_mae", "recall",
                               "agg_calls_per_frame"}
        json.dumps(record)


def test_moving_average():
    np.testing.assert_allclose(harness.moving_average([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
    assert len(harness.moving_average([], 3)) == 0


def test_train_zero_epochs_keeps_weights(settings, scene):
    model = harness.build_decoder(settings)
    before = model.params.copy()
    result = harness.train_toy([scene], model, settings.train, epochs=0)
    assert result.steps == 0
    assert result.records == []
    assert result.params.equals(before)


def test_train_writes_records(settings, scene, tmp_path):
    model = harness.build_decoder(settings)
    before = model.params.copy()
    log = tmp_path / "train.jsonl"
    result = harness.train_toy([scene], model, settings.train, epochs=1, log_path=log)
    assert result.steps == 2
    lines = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["kind"] for r in lines] == ["step", "step", "epoch"]
    assert {"box", "cls", "depth", "total", "grad_norm"} <= set(lines[0])
    assert len(result.series("depth")) == 2
    assert not result.params.equals(before)


def test_train_respects_max_steps(settings, scene):
    cfg = settings.train.model_copy(update={"max_steps": 1})
    result = harness.train_toy([scene], harness.build_decoder(settings), cfg, epochs=3)
    assert result.steps == 1


def test_train_aborts_on_non_finite_loss(settings, scene):
    model = harness.build_decoder(settings)
    model.params["layers.0.cls.bias"] = [np.nan]
    with pytest.raises(DivergenceError):
        harness.train_toy([scene], model, settings.train, epochs=1)


@pytest.mark.parametrize("steps, expected", [(1, 1), (2, 1), (3, 2), (10, 5)])
def test_epochs_for_steps(settings, steps, expected):
    assert harness.epochs_for_steps(settings.train, 1, 4, steps) == expected


def test_depth_trend():
    result = harness.TrainResult(
        None, [{"kind": "step", "depth": float(v)} for v in (4, 3, 2, 1)], 4
    )
    assert harness.depth_trend(result, window=1, early=1, late=4) == (4.0, 1.0)
    assert harness.depth_trend(result, window=2, early=2, late=100) == (3.5, 1.5)
    empty = harness.TrainResult(None, [], 0)
    assert harness.depth_trend(empty, window=2) == (None, None)


@pytest.mark.slow
def test_compare_depth_keys(settings):
    out = harness.compare_depth(settings, seed=1, steps=2)
    assert {"with_depth_box_l1", "without_depth_box_l1", "depth_early", "depth_late",
            "finite"} <= set(out)


@pytest.mark.slow
def test_compare_temporal_pairs(settings):
    pairs = harness.compare_temporal(settings, seeds=[1], steps=2)
    assert len(pairs) == 1
    assert isinstance(pairs[0]["recurrent_better"], bool)


def _report(mode, t, walls, calls):
    return harness.BenchReport(
        mode, t, [harness.BenchRow(f, w, calls, 0) for f, w in enumerate(walls)]
    )


def test_bench_verdicts_pass():
    reports = [
        _report("recurrent", 1, [100] * 40, 90),
        _report("multiframe", 1, [100] * 4, 90),
        _report("multiframe", 8, [500] * 4, 720),
    ]
    verdicts = {v.name: v for v in harness.bench_verdicts(reports)}
    assert set(verdicts) == {"multiframe_calls_linear_in_t", "wall_t8_over_t1",
                             "recurrent_calls_constant", "recurrent_wall_drift"}
    assert all(v.passed for v in verdicts.values())
    assert verdicts["wall_t8_over_t1"].value == pytest.approx(5.0)
    assert verdicts["recurrent_wall_drift"].value == pytest.approx(1.0)


def test_bench_verdicts_fail():
    walls = [100] * 36 + [150] * 4
    reports = [
        _report("recurrent", 1, walls, 90),
        _report("multiframe", 1, [100] * 4, 90),
        _report("multiframe", 8, [300] * 4, 700),
    ]
    verdicts = {v.name: v for v in harness.bench_verdicts(reports)}
    assert not verdicts["multiframe_calls_linear_in_t"].passed
    assert not verdicts["wall_t8_over_t1"].passed
    assert verdicts["recurrent_calls_constant"].passed
    assert verdicts["recurrent_wall_drift"].value == pytest.approx(1.5)
    assert not verdicts["recurrent_wall_drift"].passed


def test_bench_verdicts_skip_short_runs():
    reports = [_report("recurrent", 1, [100] * 5, 90), _report("multiframe", 2, [100] * 5, 180)]
    names = [v.name for v in harness.bench_verdicts(reports)]
    assert names == ["multiframe_calls_linear_in_t", "recurrent_calls_constant"]


@pytest.mark.parametrize("wins, total, passed", [(4, 5, True), (5, 5, True), (3, 5, False),
                                                 (0, 0, False)])
def test_temporal_verdict(wins, total, passed):
    pairs = [{"recurrent_better": i < wins} for i in range(total)]
    verdict = harness.temporal_verdict(pairs)
    assert verdict.passed is passed
    assert verdict.value == wins


@pytest.mark.parametrize("out, passed", [
    ({"depth_early": 2.0, "depth_late": 1.0, "finite": True}, True),
    ({"depth_early": 1.0, "depth_late": 1.0, "finite": True}, False),
    ({"depth_early": 2.0, "depth_late": 1.0, "finite": False}, False),
    ({"depth_early": None, "depth_late": None, "finite": True}, False),
])
def test_depth_verdict(out, passed):
    assert harness.depth_verdict(out).passed is passed


@pytest.mark.slow
def test_desk_temporal_velocity_acceptance():
    pairs = harness.compare_temporal(Settings(), seeds=range(5), steps=200, jobs=5)
    verdict = harness.temporal_verdict(pairs)
    assert verdict.passed, pairs
    assert all(p["recurrent_velocity_mae"] is not None for p in pairs)


@pytest.mark.slow
def test_desk_depth_loss_acceptance():
    out = harness.compare_depth(Settings(), seed=0, steps=200)
    assert out["finite"]
    assert harness.depth_verdict(out).passed, out


@pytest.mark.slow
def test_desk_bench_acceptance():
    settings = Settings()
    settings = settings.model_copy(
        update={"bench": settings.bench.model_copy(update={"repeats": 3})}
    )
    verdicts = harness.bench_verdicts(harness.run_bench(settings), settings.bench.warmup)
    assert {v.name for v in verdicts} >= {"wall_t8_over_t1", "recurrent_wall_drift"}
    assert all(v.passed for v in verdicts), verdicts
