# Copyright 2026 sparse-fuse contributors

import json
import os
from unittest.mock import patch

import pytest

from sparse_fuse import cli, harness
from sparse_fuse.errors import DivergenceError
from sparse_fuse.model import ModelParameters

SMALL = [
    "scene.num_cameras=2",
    "scene.camera_spacing_deg=180",
    "scene.channels=8",
    "scene.num_objects=3",
    "scene.frames=3",
    "scene.surface_samples=4",
    "decoder.total_instances=6",
    "decoder.temporal_instances=4",
    "decoder.feature_dim=8",
    "decoder.heads=2",
    "decoder.groups=2",
    "decoder.num_multi_frame_layers=1",
    "decoder.num_learnable_keypoints=1",
    "verify.aggregation_cases=3",
    "verify.gradient_cases=2",
    "verify.geometry_cases=100",
    "verify.permutation_cases=1",
    "train.num_scenes=1",
    "train.frames_per_scene=2",
]


def _argv(command, out, *extra):
    argv = [*command, "--out", str(out), "-q"]
    for item in SMALL:
        argv += ["--set", item]
    return argv + list(extra)


def _read_json(path):
    return json.loads(path.read_text())


def test_verify_passes(tmp_path):
    assert cli.main(_argv(["verify"], tmp_path)) == cli.EXIT_OK
    doc = _read_json(tmp_path / "verify.json")
    assert doc["passed"] is True
    assert len(doc["checks"]) == len(cli.checks.CHECKS)
    run = _read_json(tmp_path / "run.json")
    assert run["settings"]["decoder"]["total_instances"] == 6
    assert run["run"]["subcommand"] == "verify"


def test_verify_perturbed_fails(tmp_path):
    assert cli.main(_argv(["verify"], tmp_path, "--perturb")) == cli.EXIT_PROPERTY
    assert _read_json(tmp_path / "verify.json")["passed"] is False
    assert (tmp_path / "failure-aggregation_equivalence.npz").exists()


@pytest.mark.parametrize(
    "extra",
    [
        ["--set", "decoder.groups=3"],
        ["--set", "decoder.temporal_instances=6"],
        ["--set", "not-an-override"],
        ["--set", "scene.unknown=1"],
        ["--config", "/nonexistent/settings.yaml"],
    ],
)
def test_bad_configuration(tmp_path, extra):
    assert cli.main(_argv(["verify"], tmp_path, *extra)) == cli.EXIT_CONFIG


@patch.dict(os.environ, {"SPARSE_FUSE_THREADS": "zero"})
def test_bad_thread_count(tmp_path):
    assert cli.main(_argv(["bench"], tmp_path)) == cli.EXIT_CONFIG


def test_bench_outputs(tmp_path):
    argv = _argv(["bench"], tmp_path, "--t", "1", "2", "--frames", "2")
    assert cli.main(argv) == cli.EXIT_OK
    rows = harness.read_bench_csv(tmp_path / "bench.csv")
    assert {(r["mode"], r["T"]) for r in rows} == {("recurrent", 1), ("multiframe", 1),
                                                    ("multiframe", 2)}
    summary = _read_json(tmp_path / "bench-summary.json")
    assert summary["multiframe"]["calls_slope"] == pytest.approx(12.0)
    assert summary["multiframe"]["calls_ratio"] == [1.0, 2.0]
    assert summary["recurrent"]["calls_constant"] is True
    run = _read_json(tmp_path / "run.json")
    assert run["settings"]["bench"]["t_values"] == [1, 2]
    assert "bench.t_values=[1, 2]" in run["run"]["overrides"]


def test_bench_summary_without_multiframe():
    report = harness.BenchReport("recurrent", 1, [
        harness.BenchRow(f, 100 + f, 12, 0) for f in range(4)
    ])
    summary = cli.bench_summary([report], warmup=1)
    assert "multiframe" not in summary
    assert summary["recurrent"]["calls_per_frame"] == 12
    assert summary["recurrent"]["last_over_first"] == pytest.approx(103 / 101)


def test_simulate(tmp_path):
    argv = _argv(["simulate"], tmp_path, "--scenes", "2", "--frames", "2")
    assert cli.main(argv) == cli.EXIT_OK
    metrics = _read_json(tmp_path / "metrics.json")
    assert len(metrics["scenes"]) == 2
    assert metrics["scenes"][0]["agg_calls_per_frame"] == 12
    assert (tmp_path / cli.FINAL_WEIGHTS).exists()


def test_simulate_missing_weights(tmp_path):
    argv = _argv(["simulate"], tmp_path, "--weights", str(tmp_path / "absent.bin"))
    assert cli.main(argv) == cli.EXIT_CONFIG


def test_simulate_corrupt_weights(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage!")
    assert cli.main(_argv(["simulate"], tmp_path, "--weights", str(bad))) == cli.EXIT_CONFIG


def test_train_zero_epochs_keeps_weights(tmp_path):
    assert cli.main(_argv(["train"], tmp_path, "--epochs", "0")) == cli.EXIT_OK
    init = ModelParameters.load(tmp_path / cli.INIT_WEIGHTS)
    final = ModelParameters.load(tmp_path / cli.FINAL_WEIGHTS)
    assert init.equals(final)
    assert _read_json(tmp_path / "metrics.json")["steps"] == 0


def test_train_steps(tmp_path):
    assert cli.main(_argv(["train"], tmp_path, "--steps", "1")) == cli.EXIT_OK
    lines = (tmp_path / "train.jsonl").read_text().splitlines()
    steps = [json.loads(line) for line in lines if json.loads(line)["kind"] == "step"]
    assert len(steps) == 1
    metrics = _read_json(tmp_path / "metrics.json")
    assert metrics["steps"] == 1
    assert set(metrics["final"]) == {"box", "cls", "depth", "total"}
    assert "recall" in metrics["held_out"]


def test_train_resumes_from_weights(tmp_path):
    first = tmp_path / "first"
    assert cli.main(_argv(["train"], first, "--epochs", "0")) == cli.EXIT_OK
    second = tmp_path / "second"
    argv = _argv(["train"], second, "--epochs", "0", "--weights",
                 str(first / cli.FINAL_WEIGHTS), "--seed", "9")
    assert cli.main(argv) == cli.EXIT_OK
    assert ModelParameters.load(second / cli.INIT_WEIGHTS).equals(
        ModelParameters.load(first / cli.FINAL_WEIGHTS)
    )


@patch("sparse_fuse.harness.train_toy")
def test_train_divergence(train_mock, tmp_path):
    train_mock.side_effect = DivergenceError(4, {"total": float("nan")})
    assert cli.main(_argv(["train"], tmp_path)) == cli.EXIT_DIVERGENCE
    assert train_mock.called


@patch("sparse_fuse.harness.compare_depth")
def test_compare_depth(compare_mock, tmp_path):
    compare_mock.side_effect = lambda settings, seed, steps: {
        "seed": seed, "with_depth_box_l1": 0.5, "without_depth_box_l1": 0.7,
        "depth_early": 2.0, "depth_late": 1.0, "finite": True,
    }
    argv = _argv(["compare", "depth"], tmp_path, "--seeds", "2", "--steps", "3")
    assert cli.main(argv) == cli.EXIT_OK
    doc = _read_json(tmp_path / "compare.json")
    assert [p["seed"] for p in doc["pairs"]] == [0, 1]
    assert all(v["passed"] for v in doc["verdicts"])
    assert compare_mock.call_count == 2


@patch("sparse_fuse.harness.compare_depth")
def test_compare_depth_rising_loss_fails(compare_mock, tmp_path):
    compare_mock.return_value = {
        "seed": 0, "with_depth_box_l1": 0.5, "without_depth_box_l1": 0.7,
        "depth_early": 1.0, "depth_late": 1.5, "finite": True,
    }
    argv = _argv(["compare", "depth"], tmp_path, "--seeds", "1", "--steps", "3")
    assert cli.main(argv) == cli.EXIT_PROPERTY
    assert _read_json(tmp_path / "compare.json")["verdicts"][0]["passed"] is False


@pytest.mark.parametrize("outcomes, code", [
    ([True, True, True, True, False], cli.EXIT_OK),
    ([True, True, True, False, False], cli.EXIT_PROPERTY),
])
@patch("sparse_fuse.harness.compare_temporal")
def test_compare_temporal(compare_mock, outcomes, code, tmp_path):
    compare_mock.return_value = [
        {"seed": seed, "recurrent_better": better} for seed, better in enumerate(outcomes)
    ]
    argv = _argv(["compare", "temporal"], tmp_path, "--seeds", str(len(outcomes)))
    assert cli.main(argv) == code
    doc = _read_json(tmp_path / "compare.json")
    assert doc["wins"] == sum(outcomes)
    assert doc["verdicts"][0]["limit"] == 4


@patch("sparse_fuse.harness.run_bench")
def test_bench_fails_on_non_linear_calls(bench_mock, tmp_path):
    bench_mock.return_value = [
        harness.BenchReport("multiframe", t, [harness.BenchRow(0, 100 * t, calls, 0)])
        for t, calls in ((1, 12), (2, 20))
    ]
    assert cli.main(_argv(["bench"], tmp_path, "--t", "1", "2")) == cli.EXIT_PROPERTY
    summary = _read_json(tmp_path / "bench-summary.json")
    assert summary["verdicts"][0]["name"] == "multiframe_calls_linear_in_t"
    assert summary["verdicts"][0]["passed"] is False


def test_unknown_subcommand_exits():
    with pytest.raises(SystemExit):
        cli.main(["serve"])
