# Copyright 2026 sparse-fuse contributors

"""Property suite behind `sparse-fuse verify`.

Each check returns a `CheckResult`; a failing check keeps the arrays needed to replay
it, which `run_all` writes to `failure-<name>.npz`.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sparse_fuse import geometry as geo
from sparse_fuse.aggregation import (
    AggregationRequest,
    FeaturePyramid,
    TrafficLedger,
    basic_aggregate,
    efficient_aggregate,
    efficient_aggregate_backward,
    normalize_weights,
)
from sparse_fuse.config import SCHEMA_VERSION, DecoderConfig, Settings
from sparse_fuse.errors import PropertyFailure
from sparse_fuse.harness import build_decoder, generate_scene, render_features
from sparse_fuse.model import FrameCotangents, InstanceSet, SparseDecoder
from sparse_fuse.numerics import finite_diff_check, seeded_rng

logger = logging.getLogger(__name__)

# Keeps finite-difference steps of sample points away from bilinear kinks.
GRID_MARGIN = 1e-3


@dataclass
class CheckResult:
    """Outcome of one property check."""
    name: str
    passed: bool
    value: float
    threshold: float
    elapsed_s: float = 0.0
    case: dict = field(default_factory=dict, repr=False)

    def as_record(self) -> dict:
        """JSON form without the timing, so equal seeds give equal reports."""
        return {
            "name": self.name,
            "passed": self.passed,
            "value": self.value,
            "threshold": self.threshold,
        }


def random_request(
    rng: np.random.Generator,
    max_k: int = 16,
    max_n: int = 6,
    max_s: int = 4,
    max_g: int = 4,
    max_c: int = 32,
    max_hw: int = 32,
    all_visible: bool = False,
) -> tuple[FeaturePyramid, AggregationRequest]:
    """Random pyramid and normalised request within the given bounds."""
    k = int(rng.integers(1, max_k + 1))
    n = int(rng.integers(1, max_n + 1))
    s = int(rng.integers(1, max_s + 1))
    g = int(rng.integers(1, max_g + 1))
    c = g * int(rng.integers(1, max(1, max_c // g) + 1))
    shapes = [(int(rng.integers(2, max_hw + 1)), int(rng.integers(2, max_hw + 1)))]
    for _ in range(s - 1):
        h, w = shapes[-1]
        shapes.append((max(2, h // 2), max(2, w // 2)))
    pyr = FeaturePyramid(tuple(rng.standard_normal((n, c, h, w)) for h, w in shapes))
    width, height = pyr.image_size
    points = np.stack(
        [rng.uniform(0, width - 1, (k, n)), rng.uniform(0, height - 1, (k, n))], axis=-1
    )
    visible = np.ones((k, n), dtype=bool) if all_visible else rng.random((k, n)) < 0.7
    points = np.where(visible[..., None], points, geo.SENTINEL_PIXEL)
    weights = normalize_weights(rng.standard_normal((k, n, s, g)), visible)
    return pyr, AggregationRequest(points, visible, weights)


def _away_from_grid(rng: np.random.Generator, pyr: FeaturePyramid, req: AggregationRequest):
    packed = pyr.packed
    points = np.array(req.points)
    width, height = pyr.image_size
    for axis, scales, limit in ((0, packed.scale_x, width), (1, packed.scale_y, height)):
        coords = points[..., axis]
        for _ in range(100):
            scaled = (coords[..., None] + 0.5) * scales - 0.5
            near = np.abs(scaled - np.rint(scaled)) < GRID_MARGIN
            bad = near.any(axis=-1) & req.visible
            if not bad.any():
                break
            coords[bad] = rng.uniform(0, limit - 1, size=int(bad.sum()))
        points[..., axis] = coords
    return AggregationRequest(points, req.visible, req.weights)


def _timed(name: str, threshold: float, fn) -> CheckResult:
    start = time.perf_counter()
    try:
        value, case = fn()
        passed = bool(np.isfinite(value) and value <= threshold)
    except PropertyFailure as e:
        logger.error("%s raised: %s", name, e)
        value, case, passed = float("inf"), e.case, False
    result = CheckResult(name, passed, float(value), threshold, time.perf_counter() - start, case)
    log = logger.info if passed else logger.error
    log("%-28s %s value=%.3e threshold=%.1e", name, "PASS" if passed else "FAIL", value,
        threshold)
    return result


# --------------------------------------------------------------------------- #
# Aggregation
# --------------------------------------------------------------------------- #


def _request_case(pyr: FeaturePyramid, req: AggregationRequest) -> dict:
    case = {f"map{s}": m for s, m in enumerate(pyr.maps)}
    case.update(points=req.points, visible=req.visible, weights=req.weights)
    return case


def check_equivalence(settings: Settings, perturb: bool = False) -> CheckResult:
    """Fused vs reference aggregation over random instances."""
    cfg = settings.verify

    def run():
        rng = seeded_rng(settings.seed)
        worst, case = 0.0, {}
        for _ in range(cfg.aggregation_cases):
            pyr, req = random_request(rng)
            if not req.is_normalized():
                raise PropertyFailure(
                    "aggregation_equivalence", "unnormalised weights", _request_case(pyr, req)
                )
            expected = basic_aggregate(pyr, req)
            fused_req = req
            if perturb:
                weights = np.array(req.weights)
                weights.reshape(-1)[np.argmax(weights)] *= 1.0 + 1e-3
                fused_req = AggregationRequest(req.points, req.visible, weights)
            diff = float(np.max(np.abs(efficient_aggregate(pyr, fused_req) - expected)))
            if diff > worst:
                worst, case = diff, _request_case(pyr, req)
        return worst, case

    return _timed("aggregation_equivalence", cfg.equivalence_tol, run)


def check_ledger_ratio(settings: Settings) -> CheckResult:
    """Reference over fused peak intermediate bytes, scaled so >= N*S/2 passes."""
    scene = settings.scene
    n, s = scene.num_cameras, scene.num_scales

    def run():
        rng = seeded_rng(settings.seed)
        maps = tuple(
            rng.standard_normal((n, scene.channels) + scene.scale_shape(i)) for i in range(s)
        )
        pyr = FeaturePyramid(maps, (scene.image_width, scene.image_height))
        k = settings.decoder.num_keypoints
        visible = np.ones((k, n), dtype=bool)
        points = np.stack(
            [
                rng.uniform(0, scene.image_width - 1, (k, n)),
                rng.uniform(0, scene.image_height - 1, (k, n)),
            ],
            axis=-1,
        )
        weights = normalize_weights(rng.standard_normal((k, n, s, settings.decoder.groups)),
                                    visible)
        req = AggregationRequest(points, visible, weights)
        basic, fused = TrafficLedger(), TrafficLedger()
        basic_aggregate(pyr, req, basic)
        efficient_aggregate(pyr, req, fused)
        ratio = basic.peak_intermediate_bytes / fused.peak_intermediate_bytes
        # Expressed as (N*S/2) / ratio so that <= 1 passes.
        return (n * s / 2.0) / ratio, {"basic": basic.snapshot(), "fused": fused.snapshot()}

    return _timed("ledger_ratio", 1.0, run)


def check_aggregation_gradients(settings: Settings) -> CheckResult:
    """Finite differences on maps, points and weights of the fused operator."""
    cfg = settings.verify

    def run():
        rng = seeded_rng(settings.seed + 1)
        worst, case = 0.0, {}
        for _ in range(cfg.gradient_cases):
            pyr, req = random_request(rng, max_k=4, max_n=3, max_s=2, max_g=2, max_c=6,
                                      max_hw=8)
            req = _away_from_grid(rng, pyr, req)
            upstream = rng.standard_normal(pyr.channels)
            grads = efficient_aggregate_backward(pyr, req, upstream)

            flat_maps = np.concatenate([m.reshape(-1) for m in pyr.maps])
            sizes = np.cumsum([m.size for m in pyr.maps])[:-1]

            def f_maps(x):
                maps = [p.reshape(m.shape) for p, m in zip(np.split(x, sizes), pyr.maps)]
                return float(upstream @ efficient_aggregate(pyr.with_maps(maps), req))

            def f_points(x):
                return float(upstream @ efficient_aggregate(
                    pyr, AggregationRequest(x, req.visible, req.weights)))

            def f_weights(x):
                return float(upstream @ efficient_aggregate(
                    pyr, AggregationRequest(req.points, req.visible, x)))

            picked = rng.choice(flat_maps.size, size=min(48, flat_maps.size), replace=False)
            # Zero weights cannot be perturbed: a negative weight is rejected.
            positive = np.flatnonzero(req.weights > 1e-4)
            grad_maps = np.concatenate([g.reshape(-1) for g in grads.maps])
            errors = (
                finite_diff_check(f_maps, flat_maps, grad_maps, indices=picked),
                finite_diff_check(f_points, np.array(req.points), grads.points),
                finite_diff_check(f_weights, np.array(req.weights), grads.weights,
                                  indices=positive),
            )
            if max(errors) > worst:
                worst = max(errors)
                case = {**_request_case(pyr, req), "upstream": upstream}
        return worst, case

    return _timed("aggregation_gradients", cfg.gradient_tol, run)


def check_partitioning(settings: Settings) -> CheckResult:
    """Any split of the channel work items reproduces the full result."""

    def run():
        rng = seeded_rng(settings.seed + 2)
        worst, case = 0.0, {}
        for _ in range(max(1, settings.verify.aggregation_cases // 10)):
            pyr, req = random_request(rng)
            full = efficient_aggregate(pyr, req)
            order = rng.permutation(pyr.channels)
            cuts = np.sort(rng.choice(np.arange(1, pyr.channels + 1), size=3))
            merged = sum(efficient_aggregate(pyr, req, channels=part)
                         for part in np.split(order, cuts))
            serial = sum(efficient_aggregate(pyr, req, channels=[c])
                         for c in range(pyr.channels))
            diff = max(float(np.max(np.abs(merged - full))),
                       float(np.max(np.abs(serial - full))))
            if diff > worst:
                worst, case = diff, _request_case(pyr, req)
        return worst, case

    return _timed("work_item_partitioning", settings.verify.equivalence_tol, run)


# --------------------------------------------------------------------------- #
# Geometry and propagation
# --------------------------------------------------------------------------- #


def _random_motion(rng: np.random.Generator, dt: float) -> geo.EgoMotion:
    return geo.EgoMotion(geo.rotation_z(rng.uniform(-np.pi, np.pi)), rng.uniform(-5, 5, 3), dt)


def _random_anchors(rng: np.random.Generator, count: int, moving: bool) -> np.ndarray:
    anchors = np.zeros((count, geo.ANCHOR_DIM))
    anchors[:, geo.POSITION] = rng.uniform(-30, 30, (count, 3))
    anchors[:, geo.SIZE] = rng.uniform(0.5, 5.0, (count, 3))
    yaw = rng.uniform(-np.pi, np.pi, count)
    anchors[:, geo.SIN_YAW] = np.sin(yaw)
    anchors[:, geo.COS_YAW] = np.cos(yaw)
    if moving:
        anchors[:, geo.VELOCITY] = rng.uniform(-10, 10, (count, 3))
    return anchors


def check_geometry(settings: Settings) -> CheckResult:
    """Round trip, composition, ego consistency, speed and extent preservation."""
    cfg = settings.verify
    batch = 100

    def run():
        rng = seeded_rng(settings.seed + 3)
        worst = 0.0
        for _ in range(max(1, cfg.geometry_cases // batch)):
            still = _random_anchors(rng, batch, moving=False)
            moving = _random_anchors(rng, batch, moving=True)
            m1 = _random_motion(rng, rng.uniform(0, 1))
            m2 = _random_motion(rng, 0.0)
            back = geo.project_anchors(geo.project_anchors(still, m1), m1.inverse())
            composed = m1.compose(m2)
            composed = geo.EgoMotion(composed.rotation, composed.translation, 0.0)
            m1_still = geo.EgoMotion(m1.rotation, m1.translation, 0.0)
            two_step = geo.project_anchors(geo.project_anchors(still, m1_still), m2)
            one_step = geo.project_anchors(still, composed)
            moved = geo.project_anchors(moving, m1)
            speed = np.abs(
                np.linalg.norm(moved[:, geo.VELOCITY], axis=1)
                - np.linalg.norm(moving[:, geo.VELOCITY], axis=1)
            )
            # A world-static box seen from two ego poses.
            pose_prev, pose_cur = np.eye(4), np.eye(4)
            pose_prev[:3, :3], pose_prev[:3, 3] = m2.rotation, m2.translation
            pose_cur[:3, :3], pose_cur[:3, 3] = m1.rotation, m1.translation
            ego = geo.EgoMotion.between(pose_prev, pose_cur, 0.5)
            world = geo.project_anchors(still, geo.EgoMotion(m2.rotation, m2.translation))
            in_prev = geo.project_anchors(world, geo.EgoMotion(*_inverse(pose_prev)))
            in_cur = geo.project_anchors(world, geo.EgoMotion(*_inverse(pose_cur)))
            errors = (
                np.abs(back - still).max(),
                np.abs(two_step - one_step).max(),
                speed.max(),
                np.abs(moved[:, geo.SIZE] - moving[:, geo.SIZE]).max(),
                np.abs(geo.project_anchors(in_prev, ego) - in_cur).max(),
            )
            worst = max(worst, *map(float, errors))
        return worst, {}

    return _timed("geometry_properties", cfg.geometry_tol, run)


def _inverse(pose: np.ndarray):
    inv = geo.invert_rigid(pose)
    return inv[:3, :3], inv[:3, 3]


def check_propagation(settings: Settings) -> CheckResult:
    """Features survive propagation bytewise; embeddings follow the moved anchors."""

    def run():
        rng = seeded_rng(settings.seed + 4)
        model = build_decoder(settings)
        dim = settings.decoder.feature_dim
        worst = 0.0
        for _ in range(10):
            anchors = _random_anchors(rng, 16, moving=True)
            features = rng.standard_normal((16, dim))
            prev = InstanceSet(anchors, features, model.anchor_encode(anchors), rng.random(16))
            motion = _random_motion(rng, 0.5)
            out = model.propagate_instances(prev, motion)
            if out.features.tobytes() != features.tobytes():
                raise PropertyFailure("propagation", "features changed", {"features": features})
            expected = model.anchor_encode(geo.project_anchors(anchors, motion))
            worst = max(worst, float(np.abs(out.embeddings - expected).max()))
        return worst, {}

    return _timed("propagation_fidelity", 0.0, run)


# --------------------------------------------------------------------------- #
# Decoder
# --------------------------------------------------------------------------- #


def micro_decoder(seed: int) -> tuple[SparseDecoder, dict]:
    """Two instances, one camera, every keypoint in view, no detaching."""
    cfg = DecoderConfig(
        num_single_frame_layers=1,
        num_multi_frame_layers=1,
        total_instances=2,
        temporal_instances=1,
        feature_dim=8,
        heads=2,
        num_learnable_keypoints=2,
        groups=2,
        equivalent_focal=32.0,
        detach_anchors=False,
        anchor_size=1.0,
    )
    rng = seeded_rng(seed)
    model = SparseDecoder(cfg, num_views=1, channels=4, num_scales=2, seed=seed)
    for name, value in model.params.items():
        if not np.any(value):
            model.params[name] = 0.05 * rng.standard_normal(value.shape)
    model.fresh_anchors = np.array(
        [
            [10.0, 0.6, 1.4, 0.9, 1.1, 0.8, 0.1, 0.995, 0.0, 0.0, 0.0],
            [11.0, -0.7, 1.6, 1.0, 0.9, 1.2, -0.2, 0.98, 0.0, 0.0, 0.0],
        ]
    )
    model.fresh_anchors = geo.renormalize_yaw(model.fresh_anchors)
    cam = geo.CameraModel.facing(0.0, (0.0, 0.0, 1.5), 64, 32)
    pyr = FeaturePyramid(
        (rng.standard_normal((1, 4, 16, 32)), rng.standard_normal((1, 4, 8, 16))), (64, 32)
    )
    carried = np.array([[12.0, 0.2, 1.5, 1.0, 1.0, 1.0, 0.0, 1.0, 0.4, 0.1, 0.0]])
    state = InstanceSet(
        carried, rng.standard_normal((1, 8)), model.anchor_encode(carried), np.array([0.7])
    )
    c, s = np.cos(0.02), np.sin(0.02)
    motion = geo.EgoMotion(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]]), [-0.3, 0.05, 0.0],
                           0.5)
    return model, {"cams": [cam], "pyr": pyr, "state": state, "motion": motion}


def check_decoder_gradients(settings: Settings) -> CheckResult:
    """End-to-end finite differences through every trainable tensor of a micro decoder."""

    def run():
        model, inputs = micro_decoder(settings.seed)
        rng = seeded_rng(settings.seed + 5)

        def forward():
            return model.forward_frame(
                inputs["state"], inputs["pyr"], inputs["cams"], inputs["motion"]
            )

        frame = forward()
        cot = FrameCotangents(
            [rng.standard_normal(t.anchors_out.shape) for t in frame.all_layers],
            [rng.standard_normal(t.logits.shape) for t in frame.all_layers],
            [rng.standard_normal(d.shape) for d in frame.depth],
        )

        def objective(_x=None):
            out = forward()
            total = sum(float(np.sum(c * t.anchors_out)) for c, t in zip(cot.anchors,
                                                                        out.all_layers))
            total += sum(float(c @ t.logits) for c, t in zip(cot.logits, out.all_layers))
            total += sum(float(np.sum(c * d)) for c, d in zip(cot.depth, out.depth))
            return total

        grads = model.backward(frame, cot)
        worst, worst_name = 0.0, ""
        for name, value in model.params.items():
            picked = rng.choice(value.size, size=min(3, value.size), replace=False)
            err = finite_diff_check(objective, value, grads[name], indices=picked)
            if err > worst:
                worst, worst_name = err, name
        logger.debug("worst decoder gradient: %s (%.3e)", worst_name, worst)
        return worst, {"worst_tensor": np.array(worst_name)}

    return _timed("decoder_gradients", settings.verify.decoder_gradient_tol, run)


def check_permutation(settings: Settings) -> CheckResult:
    """Decoder outputs do not depend on the order of the cameras."""

    def run():
        rng = seeded_rng(settings.seed + 6)
        scene = generate_scene(settings.scene, settings.seed)
        model = build_decoder(settings)
        worst = 0.0
        for _ in range(settings.verify.permutation_cases):
            perm = rng.permutation(len(scene.rig))
            rig = [scene.rig[i] for i in perm]
            states = [None, None]
            for f in range(2):
                pyr, _ = render_features(scene, f)
                shuffled = pyr.with_maps(m[perm] for m in pyr.maps)
                motion = scene.ego_motion(f)
                a, states[0] = model.run_frame(states[0], pyr, scene.rig, motion)
                b, states[1] = model.run_frame(states[1], shuffled, rig, motion)
                worst = max(
                    worst,
                    float(np.abs(a.anchors - b.anchors).max()),
                    float(np.abs(a.confidences - b.confidences).max()),
                    float(np.abs(a.features - b.features).max()),
                )
        return worst, {"permutation": perm}

    return _timed("camera_permutation", settings.verify.geometry_tol, run)


def check_selection(settings: Settings) -> CheckResult:
    """temporal + fresh == total at every frame, with the temporal share saturated."""
    cfg = settings.decoder

    def run():
        scene = generate_scene(settings.scene, settings.seed)
        model = build_decoder(settings)
        state = None
        mismatches = 0
        for f in range(min(4, scene.frames)):
            pyr, _ = render_features(scene, f)
            frame = model.forward_frame(state, pyr, scene.rig, scene.ego_motion(f))
            expected_temporal = 0 if f == 0 or not cfg.temporal else cfg.temporal_instances
            counts = (len(frame.selection.temporal_index), len(frame.selection.fresh_index))
            if counts != (expected_temporal, cfg.total_instances - expected_temporal):
                mismatches += 1
            if any(len(t.anchors_out) != cfg.total_instances for t in frame.layers):
                mismatches += 1
            state = frame.state
        return float(mismatches), {}

    return _timed("selection_arithmetic", 0.0, run)


CHECKS = (
    check_equivalence,
    check_ledger_ratio,
    check_aggregation_gradients,
    check_partitioning,
    check_geometry,
    check_propagation,
    check_decoder_gradients,
    check_permutation,
    check_selection,
)


def run_all(
    settings: Settings, out_dir: Path | str | None = None, perturb: bool = False
) -> list[CheckResult]:
    """Run every check; failing cases go to `out_dir` as .npz files."""
    results = []
    for check in CHECKS:
        if check is check_equivalence:
            results.append(check(settings, perturb=perturb))
        else:
            results.append(check(settings))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for result in results:
            if not result.passed and result.case:
                np.savez(out_dir / f"failure-{result.name}.npz", **result.case)
    return results


def report(results: list[CheckResult]) -> dict:
    """The verify.json document."""
    return {
        "schema": SCHEMA_VERSION,
        "passed": all(r.passed for r in results),
        "checks": [r.as_record() for r in results],
    }
