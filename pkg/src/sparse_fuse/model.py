# Copyright 2026 sparse-fuse contributors

"""Recurrent sparse decoder at toy scale.

An instance is an anchor A (the 11-vector of `sparse_fuse.geometry`), a feature F and
an anchor embedding E = psi(A). A frame runs the single-frame layer(s) over a fixed set
of fresh anchors, keeps the most confident of them next to the instances carried over
from the previous frame, and refines the merged set with the multi-frame layers, which
add self-attention and cross-attention to the carried instances. Carried instances
keep their feature unchanged; only their anchor moves with the ego vehicle.

Backward is hand-written. Anchors are detached between layers and the instance bank
between frames unless `DecoderConfig.detach_anchors` is off, in which case the
gradient also flows through the anchors of every layer of the frame.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sparse_fuse import geometry as geo
from sparse_fuse.aggregation import (
    FeaturePyramid,
    TrafficLedger,
    efficient_aggregate_backward_many,
    efficient_aggregate_many,
    normalize_weights,
    normalize_weights_backward,
)
from sparse_fuse.config import DecoderConfig, TrainConfig
from sparse_fuse.errors import ConfigError, PropertyFailure, ShapeError
from sparse_fuse.numerics import (
    AttentionWeights,
    LinearLayer,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
    multi_head_attention_backward,
    multi_head_attention_forward,
    seeded_rng,
    sigmoid,
    silu,
    silu_backward,
    softplus,
)

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"SPFUSE\x00\x01"
SINGLE = "single"
MULTI = "multi"
NUM_FIXED_KEYPOINTS = len(geo.FIXED_KEYPOINTS)
ATTENTION_FIELDS = ("wq", "bq", "wk", "wv", "bv", "wo", "bo")
CAMERA_INPUT_DIM = 12


# --------------------------------------------------------------------------- #
# Parameters
# --------------------------------------------------------------------------- #


class ModelParameters:
    """Named float64 tensors. Gradients use the same container."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._tensors = {
            name: np.array(value, dtype=np.float64) for name, value in (tensors or {}).items()
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value):
        self._tensors[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self.names())

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        """Tensor names, sorted."""
        return sorted(self._tensors)

    def items(self):
        """(name, tensor) pairs in name order."""
        return ((name, self._tensors[name]) for name in self.names())

    def copy(self) -> "ModelParameters":
        """Deep copy."""
        return ModelParameters(self._tensors)

    def zeros_like(self) -> "ModelParameters":
        """Zeros with the same names and shapes."""
        return ModelParameters({n: np.zeros_like(v) for n, v in self._tensors.items()})

    def accumulate(self, name: str, value):
        """Add `value` into tensor `name` in place."""
        self._tensors[name] += value

    def add_scaled(self, other: "ModelParameters", alpha: float):
        """In-place `self += alpha * other`."""
        for name, value in other.items():
            self._tensors[name] += alpha * value

    def scale(self, factor: float):
        """Multiply every tensor by `factor` in place."""
        for value in self._tensors.values():
            value *= factor

    def global_norm(self) -> float:
        """L2 norm over every tensor."""
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self._tensors.values())))

    def is_finite(self) -> bool:
        """Whether every value is finite."""
        return all(np.all(np.isfinite(v)) for v in self._tensors.values())

    def equals(self, other: "ModelParameters") -> bool:
        """Same names and bitwise identical values."""
        return self.names() == other.names() and all(
            np.array_equal(v, other[n]) for n, v in self.items()
        )

    def save(self, path: Path | str):
        """Write the documented binary weights format."""
        chunks = [WEIGHTS_MAGIC, struct.pack("<I", len(self._tensors))]
        for name, value in self.items():
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", value.ndim))
            chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
            chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(chunks))
        logger.info("Wrote %d tensors to %s", len(self._tensors), path)

    @classmethod
    def load(cls, path: Path | str) -> "ModelParameters":
        """Read a file written by `save`."""
        data = Path(path).read_bytes()
        if not data.startswith(WEIGHTS_MAGIC):
            logger.error("%s is not a sparse-fuse weights file", path)
            raise ConfigError(f"{path} is not a sparse-fuse weights file")
        try:
            offset = len(WEIGHTS_MAGIC)
            (count,) = struct.unpack_from("<I", data, offset)
            offset += 4
            tensors = {}
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", data, offset)
                offset += 2
                name = data[offset : offset + name_len].decode("utf-8")
                offset += name_len
                (rank,) = struct.unpack_from("<B", data, offset)
                offset += 1
                shape = struct.unpack_from(f"<{rank}I", data, offset)
                offset += 4 * rank
                size = int(np.prod(shape, dtype=np.int64))
                values = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
                offset += 8 * size
                tensors[name] = values.reshape(shape)
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            logger.error("Truncated or corrupt weights file %s", path)
            raise ConfigError(f"{path} is truncated or corrupt: {e}") from e
        if offset != len(data):
            raise ConfigError(f"{path} has {len(data) - offset} trailing bytes")
        return cls(tensors)


def _put_linear(tensors: dict, name: str, layer: LinearLayer):
    tensors[f"{name}.weight"] = layer.weight
    tensors[f"{name}.bias"] = layer.bias


def _put_norm(tensors: dict, name: str, dim: int):
    tensors[f"{name}.gamma"] = np.ones(dim)
    tensors[f"{name}.beta"] = np.zeros(dim)


def layer_kinds(cfg: DecoderConfig) -> list[str]:
    """Kind of each layer in order."""
    return [SINGLE] * cfg.num_single_frame_layers + [MULTI] * cfg.num_multi_frame_layers


def init_parameters(
    cfg: DecoderConfig, num_views: int, channels: int, num_scales: int, seed: int
) -> ModelParameters:
    """Seeded initial parameters for a decoder over `num_views` cameras."""
    if channels % cfg.groups:
        raise ShapeError(f"{cfg.groups} groups do not divide {channels} channels")
    rng = seeded_rng(seed)
    dim = cfg.feature_dim
    weight_logits = cfg.num_keypoints * num_scales * cfg.groups
    if not cfg.camera_encoding:
        weight_logits *= num_views
    t: dict[str, np.ndarray] = {}
    for s in range(num_scales):
        t[f"neck.{s}.weight"] = np.eye(channels)
        t[f"neck.{s}.bias"] = np.zeros(channels)
        _put_linear(t, f"depth.{s}", LinearLayer.init(rng, channels, 1))
        # softplus(10) is about 10 m, a sensible starting depth.
        t[f"depth.{s}.bias"] = np.array([10.0])
    _put_linear(t, "psi.fc1", LinearLayer.init(rng, geo.ANCHOR_DIM, dim))
    _put_norm(t, "psi.ln", dim)
    _put_linear(t, "psi.fc2", LinearLayer.init(rng, dim, dim))
    _put_linear(t, "camera.fc1", LinearLayer.init(rng, CAMERA_INPUT_DIM, dim))
    _put_linear(t, "camera.fc2", LinearLayer.init(rng, dim, dim))
    t["keypoints.offsets"] = rng.uniform(-0.5, 0.5, size=(cfg.num_learnable_keypoints, 3))
    for i, kind in enumerate(layer_kinds(cfg)):
        pre = f"layers.{i}"
        if kind == MULTI:
            for block in ("self_attn", "cross_attn"):
                attn = AttentionWeights.init(rng, dim)
                for name in ATTENTION_FIELDS:
                    t[f"{pre}.{block}.{name}"] = getattr(attn, name)
            _put_norm(t, f"{pre}.ln_self", dim)
            _put_norm(t, f"{pre}.ln_cross", dim)
        _put_linear(t, f"{pre}.weights", LinearLayer.init(rng, dim, weight_logits))
        _put_linear(t, f"{pre}.proj", LinearLayer.init(rng, channels, dim))
        _put_norm(t, f"{pre}.ln_agg", dim)
        _put_linear(t, f"{pre}.ffn1", LinearLayer.init(rng, dim, 2 * dim))
        _put_linear(t, f"{pre}.ffn2", LinearLayer.init(rng, 2 * dim, dim))
        _put_norm(t, f"{pre}.ln_ffn", dim)
        _put_linear(t, f"{pre}.refine", LinearLayer.init(rng, dim, geo.ANCHOR_DIM, zero=True))
        _put_linear(t, f"{pre}.cls", LinearLayer.init(rng, dim, 1))
        # Foreground prior of about 0.1.
        t[f"{pre}.cls.bias"] = np.array([-np.log(9.0)])
    return ModelParameters(t)


# --------------------------------------------------------------------------- #
# Instances
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class InstanceSet:
    """Anchors (M, 11), features (M, D), embeddings (M, D) and confidences (M,).

    `track_origins` (M, 3) is where each instance's track began, expressed in the
    current ego frame, and `track_time` (M,) the seconds since then. Both default to
    a track that starts now.
    """

    anchors: np.ndarray
    features: np.ndarray
    embeddings: np.ndarray
    confidences: np.ndarray
    track_origins: np.ndarray | None = None
    track_time: np.ndarray | None = None

    def __post_init__(self):
        sizes = {len(self.anchors), len(self.features), len(self.embeddings)}
        sizes.add(len(self.confidences))
        if len(sizes) != 1:
            raise ShapeError(f"instance set fields disagree in length: {sorted(sizes)}")
        if self.track_origins is None:
            object.__setattr__(self, "track_origins", np.array(self.anchors[:, geo.POSITION]))
        if self.track_time is None:
            object.__setattr__(self, "track_time", np.zeros(len(self.anchors)))
        if self.track_origins.shape != (len(self.anchors), 3):
            raise ShapeError(f"track origins must be (M, 3), got {self.track_origins.shape}")
        if self.track_time.shape != (len(self.anchors),):
            raise ShapeError(f"track times must be (M,), got {self.track_time.shape}")

    def __len__(self) -> int:
        return len(self.anchors)

    @classmethod
    def empty(cls, dim: int) -> "InstanceSet":
        """A set with no instances."""
        return cls(
            np.zeros((0, geo.ANCHOR_DIM)), np.zeros((0, dim)), np.zeros((0, dim)), np.zeros(0)
        )

    def take(self, index) -> "InstanceSet":
        """Copy of the instances at `index`, in that order."""
        index = np.asarray(index, dtype=np.int64)
        return InstanceSet(
            self.anchors[index].copy(),
            self.features[index].copy(),
            self.embeddings[index].copy(),
            self.confidences[index].copy(),
            self.track_origins[index].copy(),
            self.track_time[index].copy(),
        )

    @classmethod
    def concat(cls, first: "InstanceSet", second: "InstanceSet") -> "InstanceSet":
        """Rows of `first` then rows of `second`."""
        return cls(
            np.concatenate([first.anchors, second.anchors]),
            np.concatenate([first.features, second.features]),
            np.concatenate([first.embeddings, second.embeddings]),
            np.concatenate([first.confidences, second.confidences]),
            np.concatenate([first.track_origins, second.track_origins]),
            np.concatenate([first.track_time, second.track_time]),
        )

    def with_tracks(self, origins: np.ndarray, times: np.ndarray) -> "InstanceSet":
        """Same instances on the given tracks; rows with zero time start a track here."""
        times = np.asarray(times, dtype=np.float64)
        started = (times > 0)[:, None]
        origins = np.where(started, origins, self.anchors[:, geo.POSITION])
        return InstanceSet(
            self.anchors, self.features, self.embeddings, self.confidences, origins, times
        )

    def anchor_objects(self) -> list[geo.Anchor3D]:
        """Anchors as `Anchor3D` objects."""
        return [geo.Anchor3D.from_array(a) for a in self.anchors]


def track_velocity(instances: InstanceSet, prior_s: float) -> InstanceSet:
    """Blend the planar velocity with the displacement along each instance's track.

    A track that has run for tau seconds contributes (position - origin) / tau with
    weight tau / (tau + prior_s); the regressed velocity keeps the rest. New tracks
    are left untouched.
    """
    tau = instances.track_time
    running = tau > 0
    if not running.any():
        return instances
    anchors = np.array(instances.anchors)
    planar = slice(geo.VX, geo.VY + 1)
    shift = anchors[running, geo.X : geo.Y + 1] - instances.track_origins[running, :2]
    observed = shift / tau[running, None]
    weight = (tau[running] / (tau[running] + prior_s))[:, None]
    anchors[running, planar] = (1.0 - weight) * anchors[running, planar] + weight * observed
    return InstanceSet(
        anchors,
        instances.features,
        instances.embeddings,
        instances.confidences,
        instances.track_origins,
        instances.track_time,
    )


def top_confident(confidences: np.ndarray, count: int) -> np.ndarray:
    """Indices of the `count` highest confidences; ties go to the lower index."""
    order = np.argsort(-np.asarray(confidences), kind="stable")
    return order[: max(0, count)]


@dataclass(frozen=True)
class Selection:
    """Which fresh and temporal instances went into the multi-frame layers."""

    fresh_index: np.ndarray
    temporal_index: np.ndarray

    @property
    def size(self) -> int:
        """Instances kept in total."""
        return len(self.fresh_index) + len(self.temporal_index)


def selection_indices(
    fresh_confidences: np.ndarray, temporal_confidences: np.ndarray, cfg: DecoderConfig
) -> Selection:
    """Keep up to `temporal_instances` carried instances, fill up with fresh ones."""
    temporal_index = top_confident(temporal_confidences, cfg.temporal_instances)
    fresh_index = top_confident(fresh_confidences, cfg.total_instances - len(temporal_index))
    return Selection(fresh_index, temporal_index)


def select_and_merge(fresh: InstanceSet, temporal: InstanceSet, cfg: DecoderConfig) -> InstanceSet:
    """Carried instances first, then the most confident fresh instances."""
    sel = selection_indices(fresh.confidences, temporal.confidences, cfg)
    return InstanceSet.concat(temporal.take(sel.temporal_index), fresh.take(sel.fresh_index))


# --------------------------------------------------------------------------- #
# Traces
# --------------------------------------------------------------------------- #


@dataclass
class LayerTrace:
    """Everything one decoder layer keeps for its backward pass."""

    kind: str
    index: int
    anchors_in: np.ndarray
    features_in: np.ndarray
    embeddings: np.ndarray = None
    psi_cache: tuple = None
    self_attn: tuple | None = None
    cross_attn: tuple | None = None
    attended: np.ndarray = None
    keypoints: np.ndarray = None
    pixels: np.ndarray = None
    visible: np.ndarray = None
    weights: np.ndarray = None
    weight_input: np.ndarray = None
    aggregated: np.ndarray = None
    ln_agg: tuple = None
    post_agg: np.ndarray = None
    ffn_hidden: np.ndarray = None
    ffn_act: np.ndarray = None
    ln_ffn: tuple = None
    features_out: np.ndarray = None
    raw_anchors: np.ndarray = None
    anchors_out: np.ndarray = None
    logits: np.ndarray = None


@dataclass
class FrameTrace:
    """Forward state of one frame: inputs, per-layer traces, outputs."""

    pyramid: FeaturePyramid
    neck: FeaturePyramid
    cams: list[geo.CameraModel]
    ledger: TrafficLedger
    camera_encoding: np.ndarray = None
    camera_cache: tuple = None
    depth: list[np.ndarray] | None = None
    depth_raw: list[np.ndarray] | None = None
    temporal: InstanceSet | None = None
    temporal_psi_cache: tuple | None = None
    fresh_layers: list[LayerTrace] = field(default_factory=list)
    selection: Selection | None = None
    layers: list[LayerTrace] = field(default_factory=list)
    detections: InstanceSet | None = None
    state: InstanceSet | None = None

    @property
    def all_layers(self) -> list[LayerTrace]:
        """Single-frame layers followed by multi-frame layers."""
        return self.fresh_layers + self.layers


@dataclass
class FrameCotangents:
    """Upstream gradients: per layer (in `FrameTrace.all_layers` order) and depth."""

    anchors: list[np.ndarray]
    logits: list[np.ndarray]
    depth: list[np.ndarray] | None = None


@dataclass
class _Accumulators:
    neck: list[np.ndarray]
    camera: np.ndarray
    temporal_embeddings: np.ndarray | None


# --------------------------------------------------------------------------- #
# Decoder
# --------------------------------------------------------------------------- #


def focal_scale(cams: list[geo.CameraModel], equivalent_focal: float) -> np.ndarray:
    """Per-view factor fx / equivalent_focal applied to raw depth."""
    if equivalent_focal <= 0:
        raise ConfigError(f"equivalent focal length must be positive, got {equivalent_focal}")
    return np.array([cam.fx for cam in cams]) / equivalent_focal


def _channel_mix(weight: np.ndarray, bias: np.ndarray, fmap: np.ndarray) -> np.ndarray:
    return np.einsum("oc,nchw->nohw", weight, fmap) + bias[None, :, None, None]


def _channel_mix_backward(weight, fmap, dout):
    dmap = np.einsum("oc,nohw->nchw", weight, dout)
    return dmap, np.einsum("nohw,nchw->oc", dout, fmap), dout.sum(axis=(0, 2, 3))


class SparseDecoder:
    """Anchor encoder, camera encoder, depth head and decoder layers."""

    def __init__(
        self,
        cfg: DecoderConfig,
        num_views: int,
        channels: int,
        num_scales: int,
        seed: int = 0,
        params: ModelParameters | None = None,
    ):
        self.cfg = cfg
        self.num_views = num_views
        self.channels = channels
        self.num_scales = num_scales
        self.seed = seed
        self.kinds = layer_kinds(cfg)
        self.params = params if params is not None else init_parameters(
            cfg, num_views, channels, num_scales, seed
        )
        self.fresh_anchors = self._sample_fresh_anchors(seed)

    def _sample_fresh_anchors(self, seed: int) -> np.ndarray:
        rng = seeded_rng(seed + 1)
        count, reach = self.cfg.total_instances, self.cfg.anchor_range
        anchors = np.zeros((count, geo.ANCHOR_DIM))
        anchors[:, geo.X] = rng.uniform(-reach, reach, size=count)
        anchors[:, geo.Y] = rng.uniform(-reach, reach, size=count)
        anchors[:, geo.Z] = 0.5 * self.cfg.anchor_size
        anchors[:, geo.SIZE] = self.cfg.anchor_size
        anchors[:, geo.COS_YAW] = 1.0
        return anchors

    # -- encoders ----------------------------------------------------------- #

    def _psi_forward(self, anchors: np.ndarray):
        p = self.params
        z = linear(anchors, p["psi.fc1.weight"], p["psi.fc1.bias"])
        y, ln = layer_norm(silu(z), p["psi.ln.gamma"], p["psi.ln.beta"])
        emb = linear(y, p["psi.fc2.weight"], p["psi.fc2.bias"])
        return emb, (anchors, z, y, ln)

    def _psi_backward(self, cache, demb: np.ndarray, grads: ModelParameters) -> np.ndarray:
        anchors, z, y, ln = cache
        p = self.params
        dy, dw, db = linear_backward(y, p["psi.fc2.weight"], demb)
        grads.accumulate("psi.fc2.weight", dw)
        grads.accumulate("psi.fc2.bias", db)
        da, dgamma, dbeta = layer_norm_backward(dy, ln)
        grads.accumulate("psi.ln.gamma", dgamma)
        grads.accumulate("psi.ln.beta", dbeta)
        dz = silu_backward(z, da)
        danchors, dw, db = linear_backward(anchors, p["psi.fc1.weight"], dz)
        grads.accumulate("psi.fc1.weight", dw)
        grads.accumulate("psi.fc1.bias", db)
        return danchors

    def anchor_encode(self, anchors) -> np.ndarray:
        """psi(A): (D,) for one Anchor3D, (M, D) for an anchor array."""
        if isinstance(anchors, geo.Anchor3D):
            return self._psi_forward(anchors.to_array()[None])[0][0]
        return self._psi_forward(geo.as_anchor_array(anchors))[0]

    def _camera_forward(self, cams: list[geo.CameraModel]):
        p = self.params
        inputs = np.stack([cam.projection().reshape(-1) / cam.width for cam in cams])
        hidden = linear(inputs, p["camera.fc1.weight"], p["camera.fc1.bias"])
        out = linear(silu(hidden), p["camera.fc2.weight"], p["camera.fc2.bias"])
        return out, (inputs, hidden)

    def _camera_backward(self, cache, dout: np.ndarray, grads: ModelParameters):
        inputs, hidden = cache
        p = self.params
        dact, dw, db = linear_backward(silu(hidden), p["camera.fc2.weight"], dout)
        grads.accumulate("camera.fc2.weight", dw)
        grads.accumulate("camera.fc2.bias", db)
        _, dw, db = linear_backward(inputs, p["camera.fc1.weight"], silu_backward(hidden, dact))
        grads.accumulate("camera.fc1.weight", dw)
        grads.accumulate("camera.fc1.bias", db)

    def camera_param_encode(self, cam: geo.CameraModel) -> np.ndarray:
        """D-dim encoding of a camera's 3x4 projection matrix."""
        return self._camera_forward([cam])[0][0]

    # -- neck and depth ----------------------------------------------------- #

    def apply_neck(self, pyr: FeaturePyramid) -> FeaturePyramid:
        """Per-scale 1x1 channel mixing shared by the decoder and the depth head."""
        if pyr.num_scales != self.num_scales or pyr.channels != self.channels:
            raise ShapeError(
                f"decoder expects {self.num_scales} scales of {self.channels} channels, "
                f"got {pyr.num_scales} of {pyr.channels}"
            )
        p = self.params
        return pyr.with_maps(
            _channel_mix(p[f"neck.{s}.weight"], p[f"neck.{s}.bias"], fmap)
            for s, fmap in enumerate(pyr.maps)
        )

    def _depth_forward(self, neck: FeaturePyramid, cams: list[geo.CameraModel]):
        p = self.params
        ratio = focal_scale(cams, self.cfg.equivalent_focal)[:, None, None, None]
        raws = [
            _channel_mix(p[f"depth.{s}.weight"], p[f"depth.{s}.bias"], fmap)
            for s, fmap in enumerate(neck.maps)
        ]
        return [softplus(raw) * ratio for raw in raws], raws

    def predict_depth(self, pyr: FeaturePyramid, cams: list[geo.CameraModel]):
        """Per-scale (N, 1, H_s, W_s) metric depth maps."""
        return self._depth_forward(self.apply_neck(pyr), cams)[0]

    # -- layers ------------------------------------------------------------- #

    def _attention(self, prefix: str) -> AttentionWeights:
        return AttentionWeights(*(self.params[f"{prefix}.{n}"] for n in ATTENTION_FIELDS))

    def _attention_grads(self, prefix: str, weights: AttentionWeights, grads: ModelParameters):
        for name in ATTENTION_FIELDS:
            grads.accumulate(f"{prefix}.{name}", getattr(weights, name))

    def _weight_logits(self, prefix: str, query: np.ndarray, camera_encoding: np.ndarray):
        p = self.params
        count, num_views = len(query), len(camera_encoding)
        if self.cfg.camera_encoding:
            inputs = query[:, None, :] + camera_encoding[None, :, :]
        else:
            if num_views != self.num_views:
                raise ShapeError(f"weight head was built for {self.num_views} views")
            inputs = query
        logits = linear(inputs, p[f"{prefix}.weights.weight"], p[f"{prefix}.weights.bias"])
        shape = (count, num_views, self.cfg.num_keypoints, self.num_scales, self.cfg.groups)
        return logits.reshape(shape).transpose(0, 2, 1, 3, 4), inputs

    def _weight_logits_backward(self, prefix, dlogits, inputs, grads: ModelParameters):
        count = len(dlogits)
        flat = dlogits.transpose(0, 2, 1, 3, 4)
        flat = flat.reshape(inputs.shape[:-1] + (-1,))
        dinputs, dw, db = linear_backward(inputs, self.params[f"{prefix}.weights.weight"], flat)
        grads.accumulate(f"{prefix}.weights.weight", dw)
        grads.accumulate(f"{prefix}.weights.bias", db)
        if self.cfg.camera_encoding:
            return dinputs.sum(axis=1), dinputs.sum(axis=0)
        return dinputs.reshape(count, -1), None

    def _finish_anchors(self, raw: np.ndarray) -> np.ndarray:
        out = geo.renormalize_yaw(raw)
        clamped = out[:, geo.SIZE] < self.cfg.min_size
        if clamped.any():
            logger.warning("Clamped %d anchor extents to %.3f m", clamped.sum(), self.cfg.min_size)
            out[:, geo.SIZE] = np.maximum(out[:, geo.SIZE], self.cfg.min_size)
        return out

    def _sample(self, t: LayerTrace, frame: FrameTrace, query: np.ndarray, history=None):
        pre = f"layers.{t.index}"
        if history is None:
            t.keypoints = geo.keypoints_for_anchors(t.anchors_in, self.params["keypoints.offsets"])
            t.pixels, t.visible, _ = geo.project_points(t.keypoints, frame.cams)
            logits, t.weight_input = self._weight_logits(pre, query, frame.camera_encoding)
            t.weights = normalize_weights(logits, t.visible)
            return efficient_aggregate_many(
                frame.neck, t.pixels, t.visible, t.weights, ledger=frame.ledger
            )
        # Sample every cached frame; the weights depend only on the query.
        logits_in, t.weight_input = self._weight_logits(pre, query, frame.camera_encoding)
        total = np.zeros((len(query), self.channels))
        for neck, motion in history:
            anchors = t.anchors_in
            if motion is not None:
                anchors = geo.backproject_anchors(anchors, motion)
            keypoints = geo.keypoints_for_anchors(anchors, self.params["keypoints.offsets"])
            pixels, visible, _ = geo.project_points(keypoints, frame.cams)
            weights = normalize_weights(logits_in, visible)
            total += efficient_aggregate_many(neck, pixels, visible, weights, ledger=frame.ledger)
        return total / len(history)

    def _layer_forward(
        self,
        kind: str,
        index: int,
        anchors: np.ndarray,
        features: np.ndarray,
        frame: FrameTrace,
        history=None,
    ) -> LayerTrace:
        p = self.params
        pre = f"layers.{index}"
        t = LayerTrace(kind, index, anchors, features)
        t.embeddings, t.psi_cache = self._psi_forward(anchors)
        emb = t.embeddings
        x = features
        if kind == MULTI:
            qk = x + emb
            out, cache = multi_head_attention_forward(
                qk, qk, x, self.cfg.heads, self._attention(f"{pre}.self_attn")
            )
            x, ln = layer_norm(x + out, p[f"{pre}.ln_self.gamma"], p[f"{pre}.ln_self.beta"])
            t.self_attn = (cache, ln)
            temporal = frame.temporal
            if temporal is not None and len(temporal):
                out, cache = multi_head_attention_forward(
                    x + emb,
                    temporal.features + temporal.embeddings,
                    temporal.features,
                    self.cfg.heads,
                    self._attention(f"{pre}.cross_attn"),
                )
                x, ln = layer_norm(x + out, p[f"{pre}.ln_cross.gamma"], p[f"{pre}.ln_cross.beta"])
                t.cross_attn = (cache, ln)
        t.attended = x
        t.aggregated = self._sample(t, frame, x + emb, history)
        projected = linear(t.aggregated, p[f"{pre}.proj.weight"], p[f"{pre}.proj.bias"])
        x, t.ln_agg = layer_norm(x + projected, p[f"{pre}.ln_agg.gamma"], p[f"{pre}.ln_agg.beta"])
        t.post_agg = x
        t.ffn_hidden = linear(x, p[f"{pre}.ffn1.weight"], p[f"{pre}.ffn1.bias"])
        t.ffn_act = silu(t.ffn_hidden)
        ffn = linear(t.ffn_act, p[f"{pre}.ffn2.weight"], p[f"{pre}.ffn2.bias"])
        x, t.ln_ffn = layer_norm(x + ffn, p[f"{pre}.ln_ffn.gamma"], p[f"{pre}.ln_ffn.beta"])
        t.features_out = x
        delta = linear(x, p[f"{pre}.refine.weight"], p[f"{pre}.refine.bias"])
        t.raw_anchors = anchors + delta
        t.anchors_out = self._finish_anchors(t.raw_anchors)
        t.logits = linear(x, p[f"{pre}.cls.weight"], p[f"{pre}.cls.bias"])[:, 0]
        return t

    def _layer_backward(
        self,
        t: LayerTrace,
        frame: FrameTrace,
        danchors_out: np.ndarray,
        dlogits: np.ndarray,
        dfeatures_out: np.ndarray | None,
        grads: ModelParameters,
        acc: _Accumulators,
    ):
        """Return (d features_in, d anchors_in); the latter is None when detached."""
        p = self.params
        pre = f"layers.{t.index}"
        x = t.features_out
        dx = np.zeros_like(x) if dfeatures_out is None else np.array(dfeatures_out)

        dcls, dw, db = linear_backward(x, p[f"{pre}.cls.weight"], dlogits[:, None])
        grads.accumulate(f"{pre}.cls.weight", dw)
        grads.accumulate(f"{pre}.cls.bias", db)
        dfinished = np.array(danchors_out)
        clamped = geo.renormalize_yaw(t.raw_anchors)[:, geo.SIZE] < self.cfg.min_size
        dfinished[:, geo.SIZE] = np.where(clamped, 0.0, dfinished[:, geo.SIZE])
        draw = geo.renormalize_yaw_backward(t.raw_anchors, dfinished)
        dref, dw, db = linear_backward(x, p[f"{pre}.refine.weight"], draw)
        grads.accumulate(f"{pre}.refine.weight", dw)
        grads.accumulate(f"{pre}.refine.bias", db)
        dx = dx + dcls + dref

        dsum, dgamma, dbeta = layer_norm_backward(dx, t.ln_ffn)
        grads.accumulate(f"{pre}.ln_ffn.gamma", dgamma)
        grads.accumulate(f"{pre}.ln_ffn.beta", dbeta)
        dact, dw, db = linear_backward(t.ffn_act, p[f"{pre}.ffn2.weight"], dsum)
        grads.accumulate(f"{pre}.ffn2.weight", dw)
        grads.accumulate(f"{pre}.ffn2.bias", db)
        dhidden = silu_backward(t.ffn_hidden, dact)
        dffn, dw, db = linear_backward(t.post_agg, p[f"{pre}.ffn1.weight"], dhidden)
        grads.accumulate(f"{pre}.ffn1.weight", dw)
        grads.accumulate(f"{pre}.ffn1.bias", db)
        dx = dsum + dffn

        dsum, dgamma, dbeta = layer_norm_backward(dx, t.ln_agg)
        grads.accumulate(f"{pre}.ln_agg.gamma", dgamma)
        grads.accumulate(f"{pre}.ln_agg.beta", dbeta)
        dagg, dw, db = linear_backward(t.aggregated, p[f"{pre}.proj.weight"], dsum)
        grads.accumulate(f"{pre}.proj.weight", dw)
        grads.accumulate(f"{pre}.proj.bias", db)
        dx = dsum

        agg = efficient_aggregate_backward_many(
            frame.neck, t.pixels, t.visible, t.weights, dagg, ledger=frame.ledger
        )
        for s, gmap in enumerate(agg.maps):
            acc.neck[s] += gmap
        dlogit_w = normalize_weights_backward(t.weights, agg.weights)
        dquery, dcamera = self._weight_logits_backward(pre, dlogit_w, t.weight_input, grads)
        if dcamera is not None:
            acc.camera += dcamera
        dx = dx + dquery
        demb = np.array(dquery)

        jac = geo.project_points_jacobian(t.keypoints, frame.cams)
        dkeypoints = np.einsum("mkni,mknij->mkj", agg.points, jac)
        if self.cfg.num_learnable_keypoints:
            offset_jac = geo.keypoint_offset_jacobian(t.anchors_in)
            grads.accumulate(
                "keypoints.offsets",
                np.einsum("mji,mkj->ki", offset_jac, dkeypoints[:, NUM_FIXED_KEYPOINTS:]),
            )

        if t.cross_attn is not None:
            cache, ln = t.cross_attn
            dsum, dgamma, dbeta = layer_norm_backward(dx, ln)
            grads.accumulate(f"{pre}.ln_cross.gamma", dgamma)
            grads.accumulate(f"{pre}.ln_cross.beta", dbeta)
            g = multi_head_attention_backward(dsum, cache)
            self._attention_grads(f"{pre}.cross_attn", g.weights, grads)
            dx = dsum + g.q
            demb += g.q
            acc.temporal_embeddings += g.k
        if t.self_attn is not None:
            cache, ln = t.self_attn
            dsum, dgamma, dbeta = layer_norm_backward(dx, ln)
            grads.accumulate(f"{pre}.ln_self.gamma", dgamma)
            grads.accumulate(f"{pre}.ln_self.beta", dbeta)
            g = multi_head_attention_backward(dsum, cache)
            self._attention_grads(f"{pre}.self_attn", g.weights, grads)
            dx = dsum + g.q + g.k + g.v
            demb += g.q + g.k

        danchors_psi = self._psi_backward(t.psi_cache, demb, grads)
        if self.cfg.detach_anchors:
            return dx, None
        danchors = draw + danchors_psi + geo.keypoint_anchor_backward(
            t.anchors_in, p["keypoints.offsets"], dkeypoints
        )
        return dx, danchors

    # -- frames ------------------------------------------------------------- #

    def _propagate(self, prev: InstanceSet, motion: geo.EgoMotion):
        if not len(prev):
            return prev, None
        anchors = geo.project_anchors(prev.anchors, motion)
        embeddings, cache = self._psi_forward(anchors)
        # Track origins are fixed on the ground: rigid motion only, no dead reckoning.
        origins = prev.track_origins @ motion.rotation.T + motion.translation
        moved = InstanceSet(
            anchors, prev.features, embeddings, prev.confidences, origins,
            prev.track_time + motion.dt,
        )
        return moved, cache

    def propagate_instances(self, prev: InstanceSet, motion: geo.EgoMotion) -> InstanceSet:
        """Move anchors with the ego motion, keep features, re-derive embeddings."""
        return self._propagate(prev, motion)[0]

    def _instances(self, t: LayerTrace) -> InstanceSet:
        return InstanceSet(
            t.anchors_out, t.features_out, self._psi_forward(t.anchors_out)[0], sigmoid(t.logits)
        )

    def _begin_frame(self, pyr, cams, ledger, neck=None) -> FrameTrace:
        cams = list(cams)
        neck = self.apply_neck(pyr) if neck is None else neck
        frame = FrameTrace(pyr, neck, cams, ledger if ledger is not None else TrafficLedger())
        frame.camera_encoding, frame.camera_cache = self._camera_forward(cams)
        return frame

    def _run_layers(self, frame: FrameTrace, history=None):
        anchors = self.fresh_anchors
        features = np.zeros((len(anchors), self.cfg.feature_dim))
        kinds = self.kinds
        for i, kind in enumerate(kinds):
            if kind != SINGLE:
                break
            t = self._layer_forward(kind, i, anchors, features, frame, history)
            frame.fresh_layers.append(t)
            anchors, features = t.anchors_out, t.features_out
        if frame.fresh_layers:
            fresh = self._instances(frame.fresh_layers[-1])
        else:
            # Unscored fresh anchors: selection falls back to the lowest indices.
            fresh = InstanceSet(
                anchors, features, self._psi_forward(anchors)[0], np.zeros(len(anchors))
            )
        temporal = frame.temporal if frame.temporal is not None else InstanceSet.empty(
            self.cfg.feature_dim
        )
        frame.selection = selection_indices(fresh.confidences, temporal.confidences, self.cfg)
        if frame.selection.size != self.cfg.total_instances:
            raise PropertyFailure(
                "selection",
                f"{len(frame.selection.temporal_index)} temporal + "
                f"{len(frame.selection.fresh_index)} fresh != {self.cfg.total_instances}",
            )
        merged = InstanceSet.concat(
            temporal.take(frame.selection.temporal_index), fresh.take(frame.selection.fresh_index)
        )
        anchors, features = merged.anchors, merged.features
        for i in range(len(frame.fresh_layers), len(kinds)):
            t = self._layer_forward(MULTI, i, anchors, features, frame, history)
            frame.layers.append(t)
            anchors, features = t.anchors_out, t.features_out
        if frame.layers:
            frame.detections = self._instances(frame.layers[-1]).with_tracks(
                merged.track_origins, merged.track_time
            )
        else:
            frame.detections = merged

    def forward_frame(
        self,
        state: InstanceSet | None,
        pyr: FeaturePyramid,
        cams: list[geo.CameraModel],
        motion: geo.EgoMotion,
        ledger: TrafficLedger | None = None,
    ) -> FrameTrace:
        """Run one frame and keep everything `backward` needs."""
        frame = self._begin_frame(pyr, cams, ledger)
        frame.depth, frame.depth_raw = self._depth_forward(frame.neck, frame.cams)
        if self.cfg.temporal and state is not None and len(state):
            carried = state.take(top_confident(state.confidences, self.cfg.temporal_instances))
            frame.temporal, frame.temporal_psi_cache = self._propagate(carried, motion)
        self._run_layers(frame)
        if self.cfg.temporal and self.cfg.track_velocity:
            frame.detections = track_velocity(frame.detections, self.cfg.track_prior_s)
        if self.cfg.temporal:
            keep = top_confident(frame.detections.confidences, self.cfg.temporal_instances)
            frame.state = frame.detections.take(keep)
        logger.debug(
            "frame: %d temporal + %d fresh instances, %d aggregation calls",
            len(frame.selection.temporal_index),
            len(frame.selection.fresh_index),
            frame.ledger.calls,
        )
        return frame

    def run_frame(
        self,
        state: InstanceSet | None,
        pyr: FeaturePyramid,
        cams: list[geo.CameraModel],
        motion: geo.EgoMotion,
        ledger: TrafficLedger | None = None,
    ) -> tuple[InstanceSet, InstanceSet | None]:
        """Detections of this frame and the instance bank for the next one."""
        frame = self.forward_frame(state, pyr, cams, motion, ledger)
        return frame.detections, frame.state

    def forward_multisample(
        self,
        history: list[tuple[FeaturePyramid, geo.EgoMotion | None]],
        cams: list[geo.CameraModel],
        ledger: TrafficLedger | None = None,
    ) -> InstanceSet:
        """Multi-frame sampling: every layer samples all cached frames and averages.

        `history` pairs neck features with the motion from that frame to the current
        one; the current frame comes first with motion None. No instances are carried.
        """
        frame = self._begin_frame(None, cams, ledger, neck=history[0][0])
        self._run_layers(frame, history)
        return frame.detections

    def decoder_layer(
        self,
        inst: InstanceSet,
        temporal: InstanceSet | None,
        pyr: FeaturePyramid,
        cams: list[geo.CameraModel],
        kind: str,
        index: int | None = None,
        ledger: TrafficLedger | None = None,
    ) -> InstanceSet:
        """Apply one layer (the first of its kind unless `index` is given)."""
        if index is None:
            index = self.kinds.index(kind)
        if self.kinds[index] != kind:
            raise ShapeError(f"layer {index} is a {self.kinds[index]}-frame layer")
        frame = self._begin_frame(pyr, cams, ledger)
        frame.temporal = temporal
        return self._instances(
            self._layer_forward(kind, index, inst.anchors, inst.features, frame)
        )

    def backward(self, frame: FrameTrace, cot: FrameCotangents) -> ModelParameters:
        """Gradients of sum(cot * outputs) for every parameter."""
        grads = self.params.zeros_like()
        temporal_count = 0 if frame.temporal is None else len(frame.temporal)
        acc = _Accumulators(
            [np.zeros_like(m) for m in frame.neck.maps],
            np.zeros_like(frame.camera_encoding),
            np.zeros((temporal_count, self.cfg.feature_dim)),
        )
        layers = frame.all_layers
        if len(cot.anchors) != len(layers) or len(cot.logits) != len(layers):
            raise ShapeError(f"cotangents for {len(cot.anchors)} layers, frame has {len(layers)}")
        num_fresh = len(frame.fresh_layers)
        dfeatures, danchors = None, None
        for i in reversed(range(num_fresh, len(layers))):
            danchors_out = cot.anchors[i] if danchors is None else cot.anchors[i] + danchors
            dfeatures, danchors = self._layer_backward(
                layers[i], frame, danchors_out, cot.logits[i], dfeatures, grads, acc
            )
        if frame.layers:
            # Merged rows: carried instances first, then the selected fresh ones.
            kept = len(frame.selection.temporal_index)
            dfresh = np.zeros((self.cfg.total_instances, self.cfg.feature_dim))
            dfresh[frame.selection.fresh_index] = dfeatures[kept:]
            dfeatures = dfresh
            if danchors is not None:
                dfresh_anchors = np.zeros((self.cfg.total_instances, geo.ANCHOR_DIM))
                dfresh_anchors[frame.selection.fresh_index] = danchors[kept:]
                danchors = dfresh_anchors
        for i in reversed(range(num_fresh)):
            danchors_out = cot.anchors[i] if danchors is None else cot.anchors[i] + danchors
            dfeatures, danchors = self._layer_backward(
                layers[i], frame, danchors_out, cot.logits[i], dfeatures, grads, acc
            )
        if frame.temporal_psi_cache is not None:
            self._psi_backward(frame.temporal_psi_cache, acc.temporal_embeddings, grads)
        self._camera_backward(frame.camera_cache, acc.camera, grads)
        if cot.depth is not None:
            self._depth_backward(frame, cot.depth, acc, grads)
        for s, fmap in enumerate(frame.pyramid.maps):
            _, dw, db = _channel_mix_backward(self.params[f"neck.{s}.weight"], fmap, acc.neck[s])
            grads.accumulate(f"neck.{s}.weight", dw)
            grads.accumulate(f"neck.{s}.bias", db)
        return grads

    def _depth_backward(self, frame: FrameTrace, ddepth, acc: _Accumulators, grads):
        ratio = focal_scale(frame.cams, self.cfg.equivalent_focal)[:, None, None, None]
        for s, (raw, fmap) in enumerate(zip(frame.depth_raw, frame.neck.maps)):
            draw = ddepth[s] * ratio * sigmoid(raw)
            dmap, dw, db = _channel_mix_backward(self.params[f"depth.{s}.weight"], fmap, draw)
            grads.accumulate(f"depth.{s}.weight", dw)
            grads.accumulate(f"depth.{s}.bias", db)
            acc.neck[s] += dmap


# --------------------------------------------------------------------------- #
# Losses
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class DepthLoss:
    """Mean L1 depth error; `valid` counts the (point, view, scale) triples used."""

    value: float
    grads: list[np.ndarray]
    valid: int

    @property
    def empty(self) -> bool:
        """Whether no projection contributed."""
        return self.valid == 0


def depth_loss(
    pred: list[np.ndarray],
    points: np.ndarray,
    cams: list[geo.CameraModel],
    image_size: tuple[int, int],
) -> DepthLoss:
    """L1 between predicted depth at the nearest pixel and each point's camera depth."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pixels, visible, depth = geo.project_points(points, cams)
    width, height = image_size
    pt_index, view_index = np.nonzero(visible)
    grads = [np.zeros_like(p) for p in pred]
    valid = len(pt_index) * len(pred)
    if valid == 0:
        logger.warning("Depth loss has no valid projections, defined as 0")
        return DepthLoss(0.0, grads, 0)
    total = 0.0
    for s, dmap in enumerate(pred):
        map_h, map_w = dmap.shape[2:]
        u = pixels[pt_index, view_index, 0]
        v = pixels[pt_index, view_index, 1]
        col = np.clip(np.rint((u + 0.5) * map_w / width - 0.5), 0, map_w - 1).astype(np.int64)
        row = np.clip(np.rint((v + 0.5) * map_h / height - 0.5), 0, map_h - 1).astype(np.int64)
        diff = dmap[view_index, 0, row, col] - depth[pt_index, view_index]
        total += float(np.abs(diff).sum())
        np.add.at(grads[s], (view_index, 0, row, col), np.sign(diff) / valid)
    return DepthLoss(total / valid, grads, valid)


def greedy_match(pred: np.ndarray, target: np.ndarray, radius: float = np.inf):
    """Pairs (pred_index, target_index) by increasing centre distance.

    Ties are broken by the lower prediction index, then the lower target index.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if not len(pred) or not len(target):
        return []
    dist = np.linalg.norm(pred[:, None, :] - target[None, :, :], axis=-1)
    pi, ti = np.nonzero(dist <= radius)
    order = np.lexsort((ti, pi, dist[pi, ti]))
    used_pred, used_target, pairs = set(), set(), []
    for k in order:
        a, b = int(pi[k]), int(ti[k])
        if a in used_pred or b in used_target:
            continue
        used_pred.add(a)
        used_target.add(b)
        pairs.append((a, b))
    return pairs


def focal_loss(logits: np.ndarray, targets: np.ndarray, alpha: float, gamma: float):
    """Sum of the sigmoid focal loss and its gradient w.r.t. the logits."""
    p = sigmoid(logits)
    log_p = -softplus(-logits)
    log_q = -softplus(logits)
    q = 1.0 - p
    pos = targets > 0.5
    loss = np.where(
        pos, -alpha * q**gamma * log_p, -(1.0 - alpha) * p**gamma * log_q
    )
    grad = np.where(
        pos,
        alpha * (gamma * p * q**gamma * log_p - q ** (gamma + 1.0)),
        (1.0 - alpha) * (p ** (gamma + 1.0) - gamma * p**gamma * q * log_q),
    )
    return float(loss.sum()), grad


@dataclass(frozen=True)
class FrameLoss:
    """Total loss, named components and the cotangents for `SparseDecoder.backward`."""

    total: float
    components: dict[str, float]
    cotangents: FrameCotangents


def frame_loss(
    frame: FrameTrace,
    gt_anchors: np.ndarray,
    gt_points: np.ndarray,
    cfg: TrainConfig,
) -> FrameLoss:
    """Box L1 and focal classification on every layer plus dense depth L1.

    The box and cls components are summed over layers, so the weighted components
    add up to the total.
    """
    gt_anchors = np.asarray(gt_anchors, dtype=np.float64).reshape(-1, geo.ANCHOR_DIM)
    norm = max(1, len(gt_anchors))
    danchors, dlogits = [], []
    box = cls = 0.0
    total = 0.0
    for t in frame.all_layers:
        pairs = greedy_match(t.anchors_out[:, geo.POSITION], gt_anchors[:, geo.POSITION])
        targets = np.zeros(len(t.logits))
        dbox = np.zeros_like(t.anchors_out)
        if pairs:
            pi, ti = (np.array(ix) for ix in zip(*pairs))
            targets[pi] = 1.0
            diff = t.anchors_out[pi] - gt_anchors[ti]
            box += float(np.abs(diff).sum()) / norm
            dbox[pi] = np.sign(diff) / norm
        layer_cls, dcls = focal_loss(t.logits, targets, cfg.focal_alpha, cfg.focal_gamma)
        cls += layer_cls / norm
        danchors.append(cfg.box_weight * dbox)
        dlogits.append(cfg.cls_weight * dcls / norm)
    total = cfg.box_weight * box + cfg.cls_weight * cls
    components = {"box": box, "cls": cls, "depth": 0.0}
    ddepth = None
    if cfg.depth_supervision:
        depth = depth_loss(frame.depth, gt_points, frame.cams, frame.neck.image_size)
        components["depth"] = depth.value
        total += cfg.depth_weight * depth.value
        ddepth = [cfg.depth_weight * g for g in depth.grads]
    components["total"] = total
    return FrameLoss(total, components, FrameCotangents(danchors, dlogits, ddepth))
