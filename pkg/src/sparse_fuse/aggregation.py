# Copyright 2026 sparse-fuse contributors

"""Deformable feature aggregation over views and scales.

Two implementations share one contract:

`basic_aggregate` follows the textbook algorithm step by step and materialises every
intermediate buffer (per-scale samples, the stacked K x N x S x C tensor, the weighted
product); each buffer is charged to a `TrafficLedger`.

`efficient_aggregate` is the fused operator. Work items are independent and each one
owns one output value: it walks keypoints, views and scales, samples the four
neighbours and applies the group weight inline. Non-visible (keypoint, view) pairs are
skipped. Backward recomputes the samples instead of caching them.

Points are pixel coordinates of the image the pyramid was computed from
(`FeaturePyramid.image_size`); scale s samples at `(u + 0.5) * W_s / W - 0.5`.
Weight `w[k, n, s, g]` scales channels `[g*C/G, (g+1)*C/G)`.
"""

import logging
import threading
from dataclasses import dataclass, field
from functools import cached_property

import numba
import numpy as np
from numba import njit, prange

from sparse_fuse.errors import ShapeError
from sparse_fuse.numerics import bilinear_corners

logger = logging.getLogger(__name__)

FLOAT_BYTES = 8


def set_worker_threads(count: int) -> int:
    """Cap the threads used by the fused kernels; returns the count in effect."""
    count = max(1, min(int(count), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(count)
    logger.debug("aggregation kernels use %d threads", count)
    return count


@dataclass
class TrafficLedger:
    """Byte and call accounting for intermediate buffers.

    A buffer is intermediate when it is neither an input nor the final output.
    Counters only grow during a run; the lock makes updates atomic across threads.
    """

    bytes_written: int = 0
    bytes_read: int = 0
    peak_intermediate_bytes: int = 0
    live_bytes: int = 0
    calls: int = 0
    samples: int = 0
    max_item_samples: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def store(self, nbytes: int):
        """Allocate and write an intermediate buffer."""
        with self._lock:
            self.bytes_written += nbytes
            self.live_bytes += nbytes
            self.peak_intermediate_bytes = max(self.peak_intermediate_bytes, self.live_bytes)

    def load(self, nbytes: int):
        """Count `nbytes` read back from an intermediate buffer."""
        with self._lock:
            self.bytes_read += nbytes

    def free(self, nbytes: int):
        """Release `nbytes` of live intermediates."""
        with self._lock:
            self.live_bytes -= nbytes

    def hold(self, nbytes: int):
        """Account for a buffer that stays live, such as a cache, without traffic."""
        with self._lock:
            self.live_bytes += nbytes
            self.peak_intermediate_bytes = max(self.peak_intermediate_bytes, self.live_bytes)

    def count(self, calls: int, samples: int = 0, max_item_samples: int = 0):
        """Record finished aggregation calls and their samples."""
        with self._lock:
            self.calls += calls
            self.samples += samples
            self.max_item_samples = max(self.max_item_samples, max_item_samples)

    def snapshot(self) -> dict[str, int]:
        """Counters as a plain dict."""
        with self._lock:
            return {
                "bytes_written": self.bytes_written,
                "bytes_read": self.bytes_read,
                "peak_intermediate_bytes": self.peak_intermediate_bytes,
                "calls": self.calls,
                "samples": self.samples,
                "max_item_samples": self.max_item_samples,
            }


@dataclass(frozen=True)
class PackedPyramid:
    """All scales flattened to (N, C, sum H_s*W_s), the multi-scale attention layout."""

    values: np.ndarray
    spatial_shapes: np.ndarray
    level_start_index: np.ndarray
    scale_x: np.ndarray
    scale_y: np.ndarray


@dataclass(frozen=True)
class FeaturePyramid:
    """S feature maps of shape N x C x H_s x W_s sharing N and C."""

    maps: tuple[np.ndarray, ...]
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        maps = tuple(np.ascontiguousarray(m, dtype=np.float64) for m in self.maps)
        if not maps:
            raise ShapeError("a feature pyramid needs at least one scale")
        for fmap in maps:
            if fmap.ndim != 4:
                raise ShapeError(f"feature maps must be N x C x H x W, got {fmap.shape}")
            if fmap.shape[:2] != maps[0].shape[:2]:
                raise ShapeError("all scales must share the view and channel counts")
            if min(fmap.shape[2:]) < 2:
                raise ShapeError(f"feature maps must be at least 2 x 2, got {fmap.shape}")
        object.__setattr__(self, "maps", maps)
        if self.image_size is None:
            object.__setattr__(self, "image_size", (maps[0].shape[3], maps[0].shape[2]))

    @property
    def num_views(self) -> int:
        """Number of camera views."""
        return self.maps[0].shape[0]

    @property
    def channels(self) -> int:
        """Channels per map."""
        return self.maps[0].shape[1]

    @property
    def num_scales(self) -> int:
        """Number of pyramid levels."""
        return len(self.maps)

    @property
    def nbytes(self) -> int:
        """Total size of every map."""
        return sum(m.nbytes for m in self.maps)

    @cached_property
    def packed(self) -> PackedPyramid:
        """Flattened single-buffer layout, built on first use."""
        n, c = self.num_views, self.channels
        shapes = np.array([m.shape[2:] for m in self.maps], dtype=np.int64)
        sizes = shapes[:, 0] * shapes[:, 1]
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        values = np.concatenate([m.reshape(n, c, -1) for m in self.maps], axis=2)
        width, height = self.image_size
        return PackedPyramid(
            np.ascontiguousarray(values),
            shapes,
            starts,
            shapes[:, 1] / float(width),
            shapes[:, 0] / float(height),
        )

    def unpack(self, values: np.ndarray) -> list[np.ndarray]:
        """Split a packed (N, C, P) array back into per-scale maps."""
        packed = self.packed
        out = []
        for (h, w), start in zip(packed.spatial_shapes, packed.level_start_index):
            chunk = values[:, :, start : start + h * w]
            out.append(chunk.reshape(values.shape[0], values.shape[1], h, w))
        return out

    def with_maps(self, maps) -> "FeaturePyramid":
        """Same image size with new maps."""
        return FeaturePyramid(tuple(maps), self.image_size)


@dataclass(frozen=True)
class AggregationRequest:
    """Keypoints P (K x N x 2), visibility (K x N) and weights W (K x N x S x G)."""

    points: np.ndarray
    visible: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "visible", np.asarray(self.visible, dtype=bool))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))

    def is_normalized(self, tol: float = 1e-9) -> bool:
        """Whether every keypoint's weights sum to one or are all zero.

        Weights on views that do not see the keypoint must be zero.
        """
        masked = np.where(self.visible[..., None, None], 0.0, self.weights)
        if np.any(np.abs(masked) > tol):
            return False
        flat = self.weights.reshape(self.weights.shape[0], -1)
        sums = flat.sum(axis=1)
        empty = np.all(np.abs(flat) <= tol, axis=1)
        return bool(np.all(empty | (np.abs(sums - 1.0) <= tol)))


@dataclass(frozen=True)
class AggregationGrads:
    """Gradients w.r.t. the per-scale maps, the points and the weights."""

    maps: list[np.ndarray]
    points: np.ndarray
    weights: np.ndarray


def _check_batch(pyr: FeaturePyramid, points, visible, weights):
    points = np.ascontiguousarray(points, dtype=np.float64)
    visible = np.ascontiguousarray(visible, dtype=bool)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if points.ndim != 4 or points.shape[-1] != 2:
        raise ShapeError(f"points must be M x K x N x 2, got {points.shape}")
    m, k, n, _ = points.shape
    if n != pyr.num_views:
        raise ShapeError(f"points address {n} views, the pyramid has {pyr.num_views}")
    if visible.shape != (m, k, n):
        raise ShapeError(f"visibility must be {(m, k, n)}, got {visible.shape}")
    if weights.ndim != 5 or weights.shape[:4] != (m, k, n, pyr.num_scales):
        raise ShapeError(f"weights must be {(m, k, n, pyr.num_scales)} x G, got {weights.shape}")
    groups = weights.shape[4]
    if groups < 1 or pyr.channels % groups:
        raise ShapeError(f"{groups} groups do not divide {pyr.channels} channels")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ShapeError("weights must be finite and non-negative")
    return points, visible, weights


def _as_batch(req: AggregationRequest):
    return req.points[None], req.visible[None], req.weights[None]


def _count_samples(
    ledger: TrafficLedger, visible: np.ndarray, num_scales: int, items: int, forward: bool = True
):
    per_keypoint = visible.sum(axis=-1) * num_scales
    ledger.count(
        calls=visible.shape[0] if forward else 0,
        samples=int(per_keypoint.sum()) * items,
        max_item_samples=int(per_keypoint.max(initial=0)),
    )


# --------------------------------------------------------------------------- #
# Reference implementation
# --------------------------------------------------------------------------- #


def basic_aggregate(
    pyr: FeaturePyramid,
    req: AggregationRequest,
    ledger: TrafficLedger | None = None,
    per_keypoint: bool = False,
) -> np.ndarray:
    """Sample, stack, weight and sum, materialising every intermediate buffer."""
    ledger = ledger if ledger is not None else TrafficLedger()
    points, visible, weights = (a[0] for a in _check_batch(pyr, *_as_batch(req)))
    num_kp, num_views = visible.shape
    channels, groups = pyr.channels, weights.shape[-1]
    width, height = pyr.image_size
    view_index = np.arange(num_views)[None, :, None]

    sampled_list = []
    for fmap in pyr.maps:
        map_h, map_w = fmap.shape[2:]
        u = (points[..., 0] + 0.5) * map_w / width - 0.5
        v = (points[..., 1] + 0.5) * map_h / height - 0.5
        xs, ys, corner_w, _, _, inside = bilinear_corners(u, v, map_h, map_w)
        corner_w = np.where(inside & visible[..., None], corner_w, 0.0)
        values = fmap[view_index, :, np.clip(ys, 0, map_h - 1), np.clip(xs, 0, map_w - 1)]
        sampled = np.einsum("knj,knjc->nck", corner_w, values)
        ledger.store(sampled.nbytes)
        sampled_list.append(sampled)

    list_bytes = sum(s.nbytes for s in sampled_list)
    ledger.load(list_bytes)
    stacked = np.ascontiguousarray(np.stack(sampled_list).transpose(3, 1, 0, 2))
    ledger.store(stacked.nbytes)
    ledger.free(list_bytes)

    channel_group = np.arange(channels) // (channels // groups)
    ledger.load(stacked.nbytes)
    product = stacked * weights[..., channel_group]
    ledger.store(product.nbytes)
    ledger.free(stacked.nbytes)

    ledger.load(product.nbytes)
    out = product.sum(axis=(1, 2))
    ledger.free(product.nbytes)
    _count_samples(ledger, visible[None], pyr.num_scales, channels)
    logger.debug("basic aggregation: K=%d N=%d C=%d", num_kp, num_views, channels)
    return out if per_keypoint else out.sum(axis=0)


# --------------------------------------------------------------------------- #
# Fused kernels
# --------------------------------------------------------------------------- #


@njit(cache=True, inline="always")
def _sample(values, n, c, start, height, width, u, v):
    u = min(max(u, -2.0), width + 1.0)
    v = min(max(v, -2.0), height + 1.0)
    ix = np.int64(np.floor(u))
    iy = np.int64(np.floor(v))
    fx = u - ix
    fy = v - iy
    acc = 0.0
    for dy in range(2):
        yy = iy + dy
        if yy < 0 or yy >= height:
            continue
        wy = fy if dy == 1 else 1.0 - fy
        for dx in range(2):
            xx = ix + dx
            if xx < 0 or xx >= width:
                continue
            wx = fx if dx == 1 else 1.0 - fx
            acc += wx * wy * values[n, c, start + yy * width + xx]
    return acc


@njit(cache=True, inline="always")
def _sample_grad(values, n, c, start, height, width, u, v):
    u = min(max(u, -2.0), width + 1.0)
    v = min(max(v, -2.0), height + 1.0)
    ix = np.int64(np.floor(u))
    iy = np.int64(np.floor(v))
    fx = u - ix
    fy = v - iy
    acc = 0.0
    du = 0.0
    dv = 0.0
    for dy in range(2):
        yy = iy + dy
        if yy < 0 or yy >= height:
            continue
        wy = fy if dy == 1 else 1.0 - fy
        sy = 1.0 if dy == 1 else -1.0
        for dx in range(2):
            xx = ix + dx
            if xx < 0 or xx >= width:
                continue
            wx = fx if dx == 1 else 1.0 - fx
            sx = 1.0 if dx == 1 else -1.0
            val = values[n, c, start + yy * width + xx]
            acc += wx * wy * val
            du += sx * wy * val
            dv += wx * sy * val
    return acc, du, dv


@njit(cache=True, inline="always")
def _scatter(grad, n, c, start, height, width, u, v, coef):
    u = min(max(u, -2.0), width + 1.0)
    v = min(max(v, -2.0), height + 1.0)
    ix = np.int64(np.floor(u))
    iy = np.int64(np.floor(v))
    fx = u - ix
    fy = v - iy
    for dy in range(2):
        yy = iy + dy
        if yy < 0 or yy >= height:
            continue
        wy = fy if dy == 1 else 1.0 - fy
        for dx in range(2):
            xx = ix + dx
            if xx < 0 or xx >= width:
                continue
            wx = fx if dx == 1 else 1.0 - fx
            grad[n, c, start + yy * width + xx] += coef * wx * wy


@njit(cache=True)
def _keypoint_sum(values, shapes, starts, scale_x, scale_y, points, visible, weights, m, k, c, g):
    # Views outer, scales inner.
    part = 0.0
    for n in range(points.shape[2]):
        if not visible[m, k, n]:
            continue
        for s in range(weights.shape[3]):
            u = (points[m, k, n, 0] + 0.5) * scale_x[s] - 0.5
            v = (points[m, k, n, 1] + 0.5) * scale_y[s] - 0.5
            sample = _sample(values, n, c, starts[s], shapes[s, 0], shapes[s, 1], u, v)
            part += weights[m, k, n, s, g] * sample
    return part


@njit(parallel=True, cache=True)
def _fused_forward(
    values, shapes, starts, scale_x, scale_y, points, visible, weights, channels, out
):
    num_kp = points.shape[1]
    group_size = values.shape[1] // weights.shape[4]
    num_items = channels.shape[0]
    for item in prange(points.shape[0] * num_items):
        m = item // num_items
        c = channels[item % num_items]
        g = c // group_size
        acc = 0.0
        for k in range(num_kp):
            acc += _keypoint_sum(
                values, shapes, starts, scale_x, scale_y, points, visible, weights, m, k, c, g
            )
        out[m, c] = acc


@njit(parallel=True, cache=True)
def _fused_forward_points(
    values, shapes, starts, scale_x, scale_y, points, visible, weights, channels, out
):
    num_kp = points.shape[1]
    group_size = values.shape[1] // weights.shape[4]
    num_items = channels.shape[0]
    for item in prange(points.shape[0] * num_kp * num_items):
        m = item // (num_kp * num_items)
        k = (item // num_items) % num_kp
        c = channels[item % num_items]
        out[m, k, c] = _keypoint_sum(
            values, shapes, starts, scale_x, scale_y, points, visible, weights, m, k, c,
            c // group_size,
        )


@njit(parallel=True, cache=True)
def _fused_backward_values(
    values, shapes, starts, scale_x, scale_y, points, visible, weights, upstream, grad_values
):
    # One work item per channel: every item writes only its own channel plane.
    num_inst, num_kp, num_views, _ = points.shape
    group_size = values.shape[1] // weights.shape[4]
    for c in prange(values.shape[1]):
        g = c // group_size
        for m in range(num_inst):
            up = upstream[m, c]
            if up == 0.0:
                continue
            for k in range(num_kp):
                for n in range(num_views):
                    if not visible[m, k, n]:
                        continue
                    for s in range(weights.shape[3]):
                        u = (points[m, k, n, 0] + 0.5) * scale_x[s] - 0.5
                        v = (points[m, k, n, 1] + 0.5) * scale_y[s] - 0.5
                        _scatter(
                            grad_values, n, c, starts[s], shapes[s, 0], shapes[s, 1], u, v,
                            up * weights[m, k, n, s, g],
                        )


@njit(parallel=True, cache=True)
def _fused_backward_coords(
    values, shapes, starts, scale_x, scale_y, points, visible, weights, upstream,
    grad_points, grad_weights,
):
    # One work item per (instance, keypoint).
    num_inst, num_kp, num_views, _ = points.shape
    num_groups = weights.shape[4]
    group_size = values.shape[1] // num_groups
    for item in prange(num_inst * num_kp):
        m = item // num_kp
        k = item % num_kp
        for n in range(num_views):
            if not visible[m, k, n]:
                continue
            gu = 0.0
            gv = 0.0
            for s in range(weights.shape[3]):
                u = (points[m, k, n, 0] + 0.5) * scale_x[s] - 0.5
                v = (points[m, k, n, 1] + 0.5) * scale_y[s] - 0.5
                for g in range(num_groups):
                    w = weights[m, k, n, s, g]
                    gw = 0.0
                    for c in range(g * group_size, (g + 1) * group_size):
                        up = upstream[m, c]
                        val, dval_du, dval_dv = _sample_grad(
                            values, n, c, starts[s], shapes[s, 0], shapes[s, 1], u, v
                        )
                        gw += up * val
                        gu += w * up * dval_du * scale_x[s]
                        gv += w * up * dval_dv * scale_y[s]
                    grad_weights[m, k, n, s, g] = gw
            grad_points[m, k, n, 0] = gu
            grad_points[m, k, n, 1] = gv


# --------------------------------------------------------------------------- #
# Fused operator
# --------------------------------------------------------------------------- #


def _channel_items(channels, total: int) -> np.ndarray:
    if channels is None:
        return np.arange(total, dtype=np.int64)
    items = np.asarray(channels, dtype=np.int64).reshape(-1)
    if items.size and (items.min() < 0 or items.max() >= total):
        raise ShapeError(f"channel work items must lie in [0, {total})")
    return items


def efficient_aggregate_many(
    pyr: FeaturePyramid,
    points: np.ndarray,
    visible: np.ndarray,
    weights: np.ndarray,
    ledger: TrafficLedger | None = None,
    channels=None,
    per_keypoint: bool = False,
) -> np.ndarray:
    """Fused aggregation of M instances: (M, C), or (M, K, C) with `per_keypoint`.

    `channels` restricts the work items to those channels; the other outputs stay 0.
    """
    ledger = ledger if ledger is not None else TrafficLedger()
    points, visible, weights = _check_batch(pyr, points, visible, weights)
    packed = pyr.packed
    items = _channel_items(channels, pyr.channels)
    args = (
        packed.values,
        packed.spatial_shapes,
        packed.level_start_index,
        packed.scale_x,
        packed.scale_y,
        points,
        visible,
        weights,
        items,
    )
    num_inst, num_kp = visible.shape[:2]
    if per_keypoint:
        out = np.zeros((num_inst, num_kp, pyr.channels))
        _fused_forward_points(*args, out)
    else:
        out = np.zeros((num_inst, pyr.channels))
        _fused_forward(*args, out)
    # Each instance reduces into one C-length accumulator before its single store.
    acc_bytes = pyr.channels * FLOAT_BYTES
    ledger.store(acc_bytes)
    ledger.free(acc_bytes)
    _count_samples(ledger, visible, pyr.num_scales, len(items))
    return out


def efficient_aggregate(
    pyr: FeaturePyramid,
    req: AggregationRequest,
    ledger: TrafficLedger | None = None,
    channels=None,
    per_keypoint: bool = False,
) -> np.ndarray:
    """Fused aggregation of one instance: a C-vector, or K x C with `per_keypoint`."""
    return efficient_aggregate_many(
        pyr, *_as_batch(req), ledger=ledger, channels=channels, per_keypoint=per_keypoint
    )[0]


def efficient_aggregate_backward_many(
    pyr: FeaturePyramid,
    points: np.ndarray,
    visible: np.ndarray,
    weights: np.ndarray,
    upstream: np.ndarray,
    ledger: TrafficLedger | None = None,
) -> AggregationGrads:
    """Gradients of `sum(upstream * efficient_aggregate_many(...))`.

    Samples are recomputed from the pyramid; nothing from the forward pass is kept.
    """
    ledger = ledger if ledger is not None else TrafficLedger()
    points, visible, weights = _check_batch(pyr, points, visible, weights)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (points.shape[0], pyr.channels):
        raise ShapeError(
            f"upstream must be {(points.shape[0], pyr.channels)}, got {upstream.shape}"
        )
    packed = pyr.packed
    args = (
        packed.values,
        packed.spatial_shapes,
        packed.level_start_index,
        packed.scale_x,
        packed.scale_y,
        points,
        visible,
        weights,
        upstream,
    )
    grad_values = np.zeros_like(packed.values)
    grad_points = np.zeros_like(points)
    grad_weights = np.zeros_like(weights)
    _fused_backward_values(*args, grad_values)
    _fused_backward_coords(*args, grad_points, grad_weights)
    acc_bytes = pyr.channels * FLOAT_BYTES
    ledger.store(acc_bytes)
    ledger.free(acc_bytes)
    _count_samples(ledger, visible, pyr.num_scales, 2 * pyr.channels, forward=False)
    return AggregationGrads(pyr.unpack(grad_values), grad_points, grad_weights)


def efficient_aggregate_backward(
    pyr: FeaturePyramid,
    req: AggregationRequest,
    upstream: np.ndarray,
    ledger: TrafficLedger | None = None,
) -> AggregationGrads:
    """Single-instance form of `efficient_aggregate_backward_many`."""
    grads = efficient_aggregate_backward_many(
        pyr, *_as_batch(req), np.asarray(upstream, dtype=np.float64)[None], ledger=ledger
    )
    return AggregationGrads(grads.maps, grads.points[0], grads.weights[0])


# --------------------------------------------------------------------------- #
# Weight normalisation
# --------------------------------------------------------------------------- #


def normalize_weights(raw: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Joint softmax over (N, S, G) per keypoint with non-visible views masked out.

    `raw` is (..., K, N, S, G) and `visible` (..., K, N). A keypoint with no visible
    view gets all-zero weights.
    """
    raw = np.asarray(raw, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    if raw.ndim < 4 or raw.shape[:-2] != visible.shape:
        raise ShapeError(f"logits {raw.shape} do not match visibility {visible.shape}")
    mask = np.broadcast_to(visible[..., None, None], raw.shape)
    flat_shape = raw.shape[:-3] + (-1,)
    logits = np.where(mask, raw, -np.inf).reshape(flat_shape)
    flat_mask = mask.reshape(flat_shape)
    top = logits.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(flat_mask, np.exp(np.where(flat_mask, logits, 0.0) - top), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    return out.reshape(raw.shape)


def normalize_weights_backward(weights: np.ndarray, dweights: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits; masked entries receive exactly zero."""
    flat_shape = weights.shape[:-3] + (-1,)
    w = weights.reshape(flat_shape)
    dw = dweights.reshape(flat_shape)
    dlogits = w * (dw - np.sum(dw * w, axis=-1, keepdims=True))
    return dlogits.reshape(weights.shape)
