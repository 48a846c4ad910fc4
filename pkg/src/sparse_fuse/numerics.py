# Copyright 2026 sparse-fuse contributors

"""Dense float64 building blocks with hand-written gradients.

Every function here is pure: inputs are never modified and no state is kept between
calls, so the functions may be called from many threads at once. Tensors are plain
`numpy.ndarray` objects of dtype float64 in row-major order.

Pixel convention: a point is `(u, v)` = (column, row) and integer coordinates sit on
pixel centres. Samples outside the map are zero-padded, so a point that lies fully
outside the map samples to the zero vector.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from sparse_fuse.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

# Corner order used by every bilinear helper: (x0,y0), (x1,y0), (x0,y1), (x1,y1).
CORNER_DX = np.array([0, 1, 0, 1])
CORNER_DY = np.array([0, 0, 1, 1])


def as_tensor(values, shape: tuple[int, ...] | None = None) -> Tensor:
    """Return `values` as a float64 array, optionally reshaped, with all dims >= 1."""
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim == 0 or any(d < 1 for d in arr.shape):
        raise ShapeError(f"tensor dimensions must all be >= 1, got {arr.shape}")
    return arr


def seeded_rng(seed: int) -> np.random.Generator:
    """Return the generator used for all random initialisation."""
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------- #
# Bilinear interpolation
# --------------------------------------------------------------------------- #


def bilinear_corners(u, v, height: int, width: int):
    """Return the four neighbours of each point and their interpolation weights.

    `u` and `v` broadcast together. The result is a tuple
    `(xs, ys, weights, dweights_du, dweights_dv, inside)`, each with a trailing axis
    of length 4 in the module corner order. `inside` marks corners within the map;
    zero padding means callers simply drop the others.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    # Anything this far out has no in-bounds corner; clipping keeps the int cast safe.
    u = np.clip(u, -2.0, width + 1.0)
    v = np.clip(v, -2.0, height + 1.0)
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx = (u - x0)[..., None]
    fy = (v - y0)[..., None]
    xs = x0.astype(np.int64)[..., None] + CORNER_DX
    ys = y0.astype(np.int64)[..., None] + CORNER_DY
    wx = np.where(CORNER_DX == 1, fx, 1.0 - fx)
    wy = np.where(CORNER_DY == 1, fy, 1.0 - fy)
    sx = np.where(CORNER_DX == 1, 1.0, -1.0)
    sy = np.where(CORNER_DY == 1, 1.0, -1.0)
    inside = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    return xs, ys, wx * wy, sx * wy, wx * sy, inside


def _check_sample_args(fmap, point) -> tuple[Tensor, float, float]:
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ShapeError(f"feature map must be C x H x W, got shape {fmap.shape}")
    u, v = (float(p) for p in point)
    if not (np.isfinite(u) and np.isfinite(v)):
        raise NonFiniteError(f"sample point must be finite, got ({u}, {v})")
    return fmap, u, v


def bilinear_sample(fmap: Tensor, point) -> Tensor:
    """Bilinearly interpolate a C x H x W map at continuous pixel coordinates."""
    fmap, u, v = _check_sample_args(fmap, point)
    _, height, width = fmap.shape
    xs, ys, weights, _, _, inside = bilinear_corners(u, v, height, width)
    out = np.zeros(fmap.shape[0])
    for j in range(4):
        if inside[j]:
            out += weights[j] * fmap[:, ys[j], xs[j]]
    return out


def bilinear_sample_grad(fmap: Tensor, point, upstream: Tensor) -> tuple[Tensor, Tensor]:
    """Return `(grad_map, grad_point)` of `upstream . bilinear_sample(fmap, point)`."""
    fmap, u, v = _check_sample_args(fmap, point)
    channels, height, width = fmap.shape
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (channels,):
        raise ShapeError(f"upstream must have shape ({channels},), got {upstream.shape}")
    xs, ys, weights, dwdu, dwdv, inside = bilinear_corners(u, v, height, width)
    grad_map = np.zeros_like(fmap)
    grad_point = np.zeros(2)
    for j in range(4):
        if not inside[j]:
            continue
        grad_map[:, ys[j], xs[j]] += weights[j] * upstream
        dot = float(upstream @ fmap[:, ys[j], xs[j]])
        grad_point[0] += dwdu[j] * dot
        grad_point[1] += dwdv[j] * dot
    return grad_map, grad_point


# --------------------------------------------------------------------------- #
# Elementwise functions
# --------------------------------------------------------------------------- #


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    return np.logaddexp(0.0, x)


def silu(x):
    """x * sigmoid(x)."""
    return x * sigmoid(x)


def silu_backward(x, dy):
    """Gradient of silu given the upstream gradient."""
    s = sigmoid(x)
    return dy * s * (1.0 + x * (1.0 - s))


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: Tensor, dy: Tensor, axis: int = -1) -> Tensor:
    """Gradient w.r.t. the logits given the softmax output `y` and upstream `dy`."""
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


# --------------------------------------------------------------------------- #
# Layers
# --------------------------------------------------------------------------- #


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply `x @ weight.T + bias` over the last axis of `x`."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} does not match weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def linear_backward(x: Tensor, weight: Tensor, dout: Tensor):
    """Return `(dx, dweight, dbias)` for `linear(x, weight, bias)`."""
    flat_x = x.reshape(-1, x.shape[-1])
    flat_d = dout.reshape(-1, dout.shape[-1])
    return dout @ weight, flat_d.T @ flat_x, flat_d.sum(axis=0)


@dataclass(frozen=True)
class LinearLayer:
    """Affine map `x -> x @ weight.T + bias` with weight [out_dim x in_dim]."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"inconsistent linear layer: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @classmethod
    def init(
        cls, rng: np.random.Generator, in_dim: int, out_dim: int, zero: bool = False
    ) -> "LinearLayer":
        """Uniform fan-in initialisation, or all zeros for refinement heads."""
        if zero:
            return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))
        bound = 1.0 / np.sqrt(in_dim)
        return cls(
            rng.uniform(-bound, bound, size=(out_dim, in_dim)),
            rng.uniform(-bound, bound, size=out_dim),
        )

    @property
    def in_dim(self) -> int:
        """Input width."""
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        """Output width."""
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        """Apply the layer."""
        return linear(x, self.weight, self.bias)

    def backward(self, x: Tensor, dout: Tensor):
        """Input, weight and bias gradients."""
        return linear_backward(x, self.weight, dout)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalise the last axis; returns `(y, cache)`."""
    mean = x.mean(axis=-1, keepdims=True)
    centred = x - mean
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma)


def layer_norm_backward(dy: Tensor, cache):
    """Return `(dx, dgamma, dbeta)`."""
    xhat, inv_std, gamma = cache
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    flat_dy = dy.reshape(-1, dy.shape[-1])
    flat_xhat = xhat.reshape(-1, xhat.shape[-1])
    return dx, (flat_dy * flat_xhat).sum(axis=0), flat_dy.sum(axis=0)


# --------------------------------------------------------------------------- #
# Multi-head attention
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class AttentionWeights:
    """Projection weights of one attention block.

    The key projection has no bias: a key bias shifts every logit of a query by the
    same amount and cancels in the softmax.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def identity(cls, dim: int) -> "AttentionWeights":
        """Attention with identity projections and zero biases."""
        eye, zero = np.eye(dim), np.zeros(dim)
        return cls(eye, zero, eye, eye, zero, eye, zero)

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int) -> "AttentionWeights":
        """Seeded random projections."""
        layers = [LinearLayer.init(rng, dim, dim) for _ in range(4)]
        return cls(
            layers[0].weight,
            layers[0].bias,
            layers[1].weight,
            layers[2].weight,
            layers[2].bias,
            layers[3].weight,
            layers[3].bias,
        )

    @property
    def dim(self) -> int:
        """Model width."""
        return self.wq.shape[0]


@dataclass(frozen=True)
class AttentionGrads:
    """Gradients of the attention inputs and weights."""
    q: Tensor
    k: Tensor
    v: Tensor
    weights: AttentionWeights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    rows, dim = x.shape
    return x.reshape(rows, heads, dim // heads).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    heads, rows, dh = x.shape
    return x.transpose(1, 0, 2).reshape(rows, heads * dh)


def _check_attention_args(q, k, v, heads, weights):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention inputs must be 2-D")
    dim = q.shape[1]
    if k.shape[1] != dim or v.shape[1] != dim or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes do not match: q {q.shape} k {k.shape} v {v.shape}")
    if heads < 1 or dim % heads:
        raise ShapeError(f"feature dim {dim} is not divisible by {heads} heads")
    if weights.dim != dim:
        raise ShapeError(f"attention weights are {weights.dim}-d, inputs are {dim}-d")


def multi_head_attention_forward(
    q: Tensor, k: Tensor, v: Tensor, heads: int, weights: AttentionWeights | None = None
):
    """Scaled dot-product attention per head, concatenated and projected.

    Returns `(out, cache)`; `weights=None` uses identity projections.
    """
    if weights is None:
        weights = AttentionWeights.identity(q.shape[-1])
    _check_attention_args(q, k, v, heads, weights)
    dh = q.shape[1] // heads
    qp = linear(q, weights.wq, weights.bq)
    kp = linear(k, weights.wk)
    vp = linear(v, weights.wv, weights.bv)
    qh, kh, vh = (_split_heads(t, heads) for t in (qp, kp, vp))
    scale = 1.0 / np.sqrt(dh)
    attn = softmax(qh @ kh.transpose(0, 2, 1) * scale, axis=-1)
    context = _merge_heads(attn @ vh)
    out = linear(context, weights.wo, weights.bo)
    return out, (q, k, v, heads, weights, qh, kh, vh, attn, context, scale)


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, heads: int, weights: AttentionWeights | None = None
) -> Tensor:
    """Q x D output of multi-head attention of `q` over keys `k` and values `v`."""
    return multi_head_attention_forward(q, k, v, heads, weights)[0]


def multi_head_attention_backward(dout: Tensor, cache) -> AttentionGrads:
    """Gradients of `multi_head_attention_forward` from its cache."""
    q, k, v, heads, weights, qh, kh, vh, attn, context, scale = cache
    dcontext, dwo, dbo = linear_backward(context, weights.wo, dout)
    dctx_h = _split_heads(dcontext, heads)
    dattn = dctx_h @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ dctx_h
    dscores = softmax_backward(attn, dattn) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh
    dq, dwq, dbq = linear_backward(q, weights.wq, _merge_heads(dqh))
    dk, dwk, _ = linear_backward(k, weights.wk, _merge_heads(dkh))
    dv, dwv, dbv = linear_backward(v, weights.wv, _merge_heads(dvh))
    return AttentionGrads(dq, dk, dv, AttentionWeights(dwq, dbq, dwk, dwv, dbv, dwo, dbo))


# --------------------------------------------------------------------------- #
# Gradient checking
# --------------------------------------------------------------------------- #


def finite_diff_check(
    f: Callable[[Tensor], float],
    x: Tensor,
    analytic_grad: Tensor,
    step: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Return the max relative error between central differences and `analytic_grad`.

    `x` is perturbed in place one coordinate at a time and restored afterwards, so
    `f` may either use its argument or read the same array through a closure.
    `indices` selects the flat coordinates to perturb; by default every coordinate is.
    """
    if not (isinstance(x, np.ndarray) and x.dtype == np.float64 and x.flags.writeable):
        x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    if analytic.size != x.size:
        raise ShapeError(f"gradient has {analytic.size} entries, x has {x.size}")
    base = f(x)
    if not np.isfinite(base):
        raise NonFiniteError(f"objective is not finite at x: {base}")
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ShapeError("x must be contiguous to be perturbed in place")
    worst = 0.0
    for i in range(x.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(x)
        flat[i] = orig - step
        f_minus = f(x)
        flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * step)
        err = abs(fd - analytic[i]) / max(1e-8, abs(fd) + abs(analytic[i]))
        worst = max(worst, err)
    logger.debug("finite difference check over %d coordinates: %.3e", x.size, worst)
    return worst
