"""Deterministic numeric core: array construction, ordered matmul and conv2d
with exact gradient counterparts, pooling, elementwise ops, and a seedable RNG.

Arrays are plain ``numpy.ndarray`` values in float32 (training, benchmarking)
or float64 (verification), laid out batch-channel-height-width with width
fastest. All operations are pure: inputs are never mutated, and any operation
that produces a NaN or Inf raises :class:`NumericError`.

``matmul`` and ``conv2d`` accumulate in a fixed, documented order so that
independent naive-loop oracles can demand bitwise equality at 64-bit:

* ``matmul``: ``out[m, n]`` sums ``a[m, k] * b[k, n]`` over ascending ``k``,
  starting from 0.0, one multiply and one add per term (never fused).
* ``conv2d``: each output element sums weight-input products over ascending
  (input channel within its group, kernel row, kernel column); the bias, if
  any, is added after the accumulation.

The gradient functions trade the fixed order for speed (BLAS-backed
contractions); their contracts are tolerance-based (finite differences),
not bitwise.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

MAX_RANK = 4


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {dtype!r}: use float32 or float64")
    return dt


def _ensure_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"{op} produced non-finite values")
    return x


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: operand dtypes differ, {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# construction / rearrangement


def build(shape, fill=None, data=None, dtype=np.float32) -> np.ndarray:
    """Create an array of ``shape`` (rank 1..4, extents >= 1) from a constant
    ``fill`` or a flat row-major ``data`` sequence (exactly one of the two)."""
    dt = _as_dtype(dtype)
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got {len(shape)}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"shape extents must be >= 1, got {shape}")
    n = int(np.prod(shape))
    if (fill is None) == (data is None):
        raise ShapeError("provide exactly one of fill= or data=")
    if fill is not None:
        if not np.isfinite(fill):
            raise NumericError(f"fill value {fill!r} is not finite")
        return np.full(shape, fill, dtype=dt)
    flat = np.asarray(data, dtype=dt).reshape(-1)
    if flat.size != n:
        raise ShapeError(f"data length {flat.size} does not match shape {shape} ({n} elements)")
    return _ensure_finite(flat.reshape(shape).copy(), "build")


def reshape(x: np.ndarray, shape) -> np.ndarray:
    """Reshape preserving row-major element order."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return x.reshape(shape)


def permute(x: np.ndarray, axes) -> np.ndarray:
    """Reorder axes; the result is a fresh contiguous array."""
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation of 0..{x.ndim - 1}")
    return np.ascontiguousarray(np.transpose(x, axes))


# ---------------------------------------------------------------------------
# matmul


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Ordered matrix product: out[m, n] = sum_k a[m, k] * b[k, n], accumulated
    over ascending k in the operand precision."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtypes differ: {a.dtype} vs {b.dtype}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = np.zeros((m, n), dtype=a.dtype)
    tmp = np.empty_like(out)
    for kk in range(k):
        # one rounded multiply plus one rounded add per element, k ascending
        np.multiply(a[:, kk, None], b[None, kk, :], out=tmp)
        np.add(out, tmp, out=out)
    return _ensure_finite(out, "matmul")


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(x, weight, bias, stride, padding, groups):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input/weight, got {x.shape} and {weight.shape}")
    if x.dtype != weight.dtype:
        raise ShapeError(f"conv2d dtypes differ: input {x.dtype}, weight {weight.dtype}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ShapeError(f"invalid stride={stride}, padding={padding}, groups={groups}")
    batch, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if c_in % groups or c_out % groups:
        raise ShapeError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"weight expects {c_in_g} input channels per group, input provides {c_in // groups}")
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
        if bias.dtype != x.dtype:
            raise ShapeError(f"bias dtype {bias.dtype} != {x.dtype}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or w + 2 * padding < kw or h_out < 1 or w_out < 1:
        raise ShapeError(f"non-positive output extents for input {x.shape}, kernel {kh}x{kw}, "
                         f"stride {stride}, padding {padding}")
    return batch, c_in, h, w, c_out, c_in_g, kh, kw, h_out, w_out


def _pad_input(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Grouped 2-D cross-correlation (no kernel flip) with zero padding.

    x: (B, C_in, H, W); weight: (C_out, C_in/groups, kh, kw); bias: (C_out,).
    Output channel o in group q reads only the input channels of group q.
    Accumulation ascends (input channel within group, kernel row, kernel
    column) per output element, so the naive loop with the same order matches
    bitwise.
    """
    (batch, c_in, h, w, c_out, c_in_g, kh, kw,
     h_out, w_out) = _conv_geometry(x, weight, bias, stride, padding, groups)
    xp = _pad_input(x, padding)
    g = groups
    c_out_g = c_out // g
    xg = xp.reshape(batch, g, c_in_g, xp.shape[2], xp.shape[3])
    wg = weight.reshape(g, c_out_g, c_in_g, kh, kw)
    acc = np.zeros((g, c_out_g, batch, h_out * w_out), dtype=x.dtype)
    tmp = np.empty_like(acc)
    winbuf = np.empty((g, batch, h_out, w_out), dtype=x.dtype)
    h_span = stride * (h_out - 1) + 1
    w_span = stride * (w_out - 1) + 1
    with np.errstate(invalid="ignore", over="ignore"):  # _ensure_finite reports instead
        for c in range(c_in_g):
            for i in range(kh):
                for j in range(kw):
                    np.copyto(winbuf,
                              xg[:, :, c, i:i + h_span:stride, j:j + w_span:stride]
                              .transpose(1, 0, 2, 3))
                    np.multiply(wg[:, :, c, i, j][:, :, None, None],
                                winbuf.reshape(g, 1, batch, h_out * w_out), out=tmp)
                    np.add(acc, tmp, out=acc)
    out = acc.reshape(g, c_out_g, batch, h_out, w_out).transpose(2, 0, 1, 3, 4) \
             .reshape(batch, c_out, h_out, w_out)
    if bias is not None:
        np.add(out, bias[None, :, None, None], out=out)
    return _ensure_finite(out, "conv2d")


def conv2d_grad(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                stride: int = 1, padding: int = 0, groups: int = 1,
                with_bias: bool = True):
    """Gradients of conv2d for the loss L = sum(grad_out * conv2d(x, weight)).

    Returns (grad_input, grad_weight, grad_bias); grad_bias is None when
    with_bias is false. grad_bias[o] sums grad_out over batch and space.
    """
    (batch, c_in, h, w, c_out, c_in_g, kh, kw,
     h_out, w_out) = _conv_geometry(x, weight, None, stride, padding, groups)
    if grad_out.shape != (batch, c_out, h_out, w_out):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(batch, c_out, h_out, w_out)}")
    if grad_out.dtype != x.dtype:
        raise ShapeError(f"grad_out dtype {grad_out.dtype} != {x.dtype}")
    g = groups
    c_out_g = c_out // g
    xp = _pad_input(x, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    xg = xp.reshape(batch, g, c_in_g, hp, wp)
    h_span = stride * (h_out - 1) + 1
    w_span = stride * (w_out - 1) + 1

    cols = np.empty((g, batch, h_out, w_out, c_in_g, kh, kw), dtype=x.dtype)
    for c in range(c_in_g):
        for i in range(kh):
            for j in range(kw):
                np.copyto(cols[:, :, :, :, c, i, j],
                          xg[:, :, c, i:i + h_span:stride, j:j + w_span:stride]
                          .transpose(1, 0, 2, 3))
    cols_m = cols.reshape(g, batch * h_out * w_out, c_in_g * kh * kw)
    g_m = np.ascontiguousarray(
        grad_out.reshape(batch, g, c_out_g, h_out * w_out).transpose(1, 2, 0, 3)
    ).reshape(g, c_out_g, batch * h_out * w_out)

    grad_weight = np.matmul(g_m, cols_m).reshape(c_out, c_in_g, kh, kw)

    w_m = weight.reshape(g, c_out_g, c_in_g * kh * kw)
    dcols = np.matmul(g_m.transpose(0, 2, 1), w_m)
    dcols = dcols.reshape(g, batch, h_out, w_out, c_in_g, kh, kw)
    dxp = np.zeros((batch, g, c_in_g, hp, wp), dtype=x.dtype)
    for c in range(c_in_g):
        for i in range(kh):
            for j in range(kw):
                view = dxp[:, :, c, i:i + h_span:stride, j:j + w_span:stride]
                np.add(view, dcols[:, :, :, :, c, i, j].transpose(1, 0, 2, 3), out=view)
    grad_input = np.ascontiguousarray(
        dxp.reshape(batch, c_in, hp, wp)[:, :, padding:padding + h, padding:padding + w])

    grad_bias = grad_out.sum(axis=(0, 2, 3)) if with_bias else None
    _ensure_finite(grad_input, "conv2d_grad")
    _ensure_finite(grad_weight, "conv2d_grad")
    if grad_bias is not None:
        _ensure_finite(grad_bias, "conv2d_grad")
    return grad_input, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# pooling


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over H and W per (batch, channel): (B, C, H, W) -> (B, C, 1, 1)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects rank 4, got {x.shape}")
    return _ensure_finite(x.mean(axis=(2, 3), keepdims=True), "global_avg_pool")


def global_avg_pool_grad(grad_out: np.ndarray, h: int, w: int) -> np.ndarray:
    """Spread grad_out / (h*w) uniformly back over the pooled window."""
    if grad_out.ndim != 4 or grad_out.shape[2] != 1 or grad_out.shape[3] != 1:
        raise ShapeError(f"grad_out must be (B, C, 1, 1), got {grad_out.shape}")
    scale_ = grad_out / grad_out.dtype.type(h * w)
    return np.broadcast_to(scale_, grad_out.shape[:2] + (h, w)).copy()


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b):
    _check_same_shape(a, b, "add")
    return _ensure_finite(a + b, "add")


def sub(a, b):
    _check_same_shape(a, b, "sub")
    return _ensure_finite(a - b, "sub")


def mul(a, b):
    _check_same_shape(a, b, "mul")
    return _ensure_finite(a * b, "mul")


def scale(x, s):
    if not np.isfinite(s):
        raise NumericError(f"scale factor {s!r} is not finite")
    return _ensure_finite(x * x.dtype.type(s), "scale")


def clamp(x, lo, hi):
    if lo > hi:
        raise ShapeError(f"clamp bounds inverted: {lo} > {hi}")
    return np.clip(x, lo, hi)


def relu(x):
    return np.maximum(x, x.dtype.type(0))


def add_grad(grad_out):
    return grad_out, grad_out


def sub_grad(grad_out):
    return grad_out, -grad_out


def mul_grad(a, b, grad_out):
    return grad_out * b, grad_out * a


def scale_grad(s, grad_out):
    return grad_out * grad_out.dtype.type(s)


def clamp_grad(x, lo, hi, grad_out):
    # pass-through on the closed interval, zero outside
    return grad_out * ((x >= lo) & (x <= hi))


def relu_grad(x, grad_out):
    # subgradient 0 at exactly x == 0
    return grad_out * (x > 0)


# ---------------------------------------------------------------------------
# random source


class Rng:
    """Seedable random source (numpy PCG64 behind ``numpy.random.Generator``).

    The same seed yields the same sequence on every platform. Values are drawn
    in float64 and cast to the requested dtype, so float32 and float64 fills
    from the same seed agree up to rounding. ``stream`` selects one of several
    independent sequences for the same seed (stream 0 is plain PCG64(seed));
    the trainer uses this to keep patch sampling decoupled from weight init.
    """

    def __init__(self, seed: int, stream: int = 0):
        if stream:
            ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
            self._gen = np.random.Generator(np.random.PCG64(ss))
        else:
            self._gen = np.random.Generator(np.random.PCG64(int(seed)))

    def uniform(self, low: float, high: float, shape, dtype=np.float32) -> np.ndarray:
        if not low < high:
            raise ShapeError(f"uniform requires low < high, got [{low}, {high})")
        dt = _as_dtype(dtype)
        return self._gen.uniform(low, high, size=tuple(shape)).astype(dt)

    def normal(self, mean: float, std: float, shape, dtype=np.float32) -> np.ndarray:
        if not std > 0:
            raise ShapeError(f"normal requires std > 0, got {std}")
        dt = _as_dtype(dtype)
        return self._gen.normal(mean, std, size=tuple(shape)).astype(dt)

    def integers(self, low: int, high: int) -> int:
        """One integer in [low, high)."""
        if not low < high:
            raise ShapeError(f"integers requires low < high, got [{low}, {high})")
        return int(self._gen.integers(low, high))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value


def rng_fill(rng: Rng, shape, dist: str = "uniform", low: float = 0.0, high: float = 1.0,
             mean: float = 0.0, std: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Fill an array from ``rng``: dist 'uniform' uses [low, high), 'normal'
    uses (mean, std). Deterministic for a given seed and call order."""
    if dist == "uniform":
        return rng.uniform(low, high, shape, dtype)
    if dist == "normal":
        return rng.normal(mean, std, shape, dtype)
    raise ShapeError(f"unknown distribution {dist!r}")
