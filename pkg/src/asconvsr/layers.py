"""Structural layers: pixel unshuffle/shuffle, repeat upscaling, parameter
storage, same-resolution conv layers, and weight initialization schemes.

Pixel (un)shuffle use one fixed channel ordering:

    unshuffled[b, c*r*r + i*r + j, y, x] == image[b, c, y*r + i, x*r + j]

i.e. channel-major, then row offset, then column offset. With that ordering,
``pixel_shuffle(repeat_upscale(x, r), r)`` is exactly nearest-neighbor
upscaling by r, which is what the global skip connection relies on.
"""

from __future__ import annotations

import numpy as np

from . import tensor
from .errors import ConfigError, ShapeError


# ---------------------------------------------------------------------------
# space <-> channel permutations


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*r*r, H/r, W/r); requires H and W divisible by r."""
    if x.ndim != 4:
        raise ShapeError(f"pixel_unshuffle expects rank 4, got {x.shape}")
    if r < 1:
        raise ShapeError(f"pixel_unshuffle factor must be >= 1, got {r}")
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by factor {r}")
    if r == 1:
        return x
    hr, wr = h // r, w // r
    y = x.reshape(b, c, hr, r, wr, r)
    return np.ascontiguousarray(y.transpose(0, 1, 3, 5, 2, 4)).reshape(b, c * r * r, hr, wr)


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C/(r*r), H*r, W*r); exact inverse of pixel_unshuffle."""
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle expects rank 4, got {x.shape}")
    if r < 1:
        raise ShapeError(f"pixel_shuffle factor must be >= 1, got {r}")
    b, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"channel count {c} not divisible by {r}*{r}")
    if r == 1:
        return x
    co = c // (r * r)
    y = x.reshape(b, co, r, r, h, w)
    return np.ascontiguousarray(y.transpose(0, 1, 4, 2, 5, 3)).reshape(b, co, h * r, w * r)


def pixel_unshuffle_grad(grad_out: np.ndarray, r: int) -> np.ndarray:
    """Gradient of pixel_unshuffle: the inverse permutation (a pixel shuffle)."""
    return pixel_shuffle(grad_out, r)


def pixel_shuffle_grad(grad_out: np.ndarray, r: int) -> np.ndarray:
    """Gradient of pixel_shuffle: the inverse permutation (a pixel unshuffle)."""
    return pixel_unshuffle(grad_out, r)


def repeat_upscale(x: np.ndarray, r: int) -> np.ndarray:
    """Replicate each channel into r*r consecutive channels: (B, C, H, W) ->
    (B, C*r*r, H, W). Shuffling the result by r gives nearest-neighbor x r."""
    if x.ndim != 4:
        raise ShapeError(f"repeat_upscale expects rank 4, got {x.shape}")
    if r < 1:
        raise ShapeError(f"repeat factor must be >= 1, got {r}")
    if r == 1:
        return x
    return np.repeat(x, r * r, axis=1)


# ---------------------------------------------------------------------------
# parameter storage


class Param:
    """A learnable array paired with its gradient accumulator."""

    __slots__ = ("value", "grad", "kind")

    def __init__(self, value: np.ndarray, kind: str):
        self.value = value
        self.grad = np.zeros_like(value)
        self.kind = kind


class ParamStore:
    """Ordered map name -> Param; names are unique and iteration follows
    registration order, which keeps init, checkpointing, and the optimizer
    deterministic."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def register(self, name: str, value: np.ndarray, kind: str = "conv_weight") -> Param:
        if name in self._params:
            raise ConfigError(f"parameter {name!r} already registered")
        p = Param(np.array(value, copy=True), kind)
        self._params[name] = p
        return p

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Param:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"parameter {name!r} is not registered") from None

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def n_scalars(self) -> int:
        return sum(p.value.size for p in self._params.values())


# ---------------------------------------------------------------------------
# conv layer


class ConvLayer:
    """Same-resolution convolution layer (padding = k // 2) bound to a
    ParamStore. backward() accumulates parameter gradients additively, so two
    forward+backward passes double the stored gradient."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 k: int, bias_enabled: bool, dtype=np.float32):
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"kernel size must be odd and >= 1, got {k}")
        self.store = store
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.k = k
        self.padding = k // 2
        self.bias_enabled = bias_enabled
        self.weight = store.register(f"{name}.weight",
                                     np.zeros((c_out, c_in, k, k), dtype=dtype),
                                     kind="conv_weight")
        self.bias = None
        if bias_enabled:
            self.bias = store.register(f"{name}.bias", np.zeros(c_out, dtype=dtype),
                                       kind="bias")
        self._cached_input: np.ndarray | None = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if train:
            self._cached_input = x
        b = self.bias.value if self.bias is not None else None
        return tensor.conv2d(x, self.weight.value, b, padding=self.padding)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cached_input is None:
            raise ConfigError(f"{self.name}: backward called without a train-mode forward")
        gx, gw, gb = tensor.conv2d_grad(self._cached_input, self.weight.value, grad_out,
                                        padding=self.padding,
                                        with_bias=self.bias is not None)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


# ---------------------------------------------------------------------------
# initialization


def _fan_in(p: Param) -> int:
    # bases are (E, C_in, k, k) or (E, C_out, C_in, k, k): fan-in excludes E
    # and any output-channel extent; plain conv weights are (C_out, C_in, k, k).
    shape = p.value.shape
    if p.kind == "dynamic_bases":
        return int(np.prod(shape[2:]))
    return int(np.prod(shape[1:]))


def add_identity_tap(weight: np.ndarray) -> None:
    """Add 1.0 to the center tap weight[o, o, k//2, k//2] of a square-channel
    conv kernel, in place. A zero kernel becomes the identity map."""
    c_out, c_in, kh, kw = weight.shape
    if c_out != c_in:
        raise ShapeError(f"identity tap undefined for {c_out}x{c_in} channels")
    ci, cj = kh // 2, kw // 2
    for o in range(c_out):
        weight[o, o, ci, cj] += 1.0


def init_params(store: ParamStore, scheme: str, rng: tensor.Rng) -> list[str]:
    """Initialize every parameter in registration order.

    'he_normal' draws weight-like params from normal(0, sqrt(2 / fan_in)) and
    zeroes biases. 'residual_equivalent' additionally adds 1.0 to the center
    diagonal tap of square-channel conv weights, which makes the layer behave
    like conv + skip without the explicit skip structure. Layers where that
    tap is undefined (c_in != c_out) are left he_normal; a notice per skipped
    layer is returned.
    """
    if scheme not in ("he_normal", "residual_equivalent"):
        raise ConfigError(f"unknown init scheme {scheme!r}")
    notices: list[str] = []
    for name, p in store.items():
        if p.kind == "bias":
            p.value[...] = 0
            continue
        std = float(np.sqrt(2.0 / _fan_in(p)))
        p.value[...] = rng.normal(0.0, std, p.value.shape, dtype=p.value.dtype)
        if scheme == "residual_equivalent":
            if p.kind == "conv_weight" and p.value.shape[0] == p.value.shape[1]:
                add_identity_tap(p.value)
            elif p.kind == "conv_weight":
                notices.append(f"{name}: identity tap undefined "
                               f"(c_out={p.value.shape[0]} != c_in={p.value.shape[1]}), "
                               "he_normal only")
            else:
                notices.append(f"{name}: identity tap not applicable to kind {p.kind!r}, "
                               "he_normal only")
    return notices
