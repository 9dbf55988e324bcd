"""The super-resolution network: pixel-unshuffle head, one or more assembled
blocks, a tail conv feeding a two-step pixel shuffle, and a repeat-upscale
global skip connection. Also the parameter counter and the FLOPs estimator.

Layer graph for scale s and unshuffle factor r (defaults s = r = 2):

    x (B, 3, H, W)
      -> pixel_unshuffle(r)              (B, 3*r^2, H/r, W/r)
      -> conv3x3 (3*r^2 -> C) [+relu]
      -> num_blocks x block              (control + three convs, C -> C)
      -> conv3x3 (C -> 3*s^2*r^2)
      -> pixel_shuffle(r)                (B, 3*s^2, H, W)
      -> + repeat_upscale(x, s)          global skip
      -> pixel_shuffle(s)                (B, 3, s*H, s*W)

Zeroing the tail parameters therefore reduces the model to exact
nearest-neighbor upscaling, which the tests rely on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor
from .assembled import (AssembledConv, ControlModule, DynamicConv,
                        softmax_over_bases, softmax_over_bases_grad)
from .errors import ConfigError, ShapeError
from .layers import (ConvLayer, ParamStore, init_params, pixel_shuffle,
                     pixel_unshuffle, repeat_upscale)

CONV_MODES = ("plain", "dynamic", "assembled")
NORMALIZATIONS = ("none", "softmax")
ACTIVATIONS = ("relu", "none")
INIT_SCHEMES = ("he_normal", "residual_equivalent", "zero_tail")


@dataclass
class ModelConfig:
    """All architecture hyperparameters.

    The defaults are the small single-block preset (32 channels, 16 candidate
    kernels). ``bias_enabled`` governs the head, tail, and plain-block convs;
    assembled and dynamic convolutions are bias-free by construction, and the
    control module keeps its own bias (``control_bias``) even in no-bias
    ablations so the coefficients are not dead at init.
    """

    scale: int = 2
    unshuffle_factor: int = 2
    channels: int = 32
    num_blocks: int = 1
    num_bases: int = 16
    ks: int = 3
    conv_mode: str = "assembled"
    bias_enabled: bool = False
    residual_in_block: bool = False
    coeff_normalization: str = "none"
    activation: str = "relu"
    global_skip: bool = True
    control_bias: bool = True
    shared_coeff: bool = True
    init_scheme: str = "he_normal"

    @property
    def head_in_channels(self) -> int:
        return 3 * self.unshuffle_factor ** 2

    @property
    def tail_channels(self) -> int:
        # undone by shuffle(r) then shuffle(scale), leaving 3 image channels
        return 3 * (self.scale * self.unshuffle_factor) ** 2

    def validate(self) -> None:
        if self.scale != 2:
            raise ConfigError(f"only scale=2 is supported, got {self.scale}")
        if self.unshuffle_factor not in (1, 2, 3, 4):
            raise ConfigError(f"unshuffle_factor must be in 1..4, got {self.unshuffle_factor}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.num_bases < 1:
            raise ConfigError(f"num_bases must be >= 1, got {self.num_bases}")
        if self.ks < 1 or self.ks % 2 == 0:
            raise ConfigError(f"ks must be odd and >= 1, got {self.ks}")
        if self.conv_mode not in CONV_MODES:
            raise ConfigError(f"conv_mode must be one of {CONV_MODES}, got {self.conv_mode!r}")
        if self.coeff_normalization not in NORMALIZATIONS:
            raise ConfigError(f"coeff_normalization must be one of {NORMALIZATIONS}, "
                              f"got {self.coeff_normalization!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"init_scheme must be one of {INIT_SCHEMES}, "
                              f"got {self.init_scheme!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def preset_asconvsr() -> ModelConfig:
    """Small preset: one assembled block, 32 channels. The candidate-kernel
    count is not pinned by the published parameter count; 16 is the default."""
    return ModelConfig()


def preset_asconvsr_l() -> ModelConfig:
    """Large preset: two assembled blocks, 128 channels, 128 candidate kernels."""
    return ModelConfig(channels=128, num_blocks=2, num_bases=128)


PRESETS = {
    "asconvsr": preset_asconvsr,
    "asconvsr-l": preset_asconvsr_l,
}


# ---------------------------------------------------------------------------
# blocks


class _BlockBase:
    def __init__(self, config: ModelConfig):
        self.activation = config.activation
        self.residual = config.residual_in_block

    def _act(self, x, cache_list, train):
        if self.activation == "relu":
            if train:
                cache_list.append(x)
            return tensor.relu(x)
        return x

    def _act_grad(self, g, cache_list):
        if self.activation == "relu":
            return tensor.relu_grad(cache_list.pop(), g)
        return g


class PlainBlock(_BlockBase):
    """Three ordinary convolutions with activations between them."""

    def __init__(self, store, name, config: ModelConfig, dtype):
        super().__init__(config)
        c, ks = config.channels, config.ks
        self.convs = [ConvLayer(store, f"{name}.conv{i}", c, c, ks,
                                config.bias_enabled, dtype) for i in range(3)]
        self._preacts: list[np.ndarray] = []

    def forward(self, x, train=False):
        if train:
            self._preacts = []
        h = x
        for i, conv in enumerate(self.convs):
            h = conv.forward(h, train)
            if i < 2:
                h = self._act(h, self._preacts, train)
        return tensor.add(h, x) if self.residual else h

    def backward(self, g):
        gx_res = g if self.residual else None
        for i in (2, 1, 0):
            if i < 2:
                g = self._act_grad(g, self._preacts)
            g = self.convs[i].backward(g)
        return g + gx_res if gx_res is not None else g


class AssembledBlock(_BlockBase):
    """A control module plus three assembled convolutions. With
    ``shared_coeff`` one coefficient set (computed from the block input)
    drives all three convolutions; otherwise each convolution has its own
    control module fed by its own input."""

    def __init__(self, store, name, config: ModelConfig, dtype):
        super().__init__(config)
        c, ks, e = config.channels, config.ks, config.num_bases
        self.channels = c
        self.n_bases = e
        self.normalization = config.coeff_normalization
        self.shared = config.shared_coeff
        if self.shared:
            self.controls = [ControlModule(store, f"{name}.control", c, c * e,
                                           config.control_bias, dtype)]
        else:
            self.controls = [ControlModule(store, f"{name}.conv{i}.control", c, c * e,
                                           config.control_bias, dtype) for i in range(3)]
        self.convs = [AssembledConv(store, f"{name}.conv{i}", c, c, ks, e, dtype)
                      for i in range(3)]
        self._preacts: list[np.ndarray] = []
        self._coeffs: list[np.ndarray] = []

    def _coeff_from(self, control, x, train):
        flat = control.forward(x, train)
        coeff = flat.reshape(flat.shape[0], self.channels, self.n_bases)
        if self.normalization == "softmax":
            coeff = softmax_over_bases(coeff)
        return coeff

    def forward(self, x, train=False):
        if train:
            self._preacts = []
            self._coeffs = []
        h = x
        coeff = self._coeff_from(self.controls[0], x, train) if self.shared else None
        if train and self.shared:
            self._coeffs.append(coeff)
        for i, conv in enumerate(self.convs):
            if not self.shared:
                coeff = self._coeff_from(self.controls[i], h, train)
                if train:
                    self._coeffs.append(coeff)
            h = conv.forward(h, coeff, train)
            if i < 2:
                h = self._act(h, self._preacts, train)
        return tensor.add(h, x) if self.residual else h

    def _control_grad(self, control, coeff, gcoeff):
        if self.normalization == "softmax":
            gcoeff = softmax_over_bases_grad(coeff, gcoeff)
        return control.backward(gcoeff.reshape(gcoeff.shape[0], -1))

    def backward(self, g):
        gx_res = g if self.residual else None
        gcoeff_sum = None
        for i in (2, 1, 0):
            if i < 2:
                g = self._act_grad(g, self._preacts)
            g, gcoeff = self.convs[i].backward(g)
            if self.shared:
                gcoeff_sum = gcoeff if gcoeff_sum is None else gcoeff_sum + gcoeff
            else:
                g = g + self._control_grad(self.controls[i], self._coeffs[i], gcoeff)
        if self.shared:
            g = g + self._control_grad(self.controls[0], self._coeffs[0], gcoeff_sum)
        return g + gx_res if gx_res is not None else g


class DynamicBlock(_BlockBase):
    """Control module plus three dynamic convolutions (whole-kernel mixing,
    one coefficient vector per sample)."""

    def __init__(self, store, name, config: ModelConfig, dtype):
        super().__init__(config)
        c, ks, e = config.channels, config.ks, config.num_bases
        self.n_bases = e
        self.normalization = config.coeff_normalization
        self.shared = config.shared_coeff
        if self.shared:
            self.controls = [ControlModule(store, f"{name}.control", c, e,
                                           config.control_bias, dtype)]
        else:
            self.controls = [ControlModule(store, f"{name}.conv{i}.control", c, e,
                                           config.control_bias, dtype) for i in range(3)]
        self.convs = [DynamicConv(store, f"{name}.conv{i}", c, c, ks, e, dtype)
                      for i in range(3)]
        self._preacts: list[np.ndarray] = []
        self._coeffs: list[np.ndarray] = []

    def _coeff_from(self, control, x, train):
        vec = control.forward(x, train)
        if self.normalization == "softmax":
            vec = softmax_over_bases(vec)
        return vec

    def forward(self, x, train=False):
        if train:
            self._preacts = []
            self._coeffs = []
        h = x
        coeff = self._coeff_from(self.controls[0], x, train) if self.shared else None
        if train and self.shared:
            self._coeffs.append(coeff)
        for i, conv in enumerate(self.convs):
            if not self.shared:
                coeff = self._coeff_from(self.controls[i], h, train)
                if train:
                    self._coeffs.append(coeff)
            h = conv.forward(h, coeff, train)
            if i < 2:
                h = self._act(h, self._preacts, train)
        return tensor.add(h, x) if self.residual else h

    def _control_grad(self, control, coeff, gcoeff):
        if self.normalization == "softmax":
            gcoeff = softmax_over_bases_grad(coeff, gcoeff)
        return control.backward(gcoeff)

    def backward(self, g):
        gx_res = g if self.residual else None
        gcoeff_sum = None
        for i in (2, 1, 0):
            if i < 2:
                g = self._act_grad(g, self._preacts)
            g, gcoeff = self.convs[i].backward(g)
            if self.shared:
                gcoeff_sum = gcoeff if gcoeff_sum is None else gcoeff_sum + gcoeff
            else:
                g = g + self._control_grad(self.controls[i], self._coeffs[i], gcoeff)
        if self.shared:
            g = g + self._control_grad(self.controls[0], self._coeffs[0], gcoeff_sum)
        return g + gx_res if gx_res is not None else g


_BLOCK_TYPES = {"plain": PlainBlock, "assembled": AssembledBlock, "dynamic": DynamicBlock}


# ---------------------------------------------------------------------------
# model


class AsConvSR:
    """The assembled network. Parameters live in ``self.params``; training
    requires exclusive ownership, evaluation-mode forwards are pure."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = ParamStore()
        self.init_notices: list[str] = []
        c = config.channels
        self.head = ConvLayer(self.params, "head", config.head_in_channels, c,
                              config.ks, config.bias_enabled, dtype)
        block_type = _BLOCK_TYPES[config.conv_mode]
        self.blocks = [block_type(self.params, f"block{i}", config, dtype)
                       for i in range(config.num_blocks)]
        self.tail = ConvLayer(self.params, "tail", c, config.tail_channels,
                              config.ks, config.bias_enabled, dtype)
        self._head_preact: np.ndarray | None = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """LR image (B, 3, H, W) -> SR image (B, 3, scale*H, scale*W).

        Training mode caches activations for backward and leaves the output
        unclamped; evaluation mode clamps to [0, 1].
        """
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"input must be (B, 3, H, W), got {x.shape}")
        if x.dtype != self.dtype:
            raise ShapeError(f"input dtype {x.dtype} != model dtype {self.dtype}")
        r = cfg.unshuffle_factor
        if x.shape[2] % r or x.shape[3] % r:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by "
                             f"unshuffle factor {r}")
        u = pixel_unshuffle(x, r)
        h = self.head.forward(u, train)
        if cfg.activation == "relu":
            if train:
                self._head_preact = h
            h = tensor.relu(h)
        for blk in self.blocks:
            h = blk.forward(h, train)
        t = self.tail.forward(h, train)
        y = pixel_shuffle(t, r)
        if cfg.global_skip:
            y = tensor.add(y, repeat_upscale(x, cfg.scale))
        out = pixel_shuffle(y, cfg.scale)
        if not train:
            out = tensor.clamp(out, 0.0, 1.0)
        return out

    def backward(self, grad_out: np.ndarray) -> None:
        """Accumulate parameter gradients for loss gradient ``grad_out`` at
        the (unclamped) output of the last train-mode forward."""
        cfg = self.config
        g = pixel_unshuffle(grad_out, cfg.scale)
        # the global skip add passes the gradient through to the main branch;
        # the repeat path ends at the network input and carries no parameters
        g = pixel_unshuffle(g, cfg.unshuffle_factor)
        g = self.tail.backward(g)
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        if cfg.activation == "relu":
            if self._head_preact is None:
                raise ShapeError("backward without train-mode forward")
            g = tensor.relu_grad(self._head_preact, g)
        self.head.backward(g)

    def param_count(self) -> int:
        return self.params.n_scalars()

    def zero_grads(self) -> None:
        self.params.zero_grads()


def build_model(config: ModelConfig, rng: tensor.Rng, dtype=np.float32) -> AsConvSR:
    """Construct the network and initialize its parameters per the config's
    init scheme. Initialization notices (layers where a residual-equivalent
    tap was undefined) end up in ``model.init_notices``.

    ``zero_tail`` is he_normal with the tail conv zeroed afterwards, so the
    model starts as the exact nearest-neighbor upscaler; the rng consumption
    is identical to he_normal.
    """
    model = AsConvSR(config, dtype)
    scheme = "he_normal" if config.init_scheme == "zero_tail" else config.init_scheme
    model.init_notices = init_params(model.params, scheme, rng)
    if config.init_scheme == "zero_tail":
        model.tail.weight.value[...] = 0
    return model


def param_count(model: AsConvSR) -> int:
    """Total learnable scalar count (weights, enabled biases, kernel banks,
    control parameters)."""
    return model.param_count()


# ---------------------------------------------------------------------------
# FLOPs estimation


@dataclass
class LayerCost:
    """Cost of one convolution layer at its running resolution.

    ``flops`` counts multiplies and adds separately per the no-bias formula
    (2 * c_in * k^2 - 1) * h * w * c_out; ``macs`` counts multiply-accumulates
    (c_in * k^2 * h * w * c_out); ``bias_flops`` is h * w * c_out when the
    layer carries a bias, else 0.
    """

    name: str
    c_in: int
    c_out: int
    k: int
    h_out: int
    w_out: int
    macs: int
    flops: int
    bias_flops: int


@dataclass
class OverheadCost:
    """Weight-level dynamic overhead (control module, kernel assembly)."""

    name: str
    flops: int
    macs: int


@dataclass
class FlopsReport:
    input_h: int
    input_w: int
    conv_mode: str
    layers: list
    overhead: list

    @property
    def conv_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def conv_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def bias_flops(self) -> int:
        return sum(l.bias_flops for l in self.layers)

    @property
    def overhead_flops(self) -> int:
        return sum(o.flops for o in self.overhead)

    @property
    def overhead_macs(self) -> int:
        return sum(o.macs for o in self.overhead)

    @property
    def total_flops(self) -> int:
        return self.conv_flops + self.bias_flops + self.overhead_flops

    @property
    def total_macs(self) -> int:
        return self.conv_macs + self.overhead_macs

    def to_dict(self) -> dict:
        return {
            "input_h": self.input_h,
            "input_w": self.input_w,
            "conv_mode": self.conv_mode,
            "layers": [dataclasses.asdict(l) for l in self.layers],
            "overhead": [dataclasses.asdict(o) for o in self.overhead],
            "conv_flops": self.conv_flops,
            "conv_macs": self.conv_macs,
            "bias_flops": self.bias_flops,
            "overhead_flops": self.overhead_flops,
            "overhead_macs": self.overhead_macs,
            "total_flops": self.total_flops,
            "total_macs": self.total_macs,
        }

    def to_text(self) -> str:
        lines = [f"FLOPs estimate for {self.input_w}x{self.input_h} input "
                 f"(per sample, conv_mode={self.conv_mode})",
                 f"{'layer':<18}{'cin':>5}{'cout':>6}{'k':>3}{'out hxw':>12}"
                 f"{'MACs':>16}{'FLOPs':>16}{'bias':>12}"]
        for l in self.layers:
            lines.append(f"{l.name:<18}{l.c_in:>5}{l.c_out:>6}{l.k:>3}"
                         f"{f'{l.h_out}x{l.w_out}':>12}{l.macs:>16,}{l.flops:>16,}"
                         f"{l.bias_flops:>12,}")
        if self.overhead:
            lines.append("dynamic overhead (weight level):")
            for o in self.overhead:
                lines.append(f"  {o.name:<24}{o.macs:>16,} MACs {o.flops:>16,} FLOPs")
        lines.append(f"conv totals: {self.conv_macs:,} MACs | {self.conv_flops:,} FLOPs "
                     f"(mult+add) | bias {self.bias_flops:,}")
        lines.append(f"grand totals: {self.total_macs:,} MACs | {self.total_flops:,} FLOPs")
        return "\n".join(lines)


def conv_layer_cost(name, c_in, c_out, k, h, w, has_bias) -> LayerCost:
    macs = c_in * k * k * h * w * c_out
    flops = (2 * c_in * k * k - 1) * h * w * c_out
    return LayerCost(name, c_in, c_out, k, h, w, macs, flops,
                     h * w * c_out if has_bias else 0)


def flops_estimate(config: ModelConfig, h: int, w: int) -> FlopsReport:
    """Per-layer and total cost of one forward pass on an H x W input, for a
    batch of one. Convolution costs follow the multiplications-plus-additions
    convention; MAC counts are reported alongside. Control-module and
    kernel-assembly costs appear separately as dynamic overhead; pixel
    (un)shuffles, repeats, and the skip addition move data without arithmetic
    and are not counted.
    """
    config.validate()
    r = config.unshuffle_factor
    if h % r or w % r:
        raise ShapeError(f"input {h}x{w} not divisible by unshuffle factor {r}")
    hf, wf = h // r, w // r
    c, e, ks = config.channels, config.num_bases, config.ks
    bias = config.bias_enabled
    layers = [conv_layer_cost("head", config.head_in_channels, c, ks, hf, wf, bias)]
    overhead = []
    n_controls = 1 if config.shared_coeff else 3
    for b in range(config.num_blocks):
        for i in range(3):
            layers.append(conv_layer_cost(f"block{b}.conv{i}", c, c, ks, hf, wf,
                                     bias and config.conv_mode == "plain"))
        if config.conv_mode != "plain":
            n_coeff = c * e if config.conv_mode == "assembled" else e
            for ctrl in range(n_controls):
                overhead.append(OverheadCost(f"block{b}.control{ctrl}.pool",
                                             flops=c * hf * wf, macs=0))
                ctrl_flops = (2 * c - 1) * n_coeff + (n_coeff if config.control_bias else 0)
                overhead.append(OverheadCost(f"block{b}.control{ctrl}.conv1x1",
                                             flops=ctrl_flops, macs=c * n_coeff))
            asm = c * c * ks * ks
            overhead.append(OverheadCost(f"block{b}.assembly(x3)",
                                         flops=3 * (2 * e - 1) * asm, macs=3 * e * asm))
    layers.append(conv_layer_cost("tail", c, config.tail_channels, ks, hf, wf, bias))
    return FlopsReport(h, w, config.conv_mode, layers, overhead)
