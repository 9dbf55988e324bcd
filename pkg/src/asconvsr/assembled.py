"""Assembled and dynamic convolution: a control module turns the input
feature map into mixing coefficients, the coefficients blend a bank of
candidate kernels, and the blended per-sample kernels are applied in a single
grouped convolution (groups = batch).

Two mixing granularities are provided:

* assembled: one coefficient vector per output channel; candidate kernels are
  single-output-channel slices of shape (E, C_in, ks, ks).
* dynamic: one coefficient vector per sample, shared by all output channels;
  candidate kernels are whole kernels of shape (E, C_out, C_in, ks, ks).

Dynamic mixing is exactly the coefficient-sharing special case of assembled
mixing, and the tests pin that equivalence bitwise.
"""

from __future__ import annotations

import numpy as np

from . import tensor
from .errors import ShapeError
from .layers import ParamStore


# ---------------------------------------------------------------------------
# control module


def softmax_over_bases(logits: np.ndarray) -> np.ndarray:
    """Softmax along the last (candidate-kernel) axis, max-shifted for
    stability."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_over_bases_grad(softmax_out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    dot = (grad_out * softmax_out).sum(axis=-1, keepdims=True)
    return softmax_out * (grad_out - dot)


def control_forward(f_in: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                    c_out: int, n_bases: int,
                    normalization: str = "none") -> np.ndarray:
    """Coefficients from features: global average pool, 1x1 conv to c_out *
    n_bases channels, reshape to (B, c_out, E), optional softmax over E.

    The 1x1 conv output channel j * n_bases + e maps to coefficient [j, e].
    """
    if normalization not in ("none", "softmax"):
        raise ShapeError(f"unknown coefficient normalization {normalization!r}")
    if weight.shape[0] != c_out * n_bases:
        raise ShapeError(f"control weight emits {weight.shape[0]} channels, "
                         f"expected c_out*E = {c_out * n_bases}")
    pooled = tensor.global_avg_pool(f_in)
    z = tensor.conv2d(pooled, weight, bias)
    coeff = z.reshape(z.shape[0], c_out, n_bases)
    if normalization == "softmax":
        coeff = softmax_over_bases(coeff)
    return coeff


def control_backward(f_in: np.ndarray, weight: np.ndarray, grad_coeff: np.ndarray,
                     with_bias: bool = True):
    """Backward through reshape, 1x1 conv, and pooling. grad_coeff must be the
    gradient at the pre-normalization logits (apply softmax_over_bases_grad
    first when softmax is enabled). Returns (grad_f_in, grad_weight,
    grad_bias)."""
    batch, _, h, w = f_in.shape
    pooled = tensor.global_avg_pool(f_in)
    gz = np.ascontiguousarray(grad_coeff).reshape(batch, -1, 1, 1)
    gpooled, gweight, gbias = tensor.conv2d_grad(pooled, weight, gz, with_bias=with_bias)
    gf_in = tensor.global_avg_pool_grad(gpooled, h, w)
    return gf_in, gweight, gbias


# ---------------------------------------------------------------------------
# kernel assembly


def assemble_kernels(coeff: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Blend per-channel candidate kernels: coeff (B, C_out, E) x basis
    (E, C_in, ks, ks) -> kernels (B, C_out, C_in, ks, ks).

    Implemented as the reshape-to-matmul form: coeff flattens to
    (B*C_out, E), basis to (E, C_in*ks*ks); the ordered matmul makes each
    kernel entry an ascending-E sum, which the per-channel loop oracle can
    match bitwise.
    """
    if coeff.ndim != 3:
        raise ShapeError(f"coeff must be (B, C_out, E), got {coeff.shape}")
    if basis.ndim != 4:
        raise ShapeError(f"basis must be (E, C_in, ks, ks), got {basis.shape}")
    b, c_out, e = coeff.shape
    e2, c_in, ks, ks2 = basis.shape
    if e != e2:
        raise ShapeError(f"coeff has E={e} but basis has E={e2}")
    k = tensor.matmul(coeff.reshape(b * c_out, e), basis.reshape(e, c_in * ks * ks2))
    return k.reshape(b, c_out, c_in, ks, ks2)


def assemble_kernels_backward(coeff: np.ndarray, basis: np.ndarray, grad_k: np.ndarray):
    """Backward of assemble_kernels; returns (grad_coeff, grad_basis)."""
    b, c_out, e = coeff.shape
    _, c_in, ks, _ = basis.shape
    gk = grad_k.reshape(b * c_out, c_in * ks * ks)
    bas = basis.reshape(e, c_in * ks * ks)
    grad_coeff = np.matmul(gk, bas.T).reshape(b, c_out, e)
    grad_basis = np.matmul(coeff.reshape(b * c_out, e).T, gk).reshape(basis.shape)
    return grad_coeff, grad_basis


def dynamic_assemble(coeff_vec: np.ndarray, bases: np.ndarray) -> np.ndarray:
    """Blend whole candidate kernels: coeff_vec (B, E) x bases
    (E, C_out, C_in, ks, ks) -> kernels (B, C_out, C_in, ks, ks), summed over
    ascending E (all output channels share one coefficient vector)."""
    if coeff_vec.ndim != 2:
        raise ShapeError(f"coeff_vec must be (B, E), got {coeff_vec.shape}")
    if bases.ndim != 5:
        raise ShapeError(f"bases must be (E, C_out, C_in, ks, ks), got {bases.shape}")
    b, e = coeff_vec.shape
    if e != bases.shape[0]:
        raise ShapeError(f"coeff_vec has E={e} but bases has E={bases.shape[0]}")
    out = np.zeros((b,) + bases.shape[1:], dtype=bases.dtype)
    tmp = np.empty_like(out)
    for i in range(e):
        np.multiply(coeff_vec[:, i][:, None, None, None, None], bases[i][None], out=tmp)
        np.add(out, tmp, out=out)
    return out


def dynamic_assemble_backward(coeff_vec: np.ndarray, bases: np.ndarray, grad_k: np.ndarray):
    """Backward of dynamic_assemble; returns (grad_coeff_vec, grad_bases)."""
    b, e = coeff_vec.shape
    gk = grad_k.reshape(b, -1)
    bas = bases.reshape(e, -1)
    grad_coeff_vec = np.matmul(gk, bas.T)
    grad_bases = np.matmul(coeff_vec.T, gk).reshape(bases.shape)
    return grad_coeff_vec, grad_bases


# ---------------------------------------------------------------------------
# per-sample convolution via groups = batch


def assembled_conv_forward(f_in: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Apply a distinct kernel to each sample: f_in (B, C_in, H, W) with
    kernels (B, C_out, C_in, ks, ks) -> (B, C_out, H, W).

    The batch dimension folds into channels and a single grouped conv2d with
    groups = B does the work; per sample this equals a plain conv2d with that
    sample's kernel.
    """
    if f_in.ndim != 4 or kernels.ndim != 5:
        raise ShapeError(f"bad ranks: f_in {f_in.shape}, kernels {kernels.shape}")
    b, c_in, h, w = f_in.shape
    bk, c_out, c_in2, ks, ks2 = kernels.shape
    if bk != b:
        raise ShapeError(f"kernels batch {bk} != input batch {b}")
    if c_in2 != c_in:
        raise ShapeError(f"kernels expect {c_in2} input channels, input has {c_in}")
    x1 = f_in.reshape(1, b * c_in, h, w)
    w1 = kernels.reshape(b * c_out, c_in, ks, ks2)
    y = tensor.conv2d(x1, w1, padding=ks // 2, groups=b)
    return y.reshape(b, c_out, h, w)


def assembled_conv_backward(f_in: np.ndarray, kernels: np.ndarray, grad_out: np.ndarray):
    """Backward of assembled_conv_forward; returns (grad_f_in, grad_kernels)."""
    b, c_in, h, w = f_in.shape
    _, c_out, _, ks, _ = kernels.shape
    x1 = f_in.reshape(1, b * c_in, h, w)
    w1 = kernels.reshape(b * c_out, c_in, ks, ks)
    g1 = grad_out.reshape(1, b * c_out, h, w)
    gx1, gw1, _ = tensor.conv2d_grad(x1, w1, g1, padding=ks // 2, groups=b, with_bias=False)
    return gx1.reshape(b, c_in, h, w), gw1.reshape(kernels.shape)


def assembled_backward(f_in: np.ndarray, kernels: np.ndarray, coeff: np.ndarray,
                       basis: np.ndarray, control_weight: np.ndarray,
                       grad_out: np.ndarray, normalization: str = "none",
                       control_has_bias: bool = True):
    """Full chain rule through one assembled convolution and its control
    module: grouped conv -> kernel assembly -> (softmax) -> 1x1 conv -> pool.

    ``coeff`` is the coefficient tensor actually used in the assembly (post
    softmax when normalization='softmax'). Returns (grad_f_in, grad_basis,
    grad_control_weight, grad_control_bias); grad_f_in includes both the
    convolution path and the control path.
    """
    gx_main, gk = assembled_conv_backward(f_in, kernels, grad_out)
    gcoeff, gbasis = assemble_kernels_backward(coeff, basis, gk)
    if normalization == "softmax":
        gcoeff = softmax_over_bases_grad(coeff, gcoeff)
    gx_ctrl, gw_ctrl, gb_ctrl = control_backward(f_in, control_weight, gcoeff,
                                                 with_bias=control_has_bias)
    return gx_main + gx_ctrl, gbasis, gw_ctrl, gb_ctrl


# ---------------------------------------------------------------------------
# store-bound modules used by the model


class ControlModule:
    """Pool + 1x1 conv emitting a flat coefficient vector per sample."""

    def __init__(self, store: ParamStore, name: str, c_in: int, n_out: int,
                 bias_enabled: bool = True, dtype=np.float32):
        self.store = store
        self.name = name
        self.c_in = c_in
        self.n_out = n_out
        self.weight = store.register(f"{name}.weight",
                                     np.zeros((n_out, c_in, 1, 1), dtype=dtype),
                                     kind="control_weight")
        self.bias = None
        if bias_enabled:
            self.bias = store.register(f"{name}.bias", np.zeros(n_out, dtype=dtype),
                                       kind="bias")
        self._cached_input: np.ndarray | None = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if train:
            self._cached_input = x
        pooled = tensor.global_avg_pool(x)
        b = self.bias.value if self.bias is not None else None
        z = tensor.conv2d(pooled, self.weight.value, b)
        return z.reshape(z.shape[0], self.n_out)

    def backward(self, grad_flat: np.ndarray) -> np.ndarray:
        if self._cached_input is None:
            raise ShapeError(f"{self.name}: backward without train-mode forward")
        gx, gw, gb = control_backward(self._cached_input, self.weight.value, grad_flat,
                                      with_bias=self.bias is not None)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class AssembledConv:
    """One assembled convolution: per-output-channel mixing of an (E, C_in,
    ks, ks) kernel bank, applied per sample."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 ks: int, n_bases: int, dtype=np.float32):
        self.name = name
        self.c_out = c_out
        self.n_bases = n_bases
        self.basis = store.register(f"{name}.basis",
                                    np.zeros((n_bases, c_in, ks, ks), dtype=dtype),
                                    kind="basis")
        self._cache = None

    def forward(self, x: np.ndarray, coeff: np.ndarray, train: bool = False) -> np.ndarray:
        kernels = assemble_kernels(coeff, self.basis.value)
        if train:
            self._cache = (x, kernels, coeff)
        return assembled_conv_forward(x, kernels)

    def backward(self, grad_out: np.ndarray):
        if self._cache is None:
            raise ShapeError(f"{self.name}: backward without train-mode forward")
        x, kernels, coeff = self._cache
        gx, gk = assembled_conv_backward(x, kernels, grad_out)
        gcoeff, gbasis = assemble_kernels_backward(coeff, self.basis.value, gk)
        self.basis.grad += gbasis
        return gx, gcoeff


class DynamicConv:
    """One dynamic convolution: whole-kernel mixing of an (E, C_out, C_in,
    ks, ks) bank with a per-sample coefficient vector."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 ks: int, n_bases: int, dtype=np.float32):
        self.name = name
        self.c_out = c_out
        self.n_bases = n_bases
        self.bases = store.register(f"{name}.bases",
                                    np.zeros((n_bases, c_out, c_in, ks, ks), dtype=dtype),
                                    kind="dynamic_bases")
        self._cache = None

    def forward(self, x: np.ndarray, coeff_vec: np.ndarray, train: bool = False) -> np.ndarray:
        kernels = dynamic_assemble(coeff_vec, self.bases.value)
        if train:
            self._cache = (x, kernels, coeff_vec)
        return assembled_conv_forward(x, kernels)

    def backward(self, grad_out: np.ndarray):
        if self._cache is None:
            raise ShapeError(f"{self.name}: backward without train-mode forward")
        x, kernels, coeff_vec = self._cache
        gx, gk = assembled_conv_backward(x, kernels, grad_out)
        gcoeff_vec, gbases = dynamic_assemble_backward(coeff_vec, self.bases.value, gk)
        self.bases.grad += gbases
        return gx, gcoeff_vec
