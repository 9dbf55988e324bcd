"""Image quality metrics on RGB, the challenge efficiency score, bicubic
resampling, and the wall-clock latency benchmark harness."""

from __future__ import annotations

import dataclasses
import json
import platform
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import ShapeError

PSNR_CAP_DB = 100.0  # reported for (near-)identical images so scores stay finite


def psnr_rgb(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over all pixels and channels, peak 1.
    Inputs are expected in [0, 1] (the caller clamps); identical inputs report
    the 100 dB cap."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * np.log10(mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(t ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of the trailing two axes with a 1-D
    window (applied along H then W)."""
    n = win.size
    h, w = x.shape[-2], x.shape[-1]
    out_h = np.zeros(x.shape[:-2] + (h - n + 1, w), dtype=np.float64)
    for t in range(n):
        out_h += win[t] * x[..., t:t + h - n + 1, :]
    out = np.zeros(x.shape[:-2] + (h - n + 1, w - n + 1), dtype=np.float64)
    for t in range(n):
        out += win[t] * out_h[..., :, t:t + w - n + 1]
    return out


def ssim_rgb(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03,
             window_size: int = 11, sigma: float = 1.5) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, dynamic range 1, computed per channel over all fully
    valid window positions and averaged over positions and channels."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.shape[-2] < window_size or a.shape[-1] < window_size:
        raise ShapeError(f"image {a.shape[-2]}x{a.shape[-1]} smaller than the "
                         f"{window_size}x{window_size} ssim window")
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    win = _gaussian_window(window_size, sigma)
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    var_x = _filter_valid(x * x, win) - mu_x * mu_x
    var_y = _filter_valid(y * y, win) - mu_y * mu_y
    cov = _filter_valid(x * y, win) - mu_x * mu_y
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def efficiency_score(psnr: float, psnr_bicubic: float, runtime_ms: float,
                     c: float = 0.1) -> float:
    """Challenge efficiency score: 2^(psnr - psnr_bicubic) * 2 /
    (c * sqrt(runtime_ms)). Strictly increasing in psnr, strictly decreasing
    in runtime."""
    if runtime_ms <= 0:
        raise ShapeError(f"runtime must be positive, got {runtime_ms}")
    return float(2.0 ** (psnr - psnr_bicubic) * 2.0 / (c * np.sqrt(runtime_ms)))


# ---------------------------------------------------------------------------
# bicubic resampling


CUBIC_A = -0.5  # Catmull-Rom-style kernel coefficient


def cubic_kernel(t: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """Cubic convolution kernel weight at signed distance t (support (-2, 2));
    the four taps at any sampling phase sum to 1."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    w = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    w[near] = (a + 2.0) * t[near] ** 3 - (a + 3.0) * t[near] ** 2 + 1.0
    w[far] = a * t[far] ** 3 - 5.0 * a * t[far] ** 2 + 8.0 * a * t[far] - 4.0 * a
    return w


def _resample_axis(x: np.ndarray, axis: int, out_n: int) -> np.ndarray:
    in_n = x.shape[axis]
    ratio = in_n / out_n
    # half-pixel center alignment: output center o+0.5 maps to (o+0.5)*ratio
    pos = (np.arange(out_n, dtype=np.float64) + 0.5) * ratio - 0.5
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    xm = np.moveaxis(x, axis, 0)
    out = np.zeros((out_n,) + xm.shape[1:], dtype=np.float64)
    shape_tail = (1,) * (xm.ndim - 1)
    for m in (-1, 0, 1, 2):  # 4 taps, edge-clamped
        idx = np.clip(base + m, 0, in_n - 1)
        wgt = cubic_kernel(frac - m).reshape((out_n,) + shape_tail)
        out += wgt * xm[idx]
    return np.moveaxis(out, 0, axis)


def bicubic_resize(img: np.ndarray, scale: float | None = None,
                   out_h: int | None = None, out_w: int | None = None) -> np.ndarray:
    """Separable cubic-convolution resampling (a = -0.5, half-pixel centers,
    edge-clamped) of (..., H, W). Target dims come from ``scale`` (rounded) or
    explicit ``out_h``/``out_w``. Returns float64; cast as needed."""
    if scale is not None:
        if scale <= 0:
            raise ShapeError(f"scale must be positive, got {scale}")
        out_h = int(round(img.shape[-2] * scale))
        out_w = int(round(img.shape[-1] * scale))
    if not out_h or not out_w or out_h < 1 or out_w < 1:
        raise ShapeError(f"bad target dims {out_h}x{out_w}")
    y = _resample_axis(img.astype(np.float64), img.ndim - 2, out_h)
    return _resample_axis(y, img.ndim - 1, out_w)


# ---------------------------------------------------------------------------
# latency benchmark


@dataclass
class BenchReport:
    """Latency statistics for one model / input-size pair, plus the static
    cost figures. Times are wall-clock per forward in milliseconds; the median
    over post-warmup reps is the headline number. Numbers are local to the
    reporting platform."""

    model_id: str
    input_shape: list
    warmup: int
    reps: int
    times_ms: list
    median_ms: float
    mean_ms: float
    min_ms: float
    flops: int
    macs: int
    params: int
    dtype: str
    threads: int
    platform: str
    seed: int
    psnr: float | None = None
    score: float | None = None

    CSV_FIELDS = ("model_id", "width", "height", "batch", "warmup", "reps",
                  "median_ms", "mean_ms", "min_ms", "flops", "macs", "params",
                  "dtype", "threads", "psnr", "score")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.CSV_FIELDS)

    def to_csv_row(self) -> str:
        b, _, h, w = self.input_shape
        vals = {"model_id": self.model_id, "width": w, "height": h, "batch": b,
                "warmup": self.warmup, "reps": self.reps,
                "median_ms": f"{self.median_ms:.4f}", "mean_ms": f"{self.mean_ms:.4f}",
                "min_ms": f"{self.min_ms:.4f}", "flops": self.flops, "macs": self.macs,
                "params": self.params, "dtype": self.dtype, "threads": self.threads,
                "psnr": "" if self.psnr is None else f"{self.psnr:.4f}",
                "score": "" if self.score is None else f"{self.score:.4f}"}
        return ",".join(str(vals[f]) for f in self.CSV_FIELDS)


def _limit_threads(threads: int):
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=threads)
    except ImportError:  # record the setting even when we cannot enforce it
        import contextlib
        return contextlib.nullcontext()


def runtime_bench(model, height: int, width: int, warmup: int = 1, reps: int = 5,
                  seed: int = 0, batch: int = 1, model_id: str = "",
                  threads: int = 1) -> BenchReport:
    """Time evaluation-mode forwards on a fixed random input: ``warmup``
    discarded passes, then ``reps`` timed passes. Execution is pinned to
    ``threads`` BLAS threads (default 1) and the setting is recorded."""
    from .model import flops_estimate

    if warmup < 1:
        raise ShapeError(f"warmup must be >= 1, got {warmup}")
    if reps < 3:
        raise ShapeError(f"reps must be >= 3, got {reps}")
    rng = tensor.Rng(seed)
    x = rng.uniform(0.0, 1.0, (batch, 3, height, width), dtype=model.dtype)
    times = []
    with _limit_threads(threads):
        for _ in range(warmup):
            model.forward(x, train=False)
        for _ in range(reps):
            t0 = time.perf_counter()
            model.forward(x, train=False)
            times.append((time.perf_counter() - t0) * 1000.0)
    report = flops_estimate(model.config, height, width)
    return BenchReport(
        model_id=model_id or model.config.conv_mode,
        input_shape=[batch, 3, height, width],
        warmup=warmup,
        reps=reps,
        times_ms=times,
        median_ms=float(statistics.median(times)),
        mean_ms=float(statistics.fmean(times)),
        min_ms=float(min(times)),
        flops=report.total_flops,
        macs=report.total_macs,
        params=model.param_count(),
        dtype=str(model.dtype),
        threads=threads,
        platform=f"{platform.platform()} / python {platform.python_version()} "
                 f"/ numpy {np.__version__}",
        seed=seed,
    )
