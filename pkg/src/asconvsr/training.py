"""Training pipeline: Charbonnier loss, Adam with a halving learning-rate
schedule, aligned patch sampling with dihedral augmentation, the training
loop, and checkpoint persistence.

Checkpoint format (version 1, little-endian throughout):

    magic          4 bytes  b"ASCV"
    version        uint32
    header_len     uint32
    header         UTF-8 JSON: {"config": {model config fields},
                    "iteration": int, "rng_state": generator state or null,
                    "has_adam": bool, "adam_t": int}
    n_params       uint32
    per parameter, in registration order:
        name_len   uint16
        name       UTF-8
        rank       uint8
        dims       uint32 * rank
        values     float32 * prod(dims), row-major
    if has_adam, per parameter in the same order:
        m values   float32 * prod(dims)
        v values   float32 * prod(dims)

Parameter values round-trip bit-exactly; saving, loading, and saving again
produces byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import CheckpointError, ConfigError, DataError, NumericError, ShapeError
from .layers import ParamStore
from .metrics import psnr_rgb
from .model import AsConvSR, ModelConfig

CHECKPOINT_MAGIC = b"ASCV"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization hyperparameters. Defaults are desk scale (small batches,
    thousands of iterations); ``TrainConfig.full_scale()`` gives the
    full-scale schedule (batch 32, 1e6 iterations, halving every 2e5)."""

    lr0: float = 5e-4
    halve_every: int = 2_000
    total_iters: int = 5_000
    batch_size: int = 8
    lr_patch: int = 128
    hr_patch: int = 256
    beta1: float = 0.9
    beta2: float = 0.9999  # the conventional 0.999 is a config away
    adam_eps: float = 1e-8
    charbonnier_eps: float = 1e-3
    seed: int = 0
    augment: bool = True
    eval_every: int = 250

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=32, total_iters=1_000_000, halve_every=200_000)
        base.update(overrides)
        return cls(**base)

    def validate(self, scale: int = 2) -> None:
        if self.hr_patch != scale * self.lr_patch:
            raise ConfigError(f"hr_patch {self.hr_patch} != scale {scale} * "
                              f"lr_patch {self.lr_patch}")
        if self.lr0 < 0 or self.halve_every < 1 or self.total_iters < 0:
            raise ConfigError("lr0 must be >= 0, halve_every >= 1, total_iters >= 0")
        if self.batch_size < 1 or self.lr_patch < 1:
            raise ConfigError("batch_size and lr_patch must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.adam_eps <= 0 or self.charbonnier_eps <= 0:
            raise ConfigError("adam_eps and charbonnier_eps must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss and optimizer


def charbonnier_loss(pred: np.ndarray, target: np.ndarray, eps: float = 1e-3):
    """Smooth L1 surrogate: mean of sqrt((pred - target)^2 + eps^2).

    Returns (loss, grad_wrt_pred); the gradient magnitude is bounded by
    1 / element_count.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    if eps <= 0:
        raise ConfigError(f"charbonnier eps must be positive, got {eps}")
    d = pred - target
    root = np.sqrt(d * d + pred.dtype.type(eps) ** 2)
    loss = float(root.mean(dtype=np.float64))
    grad = d / root / pred.dtype.type(pred.size)
    return loss, grad


class AdamState:
    """First/second moment accumulators mirroring a ParamStore, plus the step
    counter."""

    def __init__(self, store: ParamStore):
        self.m = {name: np.zeros_like(p.value) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in store.items()}
        self.t = 0


def adam_step(store: ParamStore, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.9999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update from the accumulated gradients; the
    gradients are zeroed afterwards. A step over an empty store is a no-op."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in store.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.grad[...] = 0


def lr_at(iteration: int, config: TrainConfig) -> float:
    """lr0 halved once per ``halve_every`` iterations (floor)."""
    if iteration < 0:
        raise ConfigError(f"iteration must be >= 0, got {iteration}")
    return config.lr0 * 0.5 ** (iteration // config.halve_every)


# ---------------------------------------------------------------------------
# patch sampling and augmentation


def sample_patch_pair(pairs, rng: tensor.Rng, lr_patch: int, scale: int = 2):
    """Crop an aligned (lr, hr) patch pair from a random item of ``pairs``
    (a sequence of CHW array pairs). The LR crop at (x, y) pairs with the HR
    crop at (scale*x, scale*y) with scale-times the extent. Draw order: pair
    index, then y, then x."""
    idx = rng.integers(0, len(pairs))
    lr, hr = pairs[idx]
    _, h, w = lr.shape
    if h < lr_patch or w < lr_patch:
        raise DataError(f"pair {idx}: LR {w}x{h} smaller than patch size {lr_patch}")
    if hr.shape[1] != scale * h or hr.shape[2] != scale * w:
        raise DataError(f"pair {idx}: HR dims {hr.shape[1:]} != {scale}x LR dims {(h, w)}")
    y = rng.integers(0, h - lr_patch + 1)
    x = rng.integers(0, w - lr_patch + 1)
    p = lr_patch
    lr_crop = np.ascontiguousarray(lr[:, y:y + p, x:x + p])
    hr_crop = np.ascontiguousarray(hr[:, scale * y:scale * (y + p), scale * x:scale * (x + p)])
    return lr_crop, hr_crop


def dihedral_transform(img: np.ndarray, t: int) -> np.ndarray:
    """Apply dihedral transform t in 0..7 to a CHW image: t % 4 quarter-turn
    rotations, then a horizontal flip when t >= 4. t == 0 is the identity."""
    if not 0 <= t <= 7:
        raise ShapeError(f"dihedral transform index must be 0..7, got {t}")
    rot = t % 4
    if rot % 2 == 1 and img.shape[1] != img.shape[2]:
        raise ShapeError(f"rotation needs a square patch, got {img.shape[1]}x{img.shape[2]}")
    out = np.rot90(img, rot, axes=(1, 2)) if rot else img
    if t >= 4:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_pair(lr: np.ndarray, hr: np.ndarray, rng: tensor.Rng):
    """One of the 8 dihedral transforms, drawn uniformly, applied identically
    to both patches."""
    t = rng.integers(0, 8)
    return dihedral_transform(lr, t), dihedral_transform(hr, t)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainRecord:
    iteration: int
    lr: float
    loss: float
    psnr: float | None = None

    def csv_row(self) -> str:
        p = "" if self.psnr is None else f"{self.psnr:.4f}"
        return f"{self.iteration},{self.lr:.8g},{self.loss:.8g},{p}"


LOG_HEADER = "iter,lr,loss,psnr_eval"


class Trainer:
    """Single-threaded training loop owning the model and optimizer state.

    ``data`` is any sequence of (lr, hr) CHW float pairs in [0, 1];
    per iteration it samples a batch of aligned patches, runs
    forward/loss/backward, and applies one Adam step at the scheduled rate.
    Deterministic for a fixed seed.
    """

    def __init__(self, model: AsConvSR, data, config: TrainConfig,
                 log_path=None):
        config.validate(model.config.scale)
        if len(data) == 0:
            raise DataError("training data is empty")
        self.model = model
        self.data = data
        self.config = config
        self.rng = tensor.Rng(config.seed, stream=1)  # stream 0 is weight init
        self.adam = AdamState(model.params)
        self.iteration = 0
        self.records: list[TrainRecord] = []
        self._log_path = log_path
        self._log_file = None

    def _log(self, record: TrainRecord) -> None:
        self.records.append(record)
        if self._log_path is not None:
            if self._log_file is None:
                self._log_file = open(self._log_path, "w")
                self._log_file.write(LOG_HEADER + "\n")
            self._log_file.write(record.csv_row() + "\n")
            self._log_file.flush()

    def _sample_batch(self):
        cfg = self.config
        scale = self.model.config.scale
        lrs, hrs = [], []
        for _ in range(cfg.batch_size):
            lr, hr = sample_patch_pair(self.data, self.rng, cfg.lr_patch, scale)
            if cfg.augment:
                lr, hr = augment_pair(lr, hr, self.rng)
            lrs.append(lr)
            hrs.append(hr)
        return (np.stack(lrs).astype(self.model.dtype, copy=False),
                np.stack(hrs).astype(self.model.dtype, copy=False))

    def step(self) -> TrainRecord:
        cfg = self.config
        rate = lr_at(self.iteration, cfg)
        try:
            lr_batch, hr_batch = self._sample_batch()
            out = self.model.forward(lr_batch, train=True)
            loss, grad = charbonnier_loss(out, hr_batch, cfg.charbonnier_eps)
            if not np.isfinite(loss):
                raise NumericError("loss is not finite")
            self.model.backward(grad)
            adam_step(self.model.params, self.adam, rate, cfg.beta1, cfg.beta2,
                      cfg.adam_eps)
        except NumericError as exc:
            max_param = max((float(np.abs(p.value).max())
                             for _, p in self.model.params.items()), default=0.0)
            raise NumericError(
                f"training aborted at iteration {self.iteration}: {exc} "
                f"(lr={rate:.3g}, max|param|={max_param:.3g})") from exc
        self.iteration += 1
        return TrainRecord(self.iteration, rate, loss)

    def evaluate(self, pairs=None) -> float:
        """Mean PSNR of clamped eval-mode outputs against HR over ``pairs``
        (defaults to the training data). Draws nothing from the RNG."""
        pairs = self.data if pairs is None else pairs
        vals = []
        for lr, hr in pairs:
            x = np.ascontiguousarray(lr[None]).astype(self.model.dtype, copy=False)
            sr = self.model.forward(x, train=False)
            vals.append(psnr_rgb(sr[0], np.clip(hr, 0.0, 1.0).astype(self.model.dtype)))
        return float(np.mean(vals))

    def run(self, n_iters: int | None = None) -> list[TrainRecord]:
        """Train for ``n_iters`` iterations (default: up to total_iters);
        resumable. Returns the records produced by this call."""
        cfg = self.config
        if n_iters is None:
            n_iters = max(0, cfg.total_iters - self.iteration)
        produced = []
        try:
            for _ in range(n_iters):
                rec = self.step()
                if cfg.eval_every and self.iteration % cfg.eval_every == 0:
                    rec.psnr = self.evaluate()
                self._log(rec)
                produced.append(rec)
        finally:
            if self._log_file is not None:
                self._log_file.flush()
        return produced

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    param_values: dict
    iteration: int = 0
    rng_state: dict | None = None
    adam_m: dict | None = None
    adam_v: dict | None = None
    adam_t: int = 0

    def apply_to(self, model: AsConvSR) -> None:
        """Copy stored parameters into ``model``; every name must match and
        every shape must agree."""
        store_names = set(model.params.names())
        file_names = set(self.param_values)
        if store_names != file_names:
            missing = sorted(store_names - file_names)
            extra = sorted(file_names - store_names)
            raise CheckpointError(f"parameter names do not match model config: "
                                  f"missing {missing}, unexpected {extra}")
        for name, value in self.param_values.items():
            p = model.params[name]
            if p.value.shape != value.shape:
                raise CheckpointError(f"parameter {name!r}: checkpoint shape "
                                      f"{value.shape} != model shape {p.value.shape}")
            p.value[...] = value

    def build_model(self) -> AsConvSR:
        model = AsConvSR(self.config, dtype=np.float32)
        self.apply_to(model)
        return model

    def restore_adam(self, store: ParamStore) -> AdamState:
        state = AdamState(store)
        if self.adam_m is None:
            raise CheckpointError("checkpoint carries no optimizer state")
        for name in state.m:
            state.m[name][...] = self.adam_m[name]
            state.v[name][...] = self.adam_v[name]
        state.t = self.adam_t
        return state


def checkpoint_save(path, model: AsConvSR, adam: AdamState | None = None,
                    iteration: int = 0, rng: tensor.Rng | None = None) -> None:
    """Serialize model parameters (and optionally optimizer state) to
    ``path`` in the version-1 format described in the module docstring."""
    if model.dtype != np.dtype(np.float32):
        raise CheckpointError(f"checkpoint format stores float32; model is {model.dtype}")
    header = {
        "config": model.config.to_dict(),
        "iteration": int(iteration),
        "rng_state": rng.state if rng is not None else None,
        "has_adam": adam is not None,
        "adam_t": adam.t if adam is not None else 0,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = model.params.names()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            value = model.params[name].value
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
        if adam is not None:
            for name in names:
                f.write(np.ascontiguousarray(adam.m[name], dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(adam.v[name], dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes for {what}, "
                              f"got {len(data)}")
    return data


def checkpoint_load(path) -> Checkpoint:
    """Parse a checkpoint file; structural problems raise CheckpointError."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        try:
            config = ModelConfig.from_dict(header["config"])
        except (KeyError, TypeError, ConfigError) as exc:
            raise CheckpointError(f"{path}: bad config block: {exc}") from exc
        (n_params,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
        values: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            if name in values:
                raise CheckpointError(f"{path}: duplicate parameter name {name!r}")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            if not 1 <= rank <= 8:
                raise CheckpointError(f"{path}: corrupt rank {rank} for {name!r}")
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            n = int(np.prod(dims))
            if n <= 0 or n > 1 << 31:
                raise CheckpointError(f"{path}: corrupt dims {dims} for {name!r}")
            raw = _read_exact(f, 4 * n, f"values of {name!r}")
            values[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        adam_m = adam_v = None
        if header.get("has_adam"):
            adam_m, adam_v = {}, {}
            for name, value in values.items():
                raw = _read_exact(f, 4 * value.size, f"adam m of {name!r}")
                adam_m[name] = np.frombuffer(raw, dtype="<f4").reshape(value.shape).copy()
                raw = _read_exact(f, 4 * value.size, f"adam v of {name!r}")
                adam_v[name] = np.frombuffer(raw, dtype="<f4").reshape(value.shape).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return Checkpoint(config=config, param_values=values,
                      iteration=int(header.get("iteration", 0)),
                      rng_state=header.get("rng_state"),
                      adam_m=adam_m, adam_v=adam_v,
                      adam_t=int(header.get("adam_t", 0)))
