"""PNG image IO and dataset directory scanning.

A dataset root contains an ``HR/`` folder of PNGs and optionally an ``LR/``
folder with matching filenames at exactly half the resolution. Missing LR
images are synthesized once by bicubic 0.5x downscaling and cached under
``LR_gen/`` (8-bit quantized, like any other PNG input).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .metrics import bicubic_resize

_SUPPORTED_MODES = {"RGB", "RGBA", "L", "LA"}


def png_read(path) -> np.ndarray:
    """Read an 8-bit PNG as (1, 3, H, W) float32 in [0, 1] (values v / 255).

    RGBA/LA alpha is dropped with a warning; grayscale expands to three
    identical channels with a warning; 16-bit or palette files are rejected.
    """
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except Exception as exc:
        raise DataError(f"{path}: cannot read PNG: {exc}") from exc
    if img.format != "PNG":
        raise DataError(f"{path}: not a PNG file (format {img.format})")
    if img.mode not in _SUPPORTED_MODES:
        raise DataError(f"{path}: unsupported bit depth or color type "
                        f"(mode {img.mode}); use 8-bit RGB, RGBA, or grayscale")
    if img.mode in ("RGBA", "LA"):
        warnings.warn(f"{path}: dropping alpha channel")
        img = img.convert("RGB" if img.mode == "RGBA" else "L")
    if img.mode == "L":
        warnings.warn(f"{path}: grayscale expanded to 3 identical channels")
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))[None]


def png_write(x: np.ndarray, path) -> None:
    """Write (1, 3, H, W) or (3, H, W) values in [0, 1] as an 8-bit RGB PNG;
    quantization is round(v * 255) after clamping."""
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise DataError(f"png_write expects a single image, got batch {x.shape[0]}")
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise DataError(f"png_write expects (3, H, W), got {x.shape}")
    q = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(Path(path), format="PNG")


def image_size(path) -> tuple:
    """(width, height) from the header, without decoding pixel data."""
    with Image.open(path) as img:
        return img.size


# ---------------------------------------------------------------------------
# dataset scanning


@dataclass
class PairEntry:
    stem: str
    hr_path: Path
    lr_path: Path
    hr_size: tuple  # (width, height)
    lr_size: tuple


@dataclass
class DatasetIndex:
    root: Path
    entries: list

    def __len__(self) -> int:
        return len(self.entries)


def dataset_scan(root) -> DatasetIndex:
    """Index a dataset directory: pairs are matched by filename stem and
    sorted by stem; each HR image must be exactly 2x its LR partner in both
    dimensions. HR images without an LR partner get one synthesized (HR dims
    must be even) and cached under LR_gen/."""
    root = Path(root)
    hr_dir = root / "HR"
    if not hr_dir.is_dir():
        raise DataError(f"{root}: missing required HR/ subfolder")
    hr_files = sorted(hr_dir.glob("*.png"), key=lambda p: p.stem)
    if not hr_files:
        raise DataError(f"{hr_dir}: no PNG images found")
    lr_dir = root / "LR"
    gen_dir = root / "LR_gen"
    entries = []
    for hr_path in hr_files:
        stem = hr_path.stem
        lr_path = lr_dir / f"{stem}.png"
        if not lr_path.is_file():
            lr_path = gen_dir / f"{stem}.png"
            if not lr_path.is_file():
                _synthesize_lr(hr_path, lr_path)
        hw, hh = image_size(hr_path)
        lw, lh = image_size(lr_path)
        if hw != 2 * lw or hh != 2 * lh:
            raise DataError(f"{hr_path.name}: HR {hw}x{hh} is not exactly 2x "
                            f"LR {lw}x{lh} ({lr_path})")
        entries.append(PairEntry(stem, hr_path, lr_path, (hw, hh), (lw, lh)))
    return DatasetIndex(root, entries)


def _synthesize_lr(hr_path: Path, lr_path: Path) -> None:
    hr = png_read(hr_path)[0]
    _, h, w = hr.shape
    if h % 2 or w % 2:
        raise DataError(f"{hr_path.name}: HR dims {w}x{h} must be even to "
                        "synthesize a half-resolution LR")
    lr = np.clip(bicubic_resize(hr, 0.5), 0.0, 1.0)
    lr_path.parent.mkdir(parents=True, exist_ok=True)
    png_write(lr.astype(np.float32), lr_path)


class PairDataset:
    """Sequence view over a DatasetIndex yielding (lr, hr) CHW float32 arrays
    in [0, 1], with a small decoded-image cache."""

    def __init__(self, index: DatasetIndex, cache_size: int = 32):
        self.index = index
        self._cache: dict[int, tuple] = {}
        self._cache_size = cache_size

    def __len__(self) -> int:
        return len(self.index.entries)

    def __getitem__(self, i: int):
        if i in self._cache:
            return self._cache[i]
        e = self.index.entries[i]
        pair = (png_read(e.lr_path)[0], png_read(e.hr_path)[0])
        if len(self._cache) >= self._cache_size:
            self._cache.pop(next(iter(self._cache)))
        self._cache[i] = pair
        return pair
