"""Image container and disk I/O.

Images live on disk as 8-bit PNG/JPEG in the unit range [0, 1]. Networks
consume NCHW float tensors in the symmetric range [-1, 1].
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

UNIT = "unit"
SYMMETRIC = "symmetric"
_RANGES = {UNIT: (0.0, 1.0), SYMMETRIC: (-1.0, 1.0)}
MIN_SIDE = 16


class ImageDecodeError(IOError):
    """Raised when an image file is missing or cannot be decoded."""


@dataclass
class ImageTensor:
    """H x W x 3 float array tagged with its value range.

    Values are clamped into the declared range on construction.
    """

    data: np.ndarray
    value_range: str = UNIT

    def __post_init__(self):
        if self.value_range not in _RANGES:
            raise ValueError(f"unknown value_range {self.value_range!r}")
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"expected HxWx3 array, got shape {data.shape}")
        if min(data.shape[:2]) < MIN_SIDE:
            raise ValueError(f"image sides must be >= {MIN_SIDE}, got {data.shape[:2]}")
        lo, hi = _RANGES[self.value_range]
        self.data = np.clip(data, lo, hi)

    @property
    def shape(self):
        return self.data.shape

    def to_unit(self) -> "ImageTensor":
        if self.value_range == UNIT:
            return self
        return ImageTensor((self.data + 1.0) / 2.0, UNIT)

    def to_symmetric(self) -> "ImageTensor":
        if self.value_range == SYMMETRIC:
            return self
        return ImageTensor(self.data * 2.0 - 1.0, SYMMETRIC)

    def to_torch(self) -> torch.Tensor:
        """Return a (1, 3, H, W) tensor in the symmetric range."""
        arr = self.to_symmetric().data
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]

    @classmethod
    def from_torch(cls, t: torch.Tensor) -> "ImageTensor":
        """Inverse of :meth:`to_torch`; accepts (3, H, W) or (1, 3, H, W)."""
        t = t.detach().cpu()
        if t.ndim == 4:
            if t.shape[0] != 1:
                raise ValueError("from_torch takes a single image")
            t = t[0]
        return cls(t.numpy().transpose(1, 2, 0), SYMMETRIC)


def to_batch(images) -> torch.Tensor:
    """Stack ImageTensors into an (N, 3, H, W) symmetric-range tensor."""
    return torch.cat([im.to_torch() for im in images], dim=0)


def from_batch(batch: torch.Tensor) -> list[ImageTensor]:
    return [ImageTensor.from_torch(b) for b in batch]


def unit_to_symmetric(x):
    return x * 2.0 - 1.0


def symmetric_to_unit(x):
    return (x + 1.0) / 2.0


def to_uint8(img: ImageTensor) -> np.ndarray:
    return np.round(img.to_unit().data * 255.0).astype(np.uint8)


def save_image(img: ImageTensor, path, quality: int = 95) -> Path:
    """Write ``img`` as PNG (lossless) or JPEG, chosen by file suffix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil = Image.fromarray(to_uint8(img), mode="RGB")
    if path.suffix.lower() in (".jpg", ".jpeg"):
        pil.save(path, format="JPEG", quality=quality)
    else:
        pil.save(path, format="PNG")
    return path


def decode_image(raw: bytes, name: str = "<bytes>") -> ImageTensor:
    try:
        with Image.open(io.BytesIO(raw)) as pil:
            pil.load()
            arr = np.asarray(pil.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode {name}: {exc}") from exc
    return ImageTensor(arr, UNIT)


def load_image(path) -> ImageTensor:
    """Load a PNG or JPEG file as a unit-range ImageTensor."""
    path = Path(path)
    if not path.is_file():
        raise ImageDecodeError(f"no such image file: {path}")
    return decode_image(path.read_bytes(), str(path))
