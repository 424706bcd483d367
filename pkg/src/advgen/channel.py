"""Digital stand-in for print/replay followed by camera recapture.

The channel is deliberately non-differentiable: it runs in numpy/PIL on
unit-range H x W x 3 arrays. Stages run in causal order

    color shift -> blur -> halftone / screen grid -> recapture warp
    -> sensor noise -> JPEG

and the output is clamped to [0, 1] after every stage.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .image import ImageTensor, UNIT
from .labels import LIVE_INDEX

_PRINT_MATRIX = ((0.80, 0.10, 0.02), (0.06, 0.78, 0.06), (0.02, 0.12, 0.66))
_PRINT_BIAS = (0.09, 0.07, 0.05)
_REPLAY_MATRIX = ((0.92, 0.02, 0.00), (0.00, 0.98, 0.04), (0.04, 0.06, 1.10))
_REPLAY_BIAS = (-0.03, 0.00, 0.05)
_MOIRE_ANGLE = np.deg2rad(7.0)

_BAYER8 = np.array(
    [
        [0, 32, 8, 40, 2, 34, 10, 42],
        [48, 16, 56, 24, 50, 18, 58, 26],
        [12, 44, 4, 36, 14, 46, 6, 38],
        [60, 28, 52, 20, 62, 30, 54, 22],
        [3, 35, 11, 43, 1, 33, 9, 41],
        [51, 19, 59, 27, 49, 17, 57, 25],
        [15, 47, 7, 39, 13, 45, 5, 37],
        [63, 31, 55, 23, 61, 29, 53, 21],
    ],
    dtype=np.float32,
) / 64.0


@dataclass
class ChannelConfig:
    medium: str = "print"
    color_enabled: bool = True
    color_strength: float = 1.0
    blur_enabled: bool = True
    blur_sigma: float = 1.0
    halftone_enabled: bool = True
    halftone_amplitude: float = 0.12
    halftone_period: float = 1.5
    warp_enabled: bool = True
    warp_range: float = 0.015
    noise_enabled: bool = True
    noise_sigma: float = 0.02
    jpeg_enabled: bool = True
    jpeg_quality: int = 85
    seed: int = 0

    def __post_init__(self):
        if self.medium not in ("print", "replay"):
            raise ValueError(f"medium must be print or replay, got {self.medium!r}")
        for name in ("color_strength", "blur_sigma", "halftone_amplitude", "warp_range", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.halftone_period <= 0:
            raise ValueError("halftone_period must be > 0")
        if not 1 <= int(self.jpeg_quality) <= 100:
            raise ValueError("jpeg_quality must lie in [1, 100]")

    @classmethod
    def identity(cls, medium: str = "print") -> "ChannelConfig":
        return cls(
            medium=medium,
            color_enabled=False,
            blur_enabled=False,
            halftone_enabled=False,
            warp_enabled=False,
            noise_enabled=False,
            jpeg_enabled=False,
        )

    @classmethod
    def default(cls, medium: str = "print", seed: int = 0) -> "ChannelConfig":
        if medium == "replay":
            # only the halftone stage (and the color matrix) distinguishes the media
            return cls(medium="replay", halftone_amplitude=0.10, halftone_period=3.2, seed=seed)
        return cls(medium="print", seed=seed)

    @property
    def is_identity(self) -> bool:
        return not any(getattr(self, f.name) for f in fields(self) if f.name.endswith("_enabled"))

    def with_medium(self, medium: str) -> "ChannelConfig":
        d = asdict(self)
        d["medium"] = medium
        return ChannelConfig(**d)

    def color_transform(self):
        m, b = (_PRINT_MATRIX, _PRINT_BIAS) if self.medium == "print" else (_REPLAY_MATRIX, _REPLAY_BIAS)
        s = self.color_strength
        return np.eye(3) + s * (np.array(m) - np.eye(3)), s * np.array(b)


def _color(x, cfg):
    m, b = cfg.color_transform()
    return x @ m.T.astype(np.float32) + b.astype(np.float32)


def _blur(x, sigma):
    return ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="reflect")


def _ordered_dither(x, amplitude, period):
    h, w, _ = x.shape
    ys = (np.arange(h) / period).astype(int) % 8
    xs = (np.arange(w) / period).astype(int) % 8
    pattern = _BAYER8[np.ix_(ys, xs)] - 0.5
    return x + amplitude * pattern[..., None]


def _screen_grid(x, amplitude, period):
    h, w, _ = x.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    u = xx * np.cos(_MOIRE_ANGLE) + yy * np.sin(_MOIRE_ANGLE)
    v = -xx * np.sin(_MOIRE_ANGLE) + yy * np.cos(_MOIRE_ANGLE)
    out = np.empty_like(x)
    for ch in range(3):  # subpixel phase offsets give colored fringes
        phase = 2 * np.pi * ch / 3
        grid = np.sin(2 * np.pi * u / period + phase) + np.sin(2 * np.pi * v / period + phase)
        out[..., ch] = x[..., ch] + amplitude * 0.5 * grid
    return out


def _recapture_warp(x, jitter, rng):
    from .transforms import Transform, TransformSpec, apply_transform

    offsets = rng.uniform(-jitter, jitter, size=8)
    t = Transform((TransformSpec("perspective", tuple(offsets)),))
    batch = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None]
    with torch.no_grad():
        out = apply_transform(t, batch * 2 - 1)
    return ((out[0].numpy() + 1) / 2).transpose(1, 2, 0)


def _jpeg(x, quality):
    buf = io.BytesIO()
    Image.fromarray(np.round(x * 255).astype(np.uint8)).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def apply_channel(x, cfg: ChannelConfig, rng=None) -> ImageTensor:
    """Simulate printing/displaying ``x`` and photographing it again."""
    if not isinstance(x, ImageTensor):
        x = ImageTensor(x, UNIT)
    unit = x.to_unit()
    if cfg.is_identity:
        return ImageTensor(unit.data.copy(), UNIT)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    out = unit.data.astype(np.float32)
    if cfg.color_enabled:
        out = np.clip(_color(out, cfg), 0, 1)
    if cfg.blur_enabled and cfg.blur_sigma > 0:
        out = np.clip(_blur(out, cfg.blur_sigma), 0, 1)
    if cfg.halftone_enabled and cfg.halftone_amplitude > 0:
        if cfg.medium == "print":
            out = _ordered_dither(out, cfg.halftone_amplitude, cfg.halftone_period)
        else:
            out = _screen_grid(out, cfg.halftone_amplitude, cfg.halftone_period)
        out = np.clip(out, 0, 1)
    if cfg.warp_enabled and cfg.warp_range > 0:
        out = np.clip(_recapture_warp(out, cfg.warp_range, rng), 0, 1)
    if cfg.noise_enabled and cfg.noise_sigma > 0:
        out = np.clip(out + rng.normal(0.0, cfg.noise_sigma, out.shape).astype(np.float32), 0, 1)
    if cfg.jpeg_enabled:
        out = _jpeg(out, cfg.jpeg_quality)
    return ImageTensor(out, UNIT)


def apply_channel_batch(batch: torch.Tensor, cfg: ChannelConfig, rng: np.random.Generator) -> torch.Tensor:
    """Channel every image of a symmetric-range batch with its own rng stream."""
    streams = rng.spawn(batch.shape[0])
    out = [apply_channel(ImageTensor.from_torch(b), cfg, r).to_torch() for b, r in zip(batch, streams)]
    return torch.cat(out, dim=0)


def channel_degradation(model, attack_images, cfg: ChannelConfig, rng) -> tuple:
    """ASR (percent classified live) before and after the channel."""
    if isinstance(attack_images, torch.Tensor):
        batch = attack_images
    else:
        if len(attack_images) == 0:
            raise ValueError("no attack images")
        batch = torch.cat([im.to_torch() for im in attack_images])
    if batch.shape[0] == 0:
        raise ValueError("no attack images")
    recaptured = apply_channel_batch(batch, cfg, rng)
    with torch.no_grad():
        before = (model(batch).argmax(1) == LIVE_INDEX).double().mean().item() * 100
        after = (model(recaptured).argmax(1) == LIVE_INDEX).double().mean().item() * 100
    return before, after
