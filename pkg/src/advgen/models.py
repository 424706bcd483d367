"""Network architectures and the checkpointable ModelHandle.

Every network consumes (N, 3, H, W) tensors in [-1, 1]. Sizes are kept
small (well under 1M parameters) so the whole pipeline trains on a CPU.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
RESIDUAL_CAP = 0.3
EMBED_DIM = 64


class IntegrityError(RuntimeError):
    """A checkpoint or frozen model does not match what was expected."""


class UntrainedModelError(RuntimeError):
    pass


def _act():
    return nn.LeakyReLU(0.2)


class CDConv2d(nn.Conv2d):
    """Central difference convolution: vanilla conv minus ``theta`` times the
    response of the kernel's sum at the window center. Emphasizes local
    gradients, the texture cue that separates recaptured faces from live ones."""

    def __init__(self, *args, theta=0.7, **kwargs):
        super().__init__(*args, **kwargs)
        self.theta = theta

    def forward(self, x):
        out = super().forward(x)
        if self.theta == 0:
            return out
        kh, kw = self.kernel_size
        center = torch.zeros_like(self.weight)
        center[:, :, kh // 2, kw // 2] = self.weight.sum(dim=(2, 3))
        return out - self.theta * F.conv2d(x, center, None, self.stride, self.padding)


class PadNet(nn.Module):
    """Binary live/spoof classifier: strided conv blocks + global average pool.

    The first ``n_cdc`` blocks use central difference convolutions.
    """

    def __init__(self, widths=(16, 32, 32, 64), first_kernel=3, n_cdc=4, theta=0.7):
        super().__init__()
        layers, c_in = [], 3
        for i, c in enumerate(widths):
            k = first_kernel if i == 0 else 3
            conv = CDConv2d if i < n_cdc else nn.Conv2d
            kw = {"theta": theta} if i < n_cdc else {}
            layers += [conv(c_in, c, k, stride=2, padding=k // 2, **kw), _act()]
            c_in = c
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, 2)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


class Embedder(nn.Module):
    """Face embedding network; outputs unit-norm vectors."""

    def __init__(self, dim=EMBED_DIM, widths=(16, 32, 64, 64)):
        super().__init__()
        layers, c_in = [], 3
        for c in widths:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), _act(), nn.Conv2d(c, c, 3, padding=1), _act()]
            c_in = c
        self.features = nn.Sequential(*layers)
        self.proj = nn.Linear(c_in * 4, dim)

    def forward(self, x):
        f = F.adaptive_avg_pool2d(self.features(x), 2).flatten(1)
        return F.normalize(self.proj(f), dim=1, eps=1e-8)


class UNet(nn.Module):
    """Four-level encoder-decoder with skip connections.

    ``mode`` selects the output head:

    * ``translation``: full image, ``tanh(atanh(x) + h)``; zero-initialized
      ``h`` makes the network start as (nearly) the identity map, which
      avoids the color-inversion solutions cycle training otherwise finds.
    * ``perturbation``: additive residual ``cap * tanh(h)``; zero at init.
    * ``noise``: unbounded linear estimate (decomposer).
    """

    def __init__(self, mode="translation", widths=(16, 32, 64, 64), cap=RESIDUAL_CAP):
        super().__init__()
        if mode not in ("translation", "perturbation", "noise"):
            raise ValueError(f"unknown UNet mode {mode!r}")
        self.mode, self.cap = mode, cap
        self.stem = nn.Sequential(nn.Conv2d(3, widths[0], 3, padding=1), _act())
        self.down = nn.ModuleList()
        c_in = widths[0]
        for c in widths:
            self.down.append(nn.Sequential(
                nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.InstanceNorm2d(c, affine=True), _act()))
            c_in = c
        self.up = nn.ModuleList()
        skips = [widths[0]] + list(widths[:-1])
        for c_skip in reversed(skips):
            self.up.append(nn.Sequential(
                nn.Conv2d(c_in + c_skip, c_skip, 3, padding=1), nn.InstanceNorm2d(c_skip, affine=True), _act()))
            c_in = c_skip
        self.head = nn.Conv2d(c_in + 3, 3, 3, padding=1)
        if mode in ("translation", "perturbation"):
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        h = self.stem(x)
        skips = [h]
        for block in self.down:
            h = block(h)
            skips.append(h)
        skips.pop()
        for block in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1))
        h = self.head(torch.cat([h, x], dim=1))
        if self.mode == "translation":
            return torch.tanh(torch.atanh(x.clamp(-0.999, 0.999)) + h)
        if self.mode == "perturbation":
            return self.cap * torch.tanh(h)
        return h


class PatchDiscriminator(nn.Module):
    """PatchGAN: three stride-2 and two stride-1 4x4 convs (70 px receptive field).

    A 64x64 input yields a 6x6 map of raw patch scores. Hidden layers are
    central difference convolutions so the critic sees print/screen texture.
    """

    def __init__(self, widths=(16, 32, 64, 64), theta=0.7):
        super().__init__()
        c1, c2, c3, c4 = widths
        self.net = nn.Sequential(
            CDConv2d(3, c1, 4, 2, 1, theta=theta), _act(),
            CDConv2d(c1, c2, 4, 2, 1, theta=theta), _act(),
            CDConv2d(c2, c3, 4, 2, 1, theta=theta), _act(),
            CDConv2d(c3, c4, 4, 1, 1, theta=theta), _act(),
            nn.Conv2d(c4, 1, 4, 1, 1),
        )

    def forward(self, x):
        return self.net(x)

    @staticmethod
    def output_side(side: int) -> int:
        for _ in range(3):
            side = (side + 2 - 4) // 2 + 1
        for _ in range(2):
            side = side + 2 - 4 + 1
        return side


_BUILDERS = {
    "pad_cnn_small": lambda **kw: PadNet((16, 32, 32, 64), 3, n_cdc=4, theta=0.7),
    "pad_cnn_wide": lambda **kw: PadNet((32, 48, 64, 96), 5, n_cdc=1, theta=1.0),
    "embedder": lambda dim=EMBED_DIM, **kw: Embedder(dim),
    "generator_translation": lambda **kw: UNet("translation"),
    "generator_perturbation": lambda cap=RESIDUAL_CAP, **kw: UNet("perturbation", cap=cap),
    "patch_discriminator": lambda **kw: PatchDiscriminator(),
    "decomposer": lambda **kw: UNet("noise"),
}


@dataclass
class ModelHandle:
    """A network plus what is needed to rebuild, verify and reload it."""

    arch: str
    net: nn.Module
    kwargs: dict = field(default_factory=dict)
    image_size: int = 64
    meta: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.net(x)

    @property
    def trained(self) -> bool:
        return bool(self.meta.get("trained", False))

    def parameters(self):
        return self.net.parameters()

    def eval(self):
        self.net.eval()
        return self

    def freeze(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        return self

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "version": CHECKPOINT_VERSION,
                "arch": self.arch,
                "kwargs": self.kwargs,
                "image_size": self.image_size,
                "meta": self.meta,
                "state_dict": self.net.state_dict(),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path, arch: str | None = None) -> "ModelHandle":
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
        if blob.get("version") != CHECKPOINT_VERSION:
            raise IntegrityError(f"{path}: unsupported checkpoint version {blob.get('version')}")
        if arch is not None and blob["arch"] != arch:
            raise IntegrityError(f"{path}: architecture {blob['arch']!r}, expected {arch!r}")
        handle = build(blob["arch"], blob["image_size"], **blob["kwargs"])
        handle.net.load_state_dict(blob["state_dict"])
        handle.meta = blob["meta"]
        handle.net.eval()
        return handle


def build(arch: str, image_size: int = 64, **kwargs) -> ModelHandle:
    if arch not in _BUILDERS:
        raise ValueError(f"unknown architecture {arch!r}")
    if image_size < 32 or image_size % 16:
        raise ValueError(f"unsupported image size {image_size}; need a multiple of 16, >= 32")
    return ModelHandle(arch, _BUILDERS[arch](**kwargs), dict(kwargs), image_size, {"trained": False})


def build_pad(arch: str = "cnn_small", image_size: int = 64) -> ModelHandle:
    if arch not in ("cnn_small", "cnn_wide"):
        raise ValueError(f"unknown PAD architecture {arch!r}")
    return build(f"pad_{arch}", image_size)


def build_generator(kind: str, image_size: int = 64, cap: float = RESIDUAL_CAP) -> ModelHandle:
    if kind == "translation":
        return build("generator_translation", image_size)
    if kind == "perturbation":
        return build("generator_perturbation", image_size, cap=cap)
    raise ValueError(f"unknown generator kind {kind!r}")


def build_patch_discriminator(image_size: int = 64) -> ModelHandle:
    return build("patch_discriminator", image_size)


def build_embedder(image_size: int = 64, dim: int = EMBED_DIM) -> ModelHandle:
    return build("embedder", image_size, dim=dim)


def build_decomposer(image_size: int = 64) -> ModelHandle:
    return build("decomposer", image_size)


def phy_noise(decomposer: ModelHandle, x: torch.Tensor) -> torch.Tensor:
    """Physical-noise estimate of ``x`` from a trained decomposer (differentiable)."""
    if not decomposer.trained:
        raise UntrainedModelError("decomposer has not been trained")
    return decomposer(x)


def decompose(decomposer: ModelHandle, x: torch.Tensor):
    """Split ``x`` into (noise estimate, live estimate); they sum to ``x`` exactly."""
    noise = phy_noise(decomposer, x)
    return noise, x - noise


def cosine(embedder, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample cosine similarity of the embeddings of ``a`` and ``b``."""
    return (embedder(a) * embedder(b)).sum(dim=1)
